#include "doctest.h"

#include "toy.hpp"
#include "wadn/network.hpp"

#include <random>

using namespace wadn;
using namespace toy;

namespace {

double max_abs_diff(const Mlp& a, const Mlp& b) {
  double m = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    m = std::max(m, (a.layers[l].weight - b.layers[l].weight).cwiseAbs().maxCoeff());
    m = std::max(m, (a.layers[l].bias - b.layers[l].bias).cwiseAbs().maxCoeff());
  }
  return m;
}

bool identical(const Mlp& a, const Mlp& b) { return max_abs_diff(a, b) == 0.0; }

}  // namespace

TEST_CASE("zero network ties to class 0") {
  const std::vector<int> gw{2, 5, 3}, hw{3, 4};
  Mlp g(gw, 1), h(hw, 2);
  g.set_zero();
  h.set_zero();
  std::mt19937_64 rng(1);
  const auto out = forward(g, h, gaussian(rng, 10, 2));
  CHECK(out.scores.cwiseAbs().maxCoeff() == 0.0);
  for (int p : out.predictions) CHECK(p == 0);
}

TEST_CASE("identity features with a nearest-mean head") {
  // h(z)_y = mu_y . z - |mu_y|^2 / 2 is the Bayes rule for shared isotropic noise.
  Mlp g;
  g.layers.push_back({Matrix::Identity(2, 2), Vector::Zero(2)});
  Mlp h;
  Matrix means(2, 2);
  means << -2, 0, 2, 0;
  h.layers.push_back({means, -0.5 * means.rowwise().squaredNorm()});
  std::mt19937_64 rng(2);
  Matrix x = gaussian(rng, 2000, 2);
  const Labels y = alternating(2000, 2);
  for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) += means.row(y[static_cast<std::size_t>(i)]);
  const auto out = forward(g, h, x);
  int correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) correct += out.predictions[i] == y[i];
  CHECK(correct / 2000.0 > 0.95);
}

TEST_CASE("forward has no batch coupling") {
  const std::vector<int> gw{3, 7, 4}, hw{4, 3};
  const Mlp g(gw, 3), h(hw, 4);
  std::mt19937_64 rng(3);
  const Matrix x = gaussian(rng, 9, 3);
  const auto all = forward(g, h, x);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto one = forward(g, h, x.row(i));
    // Single-row and blocked matrix products may round differently.
    CHECK((one.scores.row(0) - all.scores.row(i)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(one.predictions[0] == all.predictions[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("weighted_classification_loss") {
  Matrix scores(2, 2);
  scores << 1.0, -0.5, 0.3, 2.0;
  const Labels y{0, 1};
  const auto ce = [&](int i) {
    const double lse = std::log(std::exp(scores(i, 0)) + std::exp(scores(i, 1)));
    return lse - scores(i, y[static_cast<std::size_t>(i)]);
  };
  CHECK(weighted_classification_loss(scores, y, LabelRatio::ones(2)) == doctest::Approx((ce(0) + ce(1)) / 2));
  const Labels ones{1, 1};
  CHECK(weighted_classification_loss(scores, ones, LabelRatio{{2.0, 0.0}}) == 0.0);
  CHECK(weighted_classification_loss(scores, y, LabelRatio{{2.0, 0.5}}) ==
        doctest::Approx((2 * ce(0) + 0.5 * ce(1)) / 2));
}

TEST_CASE("explicit_conditional_loss") {
  CentroidSet a = CentroidSet::empty(1, 2), b = CentroidSet::empty(1, 2);
  a.present = {true};
  b.present = {true};
  b.centroids.row(0) << 3, 4;
  CHECK(explicit_conditional_loss(a, a, ClassPrior({1.0})) == 0.0);
  CHECK(explicit_conditional_loss(a, b, ClassPrior({1.0})) == doctest::Approx(5.0));

  // Same formula as the surrogate conditional distance.
  std::mt19937_64 rng(4);
  const Matrix s = gaussian(rng, 40, 2), t = gaussian(rng, 40, 2, 2.0);
  const Labels y = alternating(40, 2);
  const ClassPrior prior({0.3, 0.7});
  CHECK(explicit_conditional_loss(class_centroids(s, y, 2), class_centroids(t, y, 2), prior) ==
        doctest::Approx(conditional_w1(s, y, t, y, prior, ConditionalMode::surrogate)).epsilon(1e-12));

  // A class missing on one side is skipped and the prior renormalized.
  CentroidSet c = CentroidSet::empty(2, 2), d = CentroidSet::empty(2, 2);
  c.present = {true, true};
  d.present = {true, false};
  d.centroids.row(0) << 0, 2;
  std::vector<std::string> warnings;
  const auto prev = log::set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
  CHECK(explicit_conditional_loss(c, d, ClassPrior({0.5, 0.5})) == doctest::Approx(2.0));
  log::set_warning_sink(prev);
  CHECK_FALSE(warnings.empty());
  d.present = {false, false};
  CHECK_THROWS_AS(explicit_conditional_loss(c, d, ClassPrior({0.5, 0.5})), InvalidArgument);
}

TEST_CASE("loss breakdown total") {
  Toy toy = make_toy(11);
  const auto r = evaluate_step(toy.state, toy.batch, toy.inputs(), toy.config);
  const auto& l = r.loss;
  CHECK(std::abs(l.total - (l.classification + toy.config.c0 * (l.epsilon * l.explicit_cond + (1 - l.epsilon) * l.implicit_cond) +
                            toy.config.penalty_coeff * l.grad_penalty)) < 1e-9);
}

TEST_CASE("gradient check on a quadratic") {
  // f(w) = |A w - b|^2 / 2 is exact under central differences.
  std::mt19937_64 rng(5);
  const Matrix A = gaussian(rng, 5, 4);
  const Vector b = gaussian(rng, 5, 1);
  std::vector<double> w{0.3, -1.0, 0.7, 2.0}, g(4);
  const ParamBlocks params{std::span<double>(w)}, grads{std::span<double>(g)};
  const auto entry = check_gradient("quadratic", params, grads, [&](bool with_grad) {
    const Vector x = Eigen::Map<const Vector>(w.data(), 4);
    const Vector res = A * x - b;
    if (with_grad) Eigen::Map<Vector>(g.data(), 4) = A.transpose() * res;
    return 0.5 * res.squaredNorm();
  });
  CHECK(entry.max_relative_error < 1e-9);
  CHECK(entry.parameters == 4);
}

TEST_CASE("full loss gradients match central differences") {
  for (std::uint64_t seed : {1, 2, 3}) {
    Toy toy = make_toy(seed);
    const auto report = gradient_check(toy.state, toy.batch, toy.inputs(), toy.config);
    for (const auto& e : report.entries) {
      INFO(e.term);
      CHECK(e.finite);
      CHECK(e.max_relative_error <= 1e-4);
    }
    CHECK(report.passed());
  }
}

TEST_CASE("zero inputs give finite gradients") {
  Toy toy = make_toy(4);
  for (auto& s : toy.batch.sources) s.x.setZero();
  toy.batch.target.x.setZero();
  const auto r = evaluate_step(toy.state, toy.batch, toy.inputs(), toy.config);
  CHECK(std::isfinite(r.loss.total));
  Gradients g = r.grads;
  ParamBlocks blocks;
  append_blocks(g.feature, blocks);
  append_blocks(g.classifier, blocks);
  for (auto& c : g.critics) append_blocks(c, blocks);
  for (const auto& b : blocks)
    for (double v : b) CHECK(std::isfinite(v));
}

TEST_CASE("gradient reversal flips the critic's latent gradient") {
  Toy toy = make_toy(6);
  const auto r = evaluate_step(toy.state, toy.batch, toy.inputs(), toy.config, TermMask::only_implicit());
  CHECK(r.implicit_latent_grad_critic.cwiseAbs().maxCoeff() > 0.0);
  CHECK((r.implicit_latent_grad_model + r.implicit_latent_grad_critic).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("c0 = 0 leaves critics untouched") {
  Toy toy = make_toy(7);
  toy.config.c0 = 0.0;
  ModelState s = toy.state;
  for (int i = 0; i < 3; ++i) training_step(s, toy.batch, toy.inputs(i), toy.config);
  for (std::size_t t = 0; t < s.critics.size(); ++t) CHECK(identical(s.critics[t], toy.state.critics[t]));
  CHECK_FALSE(identical(s.feature, toy.state.feature));
}

TEST_CASE("a source with zero weight does not move g or h") {
  Toy toy = make_toy(8);
  toy.lambda = TaskWeights::one_hot(2, 0);
  const auto base = evaluate_step(toy.state, toy.batch, toy.inputs(), toy.config);
  StepBatch other = toy.batch;
  std::mt19937_64 rng(9);
  other.sources[1].x = gaussian(rng, 6, 3, 3.0);
  const auto moved = evaluate_step(toy.state, other, toy.inputs(), toy.config);
  CHECK(max_abs_diff(base.grads.feature, moved.grads.feature) < 1e-14);
  CHECK(max_abs_diff(base.grads.classifier, moved.grads.classifier) < 1e-14);
}

TEST_CASE("centroids move by the 0.7 / 0.3 average") {
  Toy toy = make_toy(10);
  const Matrix z_src = forward(toy.state.feature, toy.state.classifier, toy.batch.sources[0].x).latents;
  const auto batch_c = class_centroids(z_src, toy.batch.sources[0].y, 2);
  const Matrix old = toy.state.source_centroids[0].centroids;
  ModelState s = toy.state;
  const auto r = training_step(s, toy.batch, toy.inputs(), toy.config);
  for (int y = 0; y < 2; ++y) {
    const Vector expect = (0.7 * old.row(y) + 0.3 * batch_c.centroids.row(y)).transpose();
    CHECK((s.source_centroids[0].centroids.row(y).transpose() - expect).cwiseAbs().maxCoeff() < 1e-14);
  }
  CHECK(r.source_centroids[0].centroids == s.source_centroids[0].centroids);
}

TEST_CASE("a class absent from the target batch keeps its centroid") {
  Toy toy = make_toy(12);
  StepInputs in = toy.inputs();
  in.use_target_labels = true;
  toy.batch.target.y.assign(toy.batch.target.y.size(), 0);
  const auto r = evaluate_step(toy.state, toy.batch, in, toy.config);
  CHECK(r.target_centroids.centroids.row(1) == toy.state.target_centroids.centroids.row(1));
  CHECK(r.target_centroids.centroids.row(0) != toy.state.target_centroids.centroids.row(0));
}

TEST_CASE("exact ratios cancel a constant critic") {
  Toy toy = make_toy(13);
  // Source batches with 4 of class 0 and 2 of class 1; target prior (0.5, 0.5).
  for (auto& s : toy.batch.sources) s.y = {0, 0, 0, 0, 1, 1};
  toy.alphas = {LabelRatio{{0.75, 1.5}}, LabelRatio{{0.75, 1.5}}};
  for (auto& c : toy.state.critics) {
    c.layers.back().weight.setZero();
    c.layers.back().bias.setConstant(2.5);
  }
  const auto r = evaluate_step(toy.state, toy.batch, toy.inputs(), toy.config);
  CHECK(std::abs(r.loss.implicit_cond) < 1e-12);
}

TEST_CASE("training is bitwise deterministic") {
  Toy a = make_toy(14), b = make_toy(14);
  for (int i = 0; i < 5; ++i) {
    training_step(a.state, a.batch, a.inputs(i), a.config);
    training_step(b.state, b.batch, b.inputs(i), b.config);
  }
  CHECK(identical(a.state.feature, b.state.feature));
  CHECK(identical(a.state.classifier, b.state.classifier));
  for (std::size_t t = 0; t < 2; ++t) CHECK(identical(a.state.critics[t], b.state.critics[t]));
}

TEST_CASE("a non-finite loss throws and leaves the state alone") {
  Toy toy = make_toy(15);
  ModelState s = toy.state;
  toy.batch.target.x(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(training_step(s, toy.batch, toy.inputs(), toy.config), NumericalError);
  CHECK(identical(s.feature, toy.state.feature));
}

TEST_CASE("critic penalty gradient matches finite differences") {
  const std::vector<int> w{3, 6, 1};
  Mlp critic(w, 16);
  std::mt19937_64 rng(16);
  const Matrix pts = gaussian(rng, 7, 3);
  for (PenaltyForm form : {PenaltyForm::squared, PenaltyForm::two_sided, PenaltyForm::one_sided}) {
    Mlp grad = critic.zeros_like();
    ParamBlocks params, grads;
    append_blocks(critic, params);
    append_blocks(grad, grads);
    std::uint64_t pattern = 0;
    const auto e = check_gradient(
        "penalty", params, grads,
        [&](bool with_grad) {
          pattern = 0;
          if (!with_grad) return critic.gradient_penalty(pts, form, nullptr, 1.0, &pattern);
          grad.set_zero();
          return critic.gradient_penalty(pts, form, &grad, 1.0, &pattern);
        },
        1e-5, [&] { return pattern; });
    CHECK(e.max_relative_error <= 1e-4);
  }
  // The MlpCritic adapter agrees with the batch input gradient.
  const MlpCritic view(critic);
  const Matrix ig = critic.input_gradient(pts);
  CHECK((view.gradient(pts.row(2).transpose()) - ig.row(2).transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("optimizers") {
  std::vector<double> p{1.0, -2.0}, g{0.5, 0.25};
  const ParamBlocks params{std::span<double>(p)}, grads{std::span<double>(g)};
  OptimizerConfig sgd;
  sgd.learning_rate = 0.1;
  sgd.momentum = 0.9;
  Optimizer opt(sgd);
  opt.step(params, grads);
  CHECK(p[0] == doctest::Approx(1.0 - 0.05));
  opt.step(params, grads);  // v = 0.9 * 0.5 + 0.5
  CHECK(p[0] == doctest::Approx(0.95 - 0.1 * 0.95));

  CHECK(OptimizerConfig::preset("adadelta-0.5").learning_rate == 0.5);
  CHECK(OptimizerConfig::preset("adadelta-1.0").kind == OptimizerKind::adadelta);
  CHECK_THROWS_AS(OptimizerConfig::preset("adam"), InvalidArgument);
  std::vector<double> q{1.0};
  std::vector<double> gq{1.0};
  Optimizer ada(OptimizerConfig::preset("adadelta-1.0"));
  ada.step({std::span<double>(q)}, {std::span<double>(gq)});
  // First Adadelta step: sqrt(eps) / sqrt((1 - rho) g^2 + eps) * g.
  const double expect = std::sqrt(1e-6) / std::sqrt(0.1 + 1e-6);
  CHECK(q[0] == doctest::Approx(1.0 - expect));
}

TEST_CASE("architecture presets") {
  const auto desk = Architecture::preset("desk");
  CHECK(desk.feature_hidden == std::vector<int>{64});
  CHECK(desk.latent_dim == 16);
  CHECK(desk.critic_hidden == std::vector<int>{64});
  CHECK(desk.classifier_hidden.empty());
  CHECK_NOTHROW(Architecture::preset("amazon"));
  CHECK_NOTHROW(Architecture::preset("digits_head"));
  CHECK_THROWS_AS(Architecture::preset("resnet"), InvalidArgument);
  const auto s = ModelState::create(5, 3, 2, desk, OptimizerConfig{}, 1);
  CHECK(s.latent_dim() == 16);
  CHECK(s.classifier.output_dim() == 3);
  CHECK(s.critics.size() == 2);
  CHECK(s.finite());
}
