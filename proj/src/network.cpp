#include "wadn/network.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <random>

namespace wadn {

namespace {

Matrix relu_mask(const Matrix& pre) { return (pre.array() > 0.0).cast<double>().matrix(); }

void mix(std::uint64_t& h, std::uint64_t v) { h = derive_seed(h ^ v, 0x9e37); }

// Folds the ReLU on/off pattern of every hidden layer into h.
void mix_pattern(const Mlp::Cache& cache, std::uint64_t& h) {
  for (std::size_t k = 0; k + 1 < cache.pre.size(); ++k) {
    const Matrix& pre = cache.pre[k];
    std::uint64_t word = 0;
    int bits = 0;
    for (Eigen::Index i = 0; i < pre.size(); ++i) {
      word = (word << 1) | (pre.data()[i] > 0.0 ? 1u : 0u);
      if (++bits == 64) {
        mix(h, word);
        word = 0;
        bits = 0;
      }
    }
    mix(h, word ^ static_cast<std::uint64_t>(bits));
  }
}

// dP/du for P = penalty(||u||).
Vector penalty_direction(const Vector& u, PenaltyForm form) {
  const double norm = u.norm();
  switch (form) {
    case PenaltyForm::squared:
      return 2.0 * u;
    case PenaltyForm::two_sided:
      if (norm == 0.0) return Vector::Zero(u.size());
      return 2.0 * (norm - 1.0) / norm * u;
    case PenaltyForm::one_sided:
      if (norm <= 1.0) return Vector::Zero(u.size());
      return 2.0 * (norm - 1.0) / norm * u;
  }
  return Vector::Zero(u.size());
}

void append_const(const Mlp& net, std::vector<std::span<const double>>& out) {
  for (const auto& layer : net.layers) {
    out.emplace_back(layer.weight.data(), static_cast<std::size_t>(layer.weight.size()));
    out.emplace_back(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
  }
}

Matrix stack_rows(std::span<const Matrix* const> parts, Eigen::Index cols) {
  Eigen::Index rows = 0;
  for (const Matrix* p : parts) rows += p->rows();
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Matrix* p : parts) {
    out.middleRows(at, p->rows()) = *p;
    at += p->rows();
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(std::span<const int> widths, std::uint64_t seed) {
  if (widths.size() < 2) throw InvalidArgument("Mlp needs at least input and output widths");
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const int in = widths[l];
    const int out = widths[l + 1];
    if (in < 1 || out < 1) throw InvalidArgument("Mlp widths must be positive");
    std::normal_distribution<double> init(0.0, std::sqrt(2.0 / static_cast<double>(in)));
    DenseLayer layer{Matrix(out, in), Vector::Zero(out)};
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = init(rng);
    layers.push_back(std::move(layer));
  }
}

int Mlp::input_dim() const { return static_cast<int>(layers.front().weight.cols()); }
int Mlp::output_dim() const { return static_cast<int>(layers.back().weight.rows()); }

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

Matrix Mlp::forward(const Matrix& x, Cache* cache) const {
  if (x.cols() != input_dim()) {
    throw InvalidArgument(fmt::format("Mlp: input has {} columns, expected {}", x.cols(), input_dim()));
  }
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Matrix pre = h * layers[l].weight.transpose();
    pre.rowwise() += layers[l].bias.transpose();
    if (cache) {
      cache->inputs.push_back(h);
      cache->pre.push_back(pre);
    }
    h = l + 1 < layers.size() ? Matrix(pre.cwiseMax(0.0)) : pre;
  }
  return h;
}

Matrix Mlp::backward(const Cache& cache, const Matrix& grad_output, Mlp& grad) const {
  Matrix d = grad_output;
  for (std::size_t k = layers.size(); k-- > 0;) {
    if (k + 1 < layers.size()) d = d.cwiseProduct(relu_mask(cache.pre[k]));
    grad.layers[k].weight.noalias() += d.transpose() * cache.inputs[k];
    grad.layers[k].bias += d.colwise().sum().transpose();
    d = d * layers[k].weight;
  }
  return d;
}

Matrix Mlp::input_gradient(const Matrix& x) const {
  if (output_dim() != 1) throw InvalidArgument("input_gradient needs a scalar-output network");
  Cache cache;
  forward(x, &cache);
  Matrix d = Matrix::Ones(x.rows(), 1);
  for (std::size_t k = layers.size(); k-- > 0;) {
    if (k + 1 < layers.size()) d = d.cwiseProduct(relu_mask(cache.pre[k]));
    d = d * layers[k].weight;
  }
  return d;
}

double Mlp::gradient_penalty(const Matrix& points, PenaltyForm form, Mlp* grad, double scale,
                             std::uint64_t* pattern) const {
  if (output_dim() != 1) throw InvalidArgument("gradient_penalty needs a scalar-output network");
  if (points.rows() == 0) throw InvalidArgument("gradient_penalty: no points");
  Cache cache;
  forward(points, &cache);
  if (pattern) mix_pattern(cache, *pattern);
  const std::size_t depth = layers.size();
  const auto batch = points.rows();

  // Backward chain of d out / d x: g[k] is d out / d(pre-activation of layer k),
  // a[k] = g[k] W_k is d out / d(input of layer k), and g[k-1] = a[k] * mask[k-1].
  std::vector<Matrix> g(depth), a(depth), masks(depth);
  g[depth - 1] = Matrix::Ones(batch, 1);
  for (std::size_t k = depth; k-- > 0;) {
    a[k] = g[k] * layers[k].weight;
    if (k > 0) {
      masks[k - 1] = relu_mask(cache.pre[k - 1]);
      g[k - 1] = a[k].cwiseProduct(masks[k - 1]);
    }
  }

  const double inv = 1.0 / static_cast<double>(batch);
  double total = 0.0;
  Matrix a_bar(batch, a[0].cols());
  for (Eigen::Index i = 0; i < batch; ++i) {
    const Vector u = a[0].row(i).transpose();
    total += penalty_of_norm(u.norm(), form);
    a_bar.row(i) = (scale * inv) * penalty_direction(u, form).transpose();
  }
  if (grad) {
    for (std::size_t k = 0; k < depth; ++k) {
      grad->layers[k].weight.noalias() += g[k].transpose() * a_bar;
      if (k + 1 < depth) {
        const Matrix g_bar = a_bar * layers[k].weight.transpose();
        a_bar = g_bar.cwiseProduct(masks[k]);
      }
    }
  }
  return total * inv;
}

Mlp Mlp::zeros_like() const {
  Mlp z = *this;
  z.set_zero();
  return z;
}

void Mlp::set_zero() {
  for (auto& l : layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

double MlpCritic::value(const Vector& z) const {
  return net_.forward(Matrix(z.transpose()))(0, 0);
}

Vector MlpCritic::gradient(const Vector& z) const {
  return net_.input_gradient(Matrix(z.transpose())).row(0).transpose();
}

void append_blocks(Mlp& net, ParamBlocks& blocks) {
  for (auto& layer : net.layers) {
    blocks.emplace_back(layer.weight.data(), static_cast<std::size_t>(layer.weight.size()));
    blocks.emplace_back(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
  }
}

// ---------------------------------------------------------------------------
// Presets and optimizers

Architecture Architecture::preset(const std::string& name) {
  Architecture a;
  if (name == "desk") return a;
  if (name == "amazon") {
    a.feature_hidden = {};
    a.latent_dim = 1000;
    a.classifier_hidden = {500, 100};
    a.critic_hidden = {500, 100};
    return a;
  }
  if (name == "digits_head") {
    a.feature_hidden = {256};
    a.latent_dim = 128;
    a.classifier_hidden = {512, 100};
    a.critic_hidden = {256};
    return a;
  }
  throw InvalidArgument(fmt::format("unknown architecture preset '{}'", name));
}

OptimizerConfig OptimizerConfig::preset(const std::string& name) {
  OptimizerConfig c;
  if (name == "sgd") return c;
  if (name == "adadelta-0.5" || name == "adadelta-1.0") {
    c.kind = OptimizerKind::adadelta;
    c.learning_rate = name == "adadelta-0.5" ? 0.5 : 1.0;
    return c;
  }
  throw InvalidArgument(fmt::format("unknown optimizer preset '{}'", name));
}

void Optimizer::step(const ParamBlocks& params, const ParamBlocks& grads) {
  if (params.size() != grads.size()) throw InvalidArgument("optimizer: block count mismatch");
  const std::size_t per_block = config_.kind == OptimizerKind::adadelta ? 2 : 1;
  if (slots_.empty()) {
    for (std::size_t b = 0; b < params.size(); ++b) {
      for (std::size_t s = 0; s < per_block; ++s) slots_.emplace_back(params[b].size(), 0.0);
    }
  }
  if (slots_.size() != params.size() * per_block) {
    throw InvalidArgument("optimizer: slot layout does not match parameters");
  }
  const double lr = config_.learning_rate;
  for (std::size_t b = 0; b < params.size(); ++b) {
    std::span<double> p = params[b];
    std::span<const double> g = grads[b];
    if (config_.kind == OptimizerKind::sgd_momentum) {
      std::vector<double>& v = slots_[b];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = config_.momentum * v[i] + g[i];
        p[i] -= lr * v[i];
      }
    } else {
      std::vector<double>& sq_grad = slots_[2 * b];
      std::vector<double>& sq_delta = slots_[2 * b + 1];
      const double rho = config_.rho;
      const double eps = config_.epsilon;
      for (std::size_t i = 0; i < p.size(); ++i) {
        sq_grad[i] = rho * sq_grad[i] + (1.0 - rho) * g[i] * g[i];
        const double delta = std::sqrt(sq_delta[i] + eps) / std::sqrt(sq_grad[i] + eps) * g[i];
        sq_delta[i] = rho * sq_delta[i] + (1.0 - rho) * delta * delta;
        p[i] -= lr * delta;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Model state

ModelState ModelState::create(int input_dim, int class_count, std::size_t source_count,
                              const Architecture& arch, const OptimizerConfig& opt,
                              std::uint64_t seed) {
  if (source_count == 0) throw InvalidArgument("model needs at least one source");
  if (class_count < 2) throw InvalidArgument("model needs at least two classes");
  ModelState s;
  s.class_count = class_count;
  std::vector<int> fw{input_dim};
  fw.insert(fw.end(), arch.feature_hidden.begin(), arch.feature_hidden.end());
  fw.push_back(arch.latent_dim);
  s.feature = Mlp(fw, derive_seed(seed, 101));
  std::vector<int> hw{arch.latent_dim};
  hw.insert(hw.end(), arch.classifier_hidden.begin(), arch.classifier_hidden.end());
  hw.push_back(class_count);
  s.classifier = Mlp(hw, derive_seed(seed, 102));
  std::vector<int> cw{arch.latent_dim};
  cw.insert(cw.end(), arch.critic_hidden.begin(), arch.critic_hidden.end());
  cw.push_back(1);
  for (std::size_t t = 0; t < source_count; ++t) {
    s.critics.emplace_back(cw, derive_seed(seed, 200 + t));
    s.source_centroids.push_back(CentroidSet::empty(class_count, arch.latent_dim));
  }
  s.target_centroids = CentroidSet::empty(class_count, arch.latent_dim);
  s.model_optimizer = Optimizer(opt);
  s.critic_optimizer = Optimizer(opt);
  return s;
}

bool ModelState::finite() const {
  std::vector<std::span<const double>> blocks;
  append_const(feature, blocks);
  append_const(classifier, blocks);
  for (const auto& c : critics) append_const(c, blocks);
  for (auto b : blocks) {
    for (double v : b) {
      if (!std::isfinite(v)) return false;
    }
  }
  for (const auto& c : source_centroids) {
    if (!c.centroids.allFinite()) return false;
  }
  return target_centroids.centroids.allFinite();
}

// ---------------------------------------------------------------------------
// Losses

Labels argmax_rows(const Matrix& scores) {
  Labels out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < scores.cols(); ++k) {
      if (scores(i, k) > scores(i, best)) best = k;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

ForwardResult forward(const Mlp& feature, const Mlp& classifier, const Matrix& x) {
  ForwardResult r;
  r.latents = feature.forward(x);
  r.scores = classifier.forward(r.latents);
  r.predictions = argmax_rows(r.scores);
  return r;
}

namespace {

// Cross entropy of one row and the softmax probabilities.
double cross_entropy_row(const Matrix& scores, Eigen::Index i, int label, Vector* probs) {
  const double top = scores.row(i).maxCoeff();
  Vector e = (scores.row(i).array() - top).exp().matrix().transpose();
  const double z = e.sum();
  if (probs) *probs = e / z;
  return std::log(z) + top - scores(i, label);
}

}  // namespace

double weighted_classification_loss(const Matrix& scores, std::span<const int> labels,
                                    const LabelRatio& alpha) {
  if (static_cast<std::size_t>(scores.rows()) != labels.size() || labels.empty()) {
    throw InvalidArgument("weighted_classification_loss: scores and labels differ in length");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double w = alpha.values.at(static_cast<std::size_t>(labels[i]));
    if (w == 0.0) continue;
    total += w * cross_entropy_row(scores, static_cast<Eigen::Index>(i), labels[i], nullptr);
  }
  return total / static_cast<double>(labels.size());
}

double explicit_conditional_loss(const CentroidSet& source, const CentroidSet& target,
                                 const ClassPrior& tgt_prior) {
  const int k = source.class_count();
  if (target.class_count() != k || static_cast<int>(tgt_prior.size()) != k) {
    throw InvalidArgument("explicit_conditional_loss: class counts differ");
  }
  double mass = 0.0;
  double value = 0.0;
  for (int y = 0; y < k; ++y) {
    const double p = tgt_prior[static_cast<std::size_t>(y)];
    if (p <= 0.0) continue;
    if (!source.present[static_cast<std::size_t>(y)] || !target.present[static_cast<std::size_t>(y)]) {
      log::warn(fmt::format("explicit conditional loss: class {} missing a centroid; skipped", y));
      continue;
    }
    mass += p;
    value += p * gaussian_w2_surrogate(source.centroids.row(y).transpose(),
                                       target.centroids.row(y).transpose());
  }
  if (mass == 0.0) throw InvalidArgument("explicit conditional loss: no overlapping classes");
  return value / mass;
}

StepResult evaluate_step(const ModelState& state, const StepBatch& batch, const StepInputs& inputs,
                         const LossConfig& config, TermMask mask) {
  const std::size_t t_count = state.source_count();
  const int k = state.class_count;
  if (batch.sources.size() != t_count || inputs.alphas.size() != t_count || !inputs.lambda ||
      inputs.lambda->size() != t_count || !inputs.target_prior) {
    throw InvalidArgument("evaluate_step: batch, ratios and weights must cover every source");
  }
  if (batch.target.x.rows() == 0) throw InvalidArgument("evaluate_step: empty target batch");
  for (const auto& s : batch.sources) {
    if (s.x.rows() == 0 || static_cast<std::size_t>(s.x.rows()) != s.y.size()) {
      throw InvalidArgument("evaluate_step: malformed source batch");
    }
  }
  if (inputs.use_target_labels && batch.target.y.size() != static_cast<std::size_t>(batch.target.x.rows())) {
    throw InvalidArgument("evaluate_step: target labels requested but missing");
  }
  const TaskWeights& lambda = *inputs.lambda;
  const ClassPrior& prior = *inputs.target_prior;
  const double c0 = config.c0;
  const double eps = config.epsilon;

  StepResult r;
  r.loss.epsilon = eps;
  r.grads.feature = state.feature.zeros_like();
  r.grads.classifier = state.classifier.zeros_like();
  for (const auto& c : state.critics) r.grads.critics.push_back(c.zeros_like());

  // g on every domain at once: sources in order, then the target.
  std::vector<const Matrix*> parts;
  std::vector<Eigen::Index> offset;
  Eigen::Index at = 0;
  for (const auto& s : batch.sources) {
    parts.push_back(&s.x);
    offset.push_back(at);
    at += s.x.rows();
  }
  parts.push_back(&batch.target.x);
  const Eigen::Index target_offset = at;
  const Eigen::Index nt = batch.target.x.rows();
  const Matrix x_all = stack_rows(parts, batch.target.x.cols());

  Mlp::Cache g_cache, h_cache;
  const Matrix z = state.feature.forward(x_all, &g_cache);
  const Matrix scores = state.classifier.forward(z, &h_cache);
  Matrix dz = Matrix::Zero(z.rows(), z.cols());
  Matrix dscores = Matrix::Zero(scores.rows(), scores.cols());
  const auto z_target = z.middleRows(target_offset, nt);
  std::uint64_t& signature = r.activation_signature;
  mix_pattern(g_cache, signature);
  mix_pattern(h_cache, signature);

  // Classification.
  r.source_weighted_risk.assign(t_count, 0.0);
  Vector probs;
  for (std::size_t t = 0; t < t_count; ++t) {
    const auto& src = batch.sources[t];
    const double inv_n = 1.0 / static_cast<double>(src.x.rows());
    Labels preds(src.y.size());
    for (std::size_t i = 0; i < src.y.size(); ++i) {
      const Eigen::Index row = offset[t] + static_cast<Eigen::Index>(i);
      const int y = src.y[i];
      const double w = inputs.alphas[t].values.at(static_cast<std::size_t>(y)) * inv_n;
      const double ce = cross_entropy_row(scores, row, y, &probs);
      r.source_weighted_risk[t] += w * ce;
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < scores.cols(); ++c) {
        if (scores(row, c) > scores(row, best)) best = c;
      }
      preds[i] = static_cast<int>(best);
      if (mask.classification && w != 0.0) {
        probs[y] -= 1.0;
        dscores.row(row) = (lambda[t] * w) * probs.transpose();
      }
    }
    r.loss.classification += lambda[t] * r.source_weighted_risk[t];
    r.source_predictions.push_back(std::move(preds));
  }
  r.target_predictions = argmax_rows(scores.middleRows(target_offset, nt));
  for (int p : r.target_predictions) mix(signature, static_cast<std::uint64_t>(p));

  // Explicit conditional term through moving-average centroids.
  const Labels& target_assign = inputs.use_target_labels ? batch.target.y : r.target_predictions;
  const double keep = config.centroid_keep;
  struct ClassRows {
    std::vector<std::vector<Eigen::Index>> rows;
  };
  const auto group = [&](std::span<const int> labels, Eigen::Index base) {
    ClassRows g;
    g.rows.resize(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      g.rows[static_cast<std::size_t>(labels[i])].push_back(base + static_cast<Eigen::Index>(i));
    }
    return g;
  };
  // Returns the updated set and, per class, the factor by which the batch mean enters it.
  const auto update = [&](const CentroidSet& old, const ClassRows& g, std::vector<double>& factor) {
    CentroidSet next = old;
    factor.assign(static_cast<std::size_t>(k), 0.0);
    for (int y = 0; y < k; ++y) {
      const auto& rows = g.rows[static_cast<std::size_t>(y)];
      if (rows.empty()) continue;
      Vector mean = Vector::Zero(z.cols());
      for (Eigen::Index row : rows) mean += z.row(row).transpose();
      mean /= static_cast<double>(rows.size());
      if (old.present[static_cast<std::size_t>(y)]) {
        next.centroids.row(y) = keep * old.centroids.row(y) + (1.0 - keep) * mean.transpose();
        factor[static_cast<std::size_t>(y)] = 1.0 - keep;
      } else {
        next.centroids.row(y) = mean.transpose();
        next.present[static_cast<std::size_t>(y)] = true;
        factor[static_cast<std::size_t>(y)] = 1.0;
      }
    }
    return next;
  };

  const ClassRows target_rows = group(target_assign, target_offset);
  std::vector<double> target_factor;
  r.target_centroids = update(state.target_centroids, target_rows, target_factor);
  r.source_explicit.assign(t_count, 0.0);
  for (std::size_t t = 0; t < t_count; ++t) {
    const ClassRows rows = group(batch.sources[t].y, offset[t]);
    std::vector<double> factor;
    r.source_centroids.push_back(update(state.source_centroids[t], rows, factor));
    const CentroidSet& cs = r.source_centroids.back();
    const CentroidSet& ct = r.target_centroids;

    double mass = 0.0;
    for (int y = 0; y < k; ++y) {
      if (prior[static_cast<std::size_t>(y)] > 0.0 && cs.present[static_cast<std::size_t>(y)] &&
          ct.present[static_cast<std::size_t>(y)]) {
        mass += prior[static_cast<std::size_t>(y)];
      }
    }
    if (mass == 0.0) continue;
    for (int y = 0; y < k; ++y) {
      const auto uy = static_cast<std::size_t>(y);
      if (!(prior[uy] > 0.0 && cs.present[uy] && ct.present[uy])) continue;
      const double w = prior[uy] / mass;
      const Vector diff = (cs.centroids.row(y) - ct.centroids.row(y)).transpose();
      const double dist = diff.norm();
      r.source_explicit[t] += w * dist;
      if (!mask.explicit_cond || dist < 1e-12) continue;
      const Vector unit = diff / dist;
      const double coeff = c0 * eps * lambda[t] * w;
      const auto& src_rows = rows.rows[uy];
      if (!src_rows.empty()) {
        const double f = coeff * factor[uy] / static_cast<double>(src_rows.size());
        for (Eigen::Index row : src_rows) dz.row(row) += f * unit.transpose();
      }
      const auto& tgt_rows = target_rows.rows[uy];
      if (!tgt_rows.empty()) {
        const double f = coeff * target_factor[uy] / static_cast<double>(tgt_rows.size());
        for (Eigen::Index row : tgt_rows) dz.row(row) -= f * unit.transpose();
      }
    }
    r.loss.explicit_cond += lambda[t] * r.source_explicit[t];
  }

  // Implicit term: weighted critic gap. Critics descend on
  // -c0 (1 - eps) * implicit; g receives the reversed latent gradient.
  r.source_implicit.assign(t_count, 0.0);
  r.implicit_latent_grad_critic = Matrix::Zero(nt, z.cols());
  for (std::size_t t = 0; t < t_count; ++t) {
    const auto& src = batch.sources[t];
    const Eigen::Index ns = src.x.rows();
    Matrix zin(ns + nt, z.cols());
    zin.topRows(ns) = z.middleRows(offset[t], ns);
    zin.bottomRows(nt) = z_target;
    Mlp::Cache c_cache;
    const Matrix d = state.critics[t].forward(zin, &c_cache);
    mix_pattern(c_cache, signature);
    double src_term = 0.0;
    for (Eigen::Index i = 0; i < ns; ++i) {
      src_term += inputs.alphas[t].values.at(static_cast<std::size_t>(src.y[static_cast<std::size_t>(i)])) * d(i, 0);
    }
    src_term /= static_cast<double>(ns);
    const double tgt_term = d.bottomRows(nt).sum() / static_cast<double>(nt);
    r.source_implicit[t] = src_term - tgt_term;
    r.loss.implicit_cond += lambda[t] * r.source_implicit[t];
    if (!mask.implicit_cond) continue;

    const double kappa = -c0 * (1.0 - eps) * lambda[t];
    Matrix dd(ns + nt, 1);
    for (Eigen::Index i = 0; i < ns; ++i) {
      dd(i, 0) = kappa * inputs.alphas[t].values.at(static_cast<std::size_t>(src.y[static_cast<std::size_t>(i)])) /
                 static_cast<double>(ns);
    }
    dd.bottomRows(nt).setConstant(-kappa / static_cast<double>(nt));
    const Matrix dzin = state.critics[t].backward(c_cache, dd, r.grads.critics[t]);
    // Gradient reversal.
    dz.middleRows(offset[t], ns) -= dzin.topRows(ns);
    dz.middleRows(target_offset, nt) -= dzin.bottomRows(nt);
    r.implicit_latent_grad_critic += dzin.bottomRows(nt);
  }
  r.implicit_latent_grad_model = -r.implicit_latent_grad_critic;

  // Gradient penalty on interpolates between each source batch and the target batch.
  for (std::size_t t = 0; t < t_count; ++t) {
    const Eigen::Index ns = batch.sources[t].x.rows();
    const auto count = static_cast<std::size_t>(std::max(ns, nt));
    const std::vector<double> xi =
        interpolation_coefficients(count, derive_seed(inputs.penalty_seed, t));
    Matrix zint(static_cast<Eigen::Index>(count), z.cols());
    for (std::size_t i = 0; i < count; ++i) {
      const auto is = offset[t] + static_cast<Eigen::Index>(i % static_cast<std::size_t>(ns));
      const auto it = target_offset + static_cast<Eigen::Index>(i % static_cast<std::size_t>(nt));
      zint.row(static_cast<Eigen::Index>(i)) = xi[i] * z.row(is) + (1.0 - xi[i]) * z.row(it);
    }
    r.loss.grad_penalty += state.critics[t].gradient_penalty(
        zint, config.penalty_form, mask.penalty ? &r.grads.critics[t] : nullptr,
        config.penalty_coeff, &signature);
  }

  r.loss.total = (mask.classification ? r.loss.classification : 0.0) +
                 c0 * ((mask.explicit_cond ? eps * r.loss.explicit_cond : 0.0) +
                       (mask.implicit_cond ? (1.0 - eps) * r.loss.implicit_cond : 0.0)) +
                 (mask.penalty ? config.penalty_coeff * r.loss.grad_penalty : 0.0);
  r.critic_loss = (mask.implicit_cond ? -c0 * (1.0 - eps) * r.loss.implicit_cond : 0.0) +
                  (mask.penalty ? config.penalty_coeff * r.loss.grad_penalty : 0.0);

  dz += state.classifier.backward(h_cache, dscores, r.grads.classifier);
  state.feature.backward(g_cache, dz, r.grads.feature);
  return r;
}

StepResult training_step(ModelState& state, const StepBatch& batch, const StepInputs& inputs,
                         const LossConfig& config, const StepOptions& options) {
  const bool critics_active = config.c0 * (1.0 - config.epsilon) != 0.0;
  ModelState next = state;
  ParamBlocks critic_params;
  for (auto& c : next.critics) append_blocks(c, critic_params);

  const auto critic_update = [&](StepResult& r) {
    ParamBlocks critic_grads;
    for (auto& c : r.grads.critics) append_blocks(c, critic_grads);
    next.critic_optimizer.step(critic_params, critic_grads);
  };

  if (critics_active) {
    for (int s = 1; s < options.critic_steps; ++s) {
      StepResult r = evaluate_step(next, batch, inputs, config,
                                   TermMask{false, false, true, true});
      if (!std::isfinite(r.critic_loss)) throw NumericalError("non-finite critic loss");
      critic_update(r);
    }
  }
  StepResult r = evaluate_step(next, batch, inputs, config);
  if (!std::isfinite(r.loss.total) || !std::isfinite(r.critic_loss)) {
    throw NumericalError(fmt::format("non-finite loss (total {}, critic {})", r.loss.total,
                                     r.critic_loss));
  }
  if (critics_active) critic_update(r);

  ParamBlocks model_params, model_grads;
  append_blocks(next.feature, model_params);
  append_blocks(next.classifier, model_params);
  append_blocks(r.grads.feature, model_grads);
  append_blocks(r.grads.classifier, model_grads);
  next.model_optimizer.step(model_params, model_grads);
  next.source_centroids = r.source_centroids;
  next.target_centroids = r.target_centroids;
  if (!next.finite()) throw NumericalError("parameters became non-finite");
  state = std::move(next);
  return r;
}

// ---------------------------------------------------------------------------
// Gradient checking

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradientCheckEntry check_gradient(const std::string& name, const ParamBlocks& params,
                                  const ParamBlocks& grads,
                                  const std::function<double(bool)>& evaluate, double step,
                                  const std::function<std::uint64_t()>& pattern) {
  GradientCheckEntry e;
  e.term = name;
  evaluate(true);
  const std::uint64_t base_pattern = pattern ? pattern() : 0;
  std::vector<std::vector<double>> analytic;
  for (auto g : grads) analytic.emplace_back(g.begin(), g.end());
  for (const auto& g : analytic) {
    for (double v : g) e.max_abs_gradient = std::max(e.max_abs_gradient, std::abs(v));
  }
  // Near-zero entries are compared against the scale of the whole gradient.
  const double floor = 1e-6 * std::max(1.0, e.max_abs_gradient);
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      double& p = params[b][i];
      const double saved = p;
      double up = 0.0, down = 0.0, h = step;
      bool smooth = false;
      // A stencil whose ends change the activation pattern straddles a kink or
      // a jump; shrink the step until both ends share the base pattern.
      for (;; h *= 0.1) {
        p = saved + h;
        up = evaluate(false);
        const bool up_same = !pattern || pattern() == base_pattern;
        p = saved - h;
        down = evaluate(false);
        const bool down_same = !pattern || pattern() == base_pattern;
        p = saved;
        smooth = up_same && down_same;
        if (smooth || h < step * 1e-4) break;
      }
      const double a = analytic[b][i];
      const double numeric = (up - down) / (2.0 * h);
      double err = relative_error(a, numeric, floor);
      if (!smooth) {
        // The base point itself sits on a kink (e.g. a ReLU input exactly 0):
        // the analytic value has to be one of the one-sided derivatives.
        const double mid = evaluate(false);
        err = std::min({err, relative_error(a, (up - mid) / h, floor),
                        relative_error(a, (mid - down) / h, floor)});
      }
      if (!std::isfinite(a) || !std::isfinite(numeric)) e.finite = false;
      e.max_relative_error = std::max(e.max_relative_error, err);
      ++e.parameters;
    }
  }
  return e;
}

bool GradientCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [&](const GradientCheckEntry& e) {
    return e.finite && e.max_relative_error <= tolerance;
  });
}

double GradientCheckReport::max_relative_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_relative_error);
  return m;
}

GradientCheckReport gradient_check(const ModelState& state, const StepBatch& batch,
                                   const StepInputs& inputs, const LossConfig& config,
                                   double tolerance) {
  GradientCheckReport report;
  report.tolerance = tolerance;
  struct Term {
    const char* name;
    TermMask mask;
  };
  const Term terms[] = {{"classification", TermMask::only_classification()},
                        {"explicit", TermMask::only_explicit()},
                        {"implicit", TermMask::only_implicit()},
                        {"penalty", TermMask::only_penalty()}};
  for (const Term& term : terms) {
    // Model side: g and h against the masked total.
    {
      ModelState work = state;
      Gradients grads{work.feature.zeros_like(), work.classifier.zeros_like(), {}};
      ParamBlocks params, grad_blocks;
      append_blocks(work.feature, params);
      append_blocks(work.classifier, params);
      append_blocks(grads.feature, grad_blocks);
      append_blocks(grads.classifier, grad_blocks);
      std::uint64_t signature = 0;
      const auto eval = [&](bool want) {
        StepResult r = evaluate_step(work, batch, inputs, config, term.mask);
        signature = r.activation_signature;
        if (want) {
          grads.feature = r.grads.feature;
          grads.classifier = r.grads.classifier;
        }
        return r.loss.total;
      };
      // The copies above keep the block addresses valid: assignment reuses storage.
      report.entries.push_back(check_gradient(fmt::format("{} (g,h)", term.name), params,
                                              grad_blocks, eval, 1e-5,
                                              [&] { return signature; }));
    }
    // Critic side: the critic objective.
    if (term.mask.implicit_cond || term.mask.penalty) {
      ModelState work = state;
      std::vector<Mlp> grads;
      for (const auto& c : work.critics) grads.push_back(c.zeros_like());
      ParamBlocks params, grad_blocks;
      for (auto& c : work.critics) append_blocks(c, params);
      for (auto& g : grads) append_blocks(g, grad_blocks);
      std::uint64_t signature = 0;
      const auto eval = [&](bool want) {
        StepResult r = evaluate_step(work, batch, inputs, config, term.mask);
        signature = r.activation_signature;
        if (want) {
          for (std::size_t t = 0; t < grads.size(); ++t) {
            for (std::size_t l = 0; l < grads[t].layers.size(); ++l) {
              grads[t].layers[l].weight = r.grads.critics[t].layers[l].weight;
              grads[t].layers[l].bias = r.grads.critics[t].layers[l].bias;
            }
          }
        }
        return r.critic_loss;
      };
      report.entries.push_back(check_gradient(fmt::format("{} (critics)", term.name), params,
                                              grad_blocks, eval, 1e-5,
                                              [&] { return signature; }));
    }
  }
  return report;
}

}  // namespace wadn
