#include "doctest.h"

#include "tempdir.hpp"
#include "toy.hpp"
#include "wadn/io.hpp"

#include <random>

using namespace wadn;

namespace {

// Line number carried by the ConfigError `f` throws, or -1 for anything else.
template <class F>
int error_line(F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.line();
  } catch (...) {
    return -2;
  }
  return -1;
}

}  // namespace

TEST_CASE("dataset text round trip") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 3.0);
  LabeledDataset ds;
  ds.features.resize(50, 3);
  for (Eigen::Index i = 0; i < 50; ++i)
    for (Eigen::Index j = 0; j < 3; ++j) ds.features(i, j) = n(rng);
  for (int i = 0; i < 50; ++i) ds.labels.push_back(i % 3);
  ds.name = "cloud";
  TempDir dir("ds");
  write_dataset(dir / "cloud.ds", ds, 4);
  const auto back = read_dataset(dir / "cloud.ds");
  CHECK(back.class_count == 4);
  CHECK(back.data.name == "cloud");
  CHECK(back.data.labels == ds.labels);
  // Nine significant digits: relative error below 5e-9.
  for (Eigen::Index i = 0; i < 50; ++i)
    for (Eigen::Index j = 0; j < 3; ++j) {
      const double a = ds.features(i, j), b = back.data.features(i, j);
      CHECK(std::abs(a - b) <= 5e-9 * std::abs(a));
    }
  // Writing what was read reproduces the file byte for byte.
  CHECK(format_dataset(back.data, 4) == read_file(dir / "cloud.ds"));
}

TEST_CASE("dataset read errors name the line") {
  TempDir dir("dsbad");
  const auto line_of = [&](const std::string& text) {
    write_file(dir / "x.ds", text);
    return error_line([&] { read_dataset(dir / "x.ds"); });
  };
  CHECK(line_of("WADN-DS v2 n=1 d=1 k=2\n0.5,1\n") == 1);
  CHECK(line_of("WADN-DS v1 n=2 d=1 k=2\n0.5,1\n0.5,x\n") == 3);
  CHECK(line_of("WADN-DS v1 n=2 d=1 k=2\n0.5,1\n0.5,2\n") == 3);
  CHECK(line_of("WADN-DS v1 n=2 d=2 k=2\n0.5,1\n") == 2);
  CHECK(line_of("WADN-DS v1 n=2 d=1 k=2\n0.5,1\n") == 3);
  CHECK(line_of("WADN-DS v1 n=1 d=1 k=2\nnope,1\n") == 2);
  CHECK(line_of("WADN-DS v1 n=1 d=1 k=2\n0.5,1\n0.5,1\n") == 3);
  CHECK(line_of("WADN-DS v1 n=1 d=1 k=2\n0.5,1\n\n") == -1);
}

TEST_CASE("bundle round trip") {
  SynthSpec spec = synth_preset("fig1_noisy");
  for (auto& s : spec.sources) s.samples = 40;
  spec.target.samples = 30;
  spec.seed = 4;
  const DomainBundle b = generate_synthetic(spec);
  const BundleFiles bf = format_bundle(b, &spec);
  CHECK(bf.files.size() == 4);
  TempDir dir("bundle");
  for (const auto& [name, contents] : bf.files) write_file(dir / name, contents);
  write_file(dir / "bundle.txt", bf.manifest_text);
  const DomainBundle back = read_bundle(dir.path);
  REQUIRE(back.source_count() == 3);
  CHECK(back.class_count == 2);
  CHECK(back.target.size() == 30);
  CHECK(back.sources[1].name == "flipped");
  CHECK(back.sources[2].labels == b.sources[2].labels);
  CHECK(format_bundle(back, nullptr).files == bf.files);

  // A file whose header disagrees with the manifest.
  write_file(dir / "target.ds", "WADN-DS v1 n=1 d=3 k=2\n0,0,0,1\n");
  CHECK_THROWS_AS(read_bundle(dir.path), ConfigError);
  write_file(dir / "bundle.txt", "class_count=2\n");
  CHECK_THROWS_WITH_AS(read_bundle(dir.path), doctest::Contains("missing key"), ConfigError);
}

TEST_CASE("key=value parsing") {
  const auto kv = parse_key_values("# header\n\n a = 1 # trailing\nb=x=y\n", "t");
  REQUIRE(kv.size() == 2);
  CHECK(kv[0].key == "a");
  CHECK(kv[0].value == "1");
  CHECK(kv[0].line == 3);
  CHECK(kv[1].value == "x=y");
  CHECK(error_line([] { parse_key_values("a=1\njunk\n", "t"); }) == 2);
  CHECK(error_line([] { parse_key_values("=3\n", "t"); }) == 1);
  CHECK_THROWS_WITH(parse_key_values("a=1\njunk\n", "cfg.txt"), doctest::Contains("cfg.txt:2:"));
}

TEST_CASE("synthetic spec text") {
  const auto s = parse_synth_spec("preset=dropshift\nseed=12\nsamples=300\nsource.1.drop_rate=0.2,0.0\n");
  CHECK(s.seed == 12);
  REQUIRE(s.sources.size() == 2);
  CHECK(s.sources[0].samples == 300);
  CHECK(s.target.samples == 300);
  CHECK(s.sources[0].drop_rate == std::vector<double>{0.5, 0.0});
  CHECK(s.sources[1].drop_rate == std::vector<double>{0.2, 0.0});

  const auto custom = parse_synth_spec(
      "class_count=2\nfeature_dim=1\nmeans=-1;1\nsource_count=2\nsource.1.flip=true\n"
      "target.prior=0.3,0.7\nsource.0.offset=0.5\n");
  REQUIRE(custom.sources.size() == 2);
  CHECK(custom.sources[1].flip);
  CHECK(custom.target.prior == std::vector<double>{0.3, 0.7});
  CHECK(custom.sources[0].class_means[0][0] == doctest::Approx(-0.5));
  CHECK(custom.sources[1].class_means[0][0] == doctest::Approx(-1.0));

  CHECK(error_line([] { parse_synth_spec("preset=fig1\nsamples=10\nsource.0.colour=red\n"); }) == 3);
  CHECK(error_line([] { parse_synth_spec("seed=1\npreset=fig1\n"); }) == 2);
  CHECK(error_line([] { parse_synth_spec("preset=nothing\n"); }) == 1);
  CHECK(error_line([] { parse_synth_spec("preset=fig1\nsamples=ten\n"); }) == 2);
  CHECK(error_line([] { parse_synth_spec("preset=fig1\ntarget.prior=0.5,abc\n"); }) == 2);
  CHECK_THROWS_AS(parse_synth_spec("class_count=2\nfeature_dim=1\nmeans=-1;1\nsource_count=1\n"), ConfigError);
}

TEST_CASE("training config text") {
  TrainConfig c;
  c.epochs = 17;
  c.c1 = 0.3;
  c.l1_coeff = 0.05;
  c.penalty_form = PenaltyForm::one_sided;
  c.architecture.feature_hidden = {};
  c.architecture.critic_hidden = {7, 5};
  c.optimizer.learning_rate = 0.0123456789012345;
  c.refresh_alpha = true;
  const std::string text = format_train_config(c);
  const TrainConfig back = parse_train_config(text);
  CHECK(format_train_config(back) == text);
  CHECK(back.optimizer.learning_rate == c.optimizer.learning_rate);
  CHECK(back.architecture.feature_hidden.empty());
  CHECK(back.architecture.critic_hidden == std::vector<int>{7, 5});
  CHECK(format_train_config(parse_train_config(format_train_config(TrainConfig{}))) ==
        format_train_config(TrainConfig{}));

  const auto a = parse_train_config("c1=auto\nl1_coeff=auto\n");
  CHECK_FALSE(a.c1.has_value());
  CHECK_FALSE(a.l1_coeff.has_value());
  const auto o = parse_train_config("optimizer=adadelta-0.5\n");
  CHECK(o.optimizer.kind == OptimizerKind::adadelta);
  CHECK(o.optimizer.learning_rate == 0.5);

  CHECK(error_line([] { parse_train_config("epochs=3\nbogus=1\n"); }) == 2);
  CHECK(error_line([] { parse_train_config("epsilon=2\n"); }) == 1);
  CHECK(error_line([] { parse_train_config("\nc0=-1\n"); }) == 2);
  CHECK(error_line([] { parse_train_config("penalty_form=cubic\n"); }) == 1);
  CHECK(error_line([] { parse_train_config("architecture=huge\n"); }) == 1);
}

TEST_CASE("checkpoint round trip") {
  const toy::Toy t = toy::make_toy(2);
  const std::string bytes = encode_checkpoint(t.state, t.lambda, t.alphas);
  CHECK(bytes.compare(0, 5, "WADN1") == 0);
  const Checkpoint c = decode_checkpoint(bytes);
  CHECK(c.state.class_count == 2);
  CHECK(c.lambda.values == t.lambda.values);
  REQUIRE(c.alpha.size() == 2);
  CHECK(c.alpha[1].values == t.alphas[1].values);
  CHECK(c.state.source_centroids[0].present == t.state.source_centroids[0].present);
  CHECK(c.state.target_centroids.centroids == t.state.target_centroids.centroids);
  CHECK(encode_checkpoint(c.state, c.lambda, c.alpha) == bytes);

  const Matrix z = t.batch.target.x;
  CHECK(c.state.classifier.forward(c.state.feature.forward(z)) ==
        t.state.classifier.forward(t.state.feature.forward(z)));

  TempDir dir("ckpt");
  write_checkpoint(dir / "c.bin", t.state, t.lambda, t.alphas);
  CHECK(read_file(dir / "c.bin") == bytes);
  CHECK(read_checkpoint(dir / "c.bin").lambda.values == t.lambda.values);
}

TEST_CASE("checkpoint rejects damaged bytes") {
  const toy::Toy t = toy::make_toy(3);
  const std::string bytes = encode_checkpoint(t.state, t.lambda, t.alphas);
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("magic"), InvalidArgument);
  CHECK_THROWS_WITH_AS(decode_checkpoint(bytes + "z"), doctest::Contains("trailing"), InvalidArgument);
  CHECK_THROWS_WITH_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), doctest::Contains("truncated"),
                       InvalidArgument);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, 7)), InvalidArgument);
  // The class count sits right after the magic; a wrong one breaks the chain.
  std::string shape = bytes;
  shape[5] = 3;
  CHECK_THROWS_AS(decode_checkpoint(shape), InvalidArgument);
  CHECK_THROWS_AS(encode_checkpoint(t.state, TaskWeights{{1.0}}, t.alphas), InvalidArgument);
}

TEST_CASE("csv artifacts carry versioned headers") {
  EpochReport r;
  r.epoch = 3;
  r.lambda = {0.25, 0.75};
  r.alpha = {LabelRatio{{1.0, 1.0}}, LabelRatio{{0.5, 1.5}}};
  r.target_accuracy = 0.875;
  CHECK(metrics_csv_header().rfind("# wadn metrics v1\n", 0) == 0);
  CHECK(lambda_csv_header().rfind("# wadn lambda v1\n", 0) == 0);
  CHECK(alpha_csv_header().rfind("# wadn alpha v1\n", 0) == 0);
  CHECK(lambda_csv_rows(r) == "3,0,0.25\n3,1,0.75\n");
  CHECK(alpha_csv_rows(r) == "3,0,0,1\n3,0,1,1\n3,1,0,0.5\n3,1,1,1.5\n");
  CHECK(metrics_csv_row(r).rfind("3,0.875,", 0) == 0);
  r.target_accuracy.reset();
  CHECK(metrics_csv_row(r).rfind("3,,", 0) == 0);
}

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}
