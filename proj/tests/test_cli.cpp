#include "doctest.h"

#include "tempdir.hpp"
#include "wadn/cli.hpp"
#include "wadn/diagnostics.hpp"
#include "wadn/io.hpp"

#include <sstream>

using namespace wadn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out, err;
};

Outcome wadn_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "wadn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Outcome o;
  o.code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

// Only subdirectory of `parent`, or empty when there is not exactly one.
fs::path only_subdir(const fs::path& parent) {
  fs::path found;
  int n = 0;
  for (const auto& e : fs::directory_iterator(parent)) {
    if (e.is_directory()) found = e.path(), ++n;
  }
  return n == 1 ? found : fs::path{};
}

std::map<std::string, std::string> manifest_map(const fs::path& file) {
  std::map<std::string, std::string> m;
  for (const auto& kv : parse_key_values(read_file(file), file.string())) m[kv.key] = kv.value;
  return m;
}

std::vector<double> reals(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) v.push_back(std::stod(part));
  return v;
}

// Bundle from a spec text, written with `wadn gen`.
fs::path gen_bundle(const TempDir& dir, const std::string& name, const std::string& spec) {
  write_file(dir / (name + ".spec"), spec);
  const auto o = wadn_cli({"gen", (dir / (name + ".spec")).string(), "--out", (dir / name).string()});
  REQUIRE_MESSAGE(o.code == 0, o.err);
  return dir / name;
}

}  // namespace

TEST_CASE("gen writes the bundle files and is idempotent") {
  TempDir dir("gen");
  const fs::path data = gen_bundle(dir, "fig1", "preset=fig1\nsamples=200\nseed=3\n");
  for (const char* f : {"matched.ds", "flipped.ds", "target.ds", "bundle.txt"}) CHECK(fs::exists(data / f));
  const std::string digest = sha256_hex(read_file(data / "bundle.txt"));

  const auto again = wadn_cli({"gen", (dir / "fig1.spec").string(), "--out", data.string()});
  CHECK(again.code == 0);
  CHECK(sha256_hex(read_file(data / "bundle.txt")) == digest);

  // Same seed into a fresh directory gives the same bytes.
  const auto twin = wadn_cli({"gen", (dir / "fig1.spec").string(), "--out", (dir / "twin").string()});
  CHECK(twin.code == 0);
  CHECK(read_file(dir / "twin" / "flipped.ds") == read_file(data / "flipped.ds"));

  write_file(dir / "other.spec", "preset=fig1\nsamples=200\nseed=4\n");
  const auto clash = wadn_cli({"gen", (dir / "other.spec").string(), "--out", data.string()});
  CHECK(clash.code == 2);
  CHECK(clash.err.find("refusing") != std::string::npos);
  CHECK(sha256_hex(read_file(data / "bundle.txt")) == digest);
}

TEST_CASE("gen rejects malformed specs with a line number") {
  TempDir dir("genbad");
  write_file(dir / "bad.spec", "preset=fig1\nsamples=200\nsource.0.drop_rate=half\n");
  const auto o = wadn_cli({"gen", (dir / "bad.spec").string(), "--out", (dir / "x").string()});
  CHECK(o.code == 2);
  CHECK(o.err.find("bad.spec:3:") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "x"));
  CHECK(wadn_cli({"gen", (dir / "missing.spec").string(), "--out", (dir / "y").string()}).code == 2);
}

TEST_CASE("gen records empirical priors of dropped sources") {
  TempDir dir("gendrop");
  const fs::path data = gen_bundle(dir, "drop", "preset=dropshift\nsamples=6000\nseed=8\n");
  const auto m = manifest_map(data / "bundle.txt");
  const auto expected = reals(m.at("source.0.expected_prior"));
  CHECK(expected[0] == doctest::Approx(1.0 / 3));
  const auto got = reals(m.at("source.0.prior"));
  CHECK(std::abs(got[0] - 1.0 / 3) < 0.02);
  CHECK(std::abs(got[1] - 2.0 / 3) < 0.02);
  const auto tgt = reals(m.at("target.prior"));
  CHECK(std::abs(tgt[0] - 0.5) < 0.03);
}

TEST_CASE("run writes a reproducible run directory") {
  TempDir dir("run");
  const fs::path data = gen_bundle(dir, "fig1", "preset=fig1\nsamples=200\nseed=3\n");
  write_file(dir / "cfg.txt", "epochs=3\n");
  const std::vector<std::string> args{"run", "--data", data.string(), "--config", (dir / "cfg.txt").string(),
                                      "--seed", "7", "--out", (dir / "a").string()};
  const auto o = wadn_cli(args);
  REQUIRE_MESSAGE(o.code == 0, o.err);
  const fs::path run_dir = only_subdir(dir / "a");
  REQUIRE_FALSE(run_dir.empty());
  CHECK(run_dir.filename().string().rfind("run-", 0) == 0);
  CHECK(run_dir.filename().string().find("-s7") != std::string::npos);

  const RunManifest m = RunManifest::parse(read_file(run_dir / "manifest.txt"));
  CHECK(m.status == "ok");
  CHECK(m.seed == 7);
  CHECK(m.scenario == "unsupervised");
  CHECK(m.version == version_string());
  CHECK(m.data_digest == sha256_hex(read_file(data / "bundle.txt")));
  CHECK(m.l1_effective == 0.0);
  REQUIRE(m.files.size() == 5);
  for (const auto& [name, digest] : m.files) CHECK(sha256_hex(read_file(run_dir / name)) == digest);
  const TrainConfig echoed = parse_train_config(m.config_echo);
  CHECK(echoed.epochs == 3);

  const std::string metrics = read_file(run_dir / "metrics.csv");
  CHECK(metrics.rfind("# wadn metrics v1\n", 0) == 0);
  const Checkpoint ck = read_checkpoint(run_dir / "checkpoint.bin");
  CHECK(ck.lambda.size() == 2);

  // Same request elsewhere: identical metrics.
  auto other = args;
  other.back() = (dir / "b").string();
  REQUIRE(wadn_cli(other).code == 0);
  CHECK(read_file(only_subdir(dir / "b") / "metrics.csv") == metrics);

  // Re-running into the same place is a no-op.
  const auto again = wadn_cli(args);
  CHECK(again.code == 0);
  CHECK(read_file(run_dir / "metrics.csv") == metrics);

  // A run directory holding something else is never overwritten.
  write_file(run_dir / "metrics.csv", "tampered\n");
  CHECK(wadn_cli(args).code == 2);
  CHECK(read_file(run_dir / "metrics.csv") == "tampered\n");
}

TEST_CASE("run scenario and config handling") {
  TempDir dir("runcfg");
  const fs::path data = gen_bundle(dir, "gls", "preset=gls\nsamples=150\nseed=2\n");
  write_file(dir / "cfg.txt", "epochs=2\n");
  const auto base = [&](const std::string& out) {
    return std::vector<std::string>{"run", "--data", data.string(), "--config", (dir / "cfg.txt").string(),
                                    "--out", (dir / out).string()};
  };
  auto partial = base("p");
  partial.insert(partial.end(), {"--scenario", "partial"});
  REQUIRE(wadn_cli(partial).code == 0);
  CHECK(RunManifest::parse(read_file(only_subdir(dir / "p") / "manifest.txt")).l1_effective == 0.1);

  write_file(dir / "cfg2.txt", "epochs=2\nl1_coeff=0.25\n");
  auto overridden = partial;
  overridden[4] = (dir / "cfg2.txt").string();
  overridden[6] = (dir / "q").string();
  REQUIRE(wadn_cli(overridden).code == 0);
  CHECK(RunManifest::parse(read_file(only_subdir(dir / "q") / "manifest.txt")).l1_effective == 0.25);

  write_file(dir / "bad.txt", "epochs=2\nbogus=1\n");
  auto bad = base("r");
  bad[4] = (dir / "bad.txt").string();
  const auto o = wadn_cli(bad);
  CHECK(o.code == 2);
  CHECK(o.err.find("bad.txt:2:") != std::string::npos);

  auto scenario = base("s");
  scenario.insert(scenario.end(), {"--scenario", "semi"});
  CHECK(wadn_cli(scenario).code == 2);

  auto nodata = base("t");
  nodata[2] = (dir / "nowhere").string();
  CHECK(wadn_cli(nodata).code == 2);

  // Labels are hidden in this bundle.
  auto limited = base("u");
  limited.insert(limited.end(), {"--scenario", "limited_target"});
  CHECK(wadn_cli(limited).code == 2);
}

TEST_CASE("run reports numerical aborts with exit 3") {
  TempDir dir("abort");
  const fs::path data = gen_bundle(dir, "fig1", "preset=fig1\nsamples=200\nseed=10\n");
  write_file(dir / "cfg.txt", "epochs=20\nlearning_rate=50\n");
  const auto o = wadn_cli({"run", "--data", data.string(), "--config", (dir / "cfg.txt").string(), "--out",
                           (dir / "runs").string()});
  CHECK(o.code == 3);
  const fs::path run_dir = only_subdir(dir / "runs");
  REQUIRE_FALSE(run_dir.empty());
  CHECK(RunManifest::parse(read_file(run_dir / "manifest.txt")).status == "aborted");
  CHECK(read_checkpoint(run_dir / "checkpoint.bin").state.finite());
}

TEST_CASE("diag prints the bound terms and rejects mismatched checkpoints") {
  TempDir dir("diag");
  const fs::path fig = gen_bundle(dir, "fig1", "preset=fig1\nsamples=150\nseed=3\n");
  const fs::path gls = gen_bundle(dir, "gls", "preset=gls\nsamples=150\nseed=3\n");
  write_file(dir / "cfg.txt", "epochs=2\n");
  REQUIRE(wadn_cli({"run", "--data", fig.string(), "--config", (dir / "cfg.txt").string(), "--out",
                    (dir / "runs").string()})
              .code == 0);
  const fs::path ck = only_subdir(dir / "runs") / "checkpoint.bin";
  const auto o = wadn_cli({"diag", "--data", fig.string(), "--checkpoint", ck.string(), "--constants", "1",
                           "2", "1", "1", "--cap", "64"});
  CHECK_MESSAGE(o.code == 0, o.err);
  CHECK_FALSE(o.out.empty());
  const auto mismatch = wadn_cli({"diag", "--data", gls.string(), "--checkpoint", ck.string()});
  CHECK(mismatch.code == 2);
  CHECK(wadn_cli({"diag", "--data", fig.string(), "--checkpoint", ck.string(), "--delta", "1.5"}).code == 2);
  CHECK(wadn_cli({"diag", "--data", fig.string(), "--checkpoint", (dir / "none.bin").string()}).code == 2);
}

TEST_CASE("diagnostic duality gap is nonnegative on a trained model") {
  SynthSpec spec = synth_preset("gls");
  for (auto& s : spec.sources) s.samples = 400;
  spec.target.samples = 400;
  spec.seed = 5;
  const DomainBundle b = generate_synthetic(spec);
  TrainConfig c;
  c.epochs = 5;
  const RunResult r = run(b, Scenario::unsupervised, c);
  const Checkpoint ck{r.state, r.lambda, r.alpha};
  DiagnosticOptions opt;
  opt.cap = 128;
  const auto report = diagnose(b, ck, opt);
  REQUIRE(report.sources.size() == b.source_count());
  for (const auto& s : report.sources) {
    CHECK(s.duality_gap >= -1e-9);
    CHECK(s.cond_exact >= 0.0);
    CHECK(s.weighted_error >= 0.0);
  }
}

TEST_CASE("command line usage") {
  CHECK(wadn_cli({}).code == 2);
  CHECK(wadn_cli({"--help"}).code == 0);
  CHECK(wadn_cli({"frobnicate"}).code == 2);
  CHECK(wadn_cli({"run", "--data", "x"}).code == 2);
  const auto v = wadn_cli({"--version"});
  CHECK(v.code == 0);
  CHECK(v.out.find(version_string()) != std::string::npos);
}

TEST_CASE("run manifest text round trip") {
  RunManifest m;
  m.version = "0.1.0-test";
  m.scenario = "partial";
  m.seed = 42;
  m.data_digest = std::string(64, 'a');
  m.config_echo = format_train_config(TrainConfig{});
  m.l1_effective = 0.1;
  m.started = "2024-01-01T00:00:00Z";
  m.finished = "2024-01-01T00:00:05Z";
  m.status = "ok";
  m.files = {{"metrics.csv", std::string(64, 'b')}, {"checkpoint.bin", std::string(64, 'c')}};
  const RunManifest back = RunManifest::parse(m.format());
  CHECK(back.format() == m.format());
  CHECK(back.config_echo == m.config_echo);
  CHECK(back.files == m.files);
  CHECK_THROWS_AS(RunManifest::parse("mystery=1\n"), ConfigError);
}
