#include "wadn/cli.hpp"

#include "wadn/diagnostics.hpp"
#include "wadn/io.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <chrono>
#include <ctime>
#include <iostream>
#include <sstream>
#include <system_error>
#include <unistd.h>

#ifndef WADN_VERSION
#define WADN_VERSION "0.1.0"
#endif

namespace wadn {

namespace fs = std::filesystem;

std::string version_string() { return WADN_VERSION; }

namespace {

std::string utc_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

using FileSet = std::vector<std::pair<std::string, std::string>>;  // name, contents

// Compares `files` with what `dir` holds. Returns true when every file exists
// with identical bytes.
bool same_contents(const fs::path& dir, const FileSet& files) {
  for (const auto& [name, contents] : files) {
    const fs::path p = dir / name;
    if (!fs::exists(p) || read_file(p) != contents) return false;
  }
  return true;
}

enum class Placement { written, unchanged, conflict };

// Writes `files` into a staging directory and moves it to `dir`. An existing
// `dir` is left alone: unchanged when it holds the same `compared` files,
// conflict otherwise.
Placement place(const fs::path& dir, const FileSet& files, const FileSet& compared) {
  if (fs::exists(dir)) {
    return same_contents(dir, compared) ? Placement::unchanged : Placement::conflict;
  }
  fs::create_directories(dir.parent_path().empty() ? fs::path(".") : dir.parent_path());
  const fs::path staging =
      dir.parent_path() / fmt::format(".{}.staging-{}", dir.filename().string(), ::getpid());
  fs::remove_all(staging);
  fs::create_directories(staging);
  for (const auto& [name, contents] : files) write_file(staging / name, contents);
  std::error_code ec;
  fs::rename(staging, dir, ec);
  if (ec) {
    fs::remove_all(staging);
    if (fs::exists(dir)) {
      return same_contents(dir, compared) ? Placement::unchanged : Placement::conflict;
    }
    throw InvalidArgument(fmt::format("cannot create '{}': {}", dir.string(), ec.message()));
  }
  return Placement::written;
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest

std::string RunManifest::format() const {
  std::string s = "# wadn run manifest v1\n";
  s += fmt::format("version={}\nscenario={}\nseed={}\ndata_digest={}\nstarted={}\nfinished={}\nstatus={}\n",
                   version, scenario, seed, data_digest, started, finished, status);
  s += fmt::format("l1_effective={}\n", l1_effective);
  for (const auto& kv : parse_key_values(config_echo, "config")) {
    s += fmt::format("config.{}={}\n", kv.key, kv.value);
  }
  for (const auto& [name, digest] : files) s += fmt::format("file.{}={}\n", name, digest);
  return s;
}

RunManifest RunManifest::parse(const std::string& text) {
  RunManifest m;
  for (const auto& kv : parse_key_values(text, "manifest")) {
    if (kv.key == "version") m.version = kv.value;
    else if (kv.key == "scenario") m.scenario = kv.value;
    else if (kv.key == "seed") m.seed = std::stoull(kv.value);
    else if (kv.key == "data_digest") m.data_digest = kv.value;
    else if (kv.key == "started") m.started = kv.value;
    else if (kv.key == "finished") m.finished = kv.value;
    else if (kv.key == "status") m.status = kv.value;
    else if (kv.key == "l1_effective") m.l1_effective = std::stod(kv.value);
    else if (kv.key.rfind("config.", 0) == 0) m.config_echo += kv.key.substr(7) + "=" + kv.value + "\n";
    else if (kv.key.rfind("file.", 0) == 0) m.files.emplace_back(kv.key.substr(5), kv.value);
    else throw ConfigError("manifest", kv.line, fmt::format("unknown key '{}'", kv.key));
  }
  return m;
}

// ---------------------------------------------------------------------------
// gen

int cmd_gen(const fs::path& spec_path, const fs::path& out_dir, std::ostream& out,
            std::ostream& err) {
  try {
    const SynthSpec spec = parse_synth_spec(read_file(spec_path), spec_path.string());
    const DomainBundle bundle = generate_synthetic(spec);
    const BundleFiles bf = format_bundle(bundle, &spec);
    FileSet files = bf.files;
    files.emplace_back("bundle.txt", bf.manifest_text);
    switch (place(out_dir, files, files)) {
      case Placement::conflict:
        err << fmt::format("error: '{}' exists with different content; refusing to overwrite\n",
                           out_dir.string());
        return exit_usage;
      case Placement::unchanged:
        out << fmt::format("{} already holds this bundle\n", out_dir.string());
        return exit_ok;
      case Placement::written:
        break;
    }
    for (const auto& [name, contents] : files) {
      out << fmt::format("wrote {} (sha256 {})\n", (out_dir / name).string(), sha256_hex(contents));
    }
    return exit_ok;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return exit_numerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_usage;
  }
}

// ---------------------------------------------------------------------------
// run

std::string run_dir_name(const TrainConfig& config, Scenario scenario, const std::string& data_digest) {
  const std::string key = format_train_config(config) + "scenario=" + to_string(scenario) +
                          "\ndata=" + data_digest + "\n";
  return fmt::format("run-{}-s{}", sha256_hex(key).substr(0, 12), config.seed);
}

int cmd_run(const RunRequest& request, std::ostream& out, std::ostream& err) {
  try {
    const std::string started = utc_now();
    const DomainBundle bundle = read_bundle(request.data);
    const std::string data_digest = sha256_hex(read_file(request.data / "bundle.txt"));
    TrainConfig config;
    if (request.config) config = parse_train_config(read_file(*request.config), request.config->string());
    config.seed = request.seed;
    config.validate();

    const fs::path dir = request.out / run_dir_name(config, request.scenario, data_digest);
    std::string metrics = metrics_csv_header();
    std::string lambda = lambda_csv_header();
    std::string alpha = alpha_csv_header();
    const RunResult result = run(bundle, request.scenario, config,
                                 [&](const EpochReport& r, const ModelState&) {
                                   metrics += metrics_csv_row(r);
                                   lambda += lambda_csv_rows(r);
                                   alpha += alpha_csv_rows(r);
                                 });

    FileSet files{{"metrics.csv", metrics},
                  {"lambda.csv", lambda},
                  {"alpha.csv", alpha},
                  {"checkpoint.bin", encode_checkpoint(result.state, result.lambda, result.alpha)},
                  {"config.txt", format_train_config(config)}};
    RunManifest manifest;
    manifest.version = version_string();
    manifest.scenario = to_string(request.scenario);
    manifest.seed = config.seed;
    manifest.data_digest = data_digest;
    manifest.config_echo = format_train_config(config);
    manifest.started = started;
    manifest.finished = utc_now();
    manifest.status = result.aborted ? "aborted" : "ok";
    manifest.l1_effective = config.effective_l1(request.scenario);
    for (const auto& [name, contents] : files) manifest.files.emplace_back(name, sha256_hex(contents));
    const FileSet compared = files;
    files.emplace_back("manifest.txt", manifest.format());

    switch (place(dir, files, compared)) {
      case Placement::conflict:
        err << fmt::format("error: '{}' exists with different content; refusing to overwrite\n",
                           dir.string());
        return exit_usage;
      case Placement::unchanged:
        out << fmt::format("{} already holds identical results\n", dir.string());
        break;
      case Placement::written:
        out << fmt::format("run directory {}\n", dir.string());
        break;
    }
    if (result.aborted) {
      err << "numerical abort: " << result.abort_reason << " (last good checkpoint saved)\n";
      return exit_numerical;
    }
    const EpochReport& last = result.epochs.back();
    std::string lam;
    for (double v : last.lambda) lam += fmt::format(" {:.4f}", v);
    out << fmt::format("epochs {}  final lambda{}", result.epochs.size(), lam);
    if (last.target_accuracy) out << fmt::format("  target accuracy {:.4f}", *last.target_accuracy);
    out << '\n';
    return exit_ok;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return exit_numerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_usage;
  }
}

// ---------------------------------------------------------------------------
// diag

int cmd_diag(const DiagRequest& request, std::ostream& out, std::ostream& err) {
  try {
    if (request.constants.size() != 4) throw InvalidArgument("--constants takes L K Lmax dsup");
    const DomainBundle bundle = read_bundle(request.data);
    const Checkpoint checkpoint = read_checkpoint(request.checkpoint);
    DiagnosticOptions options;
    options.constants = BoundConstants{request.constants[0], request.constants[1],
                                       request.constants[2], request.constants[3]};
    options.delta = request.delta;
    options.cap = request.cap;
    options.seed = request.seed;
    out << format_diagnostic(diagnose(bundle, checkpoint, options));
    return exit_ok;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return exit_numerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_usage;
  }
}

// ---------------------------------------------------------------------------
// Entry point

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-source domain adaptation under label shift", "wadn"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(1);

  fs::path spec_path, gen_out;
  auto* gen = app.add_subcommand("gen", "generate a synthetic bundle from a spec file");
  gen->add_option("spec", spec_path, "spec file (key=value; may start with preset=<name>)")->required();
  gen->add_option("--out", gen_out, "output directory")->required();

  RunRequest run_req;
  std::string scenario = "unsupervised";
  std::string config_path;
  auto* runc = app.add_subcommand("run", "train on a bundle");
  runc->add_option("--scenario", scenario, "unsupervised | limited_target | partial")
      ->check(CLI::IsMember({"unsupervised", "limited_target", "partial"}));
  runc->add_option("--data", run_req.data, "bundle directory")->required();
  runc->add_option("--config", config_path, "key=value training config");
  runc->add_option("--seed", run_req.seed, "training seed");
  runc->add_option("--out", run_req.out, "parent directory for the run directory")->required();

  DiagRequest diag_req;
  auto* diag = app.add_subcommand("diag", "bound terms and distance diagnostics for a checkpoint");
  diag->add_option("--data", diag_req.data, "bundle directory")->required();
  diag->add_option("--checkpoint", diag_req.checkpoint, "checkpoint.bin from a run")->required();
  diag->add_option("--constants", diag_req.constants, "L K Lmax dsup")->expected(4);
  diag->add_option("--delta", diag_req.delta, "confidence parameter in (0,1)");
  diag->add_option("--cap", diag_req.cap, "points per domain for exact OT (<= 256)");
  diag->add_option("--seed", diag_req.seed, "subsampling seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_usage;
  }

  if (*gen) return cmd_gen(spec_path, gen_out, out, err);
  if (*runc) {
    run_req.scenario = parse_scenario(scenario);
    if (!config_path.empty()) run_req.config = config_path;
    return cmd_run(run_req, out, err);
  }
  return cmd_diag(diag_req, out, err);
}

}  // namespace wadn
