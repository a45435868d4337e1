#pragma once

#include "wadn/trainer.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace wadn {

enum ExitCode : int { exit_ok = 0, exit_usage = 2, exit_numerical = 3 };

/// Version string baked in at build time (git describe when available).
std::string version_string();

struct RunManifest {
  std::string version;
  std::string scenario;
  std::uint64_t seed = 0;
  std::string data_digest;  // sha256 of the bundle manifest
  std::string config_echo;  // canonical key=value config
  double l1_effective = 0.0;  // ratio sparsity actually used by the scenario
  std::string started;      // UTC, ISO 8601
  std::string finished;
  std::string status;  // ok | aborted
  std::vector<std::pair<std::string, std::string>> files;  // name, sha256

  std::string format() const;
  static RunManifest parse(const std::string& text);
};

/// Writes the bundle described by a spec file into `out_dir`.
int cmd_gen(const std::filesystem::path& spec_path, const std::filesystem::path& out_dir,
            std::ostream& out, std::ostream& err);

struct RunRequest {
  Scenario scenario = Scenario::unsupervised;
  std::filesystem::path data;
  std::optional<std::filesystem::path> config;
  std::uint64_t seed = 0;
  std::filesystem::path out;
};

/// Trains and writes run-<config hash>-s<seed>/ under `out`: metrics.csv,
/// lambda.csv, alpha.csv, checkpoint.bin, config.txt and manifest.txt.
int cmd_run(const RunRequest& request, std::ostream& out, std::ostream& err);

/// Run directory name for a request, as cmd_run would choose it.
std::string run_dir_name(const TrainConfig& config, Scenario scenario, const std::string& data_digest);

struct DiagRequest {
  std::filesystem::path data;
  std::filesystem::path checkpoint;
  std::vector<double> constants{1.0, 1.0, 1.0, 1.0};  // L K Lmax dsup
  double delta = 0.1;
  std::size_t cap = 256;
  std::uint64_t seed = 0;
};

int cmd_diag(const DiagRequest& request, std::ostream& out, std::ostream& err);

/// Argument parsing and dispatch for the `wadn` executable.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace wadn
