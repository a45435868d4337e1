#pragma once

#include "wadn/aggregation.hpp"
#include "wadn/data_model.hpp"
#include "wadn/label_shift.hpp"
#include "wadn/network.hpp"
#include "wadn/trainer.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace wadn {

/// Malformed config or spec text; carries the 1-based line (0 when not tied to a line).
class ConfigError : public InvalidArgument {
 public:
  ConfigError(std::string source, int line, const std::string& message);
  int line() const { return line_; }

 private:
  int line_;
};

// --- datasets -------------------------------------------------------------

/// Header `WADN-DS v1 n=<n> d=<d> k=<classes>`, then one row per sample:
/// features printed with 9 significant digits, then the label.
void write_dataset(const std::filesystem::path& path, const LabeledDataset& ds, int class_count);
std::string format_dataset(const LabeledDataset& ds, int class_count);

struct LoadedDataset {
  LabeledDataset data;
  int class_count = 0;
};
LoadedDataset read_dataset(const std::filesystem::path& path);

/// Directory layout written by `wadn gen`: one .ds file per domain plus
/// bundle.txt, a key=value manifest naming them.
struct BundleFiles {
  std::string manifest_text;
  std::vector<std::pair<std::string, std::string>> files;  // name, contents
};
BundleFiles format_bundle(const DomainBundle& bundle, const SynthSpec* spec);
DomainBundle read_bundle(const std::filesystem::path& dir);

// --- key=value text -------------------------------------------------------

struct KeyValue {
  std::string key;
  std::string value;
  int line = 0;
};
/// Splits `key=value` lines; `#` starts a comment, blank lines are skipped.
std::vector<KeyValue> parse_key_values(const std::string& text, const std::string& source);

SynthSpec parse_synth_spec(const std::string& text, const std::string& source = "spec");
/// Named generator recipes: fig1, fig1_noisy, dropshift, gls, ablation.
SynthSpec synth_preset(const std::string& name);

TrainConfig parse_train_config(const std::string& text, const std::string& source = "config");
/// Canonical key=value echo of every field; parses back to the same config.
std::string format_train_config(const TrainConfig& config);

// --- checkpoints ----------------------------------------------------------

struct Checkpoint {
  ModelState state;
  TaskWeights lambda;
  std::vector<LabelRatio> alpha;
};

/// Magic `WADN1`, little-endian u32 counts, then u32 rows, u32 cols and f64
/// data for every array in declaration order. Optimizer slots are not stored.
std::string encode_checkpoint(const ModelState& state, const TaskWeights& lambda,
                              std::span<const LabelRatio> alpha);
Checkpoint decode_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const ModelState& state,
                      const TaskWeights& lambda, std::span<const LabelRatio> alpha);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// --- run artifacts --------------------------------------------------------

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochReport& r);
std::string lambda_csv_header();
std::string lambda_csv_rows(const EpochReport& r);
std::string alpha_csv_header();
std::string alpha_csv_rows(const EpochReport& r);

// --- files ----------------------------------------------------------------

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);
std::string sha256_hex(const std::string& bytes);

}  // namespace wadn
