#include "wadn/io.hpp"

#include <fmt/format.h>
#include <openssl/evp.h>

#include <bit>
#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

namespace wadn {

namespace fs = std::filesystem;

ConfigError::ConfigError(std::string source, int line, const std::string& message)
    : InvalidArgument(line > 0 ? fmt::format("{}:{}: {}", source, line, message)
                               : fmt::format("{}: {}", source, message)),
      line_(line) {}

// ---------------------------------------------------------------------------
// Files

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument(fmt::format("cannot open '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument(fmt::format("cannot write '{}'", path.string()));
  out << contents;
  if (!out) throw InvalidArgument(fmt::format("write to '{}' failed", path.string()));
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

// ---------------------------------------------------------------------------
// Scalar parsing

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

bool to_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  errno = 0;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && errno == 0 && std::isfinite(out);
}

bool to_long(const std::string& s, long long& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

struct FieldReader {
  const std::string& source;
  const KeyValue& kv;

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(source, kv.line, fmt::format("{}: {} (got '{}')", kv.key, what, kv.value));
  }
  double real() const {
    double v = 0.0;
    if (!to_double(kv.value, v)) fail("expected a number");
    return v;
  }
  double nonneg() const {
    const double v = real();
    if (v < 0.0) fail("must be >= 0");
    return v;
  }
  double unit() const {
    const double v = real();
    if (v < 0.0 || v > 1.0) fail("must lie in [0,1]");
    return v;
  }
  long long integer(long long lo) const {
    long long v = 0;
    if (!to_long(kv.value, v)) fail("expected an integer");
    if (v < lo) fail(fmt::format("must be >= {}", lo));
    return v;
  }
  bool boolean() const {
    if (kv.value == "true" || kv.value == "1") return true;
    if (kv.value == "false" || kv.value == "0") return false;
    fail("expected true or false");
  }
  std::vector<double> reals() const {
    std::vector<double> out;
    for (const auto& part : split_on(kv.value, ',')) {
      double v = 0.0;
      if (!to_double(part, v)) fail("expected a comma-separated list of numbers");
      out.push_back(v);
    }
    return out;
  }
  std::vector<int> widths() const {
    std::vector<int> out;
    if (kv.value.empty() || kv.value == "none") return out;
    for (const auto& part : split_on(kv.value, ',')) {
      long long v = 0;
      if (!to_long(part, v) || v < 1) fail("expected a comma-separated list of positive widths");
      out.push_back(static_cast<int>(v));
    }
    return out;
  }
  std::vector<Vector> vectors() const {
    std::vector<Vector> out;
    for (const auto& group : split_on(kv.value, ';')) {
      const auto parts = split_on(group, ',');
      Vector v(static_cast<Eigen::Index>(parts.size()));
      for (std::size_t j = 0; j < parts.size(); ++j) {
        if (!to_double(parts[j], v[static_cast<Eigen::Index>(j)])) {
          fail("expected vectors like 'a,b;c,d'");
        }
      }
      out.push_back(v);
    }
    return out;
  }
};

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += fmt::format("{}{}", i ? "," : "", v[i]);
  return s;
}

std::string join_widths(const std::vector<int>& v) {
  if (v.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += fmt::format("{}{}", i ? "," : "", v[i]);
  return s;
}

}  // namespace

std::vector<KeyValue> parse_key_values(const std::string& text, const std::string& source) {
  std::vector<KeyValue> out;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string body = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source, line, fmt::format("expected key=value, got '{}'", body));
    }
    KeyValue kv{trim(body.substr(0, eq)), trim(body.substr(eq + 1)), line};
    if (kv.key.empty()) throw ConfigError(source, line, "empty key");
    out.push_back(std::move(kv));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

std::string format_dataset(const LabeledDataset& ds, int class_count) {
  ds.validate(class_count);
  std::string out = fmt::format("WADN-DS v1 n={} d={} k={}\n", ds.size(), ds.dim(), class_count);
  fmt::memory_buffer buf;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (int j = 0; j < ds.dim(); ++j) {
      fmt::format_to(std::back_inserter(buf), "{:.9g},", ds.features(static_cast<Eigen::Index>(i), j));
    }
    fmt::format_to(std::back_inserter(buf), "{}\n", ds.labels[i]);
  }
  out.append(buf.data(), buf.size());
  return out;
}

void write_dataset(const fs::path& path, const LabeledDataset& ds, int class_count) {
  write_file(path, format_dataset(ds, class_count));
}

LoadedDataset read_dataset(const fs::path& path) {
  const std::string text = read_file(path);
  const std::string where = path.string();
  std::istringstream in(text);
  std::string header;
  std::getline(in, header);
  long long n = 0, d = 0, k = 0;
  {
    std::istringstream hs(header);
    std::string magic, version, fn, fd, fk;
    hs >> magic >> version >> fn >> fd >> fk;
    if (magic != "WADN-DS" || version != "v1" || fn.rfind("n=", 0) != 0 || fd.rfind("d=", 0) != 0 ||
        fk.rfind("k=", 0) != 0 || !to_long(fn.substr(2), n) || !to_long(fd.substr(2), d) ||
        !to_long(fk.substr(2), k) || n < 1 || d < 1 || k < 2) {
      throw ConfigError(where, 1, fmt::format("bad dataset header '{}'", header));
    }
  }
  LoadedDataset out;
  out.class_count = static_cast<int>(k);
  out.data.name = path.stem().string();
  out.data.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  out.data.labels.resize(static_cast<std::size_t>(n));
  std::string row;
  for (long long i = 0; i < n; ++i) {
    const int line = static_cast<int>(i) + 2;
    if (!std::getline(in, row)) throw ConfigError(where, line, "unexpected end of file");
    const auto parts = split_on(row, ',');
    if (static_cast<long long>(parts.size()) != d + 1) {
      throw ConfigError(where, line, fmt::format("expected {} fields, got {}", d + 1, parts.size()));
    }
    for (long long j = 0; j < d; ++j) {
      double v = 0.0;
      if (!to_double(parts[static_cast<std::size_t>(j)], v)) {
        throw ConfigError(where, line, fmt::format("bad feature '{}'", parts[static_cast<std::size_t>(j)]));
      }
      out.data.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
    long long y = 0;
    if (!to_long(parts.back(), y) || y < 0 || y >= k) {
      throw ConfigError(where, line, fmt::format("bad label '{}'", parts.back()));
    }
    out.data.labels[static_cast<std::size_t>(i)] = static_cast<int>(y);
  }
  while (std::getline(in, row)) {
    if (!trim(row).empty()) throw ConfigError(where, static_cast<int>(n) + 2, "trailing rows after n samples");
  }
  return out;
}

BundleFiles format_bundle(const DomainBundle& bundle, const SynthSpec* spec) {
  bundle.validate();
  BundleFiles out;
  std::string m = "# wadn bundle v1\n";
  m += fmt::format("class_count={}\nfeature_dim={}\ntarget_labels_visible={}\nsource_count={}\n",
                   bundle.class_count, bundle.target.dim(), bundle.target_labels_visible,
                   bundle.source_count());
  const auto domain = [&](const std::string& key, const LabeledDataset& ds, const DomainSpec* ds_spec) {
    const std::string file = ds.name + ".ds";
    for (const auto& f : out.files) {
      if (f.first == file) throw InvalidArgument(fmt::format("duplicate domain name '{}'", ds.name));
    }
    out.files.emplace_back(file, format_dataset(ds, bundle.class_count));
    m += fmt::format("{}.file={}\n", key, file);
    m += fmt::format("{}.samples={}\n", key, ds.size());
    m += fmt::format("{}.prior={}\n", key, join(empirical_prior(ds, bundle.class_count).probs()));
    if (ds_spec) m += fmt::format("{}.expected_prior={}\n", key, join(effective_prior(*ds_spec)));
  };
  for (std::size_t t = 0; t < bundle.source_count(); ++t) {
    domain(fmt::format("source.{}", t), bundle.sources[t], spec ? &spec->sources[t] : nullptr);
  }
  domain("target", bundle.target, spec ? &spec->target : nullptr);
  if (spec) m += fmt::format("seed={}\n", spec->seed);
  out.manifest_text = m;
  return out;
}

DomainBundle read_bundle(const fs::path& dir) {
  const fs::path manifest = dir / "bundle.txt";
  const std::string source = manifest.string();
  const auto kvs = parse_key_values(read_file(manifest), source);
  std::map<std::string, KeyValue> by_key;
  for (const auto& kv : kvs) by_key[kv.key] = kv;
  const auto need = [&](const std::string& key) -> const KeyValue& {
    const auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError(source, 0, fmt::format("missing key '{}'", key));
    return it->second;
  };
  DomainBundle b;
  b.class_count = static_cast<int>(FieldReader{source, need("class_count")}.integer(2));
  const auto dim = FieldReader{source, need("feature_dim")}.integer(1);
  b.target_labels_visible = FieldReader{source, need("target_labels_visible")}.boolean();
  const auto count = FieldReader{source, need("source_count")}.integer(1);
  const auto load = [&](const std::string& key) {
    const KeyValue& kv = need(key + ".file");
    LoadedDataset ld = read_dataset(dir / kv.value);
    if (ld.class_count != b.class_count || ld.data.dim() != dim) {
      throw ConfigError(source, kv.line,
                        fmt::format("{} has k={} d={}, manifest says k={} d={}", kv.value,
                                    ld.class_count, ld.data.dim(), b.class_count, dim));
    }
    return ld.data;
  };
  for (long long t = 0; t < count; ++t) b.sources.push_back(load(fmt::format("source.{}", t)));
  b.target = load("target");
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic specs

namespace {

DomainSpec plain_domain(std::string name, std::vector<Vector> means, std::size_t samples,
                        int class_count) {
  DomainSpec d;
  d.name = std::move(name);
  d.class_means = std::move(means);
  d.prior.assign(static_cast<std::size_t>(class_count), 1.0 / class_count);
  d.drop_rate.assign(static_cast<std::size_t>(class_count), 0.0);
  d.samples = samples;
  return d;
}

std::vector<Vector> vecs(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<Vector> out;
  for (const auto& r : rows) {
    Vector v(static_cast<Eigen::Index>(r.size()));
    Eigen::Index j = 0;
    for (double x : r) v[j++] = x;
    out.push_back(v);
  }
  return out;
}

}  // namespace

SynthSpec synth_preset(const std::string& name) {
  SynthSpec s;
  s.seed = 1;
  if (name == "fig1" || name == "fig1_noisy") {
    // Target classes at (-2,0) and (2,0); the flipped source swaps them so its
    // marginal equals the target's.
    s.class_count = 2;
    s.feature_dim = 2;
    const auto means = vecs({{-2.0, 0.0}, {2.0, 0.0}});
    s.sources.push_back(plain_domain("matched", means, 2000, 2));
    s.sources.push_back(plain_domain("flipped", means, 2000, 2));
    s.sources.back().flip = true;
    if (name == "fig1_noisy") {
      s.sources.push_back(plain_domain("noisy", means, 2000, 2));
      s.sources.back().scale = 2.0;
    }
    s.target = plain_domain("target", means, 2000, 2);
    return s;
  }
  if (name == "dropshift") {
    s.class_count = 2;
    s.feature_dim = 2;
    const auto means = vecs({{-2.0, 0.0}, {2.0, 0.0}});
    for (const char* n : {"source_a", "source_b"}) {
      s.sources.push_back(plain_domain(n, means, 2000, 2));
      s.sources.back().drop_rate = {0.5, 0.0};
    }
    s.target = plain_domain("target", means, 2000, 2);
    return s;
  }
  if (name == "gls") {
    // Pure label shift: shared class conditionals, different class priors.
    s.class_count = 3;
    s.feature_dim = 2;
    const auto means = vecs({{-3.0, 0.0}, {3.0, 0.0}, {0.0, 4.0}});
    s.sources.push_back(plain_domain("source_a", means, 2000, 3));
    s.sources.back().prior = {0.6, 0.3, 0.1};
    s.sources.push_back(plain_domain("source_b", means, 2000, 3));
    s.sources.back().prior = {0.2, 0.5, 0.3};
    s.target = plain_domain("target", means, 2000, 3);
    s.target.prior = {0.3, 0.3, 0.4};
    return s;
  }
  if (name == "ablation") {
    // Overlapping classes; every source loses part of class 0.
    s.class_count = 2;
    s.feature_dim = 2;
    const auto means = vecs({{-0.75, 0.0}, {0.75, 0.0}});
    for (const char* n : {"source_a", "source_b", "source_c"}) {
      s.sources.push_back(plain_domain(n, means, 2000, 2));
      s.sources.back().drop_rate = {0.5, 0.0};
    }
    s.target = plain_domain("target", means, 2000, 2);
    return s;
  }
  throw InvalidArgument(
      fmt::format("unknown preset '{}' (fig1, fig1_noisy, dropshift, gls, ablation)", name));
}

SynthSpec parse_synth_spec(const std::string& text, const std::string& source) {
  const auto kvs = parse_key_values(text, source);
  SynthSpec s;
  bool have_base = false;
  std::vector<Vector> shared_means;
  const auto ensure_sources = [&](std::size_t count) {
    while (s.sources.size() < count) {
      s.sources.push_back(plain_domain(fmt::format("source{}", s.sources.size()), shared_means, 1000,
                                       s.class_count));
    }
  };
  const auto ensure_target = [&] {
    if (s.target.name.empty()) s.target = plain_domain("target", shared_means, 1000, s.class_count);
  };
  for (const auto& kv : kvs) {
    const FieldReader f{source, kv};
    if (kv.key == "preset") {
      if (have_base) f.fail("preset must come first");
      try {
        s = synth_preset(kv.value);
      } catch (const InvalidArgument& e) {
        throw ConfigError(source, kv.line, e.what());
      }
      shared_means = s.target.class_means;
      have_base = true;
      continue;
    }
    have_base = true;
    if (kv.key == "seed") {
      s.seed = static_cast<std::uint64_t>(f.integer(0));
    } else if (kv.key == "class_count") {
      s.class_count = static_cast<int>(f.integer(2));
    } else if (kv.key == "feature_dim") {
      s.feature_dim = static_cast<int>(f.integer(1));
    } else if (kv.key == "target_labels_visible") {
      s.target_labels_visible = f.boolean();
    } else if (kv.key == "source_count") {
      if (s.class_count < 2) f.fail("set class_count first");
      ensure_sources(static_cast<std::size_t>(f.integer(1)));
      s.sources.resize(static_cast<std::size_t>(f.integer(1)),
                       plain_domain("unused", shared_means, 1000, s.class_count));
    } else if (kv.key == "means") {
      shared_means = f.vectors();
      for (auto& d : s.sources) d.class_means = shared_means;
      if (!s.target.name.empty()) s.target.class_means = shared_means;
    } else if (kv.key == "samples") {
      const auto n = static_cast<std::size_t>(f.integer(1));
      for (auto& d : s.sources) d.samples = n;
      ensure_target();
      s.target.samples = n;
    } else {
      // Per-domain keys: target.<field> or source.<index>.<field>.
      DomainSpec* d = nullptr;
      std::string field;
      if (kv.key.rfind("target.", 0) == 0) {
        if (s.class_count < 2) f.fail("set class_count first");
        ensure_target();
        d = &s.target;
        field = kv.key.substr(7);
      } else if (kv.key.rfind("source.", 0) == 0) {
        const auto dot = kv.key.find('.', 7);
        long long index = 0;
        if (dot == std::string::npos || !to_long(kv.key.substr(7, dot - 7), index) || index < 0 ||
            index > 64) {
          throw ConfigError(source, kv.line, fmt::format("unknown key '{}'", kv.key));
        }
        if (s.class_count < 2) f.fail("set class_count first");
        ensure_sources(static_cast<std::size_t>(index) + 1);
        d = &s.sources[static_cast<std::size_t>(index)];
        field = kv.key.substr(dot + 1);
      } else {
        throw ConfigError(source, kv.line, fmt::format("unknown key '{}'", kv.key));
      }
      if (field == "name") {
        if (kv.value.empty() || kv.value.find_first_of("/\\ ") != std::string::npos) {
          f.fail("names must be nonempty without spaces or slashes");
        }
        d->name = kv.value;
      } else if (field == "samples") {
        d->samples = static_cast<std::size_t>(f.integer(1));
      } else if (field == "scale") {
        d->scale = f.real();
      } else if (field == "prior") {
        d->prior = f.reals();
      } else if (field == "drop_rate") {
        d->drop_rate = f.reals();
      } else if (field == "flip") {
        d->flip = f.boolean();
      } else if (field == "means") {
        d->class_means = f.vectors();
      } else if (field == "offset") {
        const auto off = f.reals();
        for (auto& m : d->class_means) {
          if (static_cast<std::size_t>(m.size()) != off.size()) f.fail("offset length differs from feature_dim");
          for (std::size_t j = 0; j < off.size(); ++j) m[static_cast<Eigen::Index>(j)] += off[j];
        }
      } else {
        throw ConfigError(source, kv.line, fmt::format("unknown key '{}'", kv.key));
      }
    }
  }
  if (s.target.name.empty()) throw ConfigError(source, 0, "spec defines no target domain");
  try {
    s.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(source, 0, e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Training configs

TrainConfig parse_train_config(const std::string& text, const std::string& source) {
  TrainConfig c;
  for (const auto& kv : parse_key_values(text, source)) {
    const FieldReader f{source, kv};
    const std::string& k = kv.key;
    if (k == "epochs") {
      c.epochs = static_cast<int>(f.integer(1));
    } else if (k == "batch_size") {
      c.batch_size = static_cast<int>(f.integer(1));
    } else if (k == "c0") {
      c.c0 = f.nonneg();
    } else if (k == "c1") {
      if (kv.value == "auto") {
        c.c1.reset();
      } else {
        c.c1 = f.nonneg();
      }
    } else if (k == "epsilon") {
      c.epsilon = f.unit();
    } else if (k == "ema_keep") {
      c.ema_keep = f.unit();
    } else if (k == "lambda_keep") {
      c.lambda_keep = f.unit();
    } else if (k == "centroid_keep") {
      c.centroid_keep = f.unit();
    } else if (k == "l1_coeff") {
      if (kv.value == "auto") {
        c.l1_coeff.reset();
      } else {
        c.l1_coeff = f.nonneg();
      }
    } else if (k == "penalty_coeff") {
      c.penalty_coeff = f.nonneg();
    } else if (k == "penalty_form") {
      if (kv.value == "squared") {
        c.penalty_form = PenaltyForm::squared;
      } else if (kv.value == "two_sided") {
        c.penalty_form = PenaltyForm::two_sided;
      } else if (kv.value == "one_sided") {
        c.penalty_form = PenaltyForm::one_sided;
      } else {
        f.fail("expected squared, two_sided or one_sided");
      }
    } else if (k == "architecture") {
      try {
        c.architecture = Architecture::preset(kv.value);
      } catch (const InvalidArgument& e) {
        throw ConfigError(source, kv.line, e.what());
      }
    } else if (k == "feature_hidden") {
      c.architecture.feature_hidden = f.widths();
    } else if (k == "latent_dim") {
      c.architecture.latent_dim = static_cast<int>(f.integer(1));
    } else if (k == "classifier_hidden") {
      c.architecture.classifier_hidden = f.widths();
    } else if (k == "critic_hidden") {
      c.architecture.critic_hidden = f.widths();
    } else if (k == "optimizer") {
      try {
        c.optimizer = OptimizerConfig::preset(kv.value);
      } catch (const InvalidArgument& e) {
        throw ConfigError(source, kv.line, e.what());
      }
    } else if (k == "learning_rate") {
      c.optimizer.learning_rate = f.real();
      if (!(c.optimizer.learning_rate > 0.0)) f.fail("must be > 0");
    } else if (k == "momentum") {
      c.optimizer.momentum = f.unit();
    } else if (k == "rho") {
      c.optimizer.rho = f.unit();
    } else if (k == "eval_every") {
      c.eval_every = static_cast<int>(f.integer(1));
    } else if (k == "critic_steps") {
      c.critic_steps = static_cast<int>(f.integer(1));
    } else if (k == "warmup_epochs") {
      c.warmup_epochs = static_cast<int>(f.integer(0));
    } else if (k == "target_label_fraction") {
      c.target_label_fraction = f.real();
      if (!(c.target_label_fraction > 0.0 && c.target_label_fraction < 1.0)) f.fail("must lie in (0,1)");
    } else if (k == "refresh_alpha") {
      c.refresh_alpha = f.boolean();
    } else if (k == "fixed_lambda") {
      c.fixed_lambda = f.boolean();
    } else if (k == "fixed_alpha") {
      c.fixed_alpha = f.boolean();
    } else {
      throw ConfigError(source, kv.line, fmt::format("unknown key '{}'", k));
    }
  }
  return c;
}

std::string format_train_config(const TrainConfig& c) {
  const char* form = c.penalty_form == PenaltyForm::squared     ? "squared"
                     : c.penalty_form == PenaltyForm::two_sided ? "two_sided"
                                                                : "one_sided";
  std::string s;
  s += fmt::format("epochs={}\nbatch_size={}\nc0={}\n", c.epochs, c.batch_size, c.c0);
  s += c.c1 ? fmt::format("c1={}\n", *c.c1) : std::string("c1=auto\n");
  s += fmt::format("epsilon={}\nema_keep={}\nlambda_keep={}\ncentroid_keep={}\n",
                   c.epsilon, c.ema_keep, c.lambda_keep, c.centroid_keep);
  s += c.l1_coeff ? fmt::format("l1_coeff={}\n", *c.l1_coeff) : std::string("l1_coeff=auto\n");
  s += fmt::format("penalty_coeff={}\npenalty_form={}\n", c.penalty_coeff, form);
  s += fmt::format("feature_hidden={}\nlatent_dim={}\nclassifier_hidden={}\ncritic_hidden={}\n",
                   join_widths(c.architecture.feature_hidden), c.architecture.latent_dim,
                   join_widths(c.architecture.classifier_hidden),
                   join_widths(c.architecture.critic_hidden));
  s += fmt::format("optimizer={}\nlearning_rate={}\nmomentum={}\nrho={}\n",
                   c.optimizer.kind == OptimizerKind::sgd_momentum ? "sgd" : "adadelta-1.0",
                   c.optimizer.learning_rate, c.optimizer.momentum, c.optimizer.rho);
  s += fmt::format("eval_every={}\ncritic_steps={}\nwarmup_epochs={}\ntarget_label_fraction={}\n",
                   c.eval_every, c.critic_steps, c.warmup_epochs, c.target_label_fraction);
  s += fmt::format("refresh_alpha={}\nfixed_lambda={}\nfixed_alpha={}\n", c.refresh_alpha,
                   c.fixed_lambda, c.fixed_alpha);
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes little-endian");

constexpr char kMagic[] = "WADN1";
constexpr std::size_t kMagicLen = 5;

struct Writer {
  std::string out;
  void u32(std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); }
  void block(const double* data, std::size_t rows, std::size_t cols) {
    u32(static_cast<std::uint32_t>(rows));
    u32(static_cast<std::uint32_t>(cols));
    out.append(reinterpret_cast<const char*>(data), rows * cols * sizeof(double));
  }
  void matrix(const Matrix& m) {
    block(m.data(), static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  }
  void vector(const Vector& v) { block(v.data(), static_cast<std::size_t>(v.size()), 1); }
  void reals(const std::vector<double>& v) { block(v.data(), v.size(), 1); }
  void mlp(const Mlp& net) {
    for (const auto& l : net.layers) {
      matrix(l.weight);
      vector(l.bias);
    }
  }
  void centroids(const CentroidSet& c) {
    matrix(c.centroids);
    std::vector<double> mask;
    for (bool p : c.present) mask.push_back(p ? 1.0 : 0.0);
    reals(mask);
  }
};

struct Reader {
  const std::string& in;
  std::size_t at = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw InvalidArgument(fmt::format("checkpoint: {} (offset {})", what, at));
  }
  std::uint32_t u32() {
    if (at + 4 > in.size()) fail("truncated");
    std::uint32_t v = 0;
    std::memcpy(&v, in.data() + at, 4);
    at += 4;
    return v;
  }
  void block(double* data, std::size_t rows, std::size_t cols, const char* what) {
    const std::uint32_t r = u32();
    const std::uint32_t c = u32();
    if (r != rows || c != cols) {
      fail(fmt::format("{} has shape {}x{}, expected {}x{}", what, r, c, rows, cols));
    }
    const std::size_t bytes = rows * cols * sizeof(double);
    if (at + bytes > in.size()) fail("truncated");
    std::memcpy(data, in.data() + at, bytes);
    at += bytes;
  }
  void matrix(Matrix& m, const char* what) {
    block(m.data(), static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()), what);
  }
  void vector(Vector& v, const char* what) { block(v.data(), static_cast<std::size_t>(v.size()), 1, what); }
  void mlp(Mlp& net, const char* what) {
    for (auto& l : net.layers) {
      matrix(l.weight, what);
      vector(l.bias, what);
    }
  }
  void centroids(CentroidSet& c) {
    matrix(c.centroids, "centroids");
    std::vector<double> mask(c.present.size());
    block(mask.data(), mask.size(), 1, "centroid mask");
    for (std::size_t y = 0; y < mask.size(); ++y) c.present[y] = mask[y] != 0.0;
  }
};

std::vector<int> widths_of(const Mlp& net) {
  std::vector<int> w{net.input_dim()};
  for (const auto& l : net.layers) w.push_back(static_cast<int>(l.weight.rows()));
  return w;
}

}  // namespace

std::string encode_checkpoint(const ModelState& state, const TaskWeights& lambda,
                              std::span<const LabelRatio> alpha) {
  const std::size_t t_count = state.source_count();
  if (lambda.size() != t_count || alpha.size() != t_count) {
    throw InvalidArgument("checkpoint: lambda and alpha must cover every source");
  }
  Writer w;
  w.out.append(kMagic, kMagicLen);
  // Counts: classes, sources, then widths of g, h and the critics.
  w.u32(static_cast<std::uint32_t>(state.class_count));
  w.u32(static_cast<std::uint32_t>(t_count));
  for (const Mlp* net : {&state.feature, &state.classifier, &state.critics.front()}) {
    const auto widths = widths_of(*net);
    w.u32(static_cast<std::uint32_t>(widths.size()));
    for (int x : widths) w.u32(static_cast<std::uint32_t>(x));
  }
  w.mlp(state.feature);
  w.mlp(state.classifier);
  for (const auto& c : state.critics) w.mlp(c);
  for (const auto& c : state.source_centroids) w.centroids(c);
  w.centroids(state.target_centroids);
  w.reals(lambda.values);
  for (const auto& a : alpha) {
    if (static_cast<int>(a.size()) != state.class_count) throw InvalidArgument("checkpoint: alpha length");
    w.reals(a.values);
  }
  return w.out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r{bytes};
  if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kMagic) != 0) {
    throw InvalidArgument("checkpoint: bad magic (expected WADN1)");
  }
  r.at = kMagicLen;
  const std::uint32_t k = r.u32();
  const std::uint32_t t_count = r.u32();
  if (k < 2 || t_count < 1 || k > 100000 || t_count > 10000) r.fail("implausible class or source count");
  std::vector<std::vector<int>> widths(3);
  for (auto& w : widths) {
    const std::uint32_t n = r.u32();
    if (n < 2 || n > 64) r.fail("implausible layer count");
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::uint32_t x = r.u32();
      if (x < 1 || x > (1u << 20)) r.fail("implausible layer width");
      w.push_back(static_cast<int>(x));
    }
  }
  const int latent = widths[0].back();
  if (widths[1].front() != latent || widths[1].back() != static_cast<int>(k) ||
      widths[2].front() != latent || widths[2].back() != 1) {
    r.fail("network shapes do not chain (g -> h, g -> critic)");
  }
  Checkpoint c;
  c.state.class_count = static_cast<int>(k);
  c.state.feature = Mlp(widths[0], 0);
  c.state.classifier = Mlp(widths[1], 0);
  for (std::uint32_t t = 0; t < t_count; ++t) c.state.critics.emplace_back(widths[2], 0);
  r.mlp(c.state.feature, "feature layer");
  r.mlp(c.state.classifier, "classifier layer");
  for (auto& critic : c.state.critics) r.mlp(critic, "critic layer");
  for (std::uint32_t t = 0; t < t_count; ++t) {
    c.state.source_centroids.push_back(CentroidSet::empty(static_cast<int>(k), latent));
    r.centroids(c.state.source_centroids.back());
  }
  c.state.target_centroids = CentroidSet::empty(static_cast<int>(k), latent);
  r.centroids(c.state.target_centroids);
  c.lambda.values.resize(t_count);
  r.block(c.lambda.values.data(), t_count, 1, "lambda");
  for (std::uint32_t t = 0; t < t_count; ++t) {
    LabelRatio a{std::vector<double>(k)};
    r.block(a.values.data(), k, 1, "alpha");
    c.alpha.push_back(std::move(a));
  }
  if (r.at != bytes.size()) r.fail("trailing bytes");
  return c;
}

void write_checkpoint(const fs::path& path, const ModelState& state, const TaskWeights& lambda,
                      std::span<const LabelRatio> alpha) {
  write_file(path, encode_checkpoint(state, lambda, alpha));
}

Checkpoint read_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------
// CSV artifacts

std::string metrics_csv_header() {
  return "# wadn metrics v1\n"
         "epoch,target_acc,total_loss,classification,explicit_cond,implicit_cond,grad_penalty,"
         "critic_loss\n";
}

std::string metrics_csv_row(const EpochReport& r) {
  const std::string acc = r.target_accuracy ? fmt::format("{:.10g}", *r.target_accuracy) : "";
  return fmt::format("{},{},{:.10g},{:.10g},{:.10g},{:.10g},{:.10g},{:.10g}\n", r.epoch, acc,
                     r.mean_loss.total, r.mean_loss.classification, r.mean_loss.explicit_cond,
                     r.mean_loss.implicit_cond, r.mean_loss.grad_penalty, r.mean_critic_loss);
}

std::string lambda_csv_header() { return "# wadn lambda v1\nepoch,source,lambda\n"; }

std::string lambda_csv_rows(const EpochReport& r) {
  std::string s;
  for (std::size_t t = 0; t < r.lambda.size(); ++t) {
    s += fmt::format("{},{},{:.10g}\n", r.epoch, t, r.lambda[t]);
  }
  return s;
}

std::string alpha_csv_header() { return "# wadn alpha v1\nepoch,source,class,alpha\n"; }

std::string alpha_csv_rows(const EpochReport& r) {
  std::string s;
  for (std::size_t t = 0; t < r.alpha.size(); ++t) {
    for (std::size_t y = 0; y < r.alpha[t].size(); ++y) {
      s += fmt::format("{},{},{},{:.10g}\n", r.epoch, t, y, r.alpha[t][y]);
    }
  }
  return s;
}

}  // namespace wadn
