#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "kanet/encoder.hpp"
#include "kanet/ipel.hpp"
#include "kanet/protocol.hpp"

namespace kanet {

/// Every knob of an experiment. Defaults are the full-scale training recipe
/// (20-way 10-shot episodes, 15 queries, 128 pseudo-old test samples, 200
/// tasks x 50 epochs, lr 0.03 cosine-annealed, alpha 16, loss weights 1.5/2.0,
/// CIFAR100-style 60 + 8x5 split); see configs/desk.cfg for a laptop-sized run.
struct RunConfig {
  EncoderConfig encoder{};
  IpelConfig ipel{};
  SyntheticConfig synthetic{100, 500, 100, 3, 32, 1.0, 0.5, 0};
  SplitConfig split = SplitConfig::cifar100();

  std::string dataset = "synthetic";  // or "manifest"
  std::string manifest;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::string checkpoint;
  bool baseline = false;
  bool no_library = false;
  std::optional<std::size_t> ks;
  std::optional<std::size_t> kf;

  // Component seeds are derived from `seed` so one flag reseeds a whole run.
  std::uint64_t data_seed() const { return seed; }
  std::uint64_t encoder_seed() const { return seed + 1000; }
  std::uint64_t fusion_seed() const { return seed + 2000; }
  std::uint64_t ipel_seed() const { return seed + 3000; }
  std::uint64_t split_seed() const { return seed + 4000; }

  /// Encoder config with the KS/KF overrides applied: KS is the last layer of
  /// the early stage, KF the last layer before the fusion block.
  EncoderConfig effective_encoder() const {
    EncoderConfig e = encoder;
    e.seed = encoder_seed();
    const std::size_t total = e.total_layers();
    const std::size_t k_s = ks.value_or(e.n_early);
    const std::size_t k_f = kf.value_or(e.n_early + e.n_middle);
    if (k_s < 1 || k_f <= k_s || k_f >= total)
      throw ConfigError("config: need 1 <= ks < kf < total layers (" + std::to_string(total) + "), got ks=" +
                        std::to_string(k_s) + " kf=" + std::to_string(k_f));
    e.n_early = k_s;
    e.n_middle = k_f - k_s;
    e.n_post = total - k_f;
    return e;
  }

  SyntheticConfig effective_synthetic() const {
    SyntheticConfig s = synthetic;
    s.seed = data_seed();
    s.channels = encoder.channels;
    s.image_size = encoder.image_size;
    return s;
  }

  SplitConfig effective_split() const {
    SplitConfig s = split;
    s.seed = split_seed();
    return s;
  }

  IpelConfig effective_ipel() const {
    IpelConfig i = ipel;
    i.seed = ipel_seed();
    return i;
  }

  void validate() const {
    effective_encoder().validate();
    ipel.validate();
    split.validate();
    if (dataset == "synthetic") {
      effective_synthetic().validate();
      if (synthetic.num_classes < split.total_classes())
        throw ConfigError("config: num_classes (" + std::to_string(synthetic.num_classes) + ") < classes needed by split (" +
                          std::to_string(split.total_classes()) + ")");
    } else if (dataset == "manifest") {
      if (manifest.empty()) throw ConfigError("config: dataset=manifest needs a manifest path");
    } else {
      throw ConfigError("config: unknown dataset '" + dataset + "'");
    }
    if (out_dir.empty()) throw ConfigError("config: out_dir must not be empty");
    if (ipel.way >= split.base_classes && ipel.pseudo_old_test > 0)
      throw ConfigError("config: way must leave pseudo-old classes when pseudo_old_test > 0");
  }

  /// Apply one `key=value` setting.
  void set(std::string_view key, std::string_view value);

  /// key = value lines; `#` starts a comment.
  void load_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto sv = detail::trim(line);
      if (sv.empty()) continue;
      const auto eq = sv.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
      try {
        set(detail::trim(sv.substr(0, eq)), detail::trim(sv.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  /// Apply `--key=value` (or `key=value`) overrides in order.
  void apply_overrides(const std::vector<std::string>& args) {
    for (const auto& arg : args) {
      std::string_view sv = arg;
      if (sv.starts_with("--")) sv.remove_prefix(2);
      const auto eq = sv.find('=');
      if (eq == std::string_view::npos) throw ConfigError("config: override '" + arg + "' is not --key=value");
      std::string key(sv.substr(0, eq));
      std::replace(key.begin(), key.end(), '-', '_');
      set(key, sv.substr(eq + 1));
    }
  }

  /// Canonical key = value dump, loadable by load_file.
  std::string to_text() const;
};

namespace detail {

template <class N>
N parse_number(std::string_view key, std::string_view text) {
  N v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size())
    throw ConfigError("config: bad value '" + std::string(text) + "' for " + std::string(key));
  return v;
}

inline bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("config: bad boolean '" + std::string(text) + "' for " + std::string(key));
}

struct RunConfigField {
  std::function<void(RunConfig&, std::string_view, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class N>
RunConfigField number_field(N RunConfig::*outer) {
  return {[outer](RunConfig& c, std::string_view k, std::string_view v) { c.*outer = parse_number<N>(k, v); },
          [outer](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<N>) return format_double(c.*outer);
            else return std::to_string(c.*outer);
          }};
}

template <class S, class N>
RunConfigField nested_field(S RunConfig::*outer, N S::*inner) {
  return {[outer, inner](RunConfig& c, std::string_view k, std::string_view v) {
            (c.*outer).*inner = parse_number<N>(k, v);
          },
          [outer, inner](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<N>) return format_double((c.*outer).*inner);
            else return std::to_string((c.*outer).*inner);
          }};
}

inline const std::map<std::string, RunConfigField, std::less<>>& run_config_fields() {
  static const std::map<std::string, RunConfigField, std::less<>> fields = [] {
    std::map<std::string, RunConfigField, std::less<>> f;
    f["image_size"] = nested_field(&RunConfig::encoder, &EncoderConfig::image_size);
    f["patch_size"] = nested_field(&RunConfig::encoder, &EncoderConfig::patch_size);
    f["channels"] = nested_field(&RunConfig::encoder, &EncoderConfig::channels);
    f["embed_dim"] = nested_field(&RunConfig::encoder, &EncoderConfig::embed_dim);
    f["num_heads"] = nested_field(&RunConfig::encoder, &EncoderConfig::num_heads);
    f["n_early"] = nested_field(&RunConfig::encoder, &EncoderConfig::n_early);
    f["n_middle"] = nested_field(&RunConfig::encoder, &EncoderConfig::n_middle);
    f["n_post"] = nested_field(&RunConfig::encoder, &EncoderConfig::n_post);
    f["way"] = nested_field(&RunConfig::ipel, &IpelConfig::way);
    f["shot"] = nested_field(&RunConfig::ipel, &IpelConfig::shot);
    f["query_per_class"] = nested_field(&RunConfig::ipel, &IpelConfig::query_per_class);
    f["pseudo_old_test"] = nested_field(&RunConfig::ipel, &IpelConfig::pseudo_old_test);
    f["tasks_per_epoch"] = nested_field(&RunConfig::ipel, &IpelConfig::tasks_per_epoch);
    f["epochs"] = nested_field(&RunConfig::ipel, &IpelConfig::epochs);
    f["lr0"] = nested_field(&RunConfig::ipel, &IpelConfig::lr0);
    f["alpha"] = nested_field(&RunConfig::ipel, &IpelConfig::alpha);
    f["lambda_adapt"] = nested_field(&RunConfig::ipel, &IpelConfig::lambda_adapt);
    f["lambda_balance"] = nested_field(&RunConfig::ipel, &IpelConfig::lambda_balance);
    f["num_classes"] = nested_field(&RunConfig::synthetic, &SyntheticConfig::num_classes);
    f["train_per_class"] = nested_field(&RunConfig::synthetic, &SyntheticConfig::train_per_class);
    f["test_per_class"] = nested_field(&RunConfig::synthetic, &SyntheticConfig::test_per_class);
    f["sigma_between"] = nested_field(&RunConfig::synthetic, &SyntheticConfig::sigma_between);
    f["sigma_within"] = nested_field(&RunConfig::synthetic, &SyntheticConfig::sigma_within);
    f["base_classes"] = nested_field(&RunConfig::split, &SplitConfig::base_classes);
    f["incremental_sessions"] = nested_field(&RunConfig::split, &SplitConfig::incremental_sessions);
    f["ways_per_session"] = nested_field(&RunConfig::split, &SplitConfig::ways_per_session);
    f["shots"] = nested_field(&RunConfig::split, &SplitConfig::shots);
    f["seed"] = number_field(&RunConfig::seed);
    f["dataset"] = {[](RunConfig& c, std::string_view, std::string_view v) { c.dataset = v; },
                    [](const RunConfig& c) { return c.dataset; }};
    f["manifest"] = {[](RunConfig& c, std::string_view, std::string_view v) { c.manifest = v; },
                     [](const RunConfig& c) { return c.manifest; }};
    f["out_dir"] = {[](RunConfig& c, std::string_view, std::string_view v) { c.out_dir = v; },
                    [](const RunConfig& c) { return c.out_dir; }};
    f["checkpoint"] = {[](RunConfig& c, std::string_view, std::string_view v) { c.checkpoint = v; },
                       [](const RunConfig& c) { return c.checkpoint; }};
    f["baseline"] = {[](RunConfig& c, std::string_view k, std::string_view v) { c.baseline = parse_bool(k, v); },
                     [](const RunConfig& c) { return std::string(c.baseline ? "true" : "false"); }};
    f["no_library"] = {[](RunConfig& c, std::string_view k, std::string_view v) { c.no_library = parse_bool(k, v); },
                       [](const RunConfig& c) { return std::string(c.no_library ? "true" : "false"); }};
    f["ks"] = {[](RunConfig& c, std::string_view k, std::string_view v) { c.ks = parse_number<std::size_t>(k, v); },
               [](const RunConfig& c) { return c.ks ? std::to_string(*c.ks) : std::string(); }};
    f["kf"] = {[](RunConfig& c, std::string_view k, std::string_view v) { c.kf = parse_number<std::size_t>(k, v); },
               [](const RunConfig& c) { return c.kf ? std::to_string(*c.kf) : std::string(); }};
    f["split_preset"] = {[](RunConfig& c, std::string_view, std::string_view v) {
                           if (v == "cifar100") c.split = SplitConfig::cifar100();
                           else if (v == "cub200") c.split = SplitConfig::cub200();
                           else throw ConfigError("config: unknown split_preset '" + std::string(v) + "'");
                         },
                         {}};
    return f;
  }();
  return fields;
}

}  // namespace detail

inline void RunConfig::set(std::string_view key, std::string_view value) {
  const auto& fields = detail::run_config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("config: unknown key '" + std::string(key) + "'");
  it->second.set(*this, key, value);
}

inline std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [key, field] : detail::run_config_fields()) {
    if (!field.get) continue;
    const auto v = field.get(*this);
    if (v.empty() && (key == "ks" || key == "kf" || key == "manifest" || key == "checkpoint")) continue;
    out += key + " = " + v + "\n";
  }
  return out;
}

}  // namespace kanet
