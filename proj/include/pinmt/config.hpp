#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pinmt {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Flat key=value configuration with a fixed key set. Every key has a
/// default, so the resolved form always lists all of them.
class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"task", "train"},
        {"seed", "1"},
        {"precision", "float"},
        {"direction", "fwd"},
        // synthetic corpus
        {"data.seed", "1"},
        {"data.frequent_words", "80"},
        {"data.rare_words", "30"},
        {"data.branching", "3"},
        {"data.min_len", "4"},
        {"data.max_len", "10"},
        {"data.reorder", "reverse"},
        {"data.pairs", "2400"},
        {"data.monolingual", "50000"},
        {"data.alias_rate_mono", "0.5"},
        {"data.alias_rate_eval", "0.5"},
        {"data.rare_trace", "1"},
        // model
        {"converter", "vanilla"},
        {"fusion", "none"},
        {"alignment.kind", "none"},
        {"alignment.site", "decoder"},
        {"alignment.alpha", "500"},
        {"alignment.sign_mode", "maximize_alignment"},
        {"alignment.alpha_norm", "tokens"},
        {"alignment.plm_final_layer", "false"},
        {"d_model", "64"},
        {"d_plm", "96"},
        {"heads", "4"},
        {"plm.heads", "4"},
        {"ffn", "256"},
        {"plm.ffn", "192"},
        {"layers.enc", "2"},
        {"layers.dec", "2"},
        {"layers.plm", "4"},
        {"plm.include_embedding", "false"},
        {"max_len", "64"},
        {"dropout", "0.1"},
        {"label_smoothing", "0.1"},
        {"keep_prob", "0.5"},
        // optimisation
        {"rho", "0.01"},
        {"lr", "4e-4"},
        {"warmup", "400"},
        {"beta1", "0.9"},
        {"beta2", "0.98"},
        {"steps", "1500"},
        {"max_tokens", "512"},
        {"accumulate", "1"},
        {"valid_every", "0"},
        {"dual.phase1_steps", "1000"},
        {"dual.phase2_steps", "500"},
        {"plm.steps", "2000"},
        {"plm.lr", "1e-3"},
        {"plm.warmup", "200"},
        {"plm.batch", "64"},
        {"plm.mask_rate", "0.15"},
        // decoding and evaluation
        {"beam.width", "4"},
        {"beam.penalty", "0.6"},
        {"eval.split", "test"},
        // paths, relative ones resolved under the output root
        {"paths.out", "pinmt_out"},
        {"paths.data", "data"},
        {"paths.plm", "plm.ckpt"},
        {"paths.ckpt", "model.ckpt"},
        {"paths.results", "results.csv"},
    };
    return d;
  }

  static bool known(const std::string& key) { return defaults().count(key) != 0; }

  /// Grid keys take the form grid.<key> with a comma-separated value list.
  static bool is_grid_key(const std::string& key) {
    return key == "grid.seeds" || (key.rfind("grid.", 0) == 0 && known(key.substr(5)));
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key) && !is_grid_key(key)) throw ConfigError("unknown config key '" + key + "'");
    if (key.rfind("grid.", 0) == 0)
      grid_[key.substr(5)] = value;
    else
      values_[key] = value;
  }

  /// Parses "key=value" lines; '#' starts a comment.
  void parse(const std::string& text, const std::string& origin = "config") {
    std::istringstream in(text);
    std::string line;
    for (int n = 1; std::getline(in, line); ++n) {
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      const auto trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(n) + ": expected key=value");
      set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
  }

  void parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    parse(ss.str(), path);
  }

  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::string str(const std::string& key) const { return get(key); }

  double num(const std::string& key) const {
    const auto& v = get(key);
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
  }

  std::size_t count(const std::string& key) const {
    const double x = num(key);
    if (x < 0 || x != static_cast<double>(static_cast<std::size_t>(x)))
      throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + get(key) + "'");
    return static_cast<std::size_t>(x);
  }

  bool flag(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "' expects true or false, got '" + v + "'");
  }

  const std::map<std::string, std::string>& values() const { return values_; }
  const std::map<std::string, std::string>& grid() const { return grid_; }

  /// Every key with its effective value, one per line, sorted.
  std::string resolved() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  /// FNV-1a over the resolved text, as 16 hex digits.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : resolved()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, ',')) {
      cur = trim(cur);
      if (!cur.empty()) out.push_back(cur);
    }
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> grid_;
};

}  // namespace pinmt
