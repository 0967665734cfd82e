#include "pforge_cli/run_config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

namespace pforge::cli {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw UsageError("'" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw UsageError("'" + key + "' expects a number, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UsageError("'" + key + "' expects a boolean, got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", [](RunConfig& c, auto& k, auto& v) { c.seed = parse_int<std::uint64_t>(k, v); }},
      {"checkpoint", [](RunConfig& c, auto&, auto& v) { c.checkpoint = v; }},
      {"corpus", [](RunConfig& c, auto&, auto& v) { c.corpus = v; }},
      {"out", [](RunConfig& c, auto&, auto& v) { c.out = v; }},
      {"payload", [](RunConfig& c, auto&, auto& v) { c.payload = v; }},
      {"split", [](RunConfig& c, auto& k, auto& v) {
         if (v != "train" && v != "val" && v != "test" && v != "all") {
           throw UsageError("'" + k + "' must be train, val, test or all");
         }
         c.split = v;
       }},
      {"limit", [](RunConfig& c, auto& k, auto& v) { c.limit = parse_int<std::size_t>(k, v); }},
      {"donors", [](RunConfig& c, auto& k, auto& v) { c.donors = parse_int<std::size_t>(k, v); }},
      {"sizes", [](RunConfig& c, auto& k, auto& v) {
         c.sizes.clear();
         std::stringstream ss(v);
         for (std::string item; std::getline(ss, item, ',');) {
           c.sizes.push_back(parse_int<std::size_t>(k, trim(item)));
         }
       }},
      {"jobs", [](RunConfig& c, auto& k, auto& v) {
         c.jobs = parse_int<unsigned>(k, v);
         if (c.jobs == 0) throw UsageError("'jobs' must be >= 1");
       }},
      {"trace", [](RunConfig& c, auto& k, auto& v) { c.trace = parse_bool(k, v); }},
      {"embed_dim", [](RunConfig& c, auto& k, auto& v) { c.model.embed_dim = parse_int<int>(k, v); }},
      {"window", [](RunConfig& c, auto& k, auto& v) { c.model.window = parse_int<int>(k, v); }},
      {"filters", [](RunConfig& c, auto& k, auto& v) { c.model.filters = parse_int<int>(k, v); }},
      {"hidden", [](RunConfig& c, auto& k, auto& v) { c.model.hidden = parse_int<int>(k, v); }},
      {"lr", [](RunConfig& c, auto& k, auto& v) { c.hyper.lr = parse_real(k, v); }},
      {"batch", [](RunConfig& c, auto& k, auto& v) { c.hyper.batch = parse_int<std::size_t>(k, v); }},
      {"max_epochs", [](RunConfig& c, auto& k, auto& v) { c.hyper.max_epochs = parse_int<std::size_t>(k, v); }},
      {"target_val_acc", [](RunConfig& c, auto& k, auto& v) { c.hyper.target_val_acc = parse_real(k, v); }},
      {"n_benign", [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.n_benign = parse_int<std::size_t>(k, v); }},
      {"n_malicious",
       [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.n_malicious = parse_int<std::size_t>(k, v); }},
      {"families", [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.families = parse_int<std::size_t>(k, v); }},
      {"min_length",
       [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.length_range.min = parse_int<std::size_t>(k, v); }},
      {"max_length",
       [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.length_range.max = parse_int<std::size_t>(k, v); }},
      {"motifs_per_family",
       [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.motifs_per_family = parse_int<std::size_t>(k, v); }},
      {"motif_len_min",
       [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.motif_len_range.min = parse_int<std::size_t>(k, v); }},
      {"motif_len_max",
       [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.motif_len_range.max = parse_int<std::size_t>(k, v); }},
      {"plants_min",
       [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.plant_count_range.min = parse_int<std::size_t>(k, v); }},
      {"plants_max",
       [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.plant_count_range.max = parse_int<std::size_t>(k, v); }},
      {"benign_markers",
       [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.benign_markers = parse_int<std::size_t>(k, v); }},
      {"marker_len_min",
       [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.marker_len_range.min = parse_int<std::size_t>(k, v); }},
      {"marker_len_max",
       [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.marker_len_range.max = parse_int<std::size_t>(k, v); }},
      {"wrap_pe", [](RunConfig& c, auto& k, auto& v) { c.corpus_spec.wrap_pe = parse_bool(k, v); }},
      {"train_ratio", [](RunConfig& c, auto& k, auto& v) { c.split_ratios[0] = parse_real(k, v); }},
      {"val_ratio", [](RunConfig& c, auto& k, auto& v) { c.split_ratios[1] = parse_real(k, v); }},
      {"test_ratio", [](RunConfig& c, auto& k, auto& v) { c.split_ratios[2] = parse_real(k, v); }},
      {"norm", [](RunConfig& c, auto&, auto& v) {
         try {
           c.attack.norm = attack::parse_norm(v);
         } catch (const attack::AttackError& e) {
           throw UsageError(e.what());
         }
       }},
      {"epsilon", [](RunConfig& c, auto& k, auto& v) { c.epsilon = parse_real(k, v); }},
      {"max_iters", [](RunConfig& c, auto& k, auto& v) { c.attack.max_iters = parse_int<std::size_t>(k, v); }},
      {"max_outer_rounds",
       [](RunConfig& c, auto& k, auto& v) { c.attack.max_outer_rounds = parse_int<std::size_t>(k, v); }},
      {"distance", [](RunConfig& c, auto&, auto& v) {
         try {
           c.attack.distance = attack::parse_distance(v);
         } catch (const attack::AttackError& e) {
           throw UsageError(e.what());
         }
       }},
      {"normalize_l2", [](RunConfig& c, auto& k, auto& v) { c.attack.normalize_l2 = parse_bool(k, v); }},
      {"margin", [](RunConfig& c, auto& k, auto& v) { c.attack.margin = parse_real(k, v); }},
      {"route_pool_gradient",
       [](RunConfig& c, auto& k, auto& v) { c.attack.route_pool_gradient = parse_bool(k, v); }},
      {"clip_to_embedding", [](RunConfig& c, auto& k, auto& v) { c.attack.clip_to_embedding = parse_bool(k, v); }},
      {"mode", [](RunConfig& c, auto&, auto& v) {
         try {
           c.mode = pe::parse_injection_mode(v);
         } catch (const pe::PeError& e) {
           throw UsageError(e.what());
         }
       }},
  };
  return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& table = setters();
  const auto it = table.find(key);
  if (it == table.end()) throw UsageError("unknown setting '" + key + "'");
  it->second(*this, key, value);
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : setters()) out.push_back(k);
  return out;
}

void RunConfig::resolve() {
  try {
    model.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  corpus_spec.seed = seed;
  corpus_spec.window = static_cast<std::size_t>(model.window);
  hyper.seed = seed;
  hyper.jobs = jobs;
  attack.seed = seed;
  attack.epsilon = epsilon.value_or(attack::AttackConfig::default_epsilon(attack.norm));
  try {
    attack.validate();
  } catch (const attack::AttackError& e) {
    throw UsageError(e.what());
  }
}

nlohmann::json RunConfig::to_json() const {
  return {{"seed", seed},
          {"checkpoint", checkpoint},
          {"corpus", corpus},
          {"out", out},
          {"payload", payload},
          {"split", split},
          {"limit", limit},
          {"donors", donors},
          {"sizes", sizes},
          {"jobs", jobs},
          {"trace", trace},
          {"model",
           {{"embed_dim", model.embed_dim},
            {"window", model.window},
            {"filters", model.filters},
            {"hidden", model.hidden},
            {"pad_byte", model.pad_byte}}},
          {"train",
           {{"lr", hyper.lr},
            {"batch", hyper.batch},
            {"max_epochs", hyper.max_epochs},
            {"target_val_acc", hyper.target_val_acc}}},
          {"corpus_spec",
           {{"n_benign", corpus_spec.n_benign},
            {"n_malicious", corpus_spec.n_malicious},
            {"families", corpus_spec.families},
            {"min_length", corpus_spec.length_range.min},
            {"max_length", corpus_spec.length_range.max},
            {"motifs_per_family", corpus_spec.motifs_per_family},
            {"motif_len", {corpus_spec.motif_len_range.min, corpus_spec.motif_len_range.max}},
            {"plants", {corpus_spec.plant_count_range.min, corpus_spec.plant_count_range.max}},
            {"benign_markers", corpus_spec.benign_markers},
            {"marker_len", {corpus_spec.marker_len_range.min, corpus_spec.marker_len_range.max}},
            {"wrap_pe", corpus_spec.wrap_pe},
            {"split_ratios", split_ratios}}},
          {"attack",
           {{"norm", attack::to_string(attack.norm)},
            {"epsilon", attack.epsilon},
            {"max_iters", attack.max_iters},
            {"max_outer_rounds", attack.max_outer_rounds},
            {"distance", attack::to_string(attack.distance)},
            {"normalize_l2", attack.normalize_l2},
            {"margin", attack.margin},
            {"route_pool_gradient", attack.route_pool_gradient},
            {"clip_to_embedding", attack.clip_to_embedding}}},
          {"mode", pe::to_string(mode)}};
}

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text,
                                                                   const std::string& origin) {
  std::vector<std::pair<std::string, std::string>> out;
  std::stringstream ss(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(ss, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(origin + ":" + std::to_string(line_no) + ": expected key=value");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw UsageError(origin + ":" + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path) {
  Bytes raw;
  try {
    raw = read_file(path);
  } catch (const IoError& e) {
    throw UsageError(std::string("cannot read config file: ") + e.what());
  }
  return parse_config_text(std::string(raw.begin(), raw.end()), path.string());
}

}  // namespace pforge::cli
