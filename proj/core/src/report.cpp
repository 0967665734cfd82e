#include <algorithm>
#include <map>
#include <set>

#include "pforge/eval.hpp"

namespace pforge::eval {
namespace {

using json = nlohmann::json;

double mean_of(const std::vector<json>& records, const char* key) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : records) {
    if (r.contains(key) && r[key].is_number()) {
      sum += r[key].get<double>();
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

std::size_t count_true(const std::vector<json>& records, const char* key) {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [&](const json& r) {
    return r.contains(key) && r[key].is_boolean() && r[key].get<bool>();
  }));
}

double rate(std::size_t num, std::size_t den) { return den ? static_cast<double>(num) / static_cast<double>(den) : 0.0; }

std::string family_key(const json& v) { return v.is_null() ? "none" : std::to_string(v.get<long long>()); }

std::string csv_cell(const json& v) {
  std::string s;
  if (v.is_null()) return s;
  if (v.is_string()) {
    s = v.get<std::string>();
  } else {
    s = v.dump();
  }
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char ch : s) {
    if (ch == '"') quoted += '"';
    quoted += ch;
  }
  return quoted + "\"";
}

}  // namespace

json summarize(const std::string& experiment, const std::vector<json>& records) {
  const std::size_t n = records.size();
  if (experiment == "evasion") {
    const std::size_t evaded = count_true(records, "evaded");
    std::size_t shifted = 0;
    for (const auto& r : records) shifted += r.value("evaded", false) && r.value("attention_shift", false);
    return {{"total", n},
            {"evaded", evaded},
            {"rate", rate(evaded, n)},
            {"mean_iterations", mean_of(records, "iterations")},
            {"mean_payload_entropy", mean_of(records, "payload_entropy")},
            {"attention_shift_rate", rate(shifted, evaded)}};
  }
  if (experiment == "invariance") {
    std::size_t invariant = 0;
    for (const auto& r : records) invariant += r.value("bitwise_equal", false) && r.value("still_evading", false);
    return {{"files", n},
            {"invariance_rate", rate(invariant, n)},
            {"bitwise_rate", rate(count_true(records, "bitwise_equal"), n)},
            {"literal_rate", rate(count_true(records, "literal_evading"), n)},
            {"off_by_one_rate", rate(count_true(records, "off_by_one_evading"), n)}};
  }
  if (experiment == "transfer") {
    std::map<std::pair<std::string, std::string>, std::pair<std::size_t, std::size_t>> pairs;
    std::size_t cross = 0, cross_evaded = 0, base_evaded = 0;
    for (const auto& r : records) {
      base_evaded += r.value("baseline_evaded", false);
      if (r.value("self", false)) continue;
      ++cross;
      cross_evaded += r.value("transfer_evaded", false);
      auto& p = pairs[{family_key(r["donor_family"]), family_key(r["recipient_family"])}];
      ++p.first;
      p.second += r.value("transfer_evaded", false);
    }
    json per_pair = json::array();
    for (const auto& [key, v] : pairs) {
      per_pair.push_back({{"donor_family", key.first},
                          {"recipient_family", key.second},
                          {"n", v.first},
                          {"rate", rate(v.second, v.first)}});
    }
    return {{"pairs", n},
            {"cross_pairs", cross},
            {"transfer_rate", rate(cross_evaded, cross)},
            {"baseline_rate", rate(base_evaded, n)},
            {"per_family_pair", per_pair}};
  }
  if (experiment == "size_sweep") {
    std::map<std::size_t, std::pair<std::size_t, std::size_t>> by_size;
    for (const auto& r : records) {
      auto& s = by_size[r.at("size").get<std::size_t>()];
      ++s.first;
      s.second += r.value("evaded", false);
    }
    json sizes = json::array();
    double lo = 1.0, hi = 0.0;
    for (const auto& [size, v] : by_size) {
      const double rt = rate(v.second, v.first);
      lo = std::min(lo, rt);
      hi = std::max(hi, rt);
      sizes.push_back({{"size", size}, {"n", v.first}, {"evaded", v.second}, {"rate", rt}});
    }
    return {{"sizes", sizes}, {"spread", by_size.empty() ? 0.0 : hi - lo}};
  }
  if (experiment == "entropy") {
    return {{"files", n},
            {"mean_whole_before", mean_of(records, "whole_before")},
            {"mean_whole_after", mean_of(records, "whole_after")},
            {"mean_payload", mean_of(records, "payload_entropy")},
            {"payload_above_text_rate", rate(count_true(records, "payload_above_text"), n)},
            {"payload_above_packed_rate", rate(count_true(records, "payload_above_packed"), n)}};
  }
  throw EvalError("unknown experiment '" + experiment + "'");
}

json EvalReport::to_json() const {
  json records_json = json::array();
  for (const auto& r : records) records_json.push_back(r);
  return {{"experiment", experiment},
          {"seed", seed},
          {"config", config},
          {"aggregates", aggregates},
          {"records", records_json}};
}

std::string EvalReport::records_csv() const {
  std::set<std::string> keys;
  for (const auto& r : records) {
    for (const auto& item : r.items()) keys.insert(item.key());
  }
  std::string out;
  bool first = true;
  for (const auto& k : keys) {
    out += first ? "" : ",";
    out += k;
    first = false;
  }
  out += '\n';
  for (const auto& r : records) {
    first = true;
    for (const auto& k : keys) {
      out += first ? "" : ",";
      if (r.contains(k)) out += csv_cell(r[k]);
      first = false;
    }
    out += '\n';
  }
  return out;
}

void EvalReport::write(const std::filesystem::path& prefix) const {
  const std::string j = to_json().dump(2) + "\n";
  const std::string c = records_csv();
  auto with_ext = [&](const char* ext) {
    auto p = prefix;
    p += ext;
    return p;
  };
  write_file(with_ext(".json"), ByteView(reinterpret_cast<const std::uint8_t*>(j.data()), j.size()));
  write_file(with_ext(".csv"), ByteView(reinterpret_cast<const std::uint8_t*>(c.data()), c.size()));
}

}  // namespace pforge::eval
