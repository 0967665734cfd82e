#include "pforge/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "pforge/parallel.hpp"
#include "pforge/rng.hpp"

namespace pforge::eval {
namespace {

using json = nlohmann::json;
using attack::AttackResult;

constexpr std::uint64_t kBaselineStream = 0xBA5E;

json family_json(const std::optional<std::size_t>& f) { return f ? json(*f) : json(nullptr); }

std::size_t window_of(const model::ModelParams& params) { return static_cast<std::size_t>(params.cfg.window); }

// Source span of an end-of-file payload, in whole blocks.
std::size_t payload_first_block(ByteView bytes, const pe::InjectionRecord& inj, std::size_t window) {
  if (window == 0 || bytes.size() % window != 0) throw EvalError("file length is not a multiple of the window");
  if (inj.length == 0 || inj.file_offset + inj.length != bytes.size()) {
    throw EvalError("injection is not an end-of-file payload");
  }
  return inj.file_offset / window;
}

EvalReport finish(std::string experiment, std::vector<json> records, std::uint64_t seed, json config) {
  EvalReport r;
  r.experiment = std::move(experiment);
  r.records = std::move(records);
  r.aggregates = summarize(r.experiment, r.records);
  r.seed = seed;
  r.config = std::move(config);
  return r;
}

Bytes pad_to_window(Bytes bytes, std::size_t window) {
  bytes.resize(align_up(bytes.size(), window), 0);
  return bytes;
}

}  // namespace

double entropy(ByteView bytes) {
  if (bytes.empty()) throw EvalError("entropy of an empty byte string is undefined");
  std::array<std::size_t, 256> counts{};
  for (auto b : bytes) ++counts[b];
  const auto n = static_cast<double>(bytes.size());
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log2(p);
  }
  return std::clamp(h, 0.0, 8.0);
}

json to_json(const attack::AttackConfig& cfg) {
  return {{"norm", attack::to_string(cfg.norm)},
          {"epsilon", cfg.epsilon},
          {"target_label", cfg.target_label},
          {"max_iters", cfg.max_iters},
          {"max_outer_rounds", cfg.max_outer_rounds},
          {"distance", attack::to_string(cfg.distance)},
          {"seed", cfg.seed},
          {"normalize_l2", cfg.normalize_l2},
          {"margin", cfg.margin},
          {"route_pool_gradient", cfg.route_pool_gradient},
          {"clip_to_embedding", cfg.clip_to_embedding}};
}

EvasionRun evasion_rate(const model::ModelParams& params, std::span<const NamedFile> files,
                        const attack::AttackConfig& cfg, pe::InjectionMode mode, unsigned jobs) {
  if (files.empty()) throw EvalError("evasion_rate needs at least one file");
  EvasionRun run;
  run.attacked.resize(files.size());
  std::vector<json> records(files.size());
  parallel_for(files.size(), jobs, [&](std::size_t i) {
    const auto& f = files[i];
    auto result = attack::generate(params, f.bytes, cfg, mode);
    const auto trace = activation_trace(params, result.modified, result.injection);
    records[i] = {{"file", f.name},
                  {"family", family_json(f.family)},
                  {"k", result.payload.size()},
                  {"iterations", result.iterations},
                  {"rounds", result.rounds},
                  {"score_before", result.score_before},
                  {"score_after", result.score_after},
                  {"evaded", result.evaded},
                  {"payload_entropy", entropy(result.payload)},
                  {"attention_shift", trace.attention_shifted()}};
    run.attacked[i] = {f.name, f.family, f.bytes, std::move(result)};
  });
  json config = to_json(cfg);
  config["mode"] = pe::to_string(mode);
  run.report = finish("evasion", std::move(records), cfg.seed, std::move(config));
  return run;
}

bool ActivationTrace::attention_shifted() const {
  return std::any_of(filter_argmax.begin(), filter_argmax.end(), [&](std::size_t w) { return in_payload(w); });
}

ActivationTrace activation_trace(const model::ModelParams& params, ByteView file,
                                 const std::optional<pe::InjectionRecord>& injection) {
  const auto z = model::embed(params, file);
  const std::size_t n = z.windows(params.cfg.window);
  const auto gated = model::gated_activations(params, z.rows, 0, n);
  const auto F = static_cast<std::size_t>(params.cfg.filters);

  ActivationTrace t;
  t.mean_activation.resize(n);
  t.filter_argmax.assign(F, 0);
  for (std::size_t w = 0; w < n; ++w) {
    double sum = 0.0;
    for (std::size_t f = 0; f < F; ++f) {
      sum += gated(w, f);
      if (gated(w, f) > gated(t.filter_argmax[f], f)) t.filter_argmax[f] = w;
    }
    t.mean_activation[w] = sum / static_cast<double>(F);
  }
  if (n > 0) {
    t.argmax_window = static_cast<std::size_t>(
        std::max_element(t.mean_activation.begin(), t.mean_activation.end()) - t.mean_activation.begin());
  }
  if (injection && injection->length > 0) {
    const std::size_t c = window_of(params);
    t.payload_begin = injection->file_offset / c;
    t.payload_end = (injection->file_offset + injection->length + c - 1) / c;
  }
  return t;
}

void write_trace_csv(const ActivationTrace& trace, const std::filesystem::path& path) {
  std::string text = "window_index,mean_activation,in_payload\n";
  char line[96];
  for (std::size_t w = 0; w < trace.mean_activation.size(); ++w) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%d\n", w, trace.mean_activation[w], trace.in_payload(w) ? 1 : 0);
    text += line;
  }
  write_file(path, ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Bytes move_blocks(ByteView bytes, std::size_t window, std::size_t from, std::size_t count, std::size_t to) {
  if (window == 0 || bytes.size() % window != 0) throw EvalError("length is not a multiple of the window");
  const std::size_t n = bytes.size() / window;
  if (from + count > n || to + count > n) throw EvalError("block range out of bounds");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> moved(order.begin() + static_cast<std::ptrdiff_t>(from),
                                 order.begin() + static_cast<std::ptrdiff_t>(from + count));
  order.erase(order.begin() + static_cast<std::ptrdiff_t>(from), order.begin() + static_cast<std::ptrdiff_t>(from + count));
  order.insert(order.begin() + static_cast<std::ptrdiff_t>(to), moved.begin(), moved.end());
  Bytes out(bytes.size());
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(order[i] * window), window,
                out.begin() + static_cast<std::ptrdiff_t>(i * window));
  }
  return out;
}

Bytes relocate_aligned(ByteView file_with_payload, const pe::InjectionRecord& injection, std::size_t window,
                       std::size_t target_window) {
  const std::size_t first = payload_first_block(file_with_payload, injection, window);
  const std::size_t n = file_with_payload.size() / window;
  const std::size_t count = n - first;
  if (target_window + count > first) throw EvalError("target window overlaps the payload blocks");
  return move_blocks(file_with_payload, window, first, count, target_window);
}

Bytes relocate_literal(ByteView file_with_payload, const pe::InjectionRecord& injection, std::size_t window,
                       std::size_t a, std::size_t shift) {
  const std::size_t length = injection.file_offset;
  if (injection.file_offset + injection.length != file_with_payload.size()) {
    throw EvalError("injection is not an end-of-file payload");
  }
  const std::size_t pos = window * a + length % window + shift;
  if (pos > length) throw EvalError("literal relocation position past the original bytes");
  Bytes out;
  out.reserve(file_with_payload.size());
  out.insert(out.end(), file_with_payload.begin(), file_with_payload.begin() + static_cast<std::ptrdiff_t>(pos));
  out.insert(out.end(), file_with_payload.begin() + static_cast<std::ptrdiff_t>(length), file_with_payload.end());
  out.insert(out.end(), file_with_payload.begin() + static_cast<std::ptrdiff_t>(pos),
             file_with_payload.begin() + static_cast<std::ptrdiff_t>(length));
  return out;
}

EvalReport spatial_invariance(const model::ModelParams& params, std::span<const AttackedFile> attacked) {
  const std::size_t c = window_of(params);
  std::vector<json> records;
  for (const auto& a : attacked) {
    const auto& r = a.result;
    if (!r.evaded || r.injection.mode != pe::InjectionMode::overlay) continue;
    const std::size_t first = payload_first_block(r.modified, r.injection, c);
    const std::size_t count = r.modified.size() / c - first;
    if (first < count + 2) continue;  // fewer than three mid-file targets
    const std::size_t last = first - count;
    std::vector<std::size_t> targets = {0, last / 4, last / 2, last};
    targets.erase(std::unique(targets.begin(), targets.end()), targets.end());

    const double base = model::predict_file(params, r.modified);
    json scores = json::array(), literal = json::array(), off_by_one = json::array();
    bool bitwise = true, evading = true, literal_evading = true, off_evading = true;
    for (auto t : targets) {
      const double s = model::predict_file(params, relocate_aligned(r.modified, r.injection, c, t));
      scores.push_back(s);
      bitwise = bitwise && s == base;
      evading = evading && s < 0.5;
      const double sl = model::predict_file(params, relocate_literal(r.modified, r.injection, c, t));
      literal.push_back(sl);
      literal_evading = literal_evading && sl < 0.5;
      const double so = model::predict_file(params, relocate_literal(r.modified, r.injection, c, t, 1));
      off_by_one.push_back(so);
      off_evading = off_evading && so < 0.5;
    }
    records.push_back({{"file", a.name},
                       {"targets", targets},
                       {"score", base},
                       {"aligned_scores", scores},
                       {"bitwise_equal", bitwise},
                       {"still_evading", evading},
                       {"literal_scores", literal},
                       {"literal_evading", literal_evading},
                       {"off_by_one_scores", off_by_one},
                       {"off_by_one_evading", off_evading}});
  }
  return finish("invariance", std::move(records), 0, json::object());
}

EvalReport transfer(const model::ModelParams& params, const AttackedFile& donor, std::span<const NamedFile> recipients,
                    std::uint64_t seed) {
  const AttackedFile donors[1] = {donor};
  return transfer_matrix(params, donors, recipients, seed);
}

EvalReport transfer_matrix(const model::ModelParams& params, std::span<const AttackedFile> donors,
                           std::span<const NamedFile> recipients, std::uint64_t seed) {
  const std::size_t c = window_of(params);
  std::vector<json> records;
  std::size_t pair_index = 0;
  for (const auto& d : donors) {
    const auto& payload = d.result.payload;
    for (const auto& r : recipients) {
      const double before = model::predict_file(params, r.bytes);
      if (!model::is_malicious(before)) {
        throw attack::AttackError(attack::AttackError::Kind::NotDetected,
                                  "transfer recipient " + r.name + " is not detected as malicious");
      }
      Bytes with = r.bytes;
      with.insert(with.end(), payload.begin(), payload.end());
      const double s = model::predict_file(params, pad_to_window(std::move(with), c));

      Rng rng(mix_seed(seed, kBaselineStream + pair_index++));
      Bytes base = r.bytes;
      for (std::size_t i = 0; i < payload.size(); ++i) base.push_back(rng.byte());
      const double sb = model::predict_file(params, pad_to_window(std::move(base), c));

      records.push_back({{"donor", d.name},
                         {"donor_family", family_json(d.family)},
                         {"recipient", r.name},
                         {"recipient_family", family_json(r.family)},
                         {"self", d.name == r.name},
                         {"score_before", before},
                         {"transfer_score", s},
                         {"transfer_evaded", s < 0.5},
                         {"baseline_score", sb},
                         {"baseline_evaded", sb < 0.5}});
    }
  }
  return finish("transfer", std::move(records), seed, json::object());
}

std::vector<std::size_t> default_sweep_sizes(std::size_t window) {
  return {2 * window, 3 * window, 4 * window, 5 * window};
}

EvalReport size_sweep(const model::ModelParams& params, std::span<const NamedFile> files, std::vector<std::size_t> sizes,
                      const attack::AttackConfig& cfg, unsigned jobs) {
  if (files.empty()) throw EvalError("size_sweep needs at least one file");
  if (sizes.empty()) throw EvalError("size_sweep needs at least one size");
  const std::size_t c = window_of(params);
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  for (const auto& f : files) {
    // Throws InvalidSize before any attack runs.
    attack::payload_size_capped(f.bytes.size(), c, sizes.front());
  }

  std::vector<json> records(sizes.size() * files.size());
  parallel_for(records.size(), jobs, [&](std::size_t idx) {
    const std::size_t size = sizes[idx / files.size()];
    const auto& f = files[idx % files.size()];
    const auto result = attack::attack_with_size(params, f.bytes, cfg, size, pe::InjectionMode::overlay);
    records[idx] = {{"size", size},
                    {"file", f.name},
                    {"k", result.payload.size()},
                    {"iterations", result.iterations},
                    {"score_after", result.score_after},
                    {"evaded", result.evaded}};
  });
  json config = to_json(cfg);
  config["sizes"] = sizes;
  return finish("size_sweep", std::move(records), cfg.seed, std::move(config));
}

namespace {

json entropy_record(ByteView original, ByteView attacked, const pe::InjectionRecord& injection,
                    const std::string& name) {
  if (injection.file_offset + injection.length > attacked.size()) {
    throw EvalError("injection record lies outside the attacked file");
  }
  json rec;
  rec["file"] = name;
  rec["whole_before"] = entropy(original);
  rec["whole_after"] = entropy(attacked);
  if (injection.length > 0) {
    const double pe_h = entropy(attacked.subspan(injection.file_offset, injection.length));
    rec["payload_entropy"] = pe_h;
    rec["payload_above_text"] = pe_h > kTextEntropy;
    rec["payload_above_packed"] = pe_h > kPackedEntropy;
    // Entropy of the same byte range before injection, when it existed.
    if (injection.file_offset + injection.length <= original.size()) {
      rec["region_before"] = entropy(original.subspan(injection.file_offset, injection.length));
    } else {
      rec["region_before"] = nullptr;
    }
  } else {
    rec["payload_entropy"] = nullptr;
    rec["payload_above_text"] = false;
    rec["payload_above_packed"] = false;
    rec["region_before"] = nullptr;
  }
  rec["whole_after_above_packed"] = rec["whole_after"].get<double>() > kPackedEntropy;

  json sections = json::array();
  if (pe::looks_like_pe(original) && pe::looks_like_pe(attacked)) {
    try {
      const auto before = pe::parse(original);
      const auto after = pe::parse(attacked);
      for (std::size_t i = 0; i < after.sections.size(); ++i) {
        const auto& s = after.sections[i];
        json entry = {{"name", s.header.name_string()}};
        entry["after"] = s.data.empty() ? json(nullptr) : json(entropy(s.data));
        entry["before"] = (i < before.sections.size() && !before.sections[i].data.empty())
                              ? json(entropy(before.sections[i].data))
                              : json(nullptr);
        sections.push_back(entry);
      }
    } catch (const pe::PeError&) {
      // Not structurally a PE; whole-file figures only.
    }
  }
  rec["sections"] = sections;
  return rec;
}

}  // namespace

EvalReport entropy_report(ByteView original, ByteView attacked, const pe::InjectionRecord& injection,
                          const std::string& name) {
  return finish("entropy", {entropy_record(original, attacked, injection, name)}, 0,
                {{"text_threshold", kTextEntropy}, {"packed_threshold", kPackedEntropy}});
}

EvalReport entropy_suite(std::span<const AttackedFile> attacked) {
  std::vector<json> records;
  records.reserve(attacked.size());
  for (const auto& a : attacked) {
    records.push_back(entropy_record(a.original, a.result.modified, a.result.injection, a.name));
  }
  return finish("entropy", std::move(records), 0,
                {{"text_threshold", kTextEntropy}, {"packed_threshold", kPackedEntropy}});
}

}  // namespace pforge::eval
