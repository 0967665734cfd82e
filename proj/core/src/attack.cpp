#include "pforge/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "pforge/rng.hpp"

namespace pforge::attack {
namespace {

using model::Matrix;
using model::ModelParams;

constexpr std::uint64_t kPayloadStream = 0xA77AC;

// Where the payload lives in the candidate file, plus how to put it there.
class Placement {
 public:
  Placement(ByteView file, pe::InjectionMode mode, std::size_t k, std::size_t window)
      : file_(file.begin(), file.end()), mode_(mode) {
    if (mode_ == pe::InjectionMode::overlay) return;
    layout_ = pe::parse(file_);
    if (mode_ == pe::InjectionMode::new_section) return;
    for (const auto& r : pe::find_slack(*layout_)) {
      if (r.length < k) break;  // sorted largest first
      region_ = r;
      // Prefer a window-aligned start so the payload fills whole windows.
      const std::size_t aligned = align_up(r.file_offset, window) - r.file_offset;
      offset_in_region_ = aligned + k <= r.length ? aligned : 0;
      break;
    }
    if (!region_) {
      throw AttackError(AttackError::Kind::SlackTooSmall,
                        "no slack region can hold a " + std::to_string(k) + "-byte payload");
    }
  }

  pe::InjectedBytes inject(ByteView payload) const {
    switch (mode_) {
      case pe::InjectionMode::overlay:
        return pe::append_overlay(file_, payload);
      case pe::InjectionMode::new_section: {
        auto r = pe::append_section(*layout_, payload);
        return {pe::serialize(r.layout), r.record};
      }
      case pe::InjectionMode::slack: {
        auto r = pe::inject_slack(*layout_, payload, *region_, offset_in_region_);
        return {pe::serialize(r.layout), r.record};
      }
    }
    throw Error("unreachable injection mode");
  }

 private:
  Bytes file_;
  pe::InjectionMode mode_;
  std::optional<pe::PeLayout> layout_;
  std::optional<pe::SlackRegion> region_;
  std::size_t offset_in_region_ = 0;
};

// Rewrites the pooled argmax of every filter whose maximum sits outside the
// payload windows [w0, w1) and whose increase would lower the loss, so that
// backward() sends that filter's gradient into the payload's best window.
// Pooled values, and therefore the head's gradients, are left untouched.
void route_to_payload(const ModelParams& params, model::ForwardCache& cache, const model::PoolState& payload_pool,
                      std::size_t w0, std::size_t w1, int label) {
  const auto F = static_cast<std::size_t>(params.cfg.filters);
  const auto H = static_cast<std::size_t>(params.cfg.hidden);
  const double dlogit = cache.score - static_cast<double>(label);
  for (std::size_t f = 0; f < F; ++f) {
    if (cache.pool.window[f] >= w0 && cache.pool.window[f] < w1) continue;
    double dm = 0.0;
    for (std::size_t h = 0; h < H; ++h) {
      if (cache.hidden_pre[h] > 0.0) dm += params.fc_w(h, f) * dlogit * params.out_w[h];
    }
    if (!(dm < 0.0)) continue;
    cache.pool.window[f] = payload_pool.window[f];
    cache.pool.pre_a[f] = payload_pool.pre_a[f];
    cache.pool.pre_b[f] = payload_pool.pre_b[f];
    const auto src = payload_pool.input.row(f);
    std::copy(src.begin(), src.end(), cache.pool.input.row(f).begin());
  }
}

AttackResult run(const ModelParams& params, ByteView file, const AttackConfig& cfg, pe::InjectionMode mode,
                 std::size_t k) {
  cfg.validate();
  const auto c = static_cast<std::size_t>(params.cfg.window);
  const auto D = static_cast<std::size_t>(params.cfg.embed_dim);

  AttackResult result;
  result.score_before = model::predict_file(params, file);
  if (!model::is_malicious(result.score_before)) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "file is not detected as malicious (score %.6f)", result.score_before);
    throw AttackError(AttackError::Kind::NotDetected, buf);
  }

  const Placement placement(file, mode, k, c);
  const Bytes initial = init_payload(k, cfg.seed);
  auto candidate = placement.inject(initial);
  const std::size_t off = candidate.record.file_offset;

  auto z = model::embed(params, candidate.bytes);
  const std::size_t n_windows = z.windows(params.cfg.window);
  const std::size_t w0 = off / c;
  const std::size_t w1 = (off + k + c - 1) / c;

  // Windows outside [w0, w1) never change; pool them once.
  model::PoolState fixed = model::pool_windows(params, z.rows, 0, w0);
  model::merge_pool(fixed, model::pool_windows(params, z.rows, w1, n_windows - w1));

  const std::span<double> payload_rows(z.rows.data.data() + off * D, k * D);
  std::vector<double> grad(k * D);

  model::PoolState payload_pool;
  auto score_block = [&] {
    payload_pool = model::pool_windows(params, z.rows, w0, w1 - w0);
    model::PoolState pool = fixed;
    model::merge_pool(pool, payload_pool);
    return model::finish_forward(params, std::move(pool), n_windows);
  };

  const EmbeddingBox box = embedding_box(params);
  const double threshold = 0.5 - cfg.margin;
  Bytes payload = initial;
  for (std::size_t round = 0; round < cfg.max_outer_rounds; ++round) {
    // Later rounds push the continuous score further below the threshold so
    // that snapping to bytes is less likely to undo the evasion.
    const double inner_threshold = threshold * std::ldexp(1.0, -static_cast<int>(round));
    for (std::size_t it = 0; it < cfg.max_iters; ++it) {
      auto cache = score_block();
      result.trace.push_back(cache.score);
      if (cache.score <= inner_threshold) break;
      if (cfg.route_pool_gradient) route_to_payload(params, cache, payload_pool, w0, w1, cfg.target_label);
      const auto back = model::backward(params, cache, cfg.target_label);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (const auto& wg : back.input) {
        const std::size_t row0 = wg.window * c;
        for (std::size_t j = 0; j < c; ++j) {
          const std::size_t r = row0 + j;
          if (r < off || r >= off + k) continue;
          std::copy_n(wg.values.data() + j * D, D, grad.data() + (r - off) * D);
        }
      }
      perturb_step(payload_rows, grad, cfg);
      if (cfg.clip_to_embedding) clip_to_box(payload_rows, box);
      ++result.iterations;
    }
    ++result.rounds;

    for (std::size_t i = 0; i < k; ++i) {
      payload[i] = nearest_byte(params, std::span<const double>(payload_rows.data() + i * D, D), cfg.distance);
    }
    std::copy(payload.begin(), payload.end(), candidate.bytes.begin() + static_cast<std::ptrdiff_t>(off));
    if (model::predict_file(params, candidate.bytes) < threshold) break;
  }

  auto final_file = placement.inject(payload);
  result.payload = std::move(payload);
  result.injection = final_file.record;
  result.modified = std::move(final_file.bytes);
  result.score_after = model::predict_file(params, result.modified);
  result.evaded = result.score_after < 0.5;
  return result;
}

}  // namespace

std::string to_string(Norm n) { return n == Norm::inf ? "inf" : "two"; }
std::string to_string(Distance d) { return d == Distance::euclidean ? "euclidean" : "cosine"; }

Norm parse_norm(std::string_view text) {
  if (text == "inf") return Norm::inf;
  if (text == "two" || text == "2") return Norm::two;
  throw AttackError(AttackError::Kind::InvalidConfig, "unknown norm '" + std::string(text) + "'");
}

Distance parse_distance(std::string_view text) {
  if (text == "euclidean") return Distance::euclidean;
  if (text == "cosine") return Distance::cosine;
  throw AttackError(AttackError::Kind::InvalidConfig, "unknown distance '" + std::string(text) + "'");
}

void AttackConfig::validate() const {
  using K = AttackError::Kind;
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw AttackError(K::InvalidConfig, "epsilon must be > 0");
  if (max_iters < 1) throw AttackError(K::InvalidConfig, "max_iters must be >= 1");
  if (max_outer_rounds < 1) throw AttackError(K::InvalidConfig, "max_outer_rounds must be >= 1");
  if (target_label != 0 && target_label != 1) throw AttackError(K::InvalidConfig, "target label must be 0 or 1");
  if (!(margin >= 0.0 && margin < 0.5)) throw AttackError(K::InvalidConfig, "margin must be in [0, 0.5)");
}

std::size_t payload_size(std::size_t length, std::size_t window) {
  if (window < 2) throw AttackError(AttackError::Kind::InvalidSize, "window must be >= 2");
  return window + (window - length % window);
}

std::size_t payload_size_capped(std::size_t length, std::size_t window, std::size_t k_max) {
  const std::size_t minimum = payload_size(length, window);
  if (k_max < minimum) {
    throw AttackError(AttackError::Kind::InvalidSize, "maximum payload size " + std::to_string(k_max) +
                                                          " is below the minimum " + std::to_string(minimum));
  }
  return k_max - (length + k_max) % window;
}

Bytes init_payload(std::size_t k, std::uint64_t seed) {
  Rng rng(mix_seed(seed, kPayloadStream));
  Bytes out(k);
  for (auto& b : out) b = rng.byte();
  return out;
}

void perturb_step(std::span<double> z_payload, std::span<const double> grad, const AttackConfig& cfg) {
  if (z_payload.size() != grad.size()) throw AttackError(AttackError::Kind::InvalidConfig, "gradient shape mismatch");
  if (cfg.norm == Norm::inf) {
    for (std::size_t i = 0; i < grad.size(); ++i) {
      if (grad[i] > 0.0) {
        z_payload[i] -= cfg.epsilon;
      } else if (grad[i] < 0.0) {
        z_payload[i] += cfg.epsilon;
      }
    }
    return;
  }
  double scale = cfg.epsilon;
  if (cfg.normalize_l2) {
    double sq = 0.0;
    for (double g : grad) sq += g * g;
    scale /= std::max(std::sqrt(sq), 1e-12);
  }
  for (std::size_t i = 0; i < grad.size(); ++i) z_payload[i] -= scale * grad[i];
}

EmbeddingBox embedding_box(const ModelParams& params) {
  const auto& m = params.embedding;
  EmbeddingBox box{std::vector<double>(m.cols, std::numeric_limits<double>::infinity()),
                   std::vector<double>(m.cols, -std::numeric_limits<double>::infinity())};
  for (std::size_t j = 0; j < m.rows; ++j) {
    for (std::size_t d = 0; d < m.cols; ++d) {
      box.lo[d] = std::min(box.lo[d], m(j, d));
      box.hi[d] = std::max(box.hi[d], m(j, d));
    }
  }
  return box;
}

void clip_to_box(std::span<double> z, const EmbeddingBox& box) {
  const std::size_t D = box.lo.size();
  if (D == 0 || z.size() % D != 0) throw AttackError(AttackError::Kind::InvalidConfig, "row width mismatch");
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = std::clamp(z[i], box.lo[i % D], box.hi[i % D]);
}

std::uint8_t nearest_byte(const ModelParams& params, std::span<const double> v, Distance distance) {
  const auto& m = params.embedding;
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_j = 0;
  double v_norm = 0.0;
  if (distance == Distance::cosine) {
    for (double x : v) v_norm += x * x;
    v_norm = std::sqrt(v_norm);
  }
  for (std::size_t j = 0; j < m.rows; ++j) {
    const auto row = m.row(j);
    double d = 0.0;
    if (distance == Distance::euclidean) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double diff = v[i] - row[i];
        d += diff * diff;
      }
    } else {
      double dot = 0.0, r_norm = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        dot += v[i] * row[i];
        r_norm += row[i] * row[i];
      }
      r_norm = std::sqrt(r_norm);
      d = (v_norm > 0.0 && r_norm > 0.0) ? 1.0 - dot / (v_norm * r_norm) : 1.0;
    }
    if (d < best) {
      best = d;
      best_j = j;
    }
  }
  return static_cast<std::uint8_t>(best_j);
}

Bytes reconstruct(const ModelParams& params, const Matrix& z, Distance distance) {
  if (z.cols != static_cast<std::size_t>(params.cfg.embed_dim)) {
    throw model::ModelError("reconstruct: row width does not match the embedding");
  }
  Bytes out(z.rows);
  for (std::size_t i = 0; i < z.rows; ++i) out[i] = nearest_byte(params, z.row(i), distance);
  return out;
}

AttackResult generate(const ModelParams& params, ByteView file, const AttackConfig& cfg, pe::InjectionMode mode) {
  return run(params, file, cfg, mode, payload_size(file.size(), static_cast<std::size_t>(params.cfg.window)));
}

AttackResult attack_with_size(const ModelParams& params, ByteView file, const AttackConfig& cfg, std::size_t k_max,
                              pe::InjectionMode mode) {
  const auto k = payload_size_capped(file.size(), static_cast<std::size_t>(params.cfg.window), k_max);
  return run(params, file, cfg, mode, k);
}

nlohmann::json to_json(const pe::InjectionRecord& record) {
  return {{"mode", pe::to_string(record.mode)},
          {"file_offset", record.file_offset},
          {"length", record.length},
          {"original_digest", record.original_digest},
          {"modified_digest", record.modified_digest}};
}

nlohmann::json to_json(const AttackResult& result, const std::string& file, pe::InjectionMode mode,
                       const AttackConfig& cfg, double payload_entropy) {
  return {{"file", file},
          {"mode", pe::to_string(mode)},
          {"p", to_string(cfg.norm)},
          {"epsilon", cfg.epsilon},
          {"k", result.payload.size()},
          {"iterations", result.iterations},
          {"rounds", result.rounds},
          {"score_before", result.score_before},
          {"score_after", result.score_after},
          {"evaded", result.evaded},
          {"payload_hex", to_hex(result.payload)},
          {"payload_entropy", payload_entropy},
          {"injection", to_json(result.injection)}};
}

void write_trace_csv(const AttackResult& result, const std::filesystem::path& path) {
  std::string text = "iteration,score\n";
  char line[64];
  for (std::size_t i = 0; i < result.trace.size(); ++i) {
    std::snprintf(line, sizeof line, "%zu,%.17g\n", i, result.trace[i]);
    text += line;
  }
  write_file(path, ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace pforge::attack
