#pragma once

// Embedding-space payload attack: a payload block is appended (or placed in
// slack / a new section), its embedding rows are moved by iterative FGSM
// toward the benign label, and the result is snapped back to bytes by
// nearest embedding row.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pforge/model.hpp"
#include "pforge/pe.hpp"

namespace pforge::attack {

class AttackError : public Error {
 public:
  enum class Kind { NotDetected, SlackTooSmall, InvalidSize, InvalidConfig };
  AttackError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

enum class Norm { inf, two };
enum class Distance { euclidean, cosine };

std::string to_string(Norm n);
std::string to_string(Distance d);
Norm parse_norm(std::string_view text);
Distance parse_distance(std::string_view text);

struct AttackConfig {
  Norm norm = Norm::inf;
  double epsilon = 0.05;
  int target_label = 0;
  std::size_t max_iters = 200;
  std::size_t max_outer_rounds = 10;
  Distance distance = Distance::euclidean;
  std::uint64_t seed = 1;
  /// p=2 only: divide the step by the payload gradient's L2 norm.
  bool normalize_l2 = true;
  /// Stop once the score drops below 0.5 - margin.
  double margin = 0.0;
  /// When a filter's pooled maximum lies outside the payload but raising it
  /// would lower the loss, send that filter's gradient to the payload's
  /// strongest window instead. Off: the exact (argmax-only) gradient.
  bool route_pool_gradient = true;
  /// Clamp every perturbed coordinate to the range the embedding rows span in
  /// that dimension, so the continuous payload stays where bytes live.
  bool clip_to_embedding = true;

  void validate() const;
  static double default_epsilon(Norm n) { return n == Norm::inf ? 0.05 : 0.5; }
};

struct AttackResult {
  Bytes payload;
  pe::InjectionRecord injection;
  Bytes modified;
  std::size_t iterations = 0;
  std::size_t rounds = 0;
  double score_before = 0.0;
  double score_after = 0.0;
  bool evaded = false;
  /// Continuous-embedding score after every perturbation step.
  std::vector<double> trace;
};

/// k = c + (c - L mod c); always c < k <= 2c and (L + k) mod c == 0.
std::size_t payload_size(std::size_t length, std::size_t window);

/// Largest k <= k_max with (L + k) mod c == 0. Throws InvalidSize when that is
/// below payload_size(L, c).
std::size_t payload_size_capped(std::size_t length, std::size_t window, std::size_t k_max);

/// k i.i.d. uniform bytes.
Bytes init_payload(std::size_t k, std::uint64_t seed);

/// One FGSM step on the payload block, in place.
void perturb_step(std::span<double> z_payload, std::span<const double> grad, const AttackConfig& cfg);

/// Per-dimension [min, max] over the embedding rows.
struct EmbeddingBox {
  std::vector<double> lo;
  std::vector<double> hi;
};
EmbeddingBox embedding_box(const model::ModelParams& params);
/// Clamps each D-wide row of `z` into the box.
void clip_to_box(std::span<double> z, const EmbeddingBox& box);

/// Nearest embedding row per input row; ties go to the lowest byte value.
Bytes reconstruct(const model::ModelParams& params, const model::Matrix& z, Distance distance);
std::uint8_t nearest_byte(const model::ModelParams& params, std::span<const double> v, Distance distance);

/// Full attack with payload_size(L, c) bytes.
AttackResult generate(const model::ModelParams& params, ByteView file, const AttackConfig& cfg,
                      pe::InjectionMode mode);

/// As generate, with the payload sized by payload_size_capped(L, c, k_max).
AttackResult attack_with_size(const model::ModelParams& params, ByteView file, const AttackConfig& cfg,
                              std::size_t k_max, pe::InjectionMode mode = pe::InjectionMode::overlay);

/// The JSON result record. `entropy` is the payload's Shannon entropy.
nlohmann::json to_json(const AttackResult& result, const std::string& file, pe::InjectionMode mode,
                       const AttackConfig& cfg, double payload_entropy);
nlohmann::json to_json(const pe::InjectionRecord& record);

/// iteration,score
void write_trace_csv(const AttackResult& result, const std::filesystem::path& path);

}  // namespace pforge::attack
