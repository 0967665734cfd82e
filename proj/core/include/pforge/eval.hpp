#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pforge/attack.hpp"
#include "pforge/model.hpp"
#include "pforge/pe.hpp"

namespace pforge::eval {

class EvalError : public Error {
 public:
  using Error::Error;
};

/// One experiment's output. `aggregates` is always a pure function of
/// `records` (see summarize), so reports can be re-checked offline.
struct EvalReport {
  std::string experiment;
  std::vector<nlohmann::json> records;
  nlohmann::json aggregates = nlohmann::json::object();
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  /// Flat CSV of the records; nested values are embedded as JSON text.
  std::string records_csv() const;
  /// Writes <prefix>.json and <prefix>.csv.
  void write(const std::filesystem::path& prefix) const;
};

/// Recomputes the aggregate block for `experiment` from its records.
nlohmann::json summarize(const std::string& experiment, const std::vector<nlohmann::json>& records);

/// Shannon entropy in bits per byte, in [0, 8]. Throws on empty input.
double entropy(ByteView bytes);

inline constexpr double kTextEntropy = 5.0;
inline constexpr double kPackedEntropy = 6.0;

struct NamedFile {
  std::string name;
  Bytes bytes;
  std::optional<std::size_t> family;
};

struct AttackedFile {
  std::string name;
  std::optional<std::size_t> family;
  Bytes original;
  attack::AttackResult result;
};

struct EvasionRun {
  EvalReport report;
  std::vector<AttackedFile> attacked;  // same order as the input files
};

nlohmann::json to_json(const attack::AttackConfig& cfg);

/// Attacks every file (all must currently score malicious).
EvasionRun evasion_rate(const model::ModelParams& params, std::span<const NamedFile> files,
                        const attack::AttackConfig& cfg, pe::InjectionMode mode, unsigned jobs = 1);

struct ActivationTrace {
  std::vector<double> mean_activation;  // one value per window: mean over filters
  std::size_t payload_begin = 0;        // payload windows [begin, end); empty when no payload
  std::size_t payload_end = 0;
  std::size_t argmax_window = 0;              // argmax of mean_activation
  std::vector<std::size_t> filter_argmax;     // pooled argmax window per filter

  bool in_payload(std::size_t w) const { return w >= payload_begin && w < payload_end; }
  /// True when at least one filter's pooled maximum sits in the payload.
  bool attention_shifted() const;
};

ActivationTrace activation_trace(const model::ModelParams& params, ByteView file,
                                 const std::optional<pe::InjectionRecord>& injection = std::nullopt);

/// window_index,mean_activation,in_payload
void write_trace_csv(const ActivationTrace& trace, const std::filesystem::path& path);

/// Moves `count` whole c-byte blocks starting at block `from` so they begin at
/// block `to` of the result. Length and the multiset of blocks are unchanged.
Bytes move_blocks(ByteView bytes, std::size_t window, std::size_t from, std::size_t count, std::size_t to);

/// Moves the payload-bearing blocks (every block from the one holding the
/// payload's first byte to end of file) to `target_window`.
Bytes relocate_aligned(ByteView file_with_payload, const pe::InjectionRecord& injection, std::size_t window,
                       std::size_t target_window);

/// Re-inserts the payload bytes at byte position window*a + (L mod window) + shift
/// of the original L bytes. Shifts the rest of the file, so windows change.
Bytes relocate_literal(ByteView file_with_payload, const pe::InjectionRecord& injection, std::size_t window,
                       std::size_t a, std::size_t shift = 0);

EvalReport spatial_invariance(const model::ModelParams& params, std::span<const AttackedFile> attacked);

/// Appends the donor payload to every recipient (zero-padded to a window
/// boundary) and, as a baseline, a random payload of the same length.
EvalReport transfer(const model::ModelParams& params, const AttackedFile& donor,
                    std::span<const NamedFile> recipients, std::uint64_t seed);

/// Every evaded donor against every other recipient.
EvalReport transfer_matrix(const model::ModelParams& params, std::span<const AttackedFile> donors,
                           std::span<const NamedFile> recipients, std::uint64_t seed);

/// Default sweep sizes: the 1000..2500 byte series rescaled to the window (2c..5c).
std::vector<std::size_t> default_sweep_sizes(std::size_t window);

EvalReport size_sweep(const model::ModelParams& params, std::span<const NamedFile> files,
                      std::vector<std::size_t> sizes, const attack::AttackConfig& cfg, unsigned jobs = 1);

/// Whole-file, per-section (PE inputs) and payload-region entropy before and
/// after one injection.
EvalReport entropy_report(ByteView original, ByteView attacked, const pe::InjectionRecord& injection,
                          const std::string& name = "");

/// entropy_report over a suite, merged into one report.
EvalReport entropy_suite(std::span<const AttackedFile> attacked);

}  // namespace pforge::eval
