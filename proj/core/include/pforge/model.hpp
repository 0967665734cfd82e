#pragma once

// Raw-byte convolutional detector: byte embedding, gated non-overlapping 1-D
// convolution, temporal max pooling, and a one-hidden-layer head. Gradients
// are derived by hand.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pforge/bytes.hpp"

namespace pforge::model {

class ModelError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { BadMagic, BadVersion, Crc, Truncated, Shape };
  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  bool operator==(const Matrix&) const = default;
};

inline constexpr int kAlphabet = 256;

struct ModelConfig {
  int alphabet = kAlphabet;
  int embed_dim = 8;   // D
  int window = 64;     // c: convolution width and stride
  int filters = 16;    // F
  int hidden = 16;     // H
  std::uint8_t pad_byte = 0x00;

  void validate() const;
  std::size_t window_width() const { return static_cast<std::size_t>(window) * embed_dim; }

  static ModelConfig desk() { return {}; }
  static ModelConfig full_scale() { return {kAlphabet, 8, 500, 128, 128, 0x00}; }

  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  const char* name;
  std::span<double> values;
};
struct ConstNamedTensor {
  const char* name;
  std::span<const double> values;
};

/// Parameters. The same shape doubles as the gradient container.
struct ModelParams {
  ModelConfig cfg;
  Matrix embedding;            // alphabet x D
  Matrix conv_a;               // F x (c*D), linear branch
  std::vector<double> bias_a;  // F
  Matrix conv_b;               // F x (c*D), gate branch
  std::vector<double> bias_b;  // F
  Matrix fc_w;                 // H x F
  std::vector<double> fc_b;    // H
  std::vector<double> out_w;   // H
  std::vector<double> out_b;   // 1

  /// Tensors in checkpoint order.
  std::vector<NamedTensor> tensors();
  std::vector<ConstNamedTensor> tensors() const;
  std::size_t parameter_count() const;

  bool operator==(const ModelParams&) const = default;
};

ModelParams zeros_like(const ModelConfig& cfg);

/// Embedding rows uniform in [-1, 1]; weights uniform in +-1/sqrt(fan_in).
/// All values are float-representable so checkpoints round-trip exactly.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

/// z: one embedding row per byte, right-padded with the pad byte's row to a
/// multiple of the window.
struct EmbeddedSeq {
  Matrix rows;  // padded_length x D
  std::size_t original_length = 0;

  std::size_t windows(int window) const { return rows.rows / static_cast<std::size_t>(window); }
};

std::size_t padded_length(std::size_t length, int window);

EmbeddedSeq embed(const ModelParams& params, ByteView file);

/// Per-filter running maximum over a set of windows.
struct PoolState {
  std::vector<double> value;       // max gated activation
  std::vector<std::size_t> window; // argmax window (lowest index on ties)
  std::vector<double> pre_a;       // linear pre-activation at the argmax
  std::vector<double> pre_b;       // gate pre-activation at the argmax
  Matrix input;                    // F x (c*D): argmax window inputs

  bool empty() const { return value.empty(); }
};

struct ForwardCache {
  std::size_t windows = 0;
  PoolState pool;
  std::vector<double> hidden_pre;  // H
  std::vector<double> hidden;      // H, after ReLU
  double logit = 0.0;
  double score = 0.0;
};

/// Gated activations (a * sigmoid(b)) for the windows starting at
/// `first_window` of `rows`; `count` windows, F values each.
Matrix gated_activations(const ModelParams& params, const Matrix& rows, std::size_t first_window, std::size_t count);

/// Max-pools windows [first_window, first_window + count) of `rows`.
PoolState pool_windows(const ModelParams& params, const Matrix& rows, std::size_t first_window, std::size_t count);

/// Folds `other` into `into`, keeping the larger value (lower window on ties).
void merge_pool(PoolState& into, const PoolState& other);

/// Applies the fully connected head to a completed pool.
ForwardCache finish_forward(const ModelParams& params, PoolState pool, std::size_t windows);

/// The score g(z) with its cache.
ForwardCache forward(const ModelParams& params, const EmbeddedSeq& z);

/// f(x) = g(embed(x)).
double predict_file(const ModelParams& params, ByteView file);

inline bool is_malicious(double score) { return score > 0.5; }

/// Binary cross-entropy with the score clamped to [1e-7, 1 - 1e-7].
double bce_loss(double score, int label);

/// Input gradient restricted to one window: c*D values.
struct WindowGrad {
  std::size_t window = 0;
  std::vector<double> values;
};

struct BackwardResult {
  ModelParams grads;  // embedding left zero; see scatter_embedding_grad
  std::vector<WindowGrad> input;  // ascending window order, nonzero windows only

  /// Dense padded_length x D input gradient.
  Matrix dense_input(std::size_t padded_rows, const ModelConfig& cfg) const;
};

/// Gradients of bce_loss(score, label) with respect to every non-embedding
/// parameter and to z. Only each filter's argmax window receives gradient.
BackwardResult backward(const ModelParams& params, const ForwardCache& cache, int label);

/// Adds the input gradient into the embedding rows of the bytes it came from.
void scatter_embedding_grad(const ModelParams& params, ByteView file, const std::vector<WindowGrad>& input,
                            Matrix& embedding_grad);

/// If two embedding rows are exactly equal, nudges the later one by +2^-20 on
/// its first coordinate until all rows are distinct. Returns rows changed.
std::size_t separate_duplicate_rows(ModelParams& params);

// Checkpoints: "MCFK", version, shape, f32 tensors, CRC-32.
inline constexpr std::uint32_t kCheckpointVersion = 1;
Bytes encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(ByteView bytes);
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

/// Rounds every parameter to the nearest float.
void round_to_float(ModelParams& params);

}  // namespace pforge::model
