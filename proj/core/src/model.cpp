#include "pforge/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "pforge/rng.hpp"

namespace pforge::model {
namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Keeps scores strictly inside (0, 1) even when the logit saturates.
double clamp_open_unit(double s) {
  constexpr double kLo = std::numeric_limits<double>::min();
  constexpr double kHi = 1.0 - 0x1.0p-53;
  return std::clamp(s, kLo, kHi);
}

void require_shapes(const ModelParams& p) {
  const auto& c = p.cfg;
  const std::size_t w = c.window_width();
  const auto F = static_cast<std::size_t>(c.filters);
  const auto H = static_cast<std::size_t>(c.hidden);
  const bool ok = p.embedding.rows == static_cast<std::size_t>(c.alphabet) &&
                  p.embedding.cols == static_cast<std::size_t>(c.embed_dim) && p.conv_a.rows == F &&
                  p.conv_a.cols == w && p.conv_b.rows == F && p.conv_b.cols == w && p.bias_a.size() == F &&
                  p.bias_b.size() == F && p.fc_w.rows == H && p.fc_w.cols == F && p.fc_b.size() == H &&
                  p.out_w.size() == H && p.out_b.size() == 1;
  if (!ok) throw ModelError("parameter shapes do not match the model config");
}

// Transposed and interleaved conv weights: row i holds A[:, i] then B[:, i].
std::vector<double> interleaved_transpose(const ModelParams& p) {
  const std::size_t F = static_cast<std::size_t>(p.cfg.filters);
  const std::size_t W = p.cfg.window_width();
  std::vector<double> t(W * 2 * F);
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t i = 0; i < W; ++i) {
      t[i * 2 * F + f] = p.conv_a(f, i);
      t[i * 2 * F + F + f] = p.conv_b(f, i);
    }
  }
  return t;
}

// acc[0..F) = a pre-activations, acc[F..2F) = b pre-activations. Each output
// accumulates bias first, then inputs in ascending order; this fixed order is
// what makes whole-window permutations bit-exact.
void window_preactivations(const ModelParams& p, const std::vector<double>& wt, const double* input, double* acc) {
  const std::size_t F = static_cast<std::size_t>(p.cfg.filters);
  const std::size_t W = p.cfg.window_width();
  for (std::size_t f = 0; f < F; ++f) {
    acc[f] = p.bias_a[f];
    acc[F + f] = p.bias_b[f];
  }
  const double* row = wt.data();
  for (std::size_t i = 0; i < W; ++i, row += 2 * F) {
    const double x = input[i];
    for (std::size_t k = 0; k < 2 * F; ++k) acc[k] += row[k] * x;
  }
}

void check_window_range(const ModelParams& params, const Matrix& rows, std::size_t first, std::size_t count) {
  if (rows.cols != static_cast<std::size_t>(params.cfg.embed_dim)) {
    throw ModelError("embedded sequence width " + std::to_string(rows.cols) + " != embed_dim " +
                     std::to_string(params.cfg.embed_dim));
  }
  const auto c = static_cast<std::size_t>(params.cfg.window);
  if (rows.rows % c != 0) throw ModelError("embedded sequence length is not a multiple of the window");
  if ((first + count) * c > rows.rows) throw ModelError("window range exceeds the sequence");
}

}  // namespace

void ModelConfig::validate() const {
  if (alphabet != kAlphabet) throw ModelError("alphabet size must be 256");
  if (window < 2) throw ModelError("window must be >= 2");
  if (embed_dim < 1 || filters < 1 || hidden < 1) throw ModelError("embed_dim, filters and hidden must be >= 1");
}

std::vector<NamedTensor> ModelParams::tensors() {
  return {{"embedding", embedding.data}, {"conv_a", conv_a.data}, {"bias_a", bias_a},
          {"conv_b", conv_b.data},       {"bias_b", bias_b},      {"fc_w", fc_w.data},
          {"fc_b", fc_b},                {"out_w", out_w},        {"out_b", out_b}};
}

std::vector<ConstNamedTensor> ModelParams::tensors() const {
  std::vector<ConstNamedTensor> out;
  for (const auto& t : const_cast<ModelParams*>(this)->tensors()) out.push_back({t.name, t.values});
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.values.size();
  return n;
}

ModelParams zeros_like(const ModelConfig& cfg) {
  cfg.validate();
  const auto F = static_cast<std::size_t>(cfg.filters);
  const auto H = static_cast<std::size_t>(cfg.hidden);
  ModelParams p;
  p.cfg = cfg;
  p.embedding = Matrix(static_cast<std::size_t>(cfg.alphabet), static_cast<std::size_t>(cfg.embed_dim));
  p.conv_a = Matrix(F, cfg.window_width());
  p.conv_b = Matrix(F, cfg.window_width());
  p.bias_a.assign(F, 0.0);
  p.bias_b.assign(F, 0.0);
  p.fc_w = Matrix(H, F);
  p.fc_b.assign(H, 0.0);
  p.out_w.assign(H, 0.0);
  p.out_b.assign(1, 0.0);
  return p;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p = zeros_like(cfg);
  Rng rng(seed);
  auto fill = [&](std::span<double> values, double scale) {
    for (auto& v : values) v = rng.uniform(-scale, scale);
  };
  fill(p.embedding.data, 1.0);
  fill(p.conv_a.data, 1.0 / std::sqrt(static_cast<double>(cfg.window_width())));
  fill(p.conv_b.data, 1.0 / std::sqrt(static_cast<double>(cfg.window_width())));
  fill(p.fc_w.data, 1.0 / std::sqrt(static_cast<double>(cfg.filters)));
  fill(p.out_w, 1.0 / std::sqrt(static_cast<double>(cfg.hidden)));
  round_to_float(p);
  separate_duplicate_rows(p);
  return p;
}

void round_to_float(ModelParams& params) {
  for (auto& t : params.tensors()) {
    for (auto& v : t.values) v = static_cast<double>(static_cast<float>(v));
  }
}

std::size_t padded_length(std::size_t length, int window) {
  const auto c = static_cast<std::size_t>(window);
  return (length + c - 1) / c * c;
}

EmbeddedSeq embed(const ModelParams& params, ByteView file) {
  const auto D = static_cast<std::size_t>(params.cfg.embed_dim);
  EmbeddedSeq z;
  z.original_length = file.size();
  z.rows = Matrix(padded_length(file.size(), params.cfg.window), D);
  for (std::size_t i = 0; i < z.rows.rows; ++i) {
    const std::uint8_t b = i < file.size() ? file[i] : params.cfg.pad_byte;
    std::copy_n(params.embedding.row(b).data(), D, z.rows.row(i).data());
  }
  return z;
}

Matrix gated_activations(const ModelParams& params, const Matrix& rows, std::size_t first_window,
                         std::size_t count) {
  check_window_range(params, rows, first_window, count);
  const auto F = static_cast<std::size_t>(params.cfg.filters);
  const std::size_t W = params.cfg.window_width();
  const auto wt = interleaved_transpose(params);
  std::vector<double> acc(2 * F);
  Matrix out(count, F);
  for (std::size_t w = 0; w < count; ++w) {
    window_preactivations(params, wt, rows.data.data() + (first_window + w) * W, acc.data());
    for (std::size_t f = 0; f < F; ++f) out(w, f) = acc[f] * sigmoid(acc[F + f]);
  }
  return out;
}

PoolState pool_windows(const ModelParams& params, const Matrix& rows, std::size_t first_window,
                       std::size_t count) {
  check_window_range(params, rows, first_window, count);
  const auto F = static_cast<std::size_t>(params.cfg.filters);
  const std::size_t W = params.cfg.window_width();
  PoolState pool;
  if (count == 0) return pool;
  pool.value.assign(F, -std::numeric_limits<double>::infinity());
  pool.window.assign(F, 0);
  pool.pre_a.assign(F, 0.0);
  pool.pre_b.assign(F, 0.0);

  const auto wt = interleaved_transpose(params);
  std::vector<double> acc(2 * F);
  for (std::size_t w = first_window; w < first_window + count; ++w) {
    window_preactivations(params, wt, rows.data.data() + w * W, acc.data());
    for (std::size_t f = 0; f < F; ++f) {
      const double h = acc[f] * sigmoid(acc[F + f]);
      if (h > pool.value[f]) {
        pool.value[f] = h;
        pool.window[f] = w;
        pool.pre_a[f] = acc[f];
        pool.pre_b[f] = acc[F + f];
      }
    }
  }
  pool.input = Matrix(F, W);
  for (std::size_t f = 0; f < F; ++f) {
    const double* src = rows.data.data() + pool.window[f] * W;
    std::copy(src, src + W, pool.input.row(f).data());
  }
  return pool;
}

void merge_pool(PoolState& into, const PoolState& other) {
  if (other.empty()) return;
  if (into.empty()) {
    into = other;
    return;
  }
  for (std::size_t f = 0; f < into.value.size(); ++f) {
    const bool take = other.value[f] > into.value[f] ||
                      (other.value[f] == into.value[f] && other.window[f] < into.window[f]);
    if (!take) continue;
    into.value[f] = other.value[f];
    into.window[f] = other.window[f];
    into.pre_a[f] = other.pre_a[f];
    into.pre_b[f] = other.pre_b[f];
    std::copy(other.input.row(f).begin(), other.input.row(f).end(), into.input.row(f).begin());
  }
}

ForwardCache finish_forward(const ModelParams& params, PoolState pool, std::size_t windows) {
  require_shapes(params);
  if (pool.empty()) throw ModelError("cannot score an empty sequence");
  const auto F = static_cast<std::size_t>(params.cfg.filters);
  const auto H = static_cast<std::size_t>(params.cfg.hidden);
  ForwardCache cache;
  cache.windows = windows;
  cache.pool = std::move(pool);
  cache.hidden_pre.resize(H);
  cache.hidden.resize(H);
  double logit = params.out_b[0];
  for (std::size_t h = 0; h < H; ++h) {
    double u = params.fc_b[h];
    for (std::size_t f = 0; f < F; ++f) u += params.fc_w(h, f) * cache.pool.value[f];
    cache.hidden_pre[h] = u;
    cache.hidden[h] = u > 0.0 ? u : 0.0;
    logit += params.out_w[h] * cache.hidden[h];
  }
  cache.logit = logit;
  cache.score = clamp_open_unit(sigmoid(logit));
  return cache;
}

ForwardCache forward(const ModelParams& params, const EmbeddedSeq& z) {
  const std::size_t n = z.windows(params.cfg.window);
  return finish_forward(params, pool_windows(params, z.rows, 0, n), n);
}

double predict_file(const ModelParams& params, ByteView file) { return forward(params, embed(params, file)).score; }

double bce_loss(double score, int label) {
  const double s = std::clamp(score, 1e-7, 1.0 - 1e-7);
  return label == 1 ? -std::log(s) : -std::log(1.0 - s);
}

Matrix BackwardResult::dense_input(std::size_t padded_rows, const ModelConfig& cfg) const {
  const auto D = static_cast<std::size_t>(cfg.embed_dim);
  Matrix out(padded_rows, D);
  const std::size_t W = cfg.window_width();
  for (const auto& g : input) {
    std::copy(g.values.begin(), g.values.end(), out.data.begin() + static_cast<std::ptrdiff_t>(g.window * W));
  }
  return out;
}

BackwardResult backward(const ModelParams& params, const ForwardCache& cache, int label) {
  require_shapes(params);
  const auto F = static_cast<std::size_t>(params.cfg.filters);
  const auto H = static_cast<std::size_t>(params.cfg.hidden);
  const std::size_t W = params.cfg.window_width();
  if (cache.pool.value.size() != F || cache.hidden.size() != H || cache.pool.input.cols != W) {
    throw ModelError("forward cache does not match the parameters");
  }
  for (auto w : cache.pool.window) {
    if (w >= cache.windows) throw ModelError("forward cache argmax out of range");
  }

  BackwardResult out{zeros_like(params.cfg), {}};
  auto& g = out.grads;
  // d bce / d logit for a sigmoid output.
  const double dlogit = cache.score - static_cast<double>(label);
  g.out_b[0] = dlogit;
  std::vector<double> du(H);
  for (std::size_t h = 0; h < H; ++h) {
    g.out_w[h] = dlogit * cache.hidden[h];
    du[h] = cache.hidden_pre[h] > 0.0 ? dlogit * params.out_w[h] : 0.0;
    g.fc_b[h] = du[h];
    for (std::size_t f = 0; f < F; ++f) g.fc_w(h, f) = du[h] * cache.pool.value[f];
  }

  std::map<std::size_t, std::vector<double>> by_window;
  for (std::size_t f = 0; f < F; ++f) {
    double dp = 0.0;
    for (std::size_t h = 0; h < H; ++h) dp += params.fc_w(h, f) * du[h];
    const double gate = sigmoid(cache.pool.pre_b[f]);
    const double da = dp * gate;
    const double db = dp * cache.pool.pre_a[f] * gate * (1.0 - gate);
    g.bias_a[f] = da;
    g.bias_b[f] = db;
    const auto in = cache.pool.input.row(f);
    auto ga = g.conv_a.row(f);
    auto gb = g.conv_b.row(f);
    auto& dz = by_window[cache.pool.window[f]];
    dz.resize(W, 0.0);
    const auto wa = params.conv_a.row(f);
    const auto wb = params.conv_b.row(f);
    for (std::size_t i = 0; i < W; ++i) {
      ga[i] = da * in[i];
      gb[i] = db * in[i];
      dz[i] += da * wa[i] + db * wb[i];
    }
  }
  out.input.reserve(by_window.size());
  for (auto& [w, values] : by_window) out.input.push_back({w, std::move(values)});
  return out;
}

void scatter_embedding_grad(const ModelParams& params, ByteView file, const std::vector<WindowGrad>& input,
                            Matrix& embedding_grad) {
  const auto c = static_cast<std::size_t>(params.cfg.window);
  const auto D = static_cast<std::size_t>(params.cfg.embed_dim);
  for (const auto& g : input) {
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t pos = g.window * c + j;
      const std::uint8_t b = pos < file.size() ? file[pos] : params.cfg.pad_byte;
      auto row = embedding_grad.row(b);
      for (std::size_t d = 0; d < D; ++d) row[d] += g.values[j * D + d];
    }
  }
}

std::size_t separate_duplicate_rows(ModelParams& params) {
  auto& m = params.embedding;
  std::vector<bool> touched(m.rows, false);
  for (bool again = true; again;) {
    again = false;
    for (std::size_t i = 0; i < m.rows; ++i) {
      for (std::size_t j = i + 1; j < m.rows; ++j) {
        if (std::equal(m.row(i).begin(), m.row(i).end(), m.row(j).begin())) {
          m(j, 0) += 0x1.0p-20;
          touched[j] = true;
          again = true;
        }
      }
    }
  }
  return static_cast<std::size_t>(std::count(touched.begin(), touched.end(), true));
}

}  // namespace pforge::model
