#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "pforge/model.hpp"
#include "test_support.hpp"

namespace pforge::testing {

/// Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor).
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
  return std::sqrt(diff) / denom;
}

struct GradCheck {
  std::map<std::string, double> error;  // per tensor, plus "input"
  double worst() const {
    double w = 0;
    for (const auto& [_, e] : error) w = std::max(w, e);
    return w;
  }
};

/// Central differences of bce_loss over every parameter and every input
/// coordinate of one instance, compared with backward().
inline GradCheck check_gradients(model::ModelParams p, ByteView file, int label, double step) {
  using namespace model;
  auto loss_of = [&](const ModelParams& q, const EmbeddedSeq& z) { return bce_loss(forward(q, z).score, label); };

  const auto z = embed(p, file);
  const auto back = backward(p, forward(p, z), label);
  GradCheck out;

  auto analytic = back.grads;
  analytic.embedding = Matrix(p.embedding.rows, p.embedding.cols);
  scatter_embedding_grad(p, file, back.input, analytic.embedding);
  auto names = analytic.tensors();
  auto tensors = p.tensors();
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const bool is_embedding = std::string(tensors[t].name) == "embedding";
    std::vector<double> numeric(tensors[t].values.size());
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      double& v = tensors[t].values[i];
      const double saved = v;
      v = saved + step;
      const double up = loss_of(p, is_embedding ? embed(p, file) : z);
      v = saved - step;
      const double down = loss_of(p, is_embedding ? embed(p, file) : z);
      v = saved;
      numeric[i] = (up - down) / (2 * step);
    }
    out.error[tensors[t].name] = relative_error(names[t].values, numeric);
  }

  auto dense = back.dense_input(z.rows.rows, p.cfg);
  auto zz = z;
  std::vector<double> numeric(zz.rows.data.size());
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double saved = zz.rows.data[i];
    zz.rows.data[i] = saved + step;
    const double up = loss_of(p, zz);
    zz.rows.data[i] = saved - step;
    const double down = loss_of(p, zz);
    zz.rows.data[i] = saved;
    numeric[i] = (up - down) / (2 * step);
  }
  out.error["input"] = relative_error(dense.data, numeric);
  return out;
}

/// Instance `i` of the standard suite: L' = 4c, D = 4, F = 3, label i % 2.
inline GradCheck gradient_instance(std::uint64_t i, double step = 1e-4) {
  auto cfg = small_config(4, 8, 3, 6);
  auto p = model::init_params(cfg, 1000 + i);
  Rng rng(2000 + i);
  // Biases away from zero keep hidden units off the ReLU kink.
  for (auto& b : p.fc_b) b = rng.uniform(0.05, 0.3);
  auto file = random_bytes(4 * static_cast<std::size_t>(cfg.window), 3000 + i);
  return check_gradients(std::move(p), file, static_cast<int>(i % 2), step);
}

}  // namespace pforge::testing
