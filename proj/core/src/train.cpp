#include "pforge/train.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

#include "pforge/parallel.hpp"
#include "pforge/rng.hpp"

namespace pforge::model {
namespace {

constexpr std::uint64_t kShuffleStream = 0x7EA1;

struct ExampleGrad {
  ModelParams grads;
  double loss = 0.0;
  bool correct = false;
};

ExampleGrad example_gradient(const ModelParams& params, const Sample& s) {
  const auto cache = forward(params, embed(params, s.bytes));
  auto back = backward(params, cache, s.label);
  scatter_embedding_grad(params, s.bytes, back.input, back.grads.embedding);
  return {std::move(back.grads), bce_loss(cache.score, s.label), is_malicious(cache.score) == (s.label == 1)};
}

void add_into(ModelParams& acc, const ModelParams& g) {
  auto dst = acc.tensors();
  const auto src = g.tensors();
  for (std::size_t t = 0; t < dst.size(); ++t) {
    for (std::size_t i = 0; i < dst[t].values.size(); ++i) dst[t].values[i] += src[t].values[i];
  }
}

}  // namespace

std::vector<Sample> load_samples(const corpus::Manifest& manifest) {
  std::vector<Sample> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) out.push_back({read_file(manifest.resolve(e)), static_cast<int>(e.label)});
  return out;
}

Evaluation evaluate(const ModelParams& params, std::span<const Sample> samples, unsigned jobs) {
  Evaluation ev;
  ev.count = samples.size();
  if (samples.empty()) return ev;
  std::vector<double> scores(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) { scores[i] = predict_file(params, samples[i].bytes); });
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    ev.loss += bce_loss(scores[i], samples[i].label);
    correct += is_malicious(scores[i]) == (samples[i].label == 1);
  }
  ev.loss /= static_cast<double>(samples.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  return ev;
}

TrainResult train(ModelParams params, std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const TrainHyper& hyper) {
  if (train_set.empty()) throw ModelError("training set is empty");
  if (hyper.batch == 0) throw ModelError("batch size must be > 0");

  ModelParams m = zeros_like(params.cfg);
  ModelParams v = zeros_like(params.cfg);
  std::uint64_t step = 0;
  TrainResult result;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= hyper.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(hyper.seed, kShuffleStream + epoch));
    rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch) {
      const std::size_t n = std::min(hyper.batch, order.size() - start);
      std::vector<ExampleGrad> per(n);
      parallel_for(n, hyper.jobs, [&](std::size_t i) { per[i] = example_gradient(params, train_set[order[start + i]]); });

      // Summed in batch order regardless of which thread finished first.
      ModelParams grad = zeros_like(params.cfg);
      for (const auto& e : per) {
        add_into(grad, e.grads);
        loss_sum += e.loss;
        correct += e.correct;
      }

      ++step;
      const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
      auto pt = params.tensors();
      auto gt = grad.tensors();
      auto mt = m.tensors();
      auto vt = v.tensors();
      for (std::size_t t = 0; t < pt.size(); ++t) {
        for (std::size_t i = 0; i < pt[t].values.size(); ++i) {
          const double g = gt[t].values[i] / static_cast<double>(n);
          double& mi = mt[t].values[i];
          double& vi = vt[t].values[i];
          mi = hyper.beta1 * mi + (1.0 - hyper.beta1) * g;
          vi = hyper.beta2 * vi + (1.0 - hyper.beta2) * g * g;
          pt[t].values[i] -= hyper.lr * (mi / bc1) / (std::sqrt(vi / bc2) + hyper.adam_eps);
        }
      }
      round_to_float(params);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(order.size());
    stats.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    const auto val = evaluate(params, val_set, hyper.jobs);
    stats.val_loss = val.loss;
    stats.val_acc = val.accuracy;
    result.history.push_back(stats);
    if (!val_set.empty() && val.accuracy >= hyper.target_val_acc) break;
  }

  separate_duplicate_rows(params);
  result.params = std::move(params);
  return result;
}

TrainResult train(ModelParams params, const corpus::Manifest& train_set, const corpus::Manifest& val_set,
                  const TrainHyper& hyper) {
  const auto tr = load_samples(train_set);
  const auto va = load_samples(val_set);
  return train(std::move(params), tr, va, hyper);
}

void write_history_csv(std::span<const EpochStats> history, const std::filesystem::path& path) {
  std::string text = "epoch,train_loss,train_acc,val_loss,val_acc\n";
  char line[160];
  for (const auto& h : history) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.9g\n", h.epoch, h.train_loss, h.train_acc, h.val_loss,
                  h.val_acc);
    text += line;
  }
  write_file(path, ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace pforge::model
