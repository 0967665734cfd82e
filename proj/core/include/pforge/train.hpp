#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "pforge/corpus.hpp"
#include "pforge/model.hpp"

namespace pforge::model {

struct Sample {
  Bytes bytes;
  int label = 0;
};

std::vector<Sample> load_samples(const corpus::Manifest& manifest);

struct TrainHyper {
  double lr = 1e-3;
  std::size_t batch = 16;
  std::size_t max_epochs = 20;
  double target_val_acc = 0.98;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochStats> history;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;
};

Evaluation evaluate(const ModelParams& params, std::span<const Sample> samples, unsigned jobs = 1);

/// Mini-batch Adam on mean BCE. Stops after the first epoch whose validation
/// accuracy reaches target_val_acc, or after max_epochs. Parameters stay
/// float-representable after every step.
TrainResult train(ModelParams params, std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const TrainHyper& hyper);

TrainResult train(ModelParams params, const corpus::Manifest& train_set, const corpus::Manifest& val_set,
                  const TrainHyper& hyper);

/// epoch,train_loss,train_acc,val_loss,val_acc
void write_history_csv(std::span<const EpochStats> history, const std::filesystem::path& path);

}  // namespace pforge::model
