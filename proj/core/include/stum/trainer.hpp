#pragma once

#include <string>
#include <vector>

#include "stum/model.hpp"

namespace stum {

struct TrainConfig {
    double lr_theta = 0.001;
    double lr_alpha = 0.001;
    double weight_decay = 0.0005;
    std::size_t max_epochs = 150;
    std::size_t patience = 10;
    std::size_t batch_size = 64;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double clip_norm = 5.0;  // <= 0 disables
    std::uint64_t seed = 42;

    void validate() const;
};

/// Mean absolute error over every element of the batch.
Tensor mae_loss(const Tensor& predictions, const Tensor& targets);

/// Decoupled-weight-decay Adam over a fixed parameter list. The fusion gate
/// trains with lr_alpha and is never decayed.
class AdamOptimizer {
  public:
    AdamOptimizer(ParamList params, const TrainConfig& cfg);

    void step();
    void zero_grad();
    double clip_gradients(double max_norm);  // returns pre-clip global norm
    const ParamList& params() const { return params_; }

  private:
    ParamList params_;
    TrainConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_mae = 0.0;  // denormalized units
    double val_mae = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    double best_val_mae = 0.0;
    std::size_t best_epoch = 0;
    bool stopped_early = false;
};

void write_history_csv(const std::vector<EpochRecord>& history, const std::string& path);

/// Full training loop: seeded epoch shuffling, minibatch Adam steps on the
/// normalized scale, denormalized validation MAE with early stopping, best
/// parameters restored on return.
TrainResult train(StumModel& model, const FrameSeries& train_norm,
                  const FrameSeries& val_norm, const NormStats& stats,
                  const TrafficGraph& graph, const TrainConfig& cfg);

/// Relative error between the autodiff gradient of the fusion gate and a
/// central finite difference on its raw parameter.
double alpha_gradient_check(StumModel& model, const Tensor& inputs,
                            const Tensor& targets, const TrafficGraph& graph,
                            double h = 1e-6);

}  // namespace stum
