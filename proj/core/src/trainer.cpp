#include "stum/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

namespace stum {

void TrainConfig::validate() const {
    if (lr_theta <= 0.0 || lr_alpha <= 0.0) throw ConfigError("learning rates must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (batch_size < 1 || max_epochs < 1) throw ConfigError("batch size and epochs must be >= 1");
}

Tensor mae_loss(const Tensor& predictions, const Tensor& targets) {
    if (predictions.shape() != targets.shape())
        throw ShapeMismatch("mae_loss: " + shape_str(predictions.shape()) + " vs " +
                            shape_str(targets.shape()));
    return abs_mean(sub(predictions, targets));
}

AdamOptimizer::AdamOptimizer(ParamList params, const TrainConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
        if (!p.trainable) continue;
        m_.emplace_back(p.tensor.size(), 0.0);
        v_.emplace_back(p.tensor.size(), 0.0);
    }
}

void AdamOptimizer::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

double AdamOptimizer::clip_gradients(double max_norm) {
    double sq = 0.0;
    for (const auto& p : params_) {
        if (!p.trainable || !p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double factor = max_norm / norm;
        for (auto& p : params_) {
            if (!p.trainable || !p.tensor.has_grad()) continue;
            for (double& g : mutable_grad(p.tensor)) g *= factor;
        }
    }
    return norm;
}

void AdamOptimizer::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t slot = 0;
    for (auto& p : params_) {
        if (!p.trainable) continue;
        std::size_t s = slot++;
        if (!p.tensor.has_grad()) continue;  // untouched by this loss, leave as-is
        const auto& g = p.tensor.grad();
        auto& theta = p.tensor.data();
        double lr = p.is_gate ? cfg_.lr_alpha : cfg_.lr_theta;
        if (p.weight_decay && !p.is_gate && cfg_.weight_decay > 0.0)
            for (double& x : theta) x -= lr * cfg_.weight_decay * x;
        auto& m = m_[s];
        auto& v = v_[s];
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
        }
    }
}

namespace {

/// Denormalized MAE between two normalized tensors laid out with the channel
/// as the innermost extent.
double denorm_mae(const Tensor& pred, const Tensor& truth, const NormStats& stats) {
    const auto& p = pred.data();
    const auto& t = truth.data();
    std::size_t c_dim = stats.stddev.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        acc += std::fabs(p[i] - t[i]) * stats.stddev[i % c_dim];
    return acc / static_cast<double>(p.size());
}

std::vector<std::vector<double>> snapshot(const ParamList& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p.tensor.data());
    return out;
}

void restore(ParamList& params, const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.data() = snap[i];
}

}  // namespace

void write_history_csv(const std::vector<EpochRecord>& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out.precision(17);
    out << "epoch,train_mae,val_mae,seconds\n";
    for (const auto& r : history)
        out << r.epoch << "," << r.train_mae << "," << r.val_mae << "," << r.seconds
            << "\n";
}

TrainResult train(StumModel& model, const FrameSeries& train_norm,
                  const FrameSeries& val_norm, const NormStats& stats,
                  const TrafficGraph& graph, const TrainConfig& cfg) {
    cfg.validate();
    std::size_t s = model.config().seq_len, h = model.config().horizon;
    AdamOptimizer opt(model.parameters(), cfg);

    TrainResult result;
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_params = snapshot(opt.params());
    std::size_t since_improve = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        WindowStream stream(train_norm, s, h, cfg.batch_size,
                            cfg.seed * 1000003ULL + epoch);
        double train_acc = 0.0;
        std::size_t train_batches = 0;
        while (auto batch = stream.next()) {
            opt.zero_grad();
            Tensor z = model.forward(batch->inputs, &graph, /*training=*/true);
            Tensor loss = mae_loss(z, batch->targets);
            double lv = loss.item();
            if (!std::isfinite(lv))
                throw NonFiniteLoss("training loss became non-finite at epoch " +
                                    std::to_string(epoch));
            loss.backward();
            opt.clip_gradients(cfg.clip_norm);
            opt.step();
            train_acc += denorm_mae(z, batch->targets, stats);
            ++train_batches;
        }

        double val_acc = 0.0;
        std::size_t val_elems = 0;
        {
            NoGradGuard ng;
            WindowStream vstream(val_norm, s, h, cfg.batch_size);
            while (auto batch = vstream.next()) {
                Tensor z = model.forward(batch->inputs, &graph, /*training=*/false);
                val_acc += denorm_mae(z, batch->targets, stats) *
                           static_cast<double>(z.size());
                val_elems += z.size();
            }
        }
        double val_mae = val_acc / static_cast<double>(val_elems);
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                          .count();
        result.history.push_back(
            {epoch, train_acc / static_cast<double>(train_batches), val_mae, secs});

        if (val_mae < best) {
            best = val_mae;
            result.best_epoch = epoch;
            best_params = snapshot(opt.params());
            since_improve = 0;
        } else {
            ++since_improve;
            if (since_improve >= cfg.patience) {
                result.stopped_early = true;
                break;
            }
        }
    }
    ParamList params = model.parameters();
    restore(params, best_params);
    result.best_val_mae = best;
    return result;
}

double alpha_gradient_check(StumModel& model, const Tensor& inputs,
                            const Tensor& targets, const TrafficGraph& graph, double h) {
    Tensor raw = model.gate().raw();
    if (raw.size() != 1) throw Error("alpha_gradient_check expects a scalar gate");
    for (auto& p : model.parameters()) p.tensor.zero_grad();
    Tensor loss = mae_loss(model.forward(inputs, &graph, false), targets);
    loss.backward();
    double analytic = raw.has_grad() ? raw.grad()[0] : 0.0;

    NoGradGuard ng;
    double orig = raw.data()[0];
    raw.data()[0] = orig + h;
    double fp = mae_loss(model.forward(inputs, &graph, false), targets).item();
    raw.data()[0] = orig - h;
    double fm = mae_loss(model.forward(inputs, &graph, false), targets).item();
    raw.data()[0] = orig;
    double central = (fp - fm) / (2.0 * h);
    return std::fabs(analytic - central) /
           std::max({std::fabs(analytic), std::fabs(central), 1e-8});
}

}  // namespace stum
