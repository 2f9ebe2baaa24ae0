#pragma once

#include <string>
#include <vector>

#include "stum/model.hpp"
#include "stum/trainer.hpp"

namespace stum {

struct MetricValues {
    double mae = 0.0, rmse = 0.0, mape = 0.0;  // mape as a fraction
};

/// MAE / RMSE / MAPE over the observed index set. Entries with
/// |truth| < mape_eps are excluded from the MAPE sum only.
MetricValues compute_metrics(const std::vector<double>& truth,
                             const std::vector<double>& predictions,
                             double mape_eps = 1e-3);

struct HorizonRow {
    std::string label;  // "3", "6", "12" or "avg"
    MetricValues metrics;
};

struct EvalReport {
    std::vector<HorizonRow> rows;
    std::size_t trainable_params = 0;
    std::size_t frozen_params = 0;
    double eval_seconds = 0.0;
    std::string to_json() const;
    void write_csv(const std::string& path) const;
};

/// Normalizes the raw split with train statistics, predicts, denormalizes,
/// and reports metrics at the requested horizon steps plus the flat average.
EvalReport evaluate(StumModel& model, const FrameSeries& split_raw,
                    const NormStats& stats, const TrafficGraph& graph,
                    const std::vector<std::size_t>& horizons,
                    std::size_t batch_size = 64, double mape_eps = 1e-3);

/// Writes predictions.csv, embeddings.csv and report.json under out_dir.
void export_artifacts(StumModel& model, const FrameSeries& split_raw,
                      const NormStats& stats, const TrafficGraph& graph,
                      const std::string& out_dir,
                      const std::vector<std::size_t>& horizons);

struct BenchRow {
    std::string name;
    std::size_t trainable_params = 0;
    double median_step_seconds = 0.0;
};

/// Median wall-clock per training step over `steps` minibatch updates for
/// each named config, on the supplied fixture.
std::vector<BenchRow> benchmark_configs(
    const std::vector<std::pair<std::string, StumConfig>>& configs,
    const FrameSeries& fixture, const TrafficGraph& graph, const TrainConfig& tcfg,
    std::size_t steps = 50);

void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& path);

}  // namespace stum
