#include "stum/eval_report.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace stum {

using nlohmann::json;

MetricValues compute_metrics(const std::vector<double>& truth,
                             const std::vector<double>& predictions, double mape_eps) {
    if (truth.size() != predictions.size())
        throw ShapeMismatch("metrics: truth and prediction lengths differ");
    if (truth.empty()) throw EmptyObservationSet("metrics: empty observation set");
    MetricValues m;
    std::size_t mape_count = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        double d = truth[i] - predictions[i];
        m.mae += std::fabs(d);
        m.rmse += d * d;
        if (std::fabs(truth[i]) >= mape_eps) {
            m.mape += std::fabs(d / truth[i]);
            ++mape_count;
        }
    }
    double n = static_cast<double>(truth.size());
    m.mae /= n;
    m.rmse = std::sqrt(m.rmse / n);
    if (mape_count == 0)
        throw EmptyObservationSet("metrics: every truth value below mape_eps");
    m.mape /= static_cast<double>(mape_count);
    return m;
}

std::string EvalReport::to_json() const {
    json rows_j = json::array();
    for (const auto& r : rows)
        rows_j.push_back({{"horizon", r.label},
                          {"mae", r.metrics.mae},
                          {"rmse", r.metrics.rmse},
                          {"mape", r.metrics.mape}});
    json j{{"rows", rows_j},
           {"trainable_params", trainable_params},
           {"frozen_params", frozen_params},
           {"eval_seconds", eval_seconds}};
    return j.dump(2);
}

void EvalReport::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out.precision(17);
    out << "horizon,mae,rmse,mape\n";
    for (const auto& r : rows)
        out << r.label << "," << r.metrics.mae << "," << r.metrics.rmse << ","
            << r.metrics.mape << "\n";
}

namespace {

struct Predictions {
    // flat arrays indexed [window][horizon][node][channel]
    std::vector<double> truth, pred;
    std::size_t windows = 0, horizon = 0, nodes = 0, channels = 0;
    std::vector<std::size_t> origins;
};

Predictions run_predictions(StumModel& model, const FrameSeries& split_raw,
                            const NormStats& stats, const TrafficGraph& graph,
                            std::size_t batch_size) {
    NoGradGuard ng;
    std::size_t s = model.config().seq_len, h = model.config().horizon;
    FrameSeries norm = apply_normalizer(stats, split_raw);
    WindowStream stream(norm, s, h, batch_size);
    Predictions out;
    out.horizon = h;
    out.nodes = split_raw.nodes;
    out.channels = split_raw.channels;
    std::size_t c_dim = out.channels;
    while (auto batch = stream.next()) {
        Tensor z = model.forward(batch->inputs, &graph, false);
        const auto& zd = z.data();
        const auto& td = batch->targets.data();
        for (std::size_t i = 0; i < zd.size(); ++i) {
            double sd = stats.stddev[i % c_dim], mu = stats.mean[i % c_dim];
            out.pred.push_back(zd[i] * sd + mu);
            out.truth.push_back(td[i] * sd + mu);
        }
        out.origins.insert(out.origins.end(), batch->origin_indices.begin(),
                           batch->origin_indices.end());
        out.windows += batch->origin_indices.size();
    }
    return out;
}

std::vector<double> horizon_slice(const Predictions& p, const std::vector<double>& src,
                                  std::size_t step /*1-based*/) {
    std::vector<double> out;
    std::size_t frame = p.nodes * p.channels;
    std::size_t window = p.horizon * frame;
    out.reserve(p.windows * frame);
    for (std::size_t w = 0; w < p.windows; ++w) {
        std::size_t base = w * window + (step - 1) * frame;
        out.insert(out.end(), src.begin() + static_cast<std::ptrdiff_t>(base),
                   src.begin() + static_cast<std::ptrdiff_t>(base + frame));
    }
    return out;
}

}  // namespace

EvalReport evaluate(StumModel& model, const FrameSeries& split_raw,
                    const NormStats& stats, const TrafficGraph& graph,
                    const std::vector<std::size_t>& horizons, std::size_t batch_size,
                    double mape_eps) {
    auto t0 = std::chrono::steady_clock::now();
    Predictions p = run_predictions(model, split_raw, stats, graph, batch_size);
    EvalReport report;
    for (std::size_t step : horizons) {
        if (step < 1 || step > p.horizon)
            throw ConfigError("requested horizon " + std::to_string(step) +
                              " outside model horizon " + std::to_string(p.horizon));
        report.rows.push_back({std::to_string(step),
                               compute_metrics(horizon_slice(p, p.truth, step),
                                               horizon_slice(p, p.pred, step), mape_eps)});
    }
    report.rows.push_back({"avg", compute_metrics(p.truth, p.pred, mape_eps)});
    ParamReport pr = model.param_report();
    report.trainable_params = pr.trainable;
    report.frozen_params = pr.frozen;
    report.eval_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

void export_artifacts(StumModel& model, const FrameSeries& split_raw,
                      const NormStats& stats, const TrafficGraph& graph,
                      const std::string& out_dir,
                      const std::vector<std::size_t>& horizons) {
    std::filesystem::create_directories(out_dir);
    Predictions p = run_predictions(model, split_raw, stats, graph, 64);

    {
        std::ofstream out(out_dir + "/predictions.csv");
        if (!out) throw IoError("cannot write predictions.csv");
        out.precision(17);
        out << "t,node,horizon,truth,pred\n";
        std::size_t frame = p.nodes * p.channels;
        for (std::size_t w = 0; w < p.windows; ++w)
            for (std::size_t step = 1; step <= p.horizon; ++step)
                for (std::size_t node = 0; node < p.nodes; ++node) {
                    std::size_t i =
                        (w * p.horizon + (step - 1)) * frame + node * p.channels;
                    out << p.origins[w] << "," << node << "," << step << ","
                        << p.truth[i] << "," << p.pred[i] << "\n";
                }
    }

    {
        // node embeddings: MLRF residual state averaged over windows and time
        NoGradGuard ng;
        std::size_t s = model.config().seq_len, h = model.config().horizon;
        std::size_t d = model.config().embed_dim;
        FrameSeries norm = apply_normalizer(stats, split_raw);
        WindowStream stream(norm, s, h, 64);
        std::vector<double> emb(p.nodes * d, 0.0);
        std::size_t samples = 0;
        while (auto batch = stream.next()) {
            ForwardDetail fd = model.forward_detail(batch->inputs, &graph, false);
            if (!fd.stack_state.defined()) break;  // backbone-only model
            const auto& hd = fd.stack_state.data();
            std::size_t b = fd.stack_state.shape()[0];
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t ti = 0; ti < s; ++ti)
                    for (std::size_t node = 0; node < p.nodes; ++node)
                        for (std::size_t k = 0; k < d; ++k)
                            emb[node * d + k] +=
                                hd[((bi * s + ti) * p.nodes + node) * d + k];
            samples += b * s;
        }
        std::ofstream out(out_dir + "/embeddings.csv");
        if (!out) throw IoError("cannot write embeddings.csv");
        out.precision(17);
        out << "node";
        for (std::size_t k = 0; k < d; ++k) out << ",e" << k;
        out << "\n";
        for (std::size_t node = 0; node < p.nodes; ++node) {
            out << node;
            for (std::size_t k = 0; k < d; ++k)
                out << "," << (samples ? emb[node * d + k] / static_cast<double>(samples)
                                       : 0.0);
            out << "\n";
        }
    }

    EvalReport report = evaluate(model, split_raw, stats, graph, horizons);
    std::ofstream out(out_dir + "/report.json");
    if (!out) throw IoError("cannot write report.json");
    out << report.to_json() << "\n";
}

std::vector<BenchRow> benchmark_configs(
    const std::vector<std::pair<std::string, StumConfig>>& configs,
    const FrameSeries& fixture, const TrafficGraph& graph, const TrainConfig& tcfg,
    std::size_t steps) {
    std::vector<BenchRow> rows;
    for (const auto& [name, mcfg] : configs) {
        StumModel model(mcfg);
        AdamOptimizer opt(model.parameters(), tcfg);
        std::size_t s = mcfg.seq_len, h = mcfg.horizon;
        std::vector<double> times;
        WindowStream stream(fixture, s, h, tcfg.batch_size, tcfg.seed);
        while (times.size() < steps) {
            auto batch = stream.next();
            if (!batch) {
                stream.reset();
                continue;
            }
            auto t0 = std::chrono::steady_clock::now();
            opt.zero_grad();
            Tensor loss = mae_loss(model.forward(batch->inputs, &graph, true),
                                   batch->targets);
            loss.backward();
            opt.clip_gradients(tcfg.clip_norm);
            opt.step();
            times.push_back(
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                    .count());
        }
        std::sort(times.begin(), times.end());
        rows.push_back({name, model.param_report().trainable, times[times.size() / 2]});
    }
    return rows;
}

void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "config,trainable_params,median_step_seconds\n";
    for (const auto& r : rows)
        out << r.name << "," << r.trainable_params << "," << r.median_step_seconds << "\n";
}

}  // namespace stum
