#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stum/tensor.hpp"

namespace stum {

struct TrafficGraph {
    struct Edge {
        std::size_t u, v;
        double weight;
    };
    std::size_t num_nodes = 0;
    std::vector<Edge> edges;
    std::vector<double> adjacency;  // row-major N x N

    static TrafficGraph from_edges(std::size_t num_nodes, std::vector<Edge> edges);
    double at(std::size_t u, std::size_t v) const { return adjacency[u * num_nodes + v]; }

    /// Row-normalized adjacency with self loops, D^{-1}(A + I).
    Tensor normalized_adjacency() const;
};

/// T x N x C signal series, row-major (t-major, node-middle, channel-minor).
struct FrameSeries {
    std::size_t frames = 0, nodes = 0, channels = 0;
    std::vector<double> values;
    double interval_minutes = 5.0;

    double& at(std::size_t t, std::size_t n, std::size_t c) {
        return values[(t * nodes + n) * channels + c];
    }
    double at(std::size_t t, std::size_t n, std::size_t c) const {
        return values[(t * nodes + n) * channels + c];
    }
    void validate() const;
};

struct NormStats {
    std::vector<double> mean, stddev;
    std::vector<bool> degenerate;  // channels whose std was clamped to 1
};

struct WindowBatch {
    Tensor inputs;   // B x s x N x C
    Tensor targets;  // B x h x N x C
    std::vector<std::size_t> origin_indices;  // last input frame t per sample
};

enum class DataFormat { Csv, Flatbin };

struct LoadExpectations {
    std::optional<std::size_t> nodes;
    std::optional<std::size_t> frames;
};

std::pair<FrameSeries, TrafficGraph> load_dataset(const std::string& data_path,
                                                  const std::string& graph_path,
                                                  DataFormat format,
                                                  const LoadExpectations& expect = {});

void save_flatbin(const FrameSeries& series, const std::string& path_prefix);
void save_edges_csv(const TrafficGraph& graph, const std::string& path);

struct SplitSeries {
    FrameSeries train, val, test;
};

/// Chronological 6:2:2 split: floor(0.6T), floor(0.2T), remainder.
SplitSeries split_622(const FrameSeries& series);

NormStats fit_normalizer(const FrameSeries& train);
FrameSeries apply_normalizer(const NormStats& stats, const FrameSeries& x);
FrameSeries invert_normalizer(const NormStats& stats, const FrameSeries& x);

std::size_t window_count(std::size_t frames, std::size_t s, std::size_t h);

/// Streams minibatches of sliding windows over one split. Single consumer.
class WindowStream {
  public:
    WindowStream(const FrameSeries& series, std::size_t s, std::size_t h,
                 std::size_t batch, std::optional<std::uint64_t> shuffle_seed = {});
    std::optional<WindowBatch> next();
    void reset();
    std::size_t total_windows() const { return order_.size(); }

  private:
    const FrameSeries& series_;
    std::size_t s_, h_, batch_, pos_ = 0;
    std::vector<std::size_t> order_;
};

struct SynthConfig {
    std::size_t nodes = 20;
    std::size_t frames = 500;
    std::size_t regions = 3;
    std::size_t period = 96;  // frames per daily cycle
    double noise = 0.05;      // std of additive per-node gaussian noise
    std::uint64_t seed = 1;
};

/// Region-clustered synthetic traffic: each region follows its own periodic
/// waveform blended with the next region's, plus per-node noise.
std::pair<FrameSeries, TrafficGraph> synth_generate(const SynthConfig& cfg);

}  // namespace stum
