#pragma once

#include <string>
#include <vector>

#include "stum/graph_data.hpp"
#include "stum/model.hpp"
#include "stum/trainer.hpp"

namespace stum {

/// Single source of configuration for every CLI command: a flat
/// `section.key = value` text file plus repeated `--set` overrides.
struct RunConfig {
    StumConfig model;
    TrainConfig train;
    SynthConfig synth;
    struct Data {
        std::string path;        // empty = use the synthetic generator
        std::string graph_path;
        DataFormat format = DataFormat::Flatbin;
        std::size_t expected_nodes = 0;
        std::size_t expected_frames = 0;
    } data;
    std::string out_dir = "out";
    std::vector<std::size_t> horizons{3, 6, 12};
    double mape_eps = 1e-3;

    static RunConfig from_file(const std::string& path);
    void apply(const std::string& key, const std::string& value);
    void apply_set_flag(const std::string& key_equals_value);
    void apply_environment();  // STUM_SEED, STUM_THREADS
    std::string serialize() const;
    void write_resolved(const std::string& path) const;

    /// Loads the configured dataset or generates the synthetic one.
    std::pair<FrameSeries, TrafficGraph> load_or_generate() const;
};

}  // namespace stum
