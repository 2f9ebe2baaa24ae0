#include "stum/graph_data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace stum {

namespace fs = std::filesystem;
using nlohmann::json;

TrafficGraph TrafficGraph::from_edges(std::size_t num_nodes,
                                      std::vector<Edge> edges) {
    TrafficGraph g;
    g.num_nodes = num_nodes;
    g.adjacency.assign(num_nodes * num_nodes, 0.0);
    for (const Edge& e : edges) {
        if (e.u >= num_nodes || e.v >= num_nodes)
            throw DimensionMismatch("edge (" + std::to_string(e.u) + "," +
                                    std::to_string(e.v) + ") out of range for N=" +
                                    std::to_string(num_nodes));
        if (!std::isfinite(e.weight) || e.weight <= 0.0)
            throw NonFiniteValue("edge weight must be finite and positive");
        g.adjacency[e.u * num_nodes + e.v] = e.weight;
    }
    g.edges = std::move(edges);
    return g;
}

Tensor TrafficGraph::normalized_adjacency() const {
    std::size_t n = num_nodes;
    std::vector<double> a(adjacency);
    for (std::size_t i = 0; i < n; ++i) a[i * n + i] += 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += a[i * n + j];
        for (std::size_t j = 0; j < n; ++j) a[i * n + j] /= row;
    }
    return Tensor::from_data({n, n}, std::move(a));
}

void FrameSeries::validate() const {
    if (values.size() != frames * nodes * channels)
        throw DimensionMismatch("series buffer does not match T*N*C");
    for (double v : values)
        if (!std::isfinite(v)) throw NonFiniteValue("series contains non-finite value");
}

// ---------------------------------------------------------------------------
// loading

namespace {

std::vector<std::string> split_line(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

TrafficGraph load_edges_csv(const std::string& path, std::size_t num_nodes) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open graph file " + path);
    std::vector<TrafficGraph::Edge> edges;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto cells = split_line(line, ',');
        if (first) {
            first = false;
            // tolerate a header row
            char* end = nullptr;
            std::strtod(cells[0].c_str(), &end);
            if (end == cells[0].c_str()) continue;
        }
        if (cells.size() < 2) throw ParseError("bad edge row in " + path + ": " + line);
        try {
            std::size_t u = std::stoul(cells[0]);
            std::size_t v = std::stoul(cells[1]);
            double w = cells.size() > 2 && !cells[2].empty() ? std::stod(cells[2]) : 1.0;
            edges.push_back({u, v, w});
        } catch (const std::exception&) {
            throw ParseError("bad edge row in " + path + ": " + line);
        }
    }
    return TrafficGraph::from_edges(num_nodes, std::move(edges));
}

FrameSeries load_flow_csv(const std::string& path, const LoadExpectations& expect) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open data file " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty data file " + path);
    std::size_t cols = split_line(line, ',').size();
    std::vector<double> values;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split_line(line, ',');
        if (cells.size() != cols)
            throw ParseError("ragged row in " + path + " (expected " +
                             std::to_string(cols) + " cells)");
        for (const auto& c : cells) {
            try {
                values.push_back(std::stod(c));
            } catch (const std::exception&) {
                throw ParseError("non-numeric cell '" + c + "' in " + path);
            }
        }
    }
    FrameSeries s;
    if (expect.nodes) {
        if (cols % *expect.nodes != 0)
            throw DimensionMismatch("column count " + std::to_string(cols) +
                                    " not divisible by expected N=" +
                                    std::to_string(*expect.nodes));
        s.nodes = *expect.nodes;
        s.channels = cols / s.nodes;
    } else {
        s.nodes = cols;
        s.channels = 1;
    }
    s.frames = values.size() / cols;
    s.values = std::move(values);
    s.validate();
    return s;
}

std::pair<fs::path, fs::path> flatbin_paths(const std::string& data_path) {
    fs::path p(data_path);
    fs::path meta = p, blob = p;
    if (p.extension() == ".json") blob.replace_extension(".bin");
    else meta.replace_extension(".json");
    return {meta, blob};
}

FrameSeries load_flatbin(const std::string& data_path) {
    auto [meta_path, blob_path] = flatbin_paths(data_path);
    std::ifstream meta(meta_path);
    if (!meta) throw ParseError("cannot open sidecar " + meta_path.string());
    json j;
    try {
        meta >> j;
    } catch (const std::exception& e) {
        throw ParseError("bad sidecar " + meta_path.string() + ": " + e.what());
    }
    FrameSeries s;
    try {
        s.frames = j.at("T").get<std::size_t>();
        s.nodes = j.at("N").get<std::size_t>();
        s.channels = j.at("C").get<std::size_t>();
        s.interval_minutes = j.value("interval_minutes", 5.0);
    } catch (const std::exception& e) {
        throw ParseError("sidecar missing field: " + std::string(e.what()));
    }
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw ParseError("cannot open blob " + blob_path.string());
    std::size_t n = s.frames * s.nodes * s.channels;
    std::vector<float> raw(n);
    blob.read(reinterpret_cast<char*>(raw.data()),
              static_cast<std::streamsize>(n * sizeof(float)));
    if (static_cast<std::size_t>(blob.gcount()) != n * sizeof(float))
        throw ParseError("blob " + blob_path.string() + " shorter than T*N*C floats");
    s.values.assign(raw.begin(), raw.end());
    s.validate();
    return s;
}

}  // namespace

std::pair<FrameSeries, TrafficGraph> load_dataset(const std::string& data_path,
                                                  const std::string& graph_path,
                                                  DataFormat format,
                                                  const LoadExpectations& expect) {
    FrameSeries series = format == DataFormat::Csv ? load_flow_csv(data_path, expect)
                                                   : load_flatbin(data_path);
    if (expect.nodes && series.nodes != *expect.nodes)
        throw DimensionMismatch("expected N=" + std::to_string(*expect.nodes) + ", got " +
                                std::to_string(series.nodes));
    if (expect.frames && series.frames != *expect.frames)
        throw DimensionMismatch("expected T=" + std::to_string(*expect.frames) +
                                ", got " + std::to_string(series.frames));
    TrafficGraph graph = load_edges_csv(graph_path, series.nodes);
    return {std::move(series), std::move(graph)};
}

void save_flatbin(const FrameSeries& series, const std::string& path_prefix) {
    json j{{"T", series.frames},
           {"N", series.nodes},
           {"C", series.channels},
           {"interval_minutes", series.interval_minutes}};
    std::ofstream meta(path_prefix + ".json");
    if (!meta) throw IoError("cannot write " + path_prefix + ".json");
    meta << j.dump(2) << "\n";
    std::ofstream blob(path_prefix + ".bin", std::ios::binary);
    if (!blob) throw IoError("cannot write " + path_prefix + ".bin");
    std::vector<float> raw(series.values.begin(), series.values.end());
    blob.write(reinterpret_cast<const char*>(raw.data()),
               static_cast<std::streamsize>(raw.size() * sizeof(float)));
}

void save_edges_csv(const TrafficGraph& graph, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << "u,v,weight\n";
    for (const auto& e : graph.edges)
        out << e.u << "," << e.v << "," << e.weight << "\n";
}

// ---------------------------------------------------------------------------
// splitting / normalization / windowing

namespace {

FrameSeries slice_frames(const FrameSeries& s, std::size_t begin, std::size_t count) {
    FrameSeries out;
    out.frames = count;
    out.nodes = s.nodes;
    out.channels = s.channels;
    out.interval_minutes = s.interval_minutes;
    std::size_t stride = s.nodes * s.channels;
    out.values.assign(s.values.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                      s.values.begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
    return out;
}

}  // namespace

SplitSeries split_622(const FrameSeries& series) {
    std::size_t t = series.frames;
    if (t < 10) throw SeriesTooShort("6:2:2 split needs T >= 10, got " + std::to_string(t));
    std::size_t n_train = static_cast<std::size_t>(0.6 * static_cast<double>(t));
    std::size_t n_val = static_cast<std::size_t>(0.2 * static_cast<double>(t));
    std::size_t n_test = t - n_train - n_val;
    return {slice_frames(series, 0, n_train), slice_frames(series, n_train, n_val),
            slice_frames(series, n_train + n_val, n_test)};
}

NormStats fit_normalizer(const FrameSeries& train) {
    std::size_t c_dim = train.channels;
    NormStats st;
    st.mean.assign(c_dim, 0.0);
    st.stddev.assign(c_dim, 0.0);
    st.degenerate.assign(c_dim, false);
    std::size_t per_channel = train.frames * train.nodes;
    for (std::size_t t = 0; t < train.frames; ++t)
        for (std::size_t n = 0; n < train.nodes; ++n)
            for (std::size_t c = 0; c < c_dim; ++c) st.mean[c] += train.at(t, n, c);
    for (double& m : st.mean) m /= static_cast<double>(per_channel);
    for (std::size_t t = 0; t < train.frames; ++t)
        for (std::size_t n = 0; n < train.nodes; ++n)
            for (std::size_t c = 0; c < c_dim; ++c) {
                double d = train.at(t, n, c) - st.mean[c];
                st.stddev[c] += d * d;
            }
    for (std::size_t c = 0; c < c_dim; ++c) {
        st.stddev[c] = std::sqrt(st.stddev[c] / static_cast<double>(per_channel));
        if (st.stddev[c] < 1e-8) {
            std::cerr << "[stum] warning: channel " << c
                      << " has near-zero variance; clamping std to 1\n";
            st.stddev[c] = 1.0;
            st.degenerate[c] = true;
        }
    }
    return st;
}

FrameSeries apply_normalizer(const NormStats& stats, const FrameSeries& x) {
    FrameSeries out = x;
    for (std::size_t t = 0; t < x.frames; ++t)
        for (std::size_t n = 0; n < x.nodes; ++n)
            for (std::size_t c = 0; c < x.channels; ++c)
                out.at(t, n, c) = (x.at(t, n, c) - stats.mean[c]) / stats.stddev[c];
    return out;
}

FrameSeries invert_normalizer(const NormStats& stats, const FrameSeries& x) {
    FrameSeries out = x;
    for (std::size_t t = 0; t < x.frames; ++t)
        for (std::size_t n = 0; n < x.nodes; ++n)
            for (std::size_t c = 0; c < x.channels; ++c)
                out.at(t, n, c) = x.at(t, n, c) * stats.stddev[c] + stats.mean[c];
    return out;
}

std::size_t window_count(std::size_t frames, std::size_t s, std::size_t h) {
    if (frames < s + h) throw SeriesTooShort("need T >= s + h for windowing");
    return frames - s - h + 1;
}

WindowStream::WindowStream(const FrameSeries& series, std::size_t s, std::size_t h,
                           std::size_t batch, std::optional<std::uint64_t> shuffle_seed)
    : series_(series), s_(s), h_(h), batch_(batch) {
    if (s < 1 || h < 1 || batch < 1) throw Error("window stream: s, h, batch must be >= 1");
    std::size_t count = window_count(series.frames, s, h);
    order_.resize(count);
    // order_[k] is the last input frame index t of window k
    std::iota(order_.begin(), order_.end(), s - 1);
    if (shuffle_seed) {
        Rng rng(*shuffle_seed);
        std::shuffle(order_.begin(), order_.end(), rng);
    }
}

void WindowStream::reset() { pos_ = 0; }

std::optional<WindowBatch> WindowStream::next() {
    if (pos_ >= order_.size()) return std::nullopt;
    std::size_t b = std::min(batch_, order_.size() - pos_);
    std::size_t n = series_.nodes, c = series_.channels;
    std::vector<double> in(b * s_ * n * c), tgt(b * h_ * n * c);
    std::vector<std::size_t> origins(b);
    std::size_t frame = n * c;
    for (std::size_t k = 0; k < b; ++k) {
        std::size_t t = order_[pos_ + k];
        origins[k] = t;
        std::copy_n(series_.values.begin() + static_cast<std::ptrdiff_t>((t - s_ + 1) * frame),
                    s_ * frame, in.begin() + static_cast<std::ptrdiff_t>(k * s_ * frame));
        std::copy_n(series_.values.begin() + static_cast<std::ptrdiff_t>((t + 1) * frame),
                    h_ * frame, tgt.begin() + static_cast<std::ptrdiff_t>(k * h_ * frame));
    }
    pos_ += b;
    WindowBatch batch;
    batch.inputs = Tensor::from_data({b, s_, n, c}, std::move(in));
    batch.targets = Tensor::from_data({b, h_, n, c}, std::move(tgt));
    batch.origin_indices = std::move(origins);
    return batch;
}

// ---------------------------------------------------------------------------
// synthetic generator

std::pair<FrameSeries, TrafficGraph> synth_generate(const SynthConfig& cfg) {
    if (cfg.regions < 1 || cfg.nodes < cfg.regions)
        throw ConfigError("synth: need N >= regions >= 1");
    constexpr double kTwoPi = 6.283185307179586;
    std::size_t n = cfg.nodes, t_len = cfg.frames, r_cnt = cfg.regions;

    auto region_of = [&](std::size_t node) { return node * r_cnt / n; };
    auto wave = [&](std::size_t r, std::size_t t) {
        double phase = kTwoPi * static_cast<double>(r) / static_cast<double>(r_cnt);
        double x = kTwoPi * static_cast<double>(t) / static_cast<double>(cfg.period);
        double amp = 40.0 + 10.0 * static_cast<double>(r);
        return 100.0 + amp * std::sin(x + phase) + 15.0 * std::sin(2.0 * x + 2.0 * phase);
    };

    FrameSeries s;
    s.frames = t_len;
    s.nodes = n;
    s.channels = 1;
    s.interval_minutes = 15.0;
    s.values.resize(t_len * n);
    Rng noise_rng(cfg.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t node = 0; node < n; ++node) {
            std::size_t r = region_of(node);
            double v = r_cnt == 1 ? wave(0, t)
                                  : 0.85 * wave(r, t) + 0.15 * wave((r + 1) % r_cnt, t);
            if (cfg.noise > 0.0) v += cfg.noise * gauss(noise_rng);
            s.values[t * n + node] = v;
        }

    // Graph: ring + random chords inside each region, one bridge between
    // consecutive regions.
    Rng graph_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<TrafficGraph::Edge> edges;
    std::vector<std::vector<std::size_t>> members(r_cnt);
    for (std::size_t node = 0; node < n; ++node) members[region_of(node)].push_back(node);
    for (std::size_t r = 0; r < r_cnt; ++r) {
        const auto& m = members[r];
        for (std::size_t i = 0; i + 1 < m.size(); ++i) {
            edges.push_back({m[i], m[i + 1], 1.0});
            edges.push_back({m[i + 1], m[i], 1.0});
        }
        for (std::size_t i = 0; i < m.size(); ++i)
            for (std::size_t j = i + 2; j < m.size(); ++j)
                if (unif(graph_rng) < 0.3) {
                    edges.push_back({m[i], m[j], 1.0});
                    edges.push_back({m[j], m[i], 1.0});
                }
    }
    for (std::size_t r = 0; r + 1 < r_cnt; ++r) {
        edges.push_back({members[r].front(), members[r + 1].front(), 1.0});
        edges.push_back({members[r + 1].front(), members[r].front(), 1.0});
    }
    return {std::move(s), TrafficGraph::from_edges(n, std::move(edges))};
}

}  // namespace stum
