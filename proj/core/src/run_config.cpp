#include "stum/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace stum {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::size_t parse_count(const std::string& key, const std::string& v) {
    try {
        long long n = std::stoll(v);
        if (n < 0) throw std::invalid_argument("negative");
        return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
        throw ConfigError("bad integer for " + key + ": '" + v + "'");
    }
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        return std::stod(v);
    } catch (const std::exception&) {
        throw ConfigError("bad number for " + key + ": '" + v + "'");
    }
}

std::vector<std::size_t> parse_count_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        cell = trim(cell);
        if (!cell.empty()) out.push_back(parse_count(key, cell));
    }
    if (out.empty()) throw ConfigError("empty list for " + key);
    return out;
}

std::string join_counts(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (key == "model.seq_len") model.seq_len = parse_count(key, v);
    else if (key == "model.horizon") model.horizon = parse_count(key, v);
    else if (key == "model.embed_dim") model.embed_dim = parse_count(key, v);
    else if (key == "model.num_mlrf") model.num_mlrf = parse_count(key, v);
    else if (key == "model.astucs_per_block") model.astucs_per_block = parse_count(key, v);
    else if (key == "model.rank") model.rank = parse_count(key, v);
    else if (key == "model.lora_scale") model.lora_scale = parse_real(key, v);
    else if (key == "model.lora_scale_convention") {
        if (v == "paper") model.scale_convention = ScaleConvention::Paper;
        else if (v == "alpha_over_r") model.scale_convention = ScaleConvention::AlphaOverR;
        else throw ConfigError("model.lora_scale_convention must be paper|alpha_over_r");
    } else if (key == "model.norm_variant") {
        if (v == "rms") model.norm_variant = NormVariant::Rms;
        else if (v == "paper_eq9") model.norm_variant = NormVariant::PaperEq9;
        else throw ConfigError("model.norm_variant must be rms|paper_eq9");
    } else if (key == "model.dropout") model.dropout = parse_real(key, v);
    else if (key == "model.gate_shape") {
        if (v == "scalar") model.gate_shape = GateShape::Scalar;
        else if (v == "per_channel") model.gate_shape = GateShape::PerChannel;
        else throw ConfigError("model.gate_shape must be scalar|per_channel");
    } else if (key == "model.head_activation") {
        if (v == "relu") model.head_activation = HeadActivation::Relu;
        else if (v == "softmax") model.head_activation = HeadActivation::Softmax;
        else throw ConfigError("model.head_activation must be relu|softmax");
    } else if (key == "model.backbone") {
        if (v == "mlp") model.backbone = BackboneKind::Mlp;
        else if (v == "graphconv") model.backbone = BackboneKind::GraphConv;
        else throw ConfigError("model.backbone must be mlp|graphconv");
    } else if (key == "model.backbone_hidden")
        model.backbone_hidden = parse_count_list(key, v);
    else if (key == "model.backbone_only")
        model.backbone_only = v == "true" || v == "1";
    else if (key == "model.seed") model.seed = parse_count(key, v);
    else if (key == "train.lr") train.lr_theta = parse_real(key, v);
    else if (key == "train.lr_alpha") train.lr_alpha = parse_real(key, v);
    else if (key == "train.weight_decay") train.weight_decay = parse_real(key, v);
    else if (key == "train.max_epochs") train.max_epochs = parse_count(key, v);
    else if (key == "train.patience") train.patience = parse_count(key, v);
    else if (key == "train.batch_size") train.batch_size = parse_count(key, v);
    else if (key == "train.clip_norm") train.clip_norm = parse_real(key, v);
    else if (key == "train.seed") train.seed = parse_count(key, v);
    else if (key == "data.path") data.path = v;
    else if (key == "data.graph") data.graph_path = v;
    else if (key == "data.format") {
        if (v == "csv") data.format = DataFormat::Csv;
        else if (v == "flatbin") data.format = DataFormat::Flatbin;
        else throw ConfigError("data.format must be csv|flatbin");
    } else if (key == "data.expected_nodes") data.expected_nodes = parse_count(key, v);
    else if (key == "data.expected_frames") data.expected_frames = parse_count(key, v);
    else if (key == "synth.nodes") synth.nodes = parse_count(key, v);
    else if (key == "synth.frames") synth.frames = parse_count(key, v);
    else if (key == "synth.regions") synth.regions = parse_count(key, v);
    else if (key == "synth.period") synth.period = parse_count(key, v);
    else if (key == "synth.noise") synth.noise = parse_real(key, v);
    else if (key == "synth.seed") synth.seed = parse_count(key, v);
    else if (key == "run.out_dir") out_dir = v;
    else if (key == "run.horizons") horizons = parse_count_list(key, v);
    else if (key == "run.mape_eps") mape_eps = parse_real(key, v);
    else throw ConfigError("unknown config key: " + key);
}

void RunConfig::apply_set_flag(const std::string& kv) {
    std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
        throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply(trim(kv.substr(0, eq)), kv.substr(eq + 1));
}

RunConfig RunConfig::from_file(const std::string& path) {
    RunConfig cfg;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) +
                              ": expected 'section.key = value'");
        cfg.apply(trim(t.substr(0, eq)), t.substr(eq + 1));
    }
    return cfg;
}

void RunConfig::apply_environment() {
    if (const char* s = std::getenv("STUM_SEED")) {
        std::size_t seed = parse_count("STUM_SEED", s);
        model.seed = seed;
        train.seed = seed;
        synth.seed = seed;
    }
    if (const char* s = std::getenv("STUM_THREADS")) {
        parse_count("STUM_THREADS", s);  // engine is single-threaded; validate only
    }
}

std::string RunConfig::serialize() const {
    std::ostringstream os;
    os.precision(17);
    os << "model.seq_len = " << model.seq_len << "\n";
    os << "model.horizon = " << model.horizon << "\n";
    os << "model.embed_dim = " << model.embed_dim << "\n";
    os << "model.num_mlrf = " << model.num_mlrf << "\n";
    os << "model.astucs_per_block = " << model.astucs_per_block << "\n";
    os << "model.rank = " << model.rank << "\n";
    os << "model.lora_scale = " << model.lora_scale << "\n";
    os << "model.lora_scale_convention = "
       << (model.scale_convention == ScaleConvention::Paper ? "paper" : "alpha_over_r")
       << "\n";
    os << "model.norm_variant = "
       << (model.norm_variant == NormVariant::Rms ? "rms" : "paper_eq9") << "\n";
    os << "model.dropout = " << model.dropout << "\n";
    os << "model.gate_shape = "
       << (model.gate_shape == GateShape::Scalar ? "scalar" : "per_channel") << "\n";
    os << "model.head_activation = "
       << (model.head_activation == HeadActivation::Relu ? "relu" : "softmax") << "\n";
    os << "model.backbone = "
       << (model.backbone == BackboneKind::Mlp ? "mlp" : "graphconv") << "\n";
    os << "model.backbone_hidden = " << join_counts(model.backbone_hidden) << "\n";
    os << "model.backbone_only = " << (model.backbone_only ? "true" : "false") << "\n";
    os << "model.seed = " << model.seed << "\n";
    os << "train.lr = " << train.lr_theta << "\n";
    os << "train.lr_alpha = " << train.lr_alpha << "\n";
    os << "train.weight_decay = " << train.weight_decay << "\n";
    os << "train.max_epochs = " << train.max_epochs << "\n";
    os << "train.patience = " << train.patience << "\n";
    os << "train.batch_size = " << train.batch_size << "\n";
    os << "train.clip_norm = " << train.clip_norm << "\n";
    os << "train.seed = " << train.seed << "\n";
    os << "data.path = " << data.path << "\n";
    os << "data.graph = " << data.graph_path << "\n";
    os << "data.format = " << (data.format == DataFormat::Csv ? "csv" : "flatbin")
       << "\n";
    os << "data.expected_nodes = " << data.expected_nodes << "\n";
    os << "data.expected_frames = " << data.expected_frames << "\n";
    os << "synth.nodes = " << synth.nodes << "\n";
    os << "synth.frames = " << synth.frames << "\n";
    os << "synth.regions = " << synth.regions << "\n";
    os << "synth.period = " << synth.period << "\n";
    os << "synth.noise = " << synth.noise << "\n";
    os << "synth.seed = " << synth.seed << "\n";
    os << "run.out_dir = " << out_dir << "\n";
    os << "run.horizons = " << join_counts(horizons) << "\n";
    os << "run.mape_eps = " << mape_eps << "\n";
    return os.str();
}

void RunConfig::write_resolved(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << serialize();
}

std::pair<FrameSeries, TrafficGraph> RunConfig::load_or_generate() const {
    if (data.path.empty()) return synth_generate(synth);
    LoadExpectations expect;
    if (data.expected_nodes) expect.nodes = data.expected_nodes;
    if (data.expected_frames) expect.frames = data.expected_frames;
    if (data.graph_path.empty())
        throw ConfigError("data.path set but data.graph missing");
    return load_dataset(data.path, data.graph_path, data.format, expect);
}

}  // namespace stum
