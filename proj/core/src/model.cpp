#include "stum/model.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace stum {

using nlohmann::json;

void StumConfig::validate() const {
    if (seq_len < 1 || horizon < 1 || nodes < 1 || in_channels < 1)
        throw ConfigError("model config: all extents must be >= 1");
    if (num_mlrf < 1) throw ConfigError("model config: need at least one MLRF block");
    if (astucs_per_block < 2 || astucs_per_block % 2 != 0)
        throw ConfigError("model config: astucs_per_block must be even and >= 2");
    if (embed_dim < 1) throw ConfigError("model config: embed_dim must be >= 1");
}

FusionGate::FusionGate(GateShape shape, std::size_t channels) {
    std::size_t n = shape == GateShape::Scalar ? 1 : channels;
    raw_ = Tensor::zeros({n}, true);  // sigmoid(0) = 0.5
}

Tensor FusionGate::alpha() const {
    if (forced_alpha_) return Tensor::full(raw_.shape(), *forced_alpha_);
    return sigmoid(raw_);
}

void FusionGate::collect_params(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".raw", raw_, true, false, true});
}

namespace {

MlrfConfig make_mlrf_config(const StumConfig& cfg) {
    MlrfConfig m;
    m.seq_len = cfg.seq_len;
    m.nodes = cfg.nodes;
    m.dim = cfg.embed_dim;
    m.cells_per_block = cfg.astucs_per_block;
    m.num_blocks = cfg.num_mlrf;
    m.dropout = cfg.dropout;
    m.norm_eps = cfg.norm_eps;
    m.norm_variant = cfg.norm_variant;
    m.map_cfg.rank = cfg.effective_rank();
    m.map_cfg.lora_scale = cfg.lora_scale;
    m.map_cfg.eps = cfg.lora_eps;
    m.map_cfg.convention = cfg.scale_convention;
    return m;
}

}  // namespace

StumModel::StumModel(StumConfig cfg) : StumModel(cfg, Rng(cfg.seed)) {}

StumModel::StumModel(StumConfig cfg, Rng rng) : cfg_(cfg), dropout_rng_(cfg.seed ^ 0xd1f0) {
    cfg_.validate();
    LowRankConfig embed_cfg;
    embed_cfg.in = cfg_.in_channels;
    embed_cfg.out = cfg_.embed_dim;
    embed_cfg.rank = std::min({cfg_.effective_rank(), cfg_.in_channels, cfg_.embed_dim});
    embed_cfg.lora_scale = cfg_.lora_scale;
    embed_cfg.eps = cfg_.lora_eps;
    embed_cfg.convention = cfg_.scale_convention;
    embed_ = std::make_unique<LowRankLinear>(embed_cfg, rng);

    stack_ = std::make_unique<MlrfStack>(make_mlrf_config(cfg_), rng);

    head_ = std::make_unique<Dense>(cfg_.seq_len * cfg_.embed_dim,
                                    cfg_.horizon * cfg_.effective_out_channels(), rng);

    BackboneSpec spec;
    spec.kind = cfg_.backbone;
    spec.hidden = cfg_.backbone_hidden;
    spec.seq_len = cfg_.seq_len;
    spec.in_channels = cfg_.in_channels;
    spec.horizon = cfg_.horizon;
    spec.out_channels = cfg_.effective_out_channels();
    backbone_ = std::make_unique<Backbone>(spec, rng);

    gate_ = std::make_unique<FusionGate>(cfg_.gate_shape, cfg_.effective_out_channels());
}

DualFeatures StumModel::extract_dual(const Tensor& x, const TrafficGraph* graph) const {
    if (x.ndim() != 4 || x.shape()[1] != cfg_.seq_len || x.shape()[3] != cfg_.in_channels)
        throw ShapeMismatch("model input must be B x s x N x C matching config, got " +
                            shape_str(x.shape()));
    return {backbone_->forward(x, graph), embed_->apply_last(x)};
}

Tensor StumModel::predict_head(const Tensor& stack_state) const {
    if (stack_state.ndim() != 4) throw ShapeMismatch("predict_head expects B x s x N x d");
    std::size_t b = stack_state.shape()[0], n = stack_state.shape()[2];
    Tensor act = cfg_.head_activation == HeadActivation::Relu
                     ? relu(stack_state)
                     : softmax(stack_state, 3);
    // B x s x N x d -> B x N x (s*d) -> head -> B x h x N x c_out
    Tensor per_node = reshape(moveaxis(act, 1, 2), {b, n, cfg_.seq_len * cfg_.embed_dim});
    Tensor z = head_->apply(per_node);
    return moveaxis(
        reshape(z, {b, n, cfg_.horizon, cfg_.effective_out_channels()}), 1, 2);
}

Tensor StumModel::fuse(const Tensor& z_b, const Tensor& z_t) const {
    if (z_b.shape() != z_t.shape())
        throw ShapeMismatch("fuse: backbone and head outputs differ in shape");
    Tensor a = gate_->alpha();
    Tensor one_minus = add_scalar(scale(a, -1.0), 1.0);
    return add(mul(one_minus, z_b), mul(a, z_t));
}

ForwardDetail StumModel::forward_detail(const Tensor& x, const TrafficGraph* graph,
                                        bool training) {
    DualFeatures feats = extract_dual(x, graph);
    if (cfg_.backbone_only)
        return {feats.backbone_features, Tensor(), feats.backbone_features, Tensor()};
    BlockOutput stack_out = stack_->forward(feats.embedded, training, dropout_rng_);
    Tensor z_t = predict_head(stack_out.residual);
    Tensor z = fuse(feats.backbone_features, z_t);
    return {feats.backbone_features, z_t, z, stack_out.residual};
}

Tensor StumModel::forward(const Tensor& x, const TrafficGraph* graph, bool training) {
    return forward_detail(x, graph, training).fused;
}

ParamList StumModel::parameters() const {
    ParamList out;
    embed_->collect_params("embed", out);
    if (!cfg_.backbone_only) {
        stack_->collect_params("mlrf", out);
        head_->collect_params("head", out);
    }
    backbone_->collect_params("backbone", out);
    if (!cfg_.backbone_only) gate_->collect_params("gate", out);
    return out;
}

ParamReport StumModel::param_report() const {
    ParamReport r;
    ParamList params = parameters();
    r.trainable = stum::trainable_count(params);
    r.frozen = stum::frozen_count(params);
    for (const auto& p : params) {
        if (!p.trainable) continue;
        std::string module = p.name.substr(0, p.name.find('.'));
        r.per_module[module] += p.tensor.size();
    }
    // dense-equivalent: every low-rank map replaced by its full matrix
    r.dense_equivalent = r.trainable;
    r.dense_equivalent += embed_->dense_equivalent_count() - embed_->trainable_param_count();
    if (!cfg_.backbone_only)
        r.dense_equivalent +=
            stack_->dense_equivalent_count() - stack_->trainable_param_count();
    return r;
}

std::string ParamReport::to_json() const {
    json j{{"trainable", trainable},
           {"frozen", frozen},
           {"dense_equivalent", dense_equivalent},
           {"per_module", per_module}};
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// checkpoint: JSON manifest + little-endian raw doubles

void StumModel::save_checkpoint(const std::string& path_prefix) const {
    ParamList params = parameters();
    json manifest;
    manifest["format"] = "stum-checkpoint";
    manifest["version"] = 1;
    manifest["dtype"] = "f64";
    json plist = json::array();
    std::size_t offset = 0;
    for (const auto& p : params) {
        plist.push_back({{"name", p.name},
                         {"shape", p.tensor.shape()},
                         {"offset", offset},
                         {"trainable", p.trainable}});
        offset += p.tensor.size() * sizeof(double);
    }
    manifest["params"] = plist;
    manifest["total_bytes"] = offset;
    std::ofstream meta(path_prefix + ".json");
    if (!meta) throw IoError("cannot write " + path_prefix + ".json");
    meta << manifest.dump(2) << "\n";
    std::ofstream blob(path_prefix + ".bin", std::ios::binary);
    if (!blob) throw IoError("cannot write " + path_prefix + ".bin");
    for (const auto& p : params)
        blob.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                   static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
}

void StumModel::load_checkpoint(const std::string& path_prefix) {
    std::ifstream meta(path_prefix + ".json");
    if (!meta) throw CheckpointMismatch("cannot open " + path_prefix + ".json");
    json manifest;
    try {
        meta >> manifest;
    } catch (const std::exception& e) {
        throw CheckpointMismatch("bad manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "stum-checkpoint")
        throw CheckpointMismatch("not a stum checkpoint");
    std::ifstream blob(path_prefix + ".bin", std::ios::binary);
    if (!blob) throw CheckpointMismatch("cannot open " + path_prefix + ".bin");

    std::map<std::string, std::pair<Shape, std::size_t>> stored;
    for (const auto& e : manifest.at("params")) {
        Shape shape = e.at("shape").get<Shape>();
        stored[e.at("name").get<std::string>()] = {shape, e.at("offset").get<std::size_t>()};
    }
    ParamList params = parameters();
    for (auto& p : params) {
        auto it = stored.find(p.name);
        if (it == stored.end())
            throw CheckpointMismatch("checkpoint missing parameter " + p.name);
        if (it->second.first != p.tensor.shape())
            throw CheckpointMismatch("shape mismatch for " + p.name + ": stored " +
                                     shape_str(it->second.first) + " vs model " +
                                     shape_str(p.tensor.shape()));
        blob.seekg(static_cast<std::streamoff>(it->second.second));
        blob.read(reinterpret_cast<char*>(p.tensor.data().data()),
                  static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
        if (static_cast<std::size_t>(blob.gcount()) != p.tensor.size() * sizeof(double))
            throw CheckpointMismatch("checkpoint blob truncated at " + p.name);
    }
}

}  // namespace stum
