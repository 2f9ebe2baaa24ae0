#include "stum/mlrf.hpp"

namespace stum {

MlrfBlock::MlrfBlock(const MlrfConfig& cfg, std::size_t /*block_index*/, Rng& rng)
    : merge_(cfg.dim, rng),
      dropout_(cfg.dropout),
      norm_eps_(cfg.norm_eps),
      variant_(cfg.norm_variant) {
    if (cfg.cells_per_block < 2 || cfg.cells_per_block % 2 != 0)
        throw ConfigError("mlrf: cells per block must be even and >= 2");
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
        throw ConfigError("mlrf: dropout must be in [0,1)");
    cells_.reserve(cfg.cells_per_block);
    for (std::size_t i = 0; i < cfg.cells_per_block; ++i) {
        bool is_time = i % 2 == 0;  // time first, matching the update ordering
        cells_.emplace_back(is_time ? MixAxis::Time : MixAxis::Space,
                            is_time ? cfg.seq_len : cfg.nodes, cfg.map_cfg, rng);
    }
    norm_in_ = Tensor::ones({cfg.dim}, true);
    norm_out_ = Tensor::ones({cfg.dim}, true);
}

BlockOutput MlrfBlock::forward(const Tensor& x, bool training, Rng& dropout_rng) const {
    Tensor normed = rms_norm(x, norm_in_, norm_eps_, variant_);
    Tensor g_space = Tensor::zeros(x.shape());
    Tensor g_time;
    for (std::size_t i = 0; i + 1 < cells_.size(); i += 2) {
        g_time = cells_[i].forward(normed, g_space);
        g_space = cells_[i + 1].forward(normed, g_time);
    }
    Tensor dw = rms_norm(merge_.forward(g_time, g_space), norm_out_, norm_eps_, variant_);
    return {residual_dropout(x, dw, dropout_, training, dropout_rng), dw};
}

std::size_t MlrfBlock::trainable_param_count() const {
    std::size_t n = 0;
    for (const auto& c : cells_) n += c.trainable_param_count();
    n += 2 * norm_in_.size();            // both norm weights
    n += 2 * merge_.retain_raw().size();  // retain + bias (same extent)
    return n;
}

std::size_t MlrfBlock::dense_equivalent_count() const {
    std::size_t n = trainable_param_count();
    for (const auto& c : cells_)
        n += c.map().dense_equivalent_count() - c.map().trainable_param_count();
    return n;
}

void MlrfBlock::collect_params(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".norm_in", norm_in_, true, false, false});
    for (std::size_t i = 0; i < cells_.size(); ++i)
        cells_[i].collect_params(prefix + ".cell." + std::to_string(i), out);
    merge_.collect_params(prefix + ".merge", out);
    out.push_back({prefix + ".norm_out", norm_out_, true, false, false});
}

MlrfStack::MlrfStack(const MlrfConfig& cfg, Rng& rng) {
    if (cfg.num_blocks < 1) throw ConfigError("mlrf: need at least one block");
    blocks_.reserve(cfg.num_blocks);
    for (std::size_t l = 0; l < cfg.num_blocks; ++l) blocks_.emplace_back(cfg, l, rng);
}

BlockOutput MlrfStack::forward(const Tensor& x, bool training, Rng& dropout_rng) const {
    Tensor h = x;
    Tensor dw;
    for (const auto& block : blocks_) {
        BlockOutput out = block.forward(h, training, dropout_rng);
        h = out.residual;
        dw = out.adaptive_matrix;
    }
    return {h, dw};
}

std::size_t MlrfStack::trainable_param_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.trainable_param_count();
    return n;
}

std::size_t MlrfStack::dense_equivalent_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.dense_equivalent_count();
    return n;
}

void MlrfStack::collect_params(const std::string& prefix, ParamList& out) const {
    for (std::size_t l = 0; l < blocks_.size(); ++l)
        blocks_[l].collect_params(prefix + "." + std::to_string(l), out);
}

}  // namespace stum
