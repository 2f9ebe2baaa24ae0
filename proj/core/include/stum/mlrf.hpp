#pragma once

#include <vector>

#include "stum/astuc.hpp"

namespace stum {

struct MlrfConfig {
    std::size_t seq_len = 0, nodes = 0, dim = 0;
    std::size_t cells_per_block = 8;  // even, alternating time/space
    std::size_t num_blocks = 4;
    double dropout = 0.1;
    double norm_eps = 1e-8;
    NormVariant norm_variant = NormVariant::Rms;
    LowRankConfig map_cfg;  // in/out filled per cell from the mixed extent
};

struct BlockOutput {
    Tensor residual;         // H, carried stream
    Tensor adaptive_matrix;  // dW after Add&Norm
};

/// One residual fusion block: pre-norm, an alternating chain of time/space
/// cells, memory merge with Add&Norm, and a dropout residual carry.
class MlrfBlock {
  public:
    MlrfBlock(const MlrfConfig& cfg, std::size_t block_index, Rng& rng);

    BlockOutput forward(const Tensor& x, bool training, Rng& dropout_rng) const;

    std::vector<AstucCell>& cells() { return cells_; }
    const std::vector<AstucCell>& cells() const { return cells_; }
    MemoryMerge& merge() { return merge_; }
    const MemoryMerge& merge() const { return merge_; }
    std::size_t trainable_param_count() const;
    std::size_t dense_equivalent_count() const;
    void collect_params(const std::string& prefix, ParamList& out) const;

  private:
    std::vector<AstucCell> cells_;
    MemoryMerge merge_;
    Tensor norm_in_, norm_out_;  // [d] rms weights
    double dropout_;
    double norm_eps_;
    NormVariant variant_;
};

class MlrfStack {
  public:
    MlrfStack(const MlrfConfig& cfg, Rng& rng);

    BlockOutput forward(const Tensor& x, bool training, Rng& dropout_rng) const;

    std::vector<MlrfBlock>& blocks() { return blocks_; }
    const std::vector<MlrfBlock>& blocks() const { return blocks_; }
    std::size_t trainable_param_count() const;
    std::size_t dense_equivalent_count() const;
    void collect_params(const std::string& prefix, ParamList& out) const;

  private:
    std::vector<MlrfBlock> blocks_;
};

}  // namespace stum
