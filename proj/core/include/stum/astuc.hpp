#pragma once

#include <optional>

#include "stum/lowrank.hpp"

namespace stum {

enum class MixAxis { Time, Space };

/// One unitized cell: a gated low-rank mixing map along the time or node
/// extent of a B x s x N x d state.
//
//   out = g * relu(Mix(X + carried)) + (1 - g) * carried
class AstucCell {
  public:
    AstucCell(MixAxis axis, std::size_t extent, const LowRankConfig& map_cfg, Rng& rng);

    Tensor forward(const Tensor& x, const Tensor& carried) const;
    Tensor gate() const;  // scalar in (0,1)

    MixAxis axis() const { return axis_; }
    const LowRankLinear& map() const { return map_; }
    LowRankLinear& map() { return map_; }
    Tensor& gate_raw() { return gate_raw_; }
    std::optional<double>& forced_gate() { return forced_gate_; }

    std::size_t trainable_param_count() const;
    void collect_params(const std::string& prefix, ParamList& out) const;

  private:
    MixAxis axis_;
    LowRankLinear map_;
    Tensor gate_raw_;  // scalar, gate = sigmoid(raw), init raw 0 -> g = 0.5
    std::optional<double> forced_gate_;  // diagnostic override, bypasses the parameter
};

/// Merge of the two information carriers into the block's adaptive matrix:
/// dW = m (.) (G_t + G_s + bias) with a learned per-feature retain gate m.
class MemoryMerge {
  public:
    MemoryMerge(std::size_t dim, Rng& rng);

    Tensor forward(const Tensor& g_time, const Tensor& g_space) const;
    Tensor retain() const;  // per-feature gate in (0,1)

    Tensor& retain_raw() { return retain_raw_; }
    const Tensor& retain_raw() const { return retain_raw_; }
    Tensor& bias() { return bias_; }
    const Tensor& bias() const { return bias_; }
    std::optional<double>& forced_retain() { return forced_retain_; }

    void collect_params(const std::string& prefix, ParamList& out) const;

  private:
    Tensor retain_raw_;  // [d], init logit(0.9)
    Tensor bias_;        // [d]
    std::optional<double> forced_retain_;
};

}  // namespace stum
