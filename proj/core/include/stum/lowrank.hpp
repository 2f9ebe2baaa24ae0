#pragma once

#include "stum/params.hpp"
#include "stum/tensor.hpp"

namespace stum {

enum class ScaleConvention { Paper, AlphaOverR };

struct LowRankConfig {
    std::size_t in = 0, out = 0;
    std::size_t rank = 1;
    double lora_scale = 1.0;
    double eps = 1e-8;
    ScaleConvention convention = ScaleConvention::Paper;
};

/// Linear map y = (W + A B^T * scale) x + b with a frozen dense base W and
/// trainable rank-r factors. The Paper convention scales by r/(alpha + eps),
/// AlphaOverR by alpha/r.
class LowRankLinear {
  public:
    LowRankLinear(LowRankConfig cfg, Rng& rng);

    Tensor delta_weight() const;      // in x out
    Tensor effective_weight() const;  // W + delta
    Tensor apply_last(const Tensor& x) const;
    Tensor apply_axis(const Tensor& x, std::size_t axis) const;

    std::size_t trainable_param_count() const;
    std::size_t dense_equivalent_count() const;
    static std::size_t param_count_formula(std::size_t in, std::size_t out,
                                           std::size_t rank) {
        return rank * (in + out) + out;
    }
    double scale() const;

    const LowRankConfig& config() const { return cfg_; }
    Tensor& base() { return base_weight_; }
    const Tensor& base() const { return base_weight_; }
    Tensor& factor_a() { return factor_a_; }
    Tensor& factor_b() { return factor_b_; }
    Tensor& bias() { return bias_; }
    const Tensor& bias() const { return bias_; }

    void collect_params(const std::string& prefix, ParamList& out) const;

  private:
    LowRankConfig cfg_;
    Tensor base_weight_;  // in x out, frozen
    Tensor factor_a_;     // in x r
    Tensor factor_b_;     // out x r
    Tensor bias_;         // out
};

}  // namespace stum
