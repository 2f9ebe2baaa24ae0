#include "stum/lowrank.hpp"

#include <cmath>

namespace stum {

LowRankLinear::LowRankLinear(LowRankConfig cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.in == 0 || cfg.out == 0) throw ConfigError("low-rank layer: zero extent");
    if (cfg.rank < 1 || cfg.rank > std::min(cfg.in, cfg.out))
        throw ConfigError("low-rank layer: rank must be in [1, min(in,out)]");
    double bound = 1.0 / std::sqrt(static_cast<double>(cfg.in));
    base_weight_ = Tensor::uniform({cfg.in, cfg.out}, -bound, bound, rng, false);
    factor_a_ = Tensor::uniform({cfg.in, cfg.rank}, -bound, bound, rng, true);
    factor_b_ = Tensor::zeros({cfg.out, cfg.rank}, true);
    bias_ = Tensor::zeros({cfg.out}, true);
}

double LowRankLinear::scale() const {
    if (cfg_.convention == ScaleConvention::Paper)
        return static_cast<double>(cfg_.rank) / (cfg_.lora_scale + cfg_.eps);
    return cfg_.lora_scale / static_cast<double>(cfg_.rank);
}

Tensor LowRankLinear::delta_weight() const {
    return ::stum::scale(matmul(factor_a_, moveaxis(factor_b_, 0, 1)), scale());
}

Tensor LowRankLinear::effective_weight() const {
    return add(base_weight_, delta_weight());
}

Tensor LowRankLinear::apply_last(const Tensor& x) const {
    if (x.shape().empty() || x.shape().back() != cfg_.in)
        throw ShapeMismatch("low-rank apply: input " + shape_str(x.shape()) +
                            " does not end in " + std::to_string(cfg_.in));
    return linear_last(x, effective_weight(), bias_);
}

Tensor LowRankLinear::apply_axis(const Tensor& x, std::size_t axis) const {
    std::size_t last = x.ndim() - 1;
    if (axis == last) return apply_last(x);
    return axis_linear(x, effective_weight(), bias_, axis);
}

std::size_t LowRankLinear::trainable_param_count() const {
    return param_count_formula(cfg_.in, cfg_.out, cfg_.rank);
}

std::size_t LowRankLinear::dense_equivalent_count() const {
    return cfg_.in * cfg_.out + cfg_.out;
}

void LowRankLinear::collect_params(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".W", base_weight_, false, false, false});
    out.push_back({prefix + ".A", factor_a_, true, true, false});
    out.push_back({prefix + ".B", factor_b_, true, true, false});
    out.push_back({prefix + ".bias", bias_, true, true, false});
}

}  // namespace stum
