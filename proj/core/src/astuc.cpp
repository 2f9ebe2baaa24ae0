#include "stum/astuc.hpp"

#include <cmath>

namespace stum {

AstucCell::AstucCell(MixAxis axis, std::size_t extent, const LowRankConfig& map_cfg,
                     Rng& rng)
    : axis_(axis),
      map_([&] {
          LowRankConfig c = map_cfg;
          c.in = extent;
          c.out = extent;
          c.rank = std::min(c.rank, extent);
          return c;
      }(), rng),
      gate_raw_(Tensor::zeros({1}, true)) {}

Tensor AstucCell::gate() const {
    if (forced_gate_) return Tensor::scalar(*forced_gate_);
    return sigmoid(gate_raw_);
}

Tensor AstucCell::forward(const Tensor& x, const Tensor& carried) const {
    if (x.shape() != carried.shape())
        throw ShapeMismatch("astuc: state " + shape_str(carried.shape()) +
                            " does not match input " + shape_str(x.shape()));
    if (x.ndim() != 4) throw ShapeMismatch("astuc expects B x s x N x d input");
    std::size_t mix_axis = axis_ == MixAxis::Time ? 1 : 2;
    return astuc_mix(gate(), x, carried, map_.effective_weight(), map_.bias(), mix_axis);
}

std::size_t AstucCell::trainable_param_count() const {
    return map_.trainable_param_count() + 1;  // factors + bias + gate
}

void AstucCell::collect_params(const std::string& prefix, ParamList& out) const {
    map_.collect_params(prefix + ".map", out);
    out.push_back({prefix + ".gate", gate_raw_, true, false, false});
}

MemoryMerge::MemoryMerge(std::size_t dim, Rng&) {
    double retain_logit = std::log(0.9 / 0.1);  // start mostly retaining
    retain_raw_ = Tensor::full({dim}, retain_logit, true);
    bias_ = Tensor::zeros({dim}, true);
}

Tensor MemoryMerge::retain() const {
    if (forced_retain_) return Tensor::full(retain_raw_.shape(), *forced_retain_);
    return sigmoid(retain_raw_);
}

Tensor MemoryMerge::forward(const Tensor& g_time, const Tensor& g_space) const {
    if (g_time.shape() != g_space.shape())
        throw ShapeMismatch("memory merge: carrier shapes differ");
    return retain_merge(retain(), g_time, g_space, bias_);
}

void MemoryMerge::collect_params(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".retain", retain_raw_, true, false, false});
    out.push_back({prefix + ".bias", bias_, true, false, false});
}

}  // namespace stum
