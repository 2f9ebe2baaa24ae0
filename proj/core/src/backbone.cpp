#include "stum/backbone.hpp"

#include <cmath>

namespace stum {

Dense::Dense(std::size_t in, std::size_t out, Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = Tensor::uniform({in, out}, -bound, bound, rng, true);
    bias = Tensor::zeros({out}, true);
}

Tensor Dense::apply(const Tensor& x) const {
    std::size_t in = weight.shape()[0];
    if (x.shape().empty() || x.shape().back() != in)
        throw ShapeMismatch("dense apply: input " + shape_str(x.shape()) +
                            " does not end in " + std::to_string(in));
    return linear_last(x, weight, bias);
}

void Dense::collect_params(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".W", weight, true, true, false});
    out.push_back({prefix + ".b", bias, true, true, false});
}

Backbone::Backbone(BackboneSpec spec, Rng& rng) : spec_(std::move(spec)) {
    if (spec_.seq_len == 0 || spec_.in_channels == 0 || spec_.horizon == 0 ||
        spec_.out_channels == 0)
        throw ConfigError("backbone spec has zero extents");
    std::size_t in = spec_.seq_len * spec_.in_channels;
    for (std::size_t hdim : spec_.hidden) {
        layers_.emplace_back(in, hdim, rng);
        in = hdim;
    }
    layers_.emplace_back(in, spec_.horizon * spec_.out_channels, rng);
}

Tensor Backbone::forward(const Tensor& x, const TrafficGraph* graph) const {
    if (x.ndim() != 4 || x.shape()[1] != spec_.seq_len ||
        x.shape()[3] != spec_.in_channels)
        throw ShapeMismatch("backbone input must be B x s x N x C, got " +
                            shape_str(x.shape()));
    std::size_t b = x.shape()[0], n = x.shape()[2];
    // B x s x N x C -> B x N x (s*C)
    Tensor per_node =
        reshape(moveaxis(x, 1, 2), {b, n, spec_.seq_len * spec_.in_channels});
    if (spec_.kind == BackboneKind::GraphConv) {
        if (!graph) throw MissingGraph("graphconv backbone needs a graph");
        if (graph->num_nodes != n)
            throw DimensionMismatch("graph N does not match input node extent");
        per_node = matmul(graph->normalized_adjacency(), per_node);
    }
    Tensor h = per_node;
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = relu(layers_[i].apply(h));
    Tensor z = layers_.back().apply(h);  // B x N x (h*c_out)
    return moveaxis(reshape(z, {b, n, spec_.horizon, spec_.out_channels}), 1, 2);
}

void Backbone::collect_params(const std::string& prefix, ParamList& out) const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
        layers_[i].collect_params(prefix + ".fc" + std::to_string(i), out);
}

std::size_t Backbone::trainable_param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

}  // namespace stum
