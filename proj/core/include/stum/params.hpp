#pragma once

#include <string>
#include <vector>

#include "stum/tensor.hpp"

namespace stum {

/// One named parameter as seen by the optimizer and the checkpoint writer.
struct ParamRef {
    std::string name;
    Tensor tensor;
    bool trainable = true;
    bool weight_decay = true;
    bool is_gate = false;  // trained with the gate learning rate, never decayed
};

using ParamList = std::vector<ParamRef>;

inline std::size_t trainable_count(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& p : params)
        if (p.trainable) n += p.tensor.size();
    return n;
}

inline std::size_t frozen_count(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& p : params)
        if (!p.trainable) n += p.tensor.size();
    return n;
}

}  // namespace stum
