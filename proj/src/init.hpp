#pragma once

#include <cmath>
#include <random>

#include "cmsa/tensor.hpp"

namespace cmsa::detail {

/// Normal weights with variance 1 / fan_in.
template <typename T>
BasicTensor<T> init_weight(Shape shape, std::int64_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(nd(rng));
    return t;
}

}  // namespace cmsa::detail
