#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <type_traits>

namespace cmsa::detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<RowMat<T>> map(T* p, std::int64_t rows, std::int64_t cols) {
    return Eigen::Map<RowMat<T>>(p, rows, cols);
}

template <typename T>
Eigen::Map<const RowMat<T>> cmap(const T* p, std::int64_t rows, std::int64_t cols) {
    return Eigen::Map<const RowMat<T>>(p, rows, cols);
}

// Column block of a row-major matrix whose rows are `stride` apart.
template <typename T>
Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>> smap(T* p, std::int64_t rows, std::int64_t cols, std::int64_t stride) {
    return Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>(p, rows, cols, Eigen::OuterStride<>(stride));
}

template <typename T>
Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> csmap(const T* p, std::int64_t rows, std::int64_t cols,
                                                            std::int64_t stride) {
    return Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>(p, rows, cols, Eigen::OuterStride<>(stride));
}

// Fixed-length array view; the same lane always takes the same code path
// whatever the address, so results do not depend on buffer alignment.
template <int K>
struct Block {
    template <typename T>
    auto operator()(T* p) const {
        using A = Eigen::Array<std::remove_const_t<T>, K, 1>;
        if constexpr (std::is_const_v<T>)
            return Eigen::Map<const A>(p);
        else
            return Eigen::Map<A>(p);
    }
};

// Calls f(offset, view) over [0, n) in blocks of 16, then one element at a time.
template <typename F>
void blockwise(std::int64_t n, F&& f) {
    constexpr int K = 16;
    std::int64_t i = 0;
    for (; i + K <= n; i += K) f(i, Block<K>{});
    for (; i < n; ++i) f(i, Block<1>{});
}

template <typename T>
double sum_double(const T* p, std::int64_t n) {
    double s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += p[i];
    return s;
}

template <typename T>
double dot_double(const T* a, const T* b, std::int64_t n) {
    double s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

}  // namespace cmsa::detail
