#include "cmsa/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cmsa/errors.hpp"

namespace cmsa {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw ConfigError("tensor dimensions must be positive, got " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
        throw ConfigError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                          shape_str(shape_));
    }
}

template <typename T>
std::int64_t BasicTensor<T>::dim(int axis) const {
    int r = rank();
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw UsageError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(a)];
}

template <typename T>
std::int64_t BasicTensor<T>::offset(std::initializer_list<std::int64_t> index) const {
    if (static_cast<int>(index.size()) != rank()) throw UsageError("index rank mismatch for " + shape_str(shape_));
    std::int64_t off = 0;
    std::size_t i = 0;
    for (auto v : index) {
        if (v < 0 || v >= shape_[i]) throw UsageError("index out of range for " + shape_str(shape_));
        off = off * shape_[i] + v;
        ++i;
    }
    return off;
}

template <typename T>
T& BasicTensor<T>::at(std::initializer_list<std::int64_t> index) {
    return data_[static_cast<std::size_t>(offset(index))];
}

template <typename T>
const T& BasicTensor<T>::at(std::initializer_list<std::int64_t> index) const {
    return data_[static_cast<std::size_t>(offset(index))];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const& {
    return BasicTensor(std::move(shape), data_);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) && {
    return BasicTensor(std::move(shape), std::move(data_));
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw UsageError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template double max_abs_diff(const BasicTensor<float>&, const BasicTensor<float>&);
template double max_abs_diff(const BasicTensor<double>&, const BasicTensor<double>&);

void retain_freed_memory() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

}  // namespace cmsa
