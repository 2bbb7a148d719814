#pragma once

#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace cmsa {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Allocator returning 64-byte aligned blocks, so vectorized kernels take
/// the same path for every buffer and results do not depend on the heap.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
        return true;
    }
};

/// Dense row-major array. Feature maps are laid out N x H x W x C.
template <typename T>
class BasicTensor {
public:
    using value_type = T;
    using Storage = std::vector<T, AlignedAllocator<T>>;

    BasicTensor() = default;
    explicit BasicTensor(Shape shape, T fill = T{0});
    BasicTensor(Shape shape, Storage data);
    BasicTensor(Shape shape, const std::vector<T>& data) : BasicTensor(std::move(shape), Storage(data.begin(), data.end())) {}
    BasicTensor(Shape shape, std::initializer_list<T> data) : BasicTensor(std::move(shape), Storage(data)) {}

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape), T{0}); }
    static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), T{1}); }

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    /// Negative axes count from the back.
    std::int64_t dim(int axis) const;
    std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    /// Multi-index access, bounds-checked.
    T& at(std::initializer_list<std::int64_t> index);
    const T& at(std::initializer_list<std::int64_t> index) const;

    BasicTensor reshaped(Shape shape) const&;
    BasicTensor reshaped(Shape shape) &&;

    template <typename U>
    BasicTensor<U> cast() const {
        typename BasicTensor<U>::Storage out(data_.begin(), data_.end());
        return BasicTensor<U>(shape_, std::move(out));
    }

    bool all_finite() const;

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    std::int64_t offset(std::initializer_list<std::int64_t> index) const;

    Shape shape_;
    Storage data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Largest elementwise |a - b|. Shapes must match.
template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Keeps freed activation buffers in the process heap instead of returning
/// them to the OS, so repeated training steps do not re-fault fresh pages.
void retain_freed_memory();

}  // namespace cmsa
