#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "geodiffussr/rng.hpp"

// Tensor storage is kept at a fixed 64-byte alignment. Eigen's vectorized
// reductions split their scalar prologue by runtime pointer alignment, so
// mixed-alignment allocations would make repeated forward passes differ in
// the last float bit and break the bitwise determinism contracts.

namespace gdr {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void check(bool ok, const std::string& msg) {
    if (!ok) fail(msg);
}

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using VecMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

template <typename T, size_t Align = 64>
class AlignedAllocator {
public:
    using value_type = T;
    AlignedAllocator() noexcept = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
    T* allocate(size_t n) {
        void* p = std::aligned_alloc(Align, ((n * sizeof(T) + Align - 1) / Align) * Align);
        if (!p) throw std::bad_alloc();
        return static_cast<T*>(p);
    }
    void deallocate(T* p, size_t) noexcept { std::free(p); }
    template <typename U>
    bool operator==(const AlignedAllocator<U, Align>&) const noexcept { return true; }
    template <typename U>
    bool operator!=(const AlignedAllocator<U, Align>&) const noexcept { return false; }
    template <typename U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
};

template <typename S>
using AlignedVector = std::vector<S, AlignedAllocator<S>>;

// Dense row-major n-d array. Image tensors are NHWC throughout the project.
template <typename S>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), S(0)) {}
    Tensor(Shape shape, S value) : shape_(std::move(shape)), data_(shape_numel(shape_), value) {}
    Tensor(Shape shape, std::initializer_list<S> data)
        : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        check(int64_t(data_.size()) == shape_numel(shape_), "tensor data size mismatch");
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, S value) { return Tensor(std::move(shape), value); }

    static Tensor randn(Shape shape, Rng& rng, S stddev = S(1)) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = S(rng.gaussian()) * stddev;
        return t;
    }

    static Tensor rand_uniform(Shape shape, Rng& rng, S lo = S(0), S hi = S(1)) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = S(rng.uniform(double(lo), double(hi)));
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return int(shape_.size()); }
    int dim(int i) const { return shape_[size_t(i)]; }
    int64_t size() const { return int64_t(data_.size()); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    S& operator[](int64_t i) { return data_[size_t(i)]; }
    const S& operator[](int64_t i) const { return data_[size_t(i)]; }

    AlignedVector<S>& raw() { return data_; }
    const AlignedVector<S>& raw() const { return data_; }

    // 2-d Eigen view as rows x cols; total size must match
    MatMap<S> mat(int64_t rows, int64_t cols) {
        check(rows * cols == size(), "mat view size mismatch");
        return MatMap<S>(data_.data(), rows, cols);
    }
    ConstMatMap<S> mat(int64_t rows, int64_t cols) const {
        check(rows * cols == size(), "mat view size mismatch");
        return ConstMatMap<S>(data_.data(), rows, cols);
    }
    VecMap<S> vec() { return VecMap<S>(data_.data(), size()); }
    ConstVecMap<S> vec() const { return ConstVecMap<S>(data_.data(), size()); }

    Tensor reshaped(Shape new_shape) const {
        check(shape_numel(new_shape) == size(),
              "reshape " + shape_str(shape_) + " -> " + shape_str(new_shape));
        Tensor out = *this;
        out.shape_ = std::move(new_shape);
        return out;
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(S(0)); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (S x : data_)
            if (!std::isfinite(double(x))) return false;
        return true;
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out(shape_);
        for (int64_t i = 0; i < size(); ++i) out[i] = T(data_[size_t(i)]);
        return out;
    }

private:
    Shape shape_;
    AlignedVector<S> data_;
};

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* where) {
    check(a.same_shape(b), std::string(where) + ": shape mismatch " + shape_str(a.shape()) +
                               " vs " + shape_str(b.shape()));
}

// FNV-1a over the raw little-endian bytes; checkpoint and weight-file checksums.
template <typename S>
uint64_t tensor_checksum(const Tensor<S>& t) {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(t.data());
    return fnv1a64(std::string_view(reinterpret_cast<const char*>(p), size_t(t.size()) * sizeof(S)));
}

}  // namespace gdr
