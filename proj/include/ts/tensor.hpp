#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "ts/common.hpp"

namespace ts::nn {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

// Dense row-major tensor. float for training, double for gradient checking.
template <class T>
struct TensorT {
    Shape shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(Shape s) : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape))) {
        check();
    }
    TensorT(Shape s, T fill)
        : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {
        check();
    }
    TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ContractError("tensor data length does not match shape " + shape_str(shape));
        check();
    }

    static TensorT scalar(T v) { return TensorT(Shape{}, std::vector<T>{v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }
    bool is_scalar() const { return data.size() == 1 && shape.empty(); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](size_t i) { return data[i]; }
    const T& operator[](size_t i) const { return data[i]; }

    TensorT reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw ContractError("reshape " + shape_str(shape) + " -> " + shape_str(s));
        TensorT out = *this;
        out.shape = std::move(s);
        return out;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void fill_normal(Rng& rng, double mean, double stddev) {
        for (T& v : data) v = static_cast<T>(rng.normal(mean, stddev));
    }
    void fill_uniform(Rng& rng, double lo, double hi) {
        for (T& v : data) v = static_cast<T>(rng.uniform(lo, hi));
    }

    template <class U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

private:
    void check() const {
        for (int64_t d : shape)
            if (d <= 0) throw ContractError("tensor dims must be positive: " + shape_str(shape));
    }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// C += A * B where A is (m,k), B is (k,n), all row-major. ikj order keeps the
// inner loop contiguous so the compiler vectorizes it.
template <class T>
void matmul_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A * B^T where A is (m,k), B is (n,k).
template <class T>
void matmul_acc_bt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C += A^T * B where A is (k,m), B is (k,n).
template <class T>
void matmul_acc_at(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            T av = arow[i];
            if (av == T(0)) continue;
            T* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Numerically stable softmax along `axis`; output sums to 1 along that axis.
template <class T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
    if (x.rank() == 0) return TensorT<T>::scalar(T(1));
    int r = static_cast<int>(x.rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw ContractError("softmax axis out of range");
    int64_t axis_len = x.shape[axis];
    int64_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= x.shape[i];
    int64_t outer = x.numel() / (axis_len * inner);

    TensorT<T> out(x.shape);
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const T* src = x.ptr() + o * axis_len * inner + in;
            T* dst = out.ptr() + o * axis_len * inner + in;
            T mx = src[0];
            for (int64_t a = 1; a < axis_len; ++a) mx = std::max(mx, src[a * inner]);
            T sum = 0;
            for (int64_t a = 0; a < axis_len; ++a) {
                T e = std::exp(src[a * inner] - mx);
                dst[a * inner] = e;
                sum += e;
            }
            for (int64_t a = 0; a < axis_len; ++a) dst[a * inner] /= sum;
        }
    }
    return out;
}

}  // namespace ts::nn
