#ifndef DV_TENSOR_HPP
#define DV_TENSOR_HPP

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dv {

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

// Dense row-major tensor. Last axis is contiguous.
template <class S>
struct TensorT {
    std::vector<int64_t> shape;
    std::vector<S> data;

    TensorT() = default;
    explicit TensorT(std::vector<int64_t> sh, S fill = S(0))
        : shape(std::move(sh)), data(numel_of(shape), fill) {
        for (int64_t d : shape) check(d >= 1, "tensor: dimension < 1");
    }
    TensorT(std::vector<int64_t> sh, std::vector<S> d)
        : shape(std::move(sh)), data(std::move(d)) {
        check((int64_t)data.size() == numel_of(shape), "tensor: shape/data mismatch");
    }

    static int64_t numel_of(const std::vector<int64_t>& sh) {
        int64_t n = 1;
        for (int64_t d : sh) n *= d;
        return n;
    }

    int64_t numel() const { return (int64_t)data.size(); }
    int rank() const { return (int)shape.size(); }
    int64_t dim(int i) const { return shape[(size_t)i]; }

    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }

    S& operator[](int64_t i) { return data[(size_t)i]; }
    const S& operator[](int64_t i) const { return data[(size_t)i]; }

    // flat offset for up to 4d indexing
    int64_t off2(int64_t a, int64_t b) const { return a * shape[1] + b; }
    int64_t off3(int64_t a, int64_t b, int64_t c) const {
        return (a * shape[1] + b) * shape[2] + c;
    }
    int64_t off4(int64_t a, int64_t b, int64_t c, int64_t d) const {
        return ((a * shape[1] + b) * shape[2] + c) * shape[3] + d;
    }

    S& at2(int64_t a, int64_t b) { return data[(size_t)off2(a, b)]; }
    S& at3(int64_t a, int64_t b, int64_t c) { return data[(size_t)off3(a, b, c)]; }
    S& at4(int64_t a, int64_t b, int64_t c, int64_t d) { return data[(size_t)off4(a, b, c, d)]; }
    S at2(int64_t a, int64_t b) const { return data[(size_t)off2(a, b)]; }
    S at3(int64_t a, int64_t b, int64_t c) const { return data[(size_t)off3(a, b, c)]; }
    S at4(int64_t a, int64_t b, int64_t c, int64_t d) const { return data[(size_t)off4(a, b, c, d)]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    TensorT reshaped(std::vector<int64_t> sh) const {
        check(numel_of(sh) == numel(), "reshape: element count mismatch");
        TensorT out;
        out.shape = std::move(sh);
        out.data = data;
        return out;
    }

    template <class T>
    TensorT<T> cast() const {
        TensorT<T> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = (T)data[i];
        return out;
    }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

template <class S>
inline S max_abs_diff(const TensorT<S>& a, const TensorT<S>& b) {
    check(a.same_shape(b), "max_abs_diff: shape mismatch");
    S m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        S d = a[i] - b[i];
        if (d < 0) d = -d;
        if (d > m) m = d;
    }
    return m;
}

}  // namespace dv

#endif
