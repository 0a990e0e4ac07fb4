#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sdc/common.hpp"
#include "sdc/rng.hpp"

namespace sdc {

using Shape = std::vector<int>;

inline int64_t shape_size(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

inline void check_shape_valid(const Shape& s) {
    if (s.empty() || s.size() > 4) throw DataError("tensor rank must be 1..4, got " + shape_str(s));
    for (int e : s)
        if (e <= 0) throw DataError("tensor extents must be positive, got " + shape_str(s));
}

// Dense row-major tensor, rank 1..4.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        check_shape_valid(shape);
        if (static_cast<int64_t>(data.size()) != shape_size(shape))
            throw DataError("tensor value count " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) {
        check_shape_valid(s);
        std::vector<T> v(shape_size(s), T(0));
        return Tensor(std::move(s), std::move(v));
    }

    static Tensor full(Shape s, T value) {
        check_shape_valid(s);
        std::vector<T> v(shape_size(s), value);
        return Tensor(std::move(s), std::move(v));
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data.size());
        for (size_t i = 0; i < data.size(); ++i) out[i] = static_cast<U>(data[i]);
        return Tensor<U>(shape, std::move(out));
    }
};

// C (m,n) += A (m,k) @ B (k,n)
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<int64_t>(i) * k;
        T* crow = c + static_cast<int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            T av = arow[p];
            const T* brow = b + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C (m,n) += A (m,k) @ B (n,k)^T
template <typename T>
void matmul_abt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<int64_t>(i) * k;
        T* crow = c + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + static_cast<int64_t>(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C (m,n) += A (k,m)^T @ B (k,n)
template <typename T>
void matmul_atb_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const T* arow = a + static_cast<int64_t>(p) * m;
        const T* brow = b + static_cast<int64_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            T av = arow[i];
            T* crow = c + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Named trainable tensors. Insertion order is fixed and drives checkpoint
// layout and optimizer buffer alignment.
template <typename T>
class ParamSet {
  public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) throw DataError("duplicate parameter name: " + name);
        index_[name] = static_cast<int>(names_.size());
        names_.push_back(name);
        tensors_.push_back(std::move(t));
        return tensors_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("unknown parameter: " + name);
        return tensors_[it->second];
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("unknown parameter: " + name);
        return tensors_[it->second];
    }

    size_t size() const { return names_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    Tensor<T>& tensor(size_t i) { return tensors_[i]; }
    const Tensor<T>& tensor(size_t i) const { return tensors_[i]; }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }

    ParamSet zeros_like() const {
        ParamSet out;
        for (size_t i = 0; i < names_.size(); ++i) out.add(names_[i], Tensor<T>::zeros(tensors_[i].shape));
        return out;
    }

    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (size_t i = 0; i < names_.size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
        return out;
    }

  private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> tensors_;
    std::map<std::string, int> index_;
};

// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
template <typename T>
Tensor<T> uniform_init(Rng& rng, Shape shape, int fan_in) {
    double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in)));
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

}  // namespace sdc
