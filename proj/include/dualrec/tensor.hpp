#pragma once

// Dense row-major tensors plus the small numeric helpers shared by every
// trainable module. Scalar type is a template parameter; the pipeline uses
// double, float instantiations exist for reduced-precision runs.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualrec {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream oss;
    oss << '(';
    for (size_t i = 0; i < s.size(); ++i) oss << (i ? "," : "") << s[i];
    oss << ')';
    return oss.str();
}

template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;

    TensorT() = default;
    explicit TensorT(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), T(0)) {}
    TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != numel(shape))
            throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape));
    }

    static TensorT zeros(Shape s) { return TensorT(std::move(s)); }
    static TensorT full(Shape s, T v) {
        TensorT t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() >= 2 ? shape[1] : 1; }
    bool is_scalar() const { return data.size() == 1; }

    T item() const {
        if (!is_scalar()) throw std::logic_error("item() on non-scalar tensor " + shape_str(shape));
        return data[0];
    }

    T& at(int i) { return data[static_cast<size_t>(i)]; }
    T at(int i) const { return data[static_cast<size_t>(i)]; }
    T& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
    T at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

    const T* row_ptr(int i) const { return data.data() + static_cast<size_t>(i) * cols(); }
    T* row_ptr(int i) { return data.data() + static_cast<size_t>(i) * cols(); }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }
};

using Tensor = TensorT<double>;

// Deterministic RNG. mt19937_64 gives a portable bit stream; the float
// transforms are hand-rolled because std::normal_distribution output is
// implementation defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // uniform in [0,1) with 53-bit resolution
    double uniform() {
        const std::uint64_t bits = engine_() >> 11;
        return static_cast<double>(bits) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.28318530717958647692 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // unbiased integer in [0, n)
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("next_below(0)");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v = engine_();
        while (v >= limit) v = engine_();
        return v % n;
    }

    int index(int n) { return static_cast<int>(next_below(static_cast<std::uint64_t>(n))); }

    template <typename V>
    void shuffle(std::vector<V>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // weighted pick; weights need not be normalized
    int pick_weighted(const std::vector<double>& w) {
        double total = std::accumulate(w.begin(), w.end(), 0.0);
        double r = uniform() * total;
        for (size_t i = 0; i < w.size(); ++i) {
            r -= w[i];
            if (r < 0.0) return static_cast<int>(i);
        }
        return static_cast<int>(w.size()) - 1;
    }

    std::uint64_t raw() { return engine_(); }

    // independent stream for a named stage, stable across call order
    static std::uint64_t stream_seed(std::uint64_t master, const std::string& tag) {
        std::uint64_t h = 1469598103934665603ull ^ master;
        for (char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        h ^= master >> 32;
        h *= 1099511628211ull;
        return h;
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <typename T = double>
TensorT<T> randn(Rng& rng, Shape s, T stddev = T(1)) {
    TensorT<T> t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * static_cast<double>(stddev));
    return t;
}

// C(n,m) += A(n,k) * B(k,m)
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        T* crow = c + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(n,m) += A(n,k) * B(m,k)^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        T* crow = c + static_cast<size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const T* brow = b + static_cast<size_t>(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C(k,m) += A(n,k)^T * B(n,m)
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        const T* brow = b + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            T* crow = c + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
T dot_span(const T* a, const T* b, int n) {
    T acc = T(0);
    for (int i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
T sq_dist(const T* a, const T* b, int n) {
    T acc = T(0);
    for (int i = 0; i < n; ++i) {
        const T d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

}  // namespace dualrec
