#pragma once

// Reverse-mode tape restricted to the operation set the pipeline actually
// uses: affine maps, elementwise nonlinearities, softmax, layer norm,
// embedding gather, reductions, attention, and the routing/contrastive
// fused losses. Nodes are appended in creation order, so reverse creation
// order is a valid topological order for the backward sweep.

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dualrec/tensor.hpp"

namespace dualrec {

template <typename T>
class ParamStoreT {
public:
    struct Entry {
        TensorT<T> value;
        TensorT<T> grad;
    };

    TensorT<T>& create(const std::string& name, TensorT<T> init) {
        auto [it, inserted] = params_.emplace(name, Entry{std::move(init), TensorT<T>()});
        if (!inserted) throw std::invalid_argument("duplicate parameter name: " + name);
        it->second.grad = TensorT<T>(it->second.value.shape);
        return it->second.value;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    TensorT<T>& value(const std::string& name) { return entry(name).value; }
    const TensorT<T>& value(const std::string& name) const { return entry(name).value; }
    TensorT<T>& grad(const std::string& name) { return entry(name).grad; }
    const TensorT<T>& grad(const std::string& name) const { return entry(name).grad; }

    void zero_grads() {
        for (auto& [name, e] : params_)
            std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& [name, e] : params_) out.push_back(name);
        return out;
    }

    size_t size() const { return params_.size(); }

    std::int64_t total_entries() const {
        std::int64_t n = 0;
        for (const auto& [name, e] : params_) n += e.value.size();
        return n;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    Entry& entry(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }
    const Entry& entry(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }

    std::map<std::string, Entry> params_;  // ordered: deterministic iteration
};

using ParamStore = ParamStoreT<double>;

template <typename T>
class TapeT {
public:
    using Id = int;

    void clear() {
        nodes_.clear();
        param_nodes_.clear();
    }

    size_t num_nodes() const { return nodes_.size(); }

    const TensorT<T>& val(Id id) const { return nodes_[static_cast<size_t>(id)].value; }

    // ---- leaves ----

    Id input(TensorT<T> v) { return push(std::move(v), false, {}); }

    Id constant(T v) { return input(TensorT<T>::scalar(v)); }

    Id param(ParamStoreT<T>& store, const std::string& name) {
        Id id = push(store.value(name), true, {});
        nodes_[static_cast<size_t>(id)].store = &store;
        nodes_[static_cast<size_t>(id)].pname = name;
        param_nodes_.push_back(id);
        return id;
    }

    // ---- elementwise / arithmetic ----

    Id add(Id a, Id b) {
        check_same(a, b, "add");
        TensorT<T> out = val(a);
        const auto& bv = val(b);
        for (std::int64_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
        return binary(std::move(out), a, b, [this](Id self, Id a, Id b) {
            const auto& g = grad_of(self);
            acc(a, g.data.data(), g.size());
            acc(b, g.data.data(), g.size());
        });
    }

    Id sub(Id a, Id b) {
        check_same(a, b, "sub");
        TensorT<T> out = val(a);
        const auto& bv = val(b);
        for (std::int64_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
        return binary(std::move(out), a, b, [this](Id self, Id a, Id b) {
            const auto& g = grad_of(self);
            acc(a, g.data.data(), g.size());
            if (wants(b)) {
                auto& gb = grad_ref(b);
                for (std::int64_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
            }
        });
    }

    Id mul(Id a, Id b) {
        check_same(a, b, "mul");
        TensorT<T> out = val(a);
        const auto& bv = val(b);
        for (std::int64_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
        return binary(std::move(out), a, b, [this](Id self, Id a, Id b) {
            const auto& g = grad_of(self);
            if (wants(a)) {
                auto& ga = grad_ref(a);
                const auto& bv = val(b);
                for (std::int64_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * bv.data[i];
            }
            if (wants(b)) {
                auto& gb = grad_ref(b);
                const auto& av = val(a);
                for (std::int64_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * av.data[i];
            }
        });
    }

    Id scale(Id a, T c) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v *= c;
        return unary(std::move(out), a, [this, c](Id self, Id a) {
            const auto& g = grad_of(self);
            if (!wants(a)) return;
            auto& ga = grad_ref(a);
            for (std::int64_t i = 0; i < g.size(); ++i) ga.data[i] += c * g.data[i];
        });
    }

    Id add_const(Id a, T c) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v += c;
        return unary(std::move(out), a, [this](Id self, Id a) {
            const auto& g = grad_of(self);
            acc(a, g.data.data(), g.size());
        });
    }

    // out = a * s, s scalar node broadcast over a
    Id mul_scalar(Id a, Id s) {
        if (!val(s).is_scalar()) throw std::logic_error("mul_scalar: second operand must be scalar");
        TensorT<T> out = val(a);
        const T sv = val(s).item();
        for (auto& v : out.data) v *= sv;
        return binary(std::move(out), a, s, [this](Id self, Id a, Id s) {
            const auto& g = grad_of(self);
            const T sv = val(s).item();
            if (wants(a)) {
                auto& ga = grad_ref(a);
                for (std::int64_t i = 0; i < g.size(); ++i) ga.data[i] += sv * g.data[i];
            }
            if (wants(s)) {
                const auto& av = val(a);
                T acc_s = T(0);
                for (std::int64_t i = 0; i < g.size(); ++i) acc_s += g.data[i] * av.data[i];
                grad_ref(s).data[0] += acc_s;
            }
        });
    }

    // out[i,:] = x[i,:] * s[i]; s holds one scalar per row
    Id scale_rows(Id x, Id s) {
        const auto& xv = val(x);
        const auto& sv = val(s);
        const int n = xv.rows(), m = xv.cols();
        if (sv.size() != n) throw std::logic_error("scale_rows: scale length must match row count");
        TensorT<T> out({n, m});
        for (int i = 0; i < n; ++i) {
            const T c = sv.data[static_cast<size_t>(i)];
            const T* row = xv.row_ptr(i);
            T* orow = out.row_ptr(i);
            for (int j = 0; j < m; ++j) orow[j] = row[j] * c;
        }
        return binary(std::move(out), x, s, [this, n, m](Id self, Id x, Id s) {
            const auto& g = grad_of(self);
            const auto& sv = val(s);
            if (wants(x)) {
                auto& gx = grad_ref(x);
                for (int i = 0; i < n; ++i) {
                    const T c = sv.data[static_cast<size_t>(i)];
                    const T* grow = g.row_ptr(i);
                    T* gxrow = gx.row_ptr(i);
                    for (int j = 0; j < m; ++j) gxrow[j] += grow[j] * c;
                }
            }
            if (wants(s)) {
                auto& gs = grad_ref(s);
                const auto& xv = val(x);
                for (int i = 0; i < n; ++i)
                    gs.data[static_cast<size_t>(i)] += dot_span(g.row_ptr(i), xv.row_ptr(i), m);
            }
        });
    }

    // Freezes stop-gradient values across re-evaluations: record once at the
    // base point, then replay during finite-difference perturbations. This is
    // what "indices frozen" means for checking straight-through losses.
    struct DetachReplay {
        std::vector<TensorT<T>> values;
        bool recording = true;
        size_t cursor = 0;
    };

    void use_detach_replay(DetachReplay* replay) {
        replay_ = replay;
        if (replay_ != nullptr) replay_->cursor = 0;
    }

    Id detach(Id a) {
        if (replay_ == nullptr) return input(val(a));
        if (replay_->recording) {
            replay_->values.push_back(val(a));
            return input(val(a));
        }
        if (replay_->cursor >= replay_->values.size())
            throw std::logic_error("detach replay: graph shape changed between evaluations");
        return input(replay_->values[replay_->cursor++]);
    }

    // ---- reductions ----

    Id sum(Id a) {
        T s = T(0);
        for (T v : val(a).data) s += v;
        return unary(TensorT<T>::scalar(s), a, [this](Id self, Id a) {
            const T g = grad_of(self).item();
            if (!wants(a)) return;
            auto& ga = grad_ref(a);
            for (auto& v : ga.data) v += g;
        });
    }

    Id mean(Id a) {
        const std::int64_t n = val(a).size();
        return scale(sum(a), T(1) / static_cast<T>(n));
    }

    Id dot(Id a, Id b) {
        check_same(a, b, "dot");
        const auto& av = val(a);
        const auto& bv = val(b);
        T s = T(0);
        for (std::int64_t i = 0; i < av.size(); ++i) s += av.data[i] * bv.data[i];
        return binary(TensorT<T>::scalar(s), a, b, [this](Id self, Id a, Id b) {
            const T g = grad_of(self).item();
            if (wants(a)) {
                auto& ga = grad_ref(a);
                const auto& bv = val(b);
                for (std::int64_t i = 0; i < bv.size(); ++i) ga.data[i] += g * bv.data[i];
            }
            if (wants(b)) {
                auto& gb = grad_ref(b);
                const auto& av = val(a);
                for (std::int64_t i = 0; i < av.size(); ++i) gb.data[i] += g * av.data[i];
            }
        });
    }

    Id sum_sq(Id a) {
        const auto& av = val(a);
        T s = T(0);
        for (T v : av.data) s += v * v;
        return unary(TensorT<T>::scalar(s), a, [this](Id self, Id a) {
            const T g = grad_of(self).item();
            if (!wants(a)) return;
            auto& ga = grad_ref(a);
            const auto& av = val(a);
            for (std::int64_t i = 0; i < av.size(); ++i) ga.data[i] += T(2) * g * av.data[i];
        });
    }

    // mean squared difference over all entries
    Id mse(Id a, Id b) {
        return scale(sum_sq(sub(a, b)), T(1) / static_cast<T>(val(a).size()));
    }

    Id select(Id a, int index) {
        return unary(TensorT<T>::scalar(val(a).data[static_cast<size_t>(index)]), a,
                     [this, index](Id self, Id a) {
                         if (!wants(a)) return;
                         grad_ref(a).data[static_cast<size_t>(index)] += grad_of(self).item();
                     });
    }

    // ---- linear algebra ----

    Id matmul(Id a, Id b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        const int n = av.rows(), k = av.cols(), m = bv.cols();
        if (bv.rows() != k) throw std::logic_error("matmul shape mismatch");
        TensorT<T> out({n, m});
        gemm_acc(av.data.data(), bv.data.data(), out.data.data(), n, k, m);
        return binary(std::move(out), a, b, [this, n, k, m](Id self, Id a, Id b) {
            const auto& g = grad_of(self);
            if (wants(a)) gemm_nt_acc(g.data.data(), val(b).data.data(), grad_ref(a).data.data(), n, m, k);
            if (wants(b)) gemm_tn_acc(val(a).data.data(), g.data.data(), grad_ref(b).data.data(), n, k, m);
        });
    }

    // a(n,k) * b(m,k)^T -> (n,m)
    Id matmul_nt(Id a, Id b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        const int n = av.rows(), k = av.cols(), m = bv.rows();
        if (bv.cols() != k) throw std::logic_error("matmul_nt shape mismatch");
        TensorT<T> out({n, m});
        gemm_nt_acc(av.data.data(), bv.data.data(), out.data.data(), n, k, m);
        return binary(std::move(out), a, b, [this, n, k, m](Id self, Id a, Id b) {
            const auto& g = grad_of(self);
            if (wants(a)) gemm_acc(g.data.data(), val(b).data.data(), grad_ref(a).data.data(), n, m, k);
            if (wants(b)) gemm_tn_acc(g.data.data(), val(a).data.data(), grad_ref(b).data.data(), n, m, k);
        });
    }

    // x(n,d) * w(d,m) + bias(m)
    Id affine(Id x, Id w, Id bias) {
        const auto& xv = val(x);
        const auto& wv = val(w);
        const auto& bv = val(bias);
        const int n = xv.rows(), d = xv.cols(), m = wv.cols();
        if (wv.rows() != d || bv.size() != m) throw std::logic_error("affine shape mismatch");
        TensorT<T> out({n, m});
        for (int i = 0; i < n; ++i)
            std::copy(bv.data.begin(), bv.data.end(), out.row_ptr(i));
        gemm_acc(xv.data.data(), wv.data.data(), out.data.data(), n, d, m);
        Id id = push(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(bias), {x, w, bias});
        set_backward(id, [this, id, x, w, bias, n, d, m]() {
            const auto& g = grad_of(id);
            if (wants(x)) gemm_nt_acc(g.data.data(), val(w).data.data(), grad_ref(x).data.data(), n, m, d);
            if (wants(w)) gemm_tn_acc(val(x).data.data(), g.data.data(), grad_ref(w).data.data(), n, d, m);
            if (wants(bias)) {
                auto& gb = grad_ref(bias);
                for (int i = 0; i < n; ++i) {
                    const T* grow = g.row_ptr(i);
                    for (int j = 0; j < m; ++j) gb.data[static_cast<size_t>(j)] += grow[j];
                }
            }
        });
        return id;
    }

    // ---- nonlinearities ----

    Id relu(Id a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
        return unary(std::move(out), a, [this](Id self, Id a) {
            if (!wants(a)) return;
            const auto& g = grad_of(self);
            const auto& av = val(a);
            auto& ga = grad_ref(a);
            for (std::int64_t i = 0; i < g.size(); ++i)
                if (av.data[i] > T(0)) ga.data[i] += g.data[i];
        });
    }

    Id gelu(Id a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) {
            const double x = static_cast<double>(v);
            v = static_cast<T>(0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)));
        }
        return unary(std::move(out), a, [this](Id self, Id a) {
            if (!wants(a)) return;
            const auto& g = grad_of(self);
            const auto& av = val(a);
            auto& ga = grad_ref(a);
            for (std::int64_t i = 0; i < g.size(); ++i) {
                const double x = static_cast<double>(av.data[i]);
                const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
                const double pdf = 0.39894228040143267794 * std::exp(-0.5 * x * x);
                ga.data[i] += g.data[i] * static_cast<T>(cdf + x * pdf);
            }
        });
    }

    Id sigmoid(Id a) {
        TensorT<T> out = val(a);
        for (auto& v : out.data) v = sigmoid_val(v);
        Id id = unary(std::move(out), a, [this](Id self, Id a) {
            if (!wants(a)) return;
            const auto& g = grad_of(self);
            const auto& y = val(self);
            auto& ga = grad_ref(a);
            for (std::int64_t i = 0; i < g.size(); ++i)
                ga.data[i] += g.data[i] * y.data[i] * (T(1) - y.data[i]);
        });
        return id;
    }

    Id softmax_rows(Id a) {
        const auto& av = val(a);
        const int n = av.rows(), m = av.cols();
        TensorT<T> out({n, m});
        for (int i = 0; i < n; ++i) softmax_row(av.row_ptr(i), out.row_ptr(i), m);
        return unary(std::move(out), a, [this, n, m](Id self, Id a) {
            if (!wants(a)) return;
            const auto& g = grad_of(self);
            const auto& y = val(self);
            auto& ga = grad_ref(a);
            for (int i = 0; i < n; ++i) {
                const T* grow = g.row_ptr(i);
                const T* yrow = y.row_ptr(i);
                T gy = T(0);
                for (int j = 0; j < m; ++j) gy += grow[j] * yrow[j];
                T* garow = ga.row_ptr(i);
                for (int j = 0; j < m; ++j) garow[j] += yrow[j] * (grow[j] - gy);
            }
        });
    }

    Id layer_norm_rows(Id x, Id gain, Id bias, T eps = T(1e-5)) {
        const auto& xv = val(x);
        const int n = xv.rows(), m = xv.cols();
        if (val(gain).size() != m || val(bias).size() != m)
            throw std::logic_error("layer_norm gain/bias shape mismatch");
        TensorT<T> out({n, m});
        auto xhat = std::make_shared<TensorT<T>>(Shape{n, m});
        auto inv_sigma = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
        const auto& gv = val(gain);
        const auto& bv = val(bias);
        for (int i = 0; i < n; ++i) {
            const T* row = xv.row_ptr(i);
            T mu = T(0);
            for (int j = 0; j < m; ++j) mu += row[j];
            mu /= static_cast<T>(m);
            T var = T(0);
            for (int j = 0; j < m; ++j) {
                const T d = row[j] - mu;
                var += d * d;
            }
            var /= static_cast<T>(m);
            const T is = T(1) / std::sqrt(var + eps);
            (*inv_sigma)[static_cast<size_t>(i)] = is;
            T* xh = xhat->row_ptr(i);
            T* orow = out.row_ptr(i);
            for (int j = 0; j < m; ++j) {
                xh[j] = (row[j] - mu) * is;
                orow[j] = xh[j] * gv.data[static_cast<size_t>(j)] + bv.data[static_cast<size_t>(j)];
            }
        }
        Id id = push(std::move(out), needs_grad(x) || needs_grad(gain) || needs_grad(bias), {x, gain, bias});
        set_backward(id, [this, id, x, gain, bias, n, m, xhat, inv_sigma]() {
            const auto& g = grad_of(id);
            if (wants(gain)) {
                auto& gg = grad_ref(gain);
                for (int i = 0; i < n; ++i) {
                    const T* grow = g.row_ptr(i);
                    const T* xh = xhat->row_ptr(i);
                    for (int j = 0; j < m; ++j) gg.data[static_cast<size_t>(j)] += grow[j] * xh[j];
                }
            }
            if (wants(bias)) {
                auto& gb = grad_ref(bias);
                for (int i = 0; i < n; ++i) {
                    const T* grow = g.row_ptr(i);
                    for (int j = 0; j < m; ++j) gb.data[static_cast<size_t>(j)] += grow[j];
                }
            }
            if (wants(x)) {
                auto& gx = grad_ref(x);
                const auto& gv = val(gain);
                for (int i = 0; i < n; ++i) {
                    const T* grow = g.row_ptr(i);
                    const T* xh = xhat->row_ptr(i);
                    const T is = (*inv_sigma)[static_cast<size_t>(i)];
                    T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
                    for (int j = 0; j < m; ++j) {
                        const T dxh = grow[j] * gv.data[static_cast<size_t>(j)];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= static_cast<T>(m);
                    mean_dxhat_xhat /= static_cast<T>(m);
                    T* gxrow = gx.row_ptr(i);
                    for (int j = 0; j < m; ++j) {
                        const T dxh = grow[j] * gv.data[static_cast<size_t>(j)];
                        gxrow[j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        });
        return id;
    }

    // ---- gathers / assembly ----

    Id gather_rows(Id table, std::vector<int> indices) {
        const auto& tv = val(table);
        const int m = tv.cols();
        const int n = static_cast<int>(indices.size());
        TensorT<T> out({n, m});
        for (int i = 0; i < n; ++i) {
            const int r = indices[static_cast<size_t>(i)];
            if (r < 0 || r >= tv.rows()) throw std::out_of_range("gather_rows index out of range");
            std::copy(tv.row_ptr(r), tv.row_ptr(r) + m, out.row_ptr(i));
        }
        auto idx = std::make_shared<std::vector<int>>(std::move(indices));
        return unary(std::move(out), table, [this, idx, m, n](Id self, Id table) {
            if (!wants(table)) return;
            const auto& g = grad_of(self);
            auto& gt = grad_ref(table);
            for (int i = 0; i < n; ++i) {
                const T* grow = g.row_ptr(i);
                T* trow = gt.row_ptr((*idx)[static_cast<size_t>(i)]);
                for (int j = 0; j < m; ++j) trow[j] += grow[j];
            }
        });
    }

    Id gather_row(Id table, int index) { return gather_rows(table, std::vector<int>{index}); }

    // stack length-d vectors into an (n,d) matrix
    Id stack_rows(std::span<const Id> rows) {
        if (rows.empty()) throw std::logic_error("stack_rows: empty");
        const int m = static_cast<int>(val(rows[0]).size());
        const int n = static_cast<int>(rows.size());
        TensorT<T> out({n, m});
        bool need = false;
        std::vector<Id> parents(rows.begin(), rows.end());
        for (int i = 0; i < n; ++i) {
            const auto& rv = val(rows[static_cast<size_t>(i)]);
            if (rv.size() != m) throw std::logic_error("stack_rows: inconsistent row sizes");
            std::copy(rv.data.begin(), rv.data.end(), out.row_ptr(i));
            need = need || needs_grad(rows[static_cast<size_t>(i)]);
        }
        Id id = push(std::move(out), need, parents);
        auto rows_copy = std::make_shared<std::vector<Id>>(std::move(parents));
        set_backward(id, [this, id, rows_copy, n, m]() {
            const auto& g = grad_of(id);
            for (int i = 0; i < n; ++i) {
                const Id r = (*rows_copy)[static_cast<size_t>(i)];
                if (!wants(r)) continue;
                auto& gr = grad_ref(r);
                const T* grow = g.row_ptr(i);
                for (int j = 0; j < m; ++j) gr.data[static_cast<size_t>(j)] += grow[j];
            }
        });
        return id;
    }

    // ---- normalization / similarity ----

    Id l2_normalize_rows(Id x, T min_norm = T(1e-12)) {
        const auto& xv = val(x);
        const int n = xv.rows(), m = xv.cols();
        TensorT<T> out({n, m});
        auto norms = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            const T* row = xv.row_ptr(i);
            T s = T(0);
            for (int j = 0; j < m; ++j) s += row[j] * row[j];
            const T nv = std::sqrt(s);
            if (!(nv > min_norm)) throw std::domain_error("l2_normalize_rows: zero-norm row");
            (*norms)[static_cast<size_t>(i)] = nv;
            T* orow = out.row_ptr(i);
            for (int j = 0; j < m; ++j) orow[j] = row[j] / nv;
        }
        return unary(std::move(out), x, [this, norms, n, m](Id self, Id x) {
            if (!wants(x)) return;
            const auto& g = grad_of(self);
            const auto& y = val(self);
            auto& gx = grad_ref(x);
            for (int i = 0; i < n; ++i) {
                const T* grow = g.row_ptr(i);
                const T* yrow = y.row_ptr(i);
                T gy = T(0);
                for (int j = 0; j < m; ++j) gy += grow[j] * yrow[j];
                const T inv = T(1) / (*norms)[static_cast<size_t>(i)];
                T* gxrow = gx.row_ptr(i);
                for (int j = 0; j < m; ++j) gxrow[j] += (grow[j] - yrow[j] * gy) * inv;
            }
        });
    }

    // ---- attention ----

    // q,k,v: (n,d); d divisible by heads; causal masks positions j > i
    Id multi_head_attention(Id q, Id k, Id v, int heads, bool causal) {
        const auto& qv = val(q);
        const auto& kv = val(k);
        const auto& vv = val(v);
        const int n = qv.rows(), d = qv.cols();
        if (d % heads != 0) throw std::logic_error("attention: dim not divisible by heads");
        if (!kv.same_shape(qv) || !vv.same_shape(qv)) throw std::logic_error("attention: q/k/v shape mismatch");
        const int dh = d / heads;
        const T iscale = T(1) / std::sqrt(static_cast<T>(dh));
        TensorT<T> out({n, d});
        // attention weights saved per head for the backward pass
        auto attn = std::make_shared<std::vector<TensorT<T>>>();
        attn->reserve(static_cast<size_t>(heads));
        std::vector<T> scores(static_cast<size_t>(n));
        for (int h = 0; h < heads; ++h) {
            TensorT<T> a({n, n});
            const int off = h * dh;
            for (int i = 0; i < n; ++i) {
                const int jmax = causal ? i + 1 : n;
                const T* qrow = qv.row_ptr(i) + off;
                for (int j = 0; j < jmax; ++j)
                    scores[static_cast<size_t>(j)] = iscale * dot_span(qrow, kv.row_ptr(j) + off, dh);
                softmax_row(scores.data(), a.row_ptr(i), jmax);
                for (int j = jmax; j < n; ++j) a.at(i, j) = T(0);
                // weighted sum of values
                T* orow = out.row_ptr(i) + off;
                const T* arow = a.row_ptr(i);
                for (int j = 0; j < jmax; ++j) {
                    const T w = arow[j];
                    const T* vrow = vv.row_ptr(j) + off;
                    for (int c = 0; c < dh; ++c) orow[c] += w * vrow[c];
                }
            }
            attn->push_back(std::move(a));
        }
        Id id = push(std::move(out), needs_grad(q) || needs_grad(k) || needs_grad(v), {q, k, v});
        set_backward(id, [this, id, q, k, v, heads, dh, n, causal, iscale, attn]() {
            const auto& g = grad_of(id);
            const auto& qv = val(q);
            const auto& kv = val(k);
            const auto& vv = val(v);
            const bool wq = wants(q), wk = wants(k), wv_ = wants(v);
            std::vector<T> ga_row(static_cast<size_t>(n));
            std::vector<T> gs_row(static_cast<size_t>(n));
            for (int h = 0; h < heads; ++h) {
                const int off = h * dh;
                const auto& a = (*attn)[static_cast<size_t>(h)];
                for (int i = 0; i < n; ++i) {
                    const int jmax = causal ? i + 1 : n;
                    const T* grow = g.row_ptr(i) + off;
                    const T* arow = a.row_ptr(i);
                    // dV and dA
                    T ga_dot = T(0);
                    for (int j = 0; j < jmax; ++j) {
                        const T* vrow = vv.row_ptr(j) + off;
                        T gaj = dot_span(grow, vrow, dh);
                        ga_row[static_cast<size_t>(j)] = gaj;
                        ga_dot += gaj * arow[j];
                        if (wv_) {
                            T* gvrow = grad_ref(v).row_ptr(j) + off;
                            const T w = arow[j];
                            for (int c = 0; c < dh; ++c) gvrow[c] += w * grow[c];
                        }
                    }
                    // softmax backward, then dQ/dK
                    for (int j = 0; j < jmax; ++j)
                        gs_row[static_cast<size_t>(j)] = arow[j] * (ga_row[static_cast<size_t>(j)] - ga_dot) * iscale;
                    if (wq) {
                        T* gqrow = grad_ref(q).row_ptr(i) + off;
                        for (int j = 0; j < jmax; ++j) {
                            const T gs = gs_row[static_cast<size_t>(j)];
                            if (gs == T(0)) continue;
                            const T* krow = kv.row_ptr(j) + off;
                            for (int c = 0; c < dh; ++c) gqrow[c] += gs * krow[c];
                        }
                    }
                    if (wk) {
                        const T* qrow = qv.row_ptr(i) + off;
                        for (int j = 0; j < jmax; ++j) {
                            const T gs = gs_row[static_cast<size_t>(j)];
                            if (gs == T(0)) continue;
                            T* gkrow = grad_ref(k).row_ptr(j) + off;
                            for (int c = 0; c < dh; ++c) gkrow[c] += gs * qrow[c];
                        }
                    }
                }
            }
        });
        return id;
    }

    // ---- losses ----

    // weighted mean of per-row cross entropy; weight 0 rows are skipped
    Id cross_entropy_rows(Id logits, std::vector<int> targets, std::vector<T> weights) {
        const auto& lv = val(logits);
        const int n = lv.rows(), m = lv.cols();
        if (static_cast<int>(targets.size()) != n || static_cast<int>(weights.size()) != n)
            throw std::logic_error("cross_entropy_rows: targets/weights length mismatch");
        T wsum = T(0);
        for (T w : weights) wsum += w;
        auto tgt = std::make_shared<std::vector<int>>(std::move(targets));
        auto wts = std::make_shared<std::vector<T>>(std::move(weights));
        T loss = T(0);
        auto lse = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            const T w = (*wts)[static_cast<size_t>(i)];
            const T* row = lv.row_ptr(i);
            T mx = row[0];
            for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
            T s = T(0);
            for (int j = 0; j < m; ++j) s += std::exp(row[j] - mx);
            const T l = mx + std::log(s);
            (*lse)[static_cast<size_t>(i)] = l;
            if (w != T(0)) {
                const int t = (*tgt)[static_cast<size_t>(i)];
                if (t < 0 || t >= m) throw std::out_of_range("cross_entropy_rows: target out of range");
                loss += w * (l - row[t]);
            }
        }
        const T norm = wsum > T(0) ? T(1) / wsum : T(0);
        loss *= norm;
        return unary(TensorT<T>::scalar(loss), logits, [this, tgt, wts, lse, n, m, norm](Id self, Id logits) {
            if (!wants(logits)) return;
            const T g = grad_of(self).item();
            const auto& lv = val(logits);
            auto& gl = grad_ref(logits);
            for (int i = 0; i < n; ++i) {
                const T w = (*wts)[static_cast<size_t>(i)];
                if (w == T(0)) continue;
                const T coeff = g * w * norm;
                const T* row = lv.row_ptr(i);
                T* grow = gl.row_ptr(i);
                const T l = (*lse)[static_cast<size_t>(i)];
                for (int j = 0; j < m; ++j) grow[j] += coeff * std::exp(row[j] - l);
                grow[(*tgt)[static_cast<size_t>(i)]] -= coeff;
            }
        });
    }

    // m_k = sigmoid((alpha*L - (k - 1/2)) / tau), k = 1..L
    Id soft_mask(Id alpha, int budget, T tau) {
        if (!val(alpha).is_scalar()) throw std::logic_error("soft_mask: alpha must be scalar");
        const T a = val(alpha).item();
        TensorT<T> out({budget});
        for (int k = 1; k <= budget; ++k)
            out.data[static_cast<size_t>(k - 1)] =
                sigmoid_val((a * static_cast<T>(budget) - (static_cast<T>(k) - T(0.5))) / tau);
        return unary(std::move(out), alpha, [this, budget, tau](Id self, Id alpha) {
            if (!wants(alpha)) return;
            const auto& g = grad_of(self);
            const auto& y = val(self);
            const T coeff = static_cast<T>(budget) / tau;
            T acc_a = T(0);
            for (int k = 0; k < budget; ++k)
                acc_a += g.data[static_cast<size_t>(k)] * y.data[static_cast<size_t>(k)] *
                         (T(1) - y.data[static_cast<size_t>(k)]) * coeff;
            grad_ref(alpha).data[0] += acc_a;
        });
    }

    // per band b: 2*(mean_b^2 + (1-mean_b)^2), averaged over non-empty bands
    Id load_balance(Id alphas, std::vector<int> bands, int num_bands) {
        const auto& av = val(alphas);
        const int n = static_cast<int>(av.size());
        if (n == 0) throw std::invalid_argument("load_balance: empty batch");
        if (static_cast<int>(bands.size()) != n) throw std::logic_error("load_balance: band list length mismatch");
        std::vector<T> band_sum(static_cast<size_t>(num_bands), T(0));
        std::vector<int> band_count(static_cast<size_t>(num_bands), 0);
        for (int i = 0; i < n; ++i) {
            const int b = bands[static_cast<size_t>(i)];
            if (b < 0 || b >= num_bands) throw std::out_of_range("load_balance: band index out of range");
            band_sum[static_cast<size_t>(b)] += av.data[static_cast<size_t>(i)];
            band_count[static_cast<size_t>(b)] += 1;
        }
        int nonempty = 0;
        T loss = T(0);
        auto means = std::make_shared<std::vector<T>>(static_cast<size_t>(num_bands), T(0));
        for (int b = 0; b < num_bands; ++b) {
            if (band_count[static_cast<size_t>(b)] == 0) continue;
            ++nonempty;
            const T mu = band_sum[static_cast<size_t>(b)] / static_cast<T>(band_count[static_cast<size_t>(b)]);
            (*means)[static_cast<size_t>(b)] = mu;
            loss += T(2) * (mu * mu + (T(1) - mu) * (T(1) - mu));
        }
        loss /= static_cast<T>(nonempty);
        auto bnd = std::make_shared<std::vector<int>>(std::move(bands));
        auto cnt = std::make_shared<std::vector<int>>(std::move(band_count));
        return unary(TensorT<T>::scalar(loss), alphas,
                     [this, bnd, cnt, means, n, nonempty](Id self, Id alphas) {
                         if (!wants(alphas)) return;
                         const T g = grad_of(self).item();
                         auto& ga = grad_ref(alphas);
                         for (int i = 0; i < n; ++i) {
                             const int b = (*bnd)[static_cast<size_t>(i)];
                             const T mu = (*means)[static_cast<size_t>(b)];
                             const T dmu = T(8) * mu - T(4);
                             ga.data[static_cast<size_t>(i)] +=
                                 g * dmu / (static_cast<T>((*cnt)[static_cast<size_t>(b)]) * static_cast<T>(nonempty));
                         }
                     });
    }

    // mean squared difference over adjacent pairs in the given order
    Id adjacent_smoothness(Id alphas, std::vector<int> order) {
        const auto& av = val(alphas);
        const int pairs = static_cast<int>(order.size()) - 1;
        if (pairs < 1) return constant(T(0));
        T loss = T(0);
        for (int p = 0; p < pairs; ++p) {
            const T d = av.data[static_cast<size_t>(order[static_cast<size_t>(p + 1)])] -
                        av.data[static_cast<size_t>(order[static_cast<size_t>(p)])];
            loss += d * d;
        }
        loss /= static_cast<T>(pairs);
        auto ord = std::make_shared<std::vector<int>>(std::move(order));
        return unary(TensorT<T>::scalar(loss), alphas, [this, ord, pairs](Id self, Id alphas) {
            if (!wants(alphas)) return;
            const T g = grad_of(self).item();
            const auto& av = val(alphas);
            auto& ga = grad_ref(alphas);
            for (int p = 0; p < pairs; ++p) {
                const int i = (*ord)[static_cast<size_t>(p)];
                const int j = (*ord)[static_cast<size_t>(p + 1)];
                const T d = av.data[static_cast<size_t>(j)] - av.data[static_cast<size_t>(i)];
                const T c = g * T(2) * d / static_cast<T>(pairs);
                ga.data[static_cast<size_t>(j)] += c;
                ga.data[static_cast<size_t>(i)] -= c;
            }
        });
    }

    // ---- backward ----

    // Seeds d(loss)/d(loss) = 1, sweeps the tape in reverse creation order and
    // adds parameter-leaf gradients into their stores. Returns the loss value.
    T backward(Id loss) {
        if (!val(loss).is_scalar())
            throw std::logic_error("backward: loss must be scalar, got " + shape_str(val(loss).shape));
        grads_.assign(nodes_.size(), TensorT<T>());
        grad_ref(loss).data[0] = T(1);
        for (Id id = static_cast<Id>(nodes_.size()) - 1; id >= 0; --id) {
            auto& node = nodes_[static_cast<size_t>(id)];
            if (!node.requires_grad || grads_[static_cast<size_t>(id)].data.empty()) continue;
            if (node.backward) node.backward();
        }
        for (Id id : param_nodes_) {
            auto& node = nodes_[static_cast<size_t>(id)];
            auto& g = grads_[static_cast<size_t>(id)];
            if (g.data.empty()) continue;
            auto& dst = node.store->grad(node.pname);
            for (std::int64_t i = 0; i < g.size(); ++i) dst.data[i] += g.data[i];
        }
        return val(loss).item();
    }

    const TensorT<T>& grad_of(Id id) const { return grads_[static_cast<size_t>(id)]; }

    static T sigmoid_val(T x) {
        if (x >= T(0)) {
            const T e = std::exp(-x);
            return T(1) / (T(1) + e);
        }
        const T e = std::exp(x);
        return e / (T(1) + e);
    }

private:
    struct Node {
        TensorT<T> value;
        bool requires_grad = false;
        std::function<void()> backward;
        ParamStoreT<T>* store = nullptr;
        std::string pname;
    };

    static void softmax_row(const T* in, T* out, int m) {
        T mx = in[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, in[j]);
        T s = T(0);
        for (int j = 0; j < m; ++j) {
            out[j] = std::exp(in[j] - mx);
            s += out[j];
        }
        const T inv = T(1) / s;
        for (int j = 0; j < m; ++j) out[j] *= inv;
    }

    Id push(TensorT<T> v, bool req, std::initializer_list<Id> parents) {
        return push(std::move(v), req, std::vector<Id>(parents));
    }

    Id push(TensorT<T> v, bool req, const std::vector<Id>& parents) {
        bool r = req;
        for (Id p : parents)
            if (needs_grad(p)) r = true;
        nodes_.push_back(Node{std::move(v), r, nullptr, nullptr, {}});
        return static_cast<Id>(nodes_.size()) - 1;
    }

    void set_backward(Id id, std::function<void()> fn) {
        if (nodes_[static_cast<size_t>(id)].requires_grad)
            nodes_[static_cast<size_t>(id)].backward = std::move(fn);
    }

    template <typename Fn>
    Id unary(TensorT<T> out, Id a, Fn fn) {
        Id id = push(std::move(out), needs_grad(a), {a});
        set_backward(id, [fn, id, a]() { fn(id, a); });
        return id;
    }

    template <typename Fn>
    Id binary(TensorT<T> out, Id a, Id b, Fn fn) {
        Id id = push(std::move(out), needs_grad(a) || needs_grad(b), {a, b});
        set_backward(id, [fn, id, a, b]() { fn(id, a, b); });
        return id;
    }

    bool needs_grad(Id id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    bool wants(Id id) const { return needs_grad(id); }

    TensorT<T>& grad_ref(Id id) {
        auto& g = grads_[static_cast<size_t>(id)];
        if (g.data.empty()) g = TensorT<T>(nodes_[static_cast<size_t>(id)].value.shape);
        return g;
    }

    void acc(Id id, const T* src, std::int64_t n) {
        if (!wants(id)) return;
        auto& g = grad_ref(id);
        for (std::int64_t i = 0; i < n; ++i) g.data[i] += src[i];
    }

    void check_same(Id a, Id b, const char* op) const {
        if (!val(a).same_shape(val(b)))
            throw std::logic_error(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) + " vs " +
                                   shape_str(val(b).shape));
    }

    std::vector<Node> nodes_;
    std::vector<TensorT<T>> grads_;
    std::vector<Id> param_nodes_;
    DetachReplay* replay_ = nullptr;
};

using Tape = TapeT<double>;

}  // namespace dualrec
