#pragma once

// Adam and the central finite-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dualrec/autograd.hpp"
#include "dualrec/tensor.hpp"

namespace dualrec {

template <typename T>
struct AdamT {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    std::int64_t step_count = 0;

    void step(ParamStoreT<T>& store) {
        ++step_count;
        const T bc1 = T(1) - std::pow(beta1, static_cast<T>(step_count));
        const T bc2 = T(1) - std::pow(beta2, static_cast<T>(step_count));
        for (auto& [name, entry] : store) {
            auto& m = moment1_.try_emplace(name, TensorT<T>(entry.value.shape)).first->second;
            auto& v = moment2_.try_emplace(name, TensorT<T>(entry.value.shape)).first->second;
            for (std::int64_t i = 0; i < entry.value.size(); ++i) {
                const T g = entry.grad.data[i];
                if (!std::isfinite(static_cast<double>(g)))
                    throw std::runtime_error("adam_step: non-finite gradient in parameter '" + name + "'");
                m.data[i] = beta1 * m.data[i] + (T(1) - beta1) * g;
                v.data[i] = beta2 * v.data[i] + (T(1) - beta2) * g * g;
                const T mhat = m.data[i] / bc1;
                const T vhat = v.data[i] / bc2;
                entry.value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    void reset() {
        moment1_.clear();
        moment2_.clear();
        step_count = 0;
    }

private:
    std::map<std::string, TensorT<T>> moment1_;
    std::map<std::string, TensorT<T>> moment2_;
};

using Adam = AdamT<double>;

template <typename T>
struct GradCheckReport {
    struct PerParam {
        std::string name;
        T max_rel_err = T(0);
        std::int64_t worst_index = -1;
        T analytic = T(0);
        T numeric = T(0);
    };
    std::vector<PerParam> params;
    T max_rel_err = T(0);
    bool deterministic = true;

    bool passed(T tolerance) const { return deterministic && max_rel_err <= tolerance; }
};

// loss_fn must populate store gradients (run tape backward) and return the
// loss. The checker perturbs each parameter entry and compares the analytic
// gradient against (f(x+eps) - f(x-eps)) / (2 eps).
template <typename T>
GradCheckReport<T> grad_check(const std::function<T(ParamStoreT<T>&)>& loss_fn, ParamStoreT<T>& store,
                              T epsilon = T(1e-5)) {
    GradCheckReport<T> report;

    store.zero_grads();
    const T f0 = loss_fn(store);
    std::map<std::string, TensorT<T>> analytic;
    for (auto& [name, entry] : store) analytic.emplace(name, entry.grad);

    store.zero_grads();
    const T f1 = loss_fn(store);
    if (f0 != f1) {
        report.deterministic = false;
        return report;
    }

    for (auto& [name, entry] : store) {
        typename GradCheckReport<T>::PerParam pp;
        pp.name = name;
        const auto& a = analytic.at(name);
        for (std::int64_t i = 0; i < entry.value.size(); ++i) {
            const T saved = entry.value.data[i];
            entry.value.data[i] = saved + epsilon;
            store.zero_grads();
            const T fp = loss_fn(store);
            entry.value.data[i] = saved - epsilon;
            store.zero_grads();
            const T fm = loss_fn(store);
            entry.value.data[i] = saved;
            const T numeric = (fp - fm) / (T(2) * epsilon);
            const T ana = a.data[i];
            const T denom = std::max(std::abs(ana) + std::abs(numeric), T(1));
            const T rel = std::abs(ana - numeric) / denom;
            if (rel > pp.max_rel_err) {
                pp.max_rel_err = rel;
                pp.worst_index = i;
                pp.analytic = ana;
                pp.numeric = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, pp.max_rel_err);
        report.params.push_back(std::move(pp));
    }
    store.zero_grads();
    return report;
}

}  // namespace dualrec
