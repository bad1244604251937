#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "gacan/autodiff.hpp"
#include "gacan/parameters.hpp"

namespace gacan {

/// Builds a scalar loss on the given tape from the parameters in the store.
/// Must be deterministic and must not mutate the store.
using LossFn = std::function<ad::Var(ad::Tape&, ParameterStore&)>;

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;

    bool passed() const {
        return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
    }
    double worst() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_error);
        return w;
    }
};

inline double loss_value(const LossFn& loss, ParameterStore& store) {
    ad::Tape tape;
    return loss(tape, store).value().item();
}

/// Compares reverse-mode gradients against central differences
/// (f(p+h) - f(p-h)) / 2h for every scalar of every parameter. The relative
/// error of one scalar is |a - n| / max(|a|, |n|, 1e-8), taken as 0 when
/// |a - n| is below the resolution of the difference quotient itself
/// (16 ulp of the loss divided by h), so exactly-zero gradients do not fail
/// on round-off. Failures are reported, never thrown.
inline GradCheckReport grad_check(const LossFn& loss, ParameterStore& store, double h, double tol) {
    {
        ad::Tape tape;
        auto l = loss(tape, store);
        tape.backward(l);
    }
    GradCheckReport report;
    report.tolerance = tol;
    for (auto& [name, entry] : store) {
        const Tensor analytic = entry.grad;
        GradCheckEntry e;
        e.name = name;
        for (std::size_t i = 0; i < entry.value.size(); ++i) {
            const double saved = entry.value[i];
            entry.value[i] = saved + h;
            const double up = loss_value(loss, store);
            entry.value[i] = saved - h;
            const double down = loss_value(loss, store);
            entry.value[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[i];
            const double resolution =
                16.0 * std::numeric_limits<double>::epsilon() * std::max({std::abs(up), std::abs(down), 1.0}) / h;
            const double diff = std::abs(a - numeric);
            const double rel = diff <= resolution ? 0.0 : diff / std::max({std::abs(a), std::abs(numeric), 1e-8});
            if (i == 0 || rel > e.max_rel_error) {
                e.max_rel_error = rel;
                e.worst_index = i;
                e.analytic = a;
                e.numeric = numeric;
            }
        }
        e.pass = e.max_rel_error <= tol;
        report.entries.push_back(e);
    }
    return report;
}

} // namespace gacan
