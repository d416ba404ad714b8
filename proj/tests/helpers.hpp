#pragma once

// Test-side oracles shared across the suite. Everything here is intentionally
// independent of the library's own numeric paths.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fable/nn.hpp"

namespace testutil {

// Central finite differences against harvested analytic gradients.
//
// `eval(true)` must: zero nothing, build a fresh graph from the store with
// trainable leaves, run backward, harvest into Param::grad, and return the
// loss value. `eval(false)` must return the loss value only (frozen leaves).
// Probes a deterministic subset of entries per param to keep runtime sane.
struct FdResult {
    double max_rel = 0.0;
    std::string worst_param;
    int probes = 0;
};

template <typename F>
FdResult fd_check(fable::ParamStore& ps, F eval, double h = 1e-5,
                  int max_entries_per_param = 6, double atol = 1e-7) {
    ps.zero_grad();
    double f0 = eval(true);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(ps.count());
    for (const auto& p : ps.all()) analytic.push_back(p->grad.data);
    // Central differences of a loss of magnitude |f0| carry absolute noise
    // around eps*|f0|/h; directions whose gradient sits within two orders of
    // magnitude of that are unmeasurable by FD and are skipped.
    double noise_floor = std::max(atol, std::abs(f0) * 2.5e-13 / h);

    FdResult res;
    size_t pi = 0;
    for (const auto& up : ps.all()) {
        fable::Param& p = *up;
        size_t n = p.value.data.size();
        std::vector<size_t> picks;
        if (static_cast<int>(n) <= max_entries_per_param) {
            for (size_t i = 0; i < n; ++i) picks.push_back(i);
        } else {
            for (int k = 0; k < max_entries_per_param; ++k)
                picks.push_back(k * (n - 1) / (max_entries_per_param - 1));
        }
        for (size_t i : picks) {
            double keep = p.value.data[i];
            p.value.data[i] = keep + h;
            double fp = eval(false);
            p.value.data[i] = keep - h;
            double fm = eval(false);
            p.value.data[i] = keep;
            double fd = (fp - fm) / (2.0 * h);
            double an = analytic[pi][i];
            ++res.probes;
            // Directions where both sides sit below the finite-difference
            // noise floor (e.g. softmax-invariant key biases) carry no
            // signal; treat them as agreeing.
            if (std::abs(fd) < noise_floor && std::abs(an) < noise_floor) continue;
            double denom = std::max(std::abs(fd), std::abs(an));
            double rel = std::abs(fd - an) / denom;
            if (rel > res.max_rel) {
                res.max_rel = rel;
                res.worst_param = p.name + "[" + std::to_string(i) + "]";
            }
        }
        ++pi;
    }
    return res;
}

// Builds the standard train-mode evaluator shape used by fd_check.
// `build` maps Leaves -> scalar loss Tensor.
inline std::function<double(bool)> loss_eval(fable::ParamStore& ps,
                                             std::function<fable::Tensor(fable::Leaves&)> build) {
    return [&ps, build](bool with_grad) {
        fable::Leaves lv(with_grad);
        fable::Tensor loss = build(lv);
        if (with_grad) {
            fable::backward(loss);
            lv.harvest();
        }
        (void)ps;
        return loss.item();
    };
}

}  // namespace testutil
