#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "fable/rng.hpp"
#include "fable/tensor.hpp"

namespace fable {

struct Param {
    std::string name;
    Array value;
    Array grad;  // same shape, accumulated across harvests until zero_grad()
};

// Named parameter set with stable addresses and insertion-order iteration
// (iteration order feeds both the optimizer and checkpoint layout, so it has
// to be deterministic).
class ParamStore {
public:
    Param& add(const std::string& name, Array init) {
        if (by_name_.count(name)) throw ValueError("ParamStore: duplicate param '" + name + "'");
        auto p = std::make_unique<Param>();
        p->name = name;
        p->grad = Array(init.shape);
        p->value = std::move(init);
        Param& ref = *p;
        by_name_[name] = p.get();
        params_.push_back(std::move(p));
        return ref;
    }

    Param& get(const std::string& name) {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw ValueError("ParamStore: no param '" + name + "'");
        return *it->second;
    }
    const Param& get(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw ValueError("ParamStore: no param '" + name + "'");
        return *it->second;
    }
    bool has(const std::string& name) const { return by_name_.count(name) != 0; }

    const std::vector<std::unique_ptr<Param>>& all() const { return params_; }
    size_t count() const { return params_.size(); }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_)
            std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    }

private:
    std::vector<std::unique_ptr<Param>> params_;
    std::unordered_map<std::string, Param*> by_name_;
};

// Per-forward-call binding of params to graph leaves. Each leaf *copies* the
// param value, so concurrent forwards never alias mutable state; harvest()
// folds leaf gradients back into Param::grad after backward().
class Leaves {
public:
    explicit Leaves(bool train = true) : train_(train) {}

    Tensor operator()(Param& p) {
        auto it = bound_.find(&p);
        if (it != bound_.end()) return it->second;
        Tensor t = train_ ? Tensor::param(p.value) : Tensor::constant(p.value);
        bound_.emplace(&p, t);
        return t;
    }

    void harvest() {
        for (auto& [p, t] : bound_) {
            if (!t.requires_grad()) continue;
            auto* n = t.node();
            if (n->grad.size() != n->val.data.size()) continue;  // leaf untouched by backward
            for (size_t i = 0; i < n->grad.size(); ++i) p->grad.data[i] += n->grad[i];
        }
    }

private:
    bool train_;
    std::unordered_map<Param*, Tensor> bound_;
};

inline Array randn(Shape s, Rng& rng, double stddev = 1.0) {
    Array a(std::move(s));
    rng.fill_normal(a.data, 0.0, stddev);
    return a;
}

// Affine map x [rows x in] -> [rows x out].
struct Linear {
    Param* W = nullptr;
    Param* b = nullptr;

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
           double scale = 1.0, bool zero_init = false) {
        Array w(Shape{in, out});
        if (!zero_init) {
            double s = scale / std::sqrt(static_cast<double>(in));
            rng.fill_normal(w.data, 0.0, s);
        }
        W = &ps.add(name + ".w", std::move(w));
        b = &ps.add(name + ".b", Array(Shape{out}));
    }

    Tensor operator()(Leaves& lv, const Tensor& x) const {
        return add_bias(matmul(x, lv(*W)), lv(*b));
    }
};

struct Conv3x3 {
    Param* W = nullptr;
    Param* b = nullptr;

    Conv3x3() = default;
    Conv3x3(ParamStore& ps, const std::string& name, int ci, int co, Rng& rng,
            double scale = 1.0, bool zero_init = false) {
        Array w(Shape{co, ci, 3, 3});
        if (!zero_init) {
            double s = scale / std::sqrt(9.0 * ci);
            rng.fill_normal(w.data, 0.0, s);
        }
        W = &ps.add(name + ".w", std::move(w));
        b = &ps.add(name + ".b", Array(Shape{co}));
    }

    Tensor operator()(Leaves& lv, const Tensor& x) const {
        return conv3x3(x, lv(*W), lv(*b));
    }
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    double& lr() { return cfg_.lr; }

    void step(ParamStore& ps) {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& up : ps.all()) {
            Param& p = *up;
            auto& st = state_[&p];
            if (st.m.size() != p.value.data.size()) {
                st.m.assign(p.value.data.size(), 0.0);
                st.v.assign(p.value.data.size(), 0.0);
            }
            for (size_t i = 0; i < p.value.data.size(); ++i) {
                double g = p.grad.data[i];
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
                double mhat = st.m[i] / bc1;
                double vhat = st.v[i] / bc2;
                p.value.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    struct State {
        std::vector<double> m, v;
    };
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::unordered_map<const Param*, State> state_;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_grad_norm(ParamStore& ps, double max_norm) {
    double sq = 0.0;
    for (const auto& p : ps.all())
        for (double g : p->grad.data) sq += g * g;
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double f = max_norm / norm;
        for (auto& p : ps.all())
            for (double& g : p->grad.data) g *= f;
    }
    return norm;
}

}  // namespace fable
