#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "fable/errors.hpp"

namespace fable {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Plain value: shape + row-major data. This is the type module boundaries
// exchange; Tensor wraps it with an autodiff graph.
struct Array {
    Shape shape;
    std::vector<double> data;

    Array() = default;
    explicit Array(Shape s, double fill = 0.0)
        : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), fill) {}
    Array(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != numel(shape))
            throw ShapeError("Array: data size does not match shape " + shape_str(shape));
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double& operator()(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double operator()(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

namespace detail {

struct Node {
    Array val;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void()> back;
    std::vector<std::shared_ptr<Node>> parents;

    void ensure_grad() {
        if (grad.size() != val.data.size()) grad.assign(val.data.size(), 0.0);
    }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Array a) {
        Tensor t;
        t.n_ = std::make_shared<detail::Node>();
        t.n_->val = std::move(a);
        return t;
    }

    static Tensor param(Array a) {
        Tensor t = constant(std::move(a));
        t.n_->requires_grad = true;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        Array a(Shape{1});
        a.data[0] = v;
        return requires_grad ? param(std::move(a)) : constant(std::move(a));
    }

    bool defined() const { return n_ != nullptr; }
    const Array& value() const { return n_->val; }
    const Shape& shape() const { return n_->val.shape; }
    int64_t size() const { return n_->val.size(); }
    bool requires_grad() const { return n_->requires_grad; }

    double item() const {
        if (size() != 1) throw ShapeError("item(): tensor is not scalar");
        return n_->val.data[0];
    }

    const std::vector<double>& grad() const {
        if (n_->grad.size() != n_->val.data.size())
            throw ValueError("grad(): no gradient recorded for this tensor");
        return n_->grad;
    }

    detail::Node* node() const { return n_.get(); }
    std::shared_ptr<detail::Node> handle() const { return n_; }

private:
    std::shared_ptr<detail::Node> n_;

    friend Tensor make_op(Array out, std::vector<Tensor> parents, std::function<void()> (*)(void));
    friend class OpBuilder;
};

// Builds a graph node from parents + a backward closure. The closure captures
// raw Node pointers; lifetime is guaranteed because each node owns shared_ptrs
// to its parents and the closure lives on the output node itself.
class OpBuilder {
public:
    static Tensor make(Array out, const std::vector<Tensor>& parents,
                       const std::function<void(detail::Node*)>& make_back) {
        Tensor t = Tensor::constant(std::move(out));
        detail::Node* on = t.node();
        bool rg = false;
        for (const auto& p : parents) rg = rg || p.requires_grad();
        if (rg) {
            on->requires_grad = true;
            for (const auto& p : parents) on->parents.push_back(p.handle());
            make_back(on);
        }
        return t;
    }
};

// Runs reverse-mode accumulation from a scalar root.
inline void backward(const Tensor& root) {
    if (root.size() != 1) throw ShapeError("backward(): root must be scalar");
    if (!root.requires_grad()) throw ValueError("backward(): root does not require grad");

    std::vector<detail::Node*> topo;
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS: node lands after all of its parents.
    struct Frame {
        detail::Node* n;
        size_t next;
    };
    std::vector<Frame> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            detail::Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            topo.push_back(f.n);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad();
    root.node()->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if ((*it)->back) (*it)->back();
}

// ---- elementwise ----

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Array out = a.value();
    const auto& bd = b.value().data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bd[i];
    return OpBuilder::make(std::move(out), {a, b}, [a, b](detail::Node* on) {
        detail::Node *an = a.node(), *bn = b.node();
        on->back = [on, an, bn] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
            }
        };
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Array out = a.value();
    const auto& bd = b.value().data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bd[i];
    return OpBuilder::make(std::move(out), {a, b}, [a, b](detail::Node* on) {
        detail::Node *an = a.node(), *bn = b.node();
        on->back = [on, an, bn] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
            }
        };
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Array out = a.value();
    const auto& bd = b.value().data;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bd[i];
    return OpBuilder::make(std::move(out), {a, b}, [a, b](detail::Node* on) {
        detail::Node *an = a.node(), *bn = b.node();
        on->back = [on, an, bn] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i)
                    an->grad[i] += on->grad[i] * bn->val.data[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i)
                    bn->grad[i] += on->grad[i] * an->val.data[i];
            }
        };
    });
}

inline Tensor scale(const Tensor& a, double c) {
    Array out = a.value();
    for (auto& v : out.data) v *= c;
    return OpBuilder::make(std::move(out), {a}, [a, c](detail::Node* on) {
        detail::Node* an = a.node();
        on->back = [on, an, c] {
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += c * on->grad[i];
        };
    });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    Array out = a.value();
    for (auto& v : out.data) v += c;
    return OpBuilder::make(std::move(out), {a}, [a](detail::Node* on) {
        detail::Node* an = a.node();
        on->back = [on, an] {
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        };
    });
}

// x [rows x n] + b [n], broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    int n = b.shape().back();
    if (static_cast<int64_t>(b.size()) != n || x.size() % n != 0)
        throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not divide " +
                         shape_str(x.shape()));
    Array out = x.value();
    const auto& bd = b.value().data;
    size_t rows = out.data.size() / static_cast<size_t>(n);
    for (size_t r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) out.data[r * n + j] += bd[static_cast<size_t>(j)];
    return OpBuilder::make(std::move(out), {x, b}, [x, b, n, rows](detail::Node* on) {
        detail::Node *xn = x.node(), *bn = b.node();
        on->back = [on, xn, bn, n, rows] {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < n; ++j)
                        bn->grad[static_cast<size_t>(j)] += on->grad[r * n + j];
            }
        };
    });
}

// ---- activations ----

template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F f, DF df, const char*) {
    Array out = a.value();
    for (auto& v : out.data) v = f(v);
    return OpBuilder::make(std::move(out), {a}, [a, df](detail::Node* on) {
        detail::Node* an = a.node();
        on->back = [on, an, df] {
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += on->grad[i] * df(an->val.data[i], on->val.data[i]);
        };
    });
}

inline Tensor gelu(const Tensor& a) {
    auto f = [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); };
    auto df = [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) +
               x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    };
    return unary_op(a, f, df, "gelu");
}

inline Tensor relu(const Tensor& a) {
    auto f = [](double x) { return x > 0.0 ? x : 0.0; };
    auto df = [](double x, double) { return x > 0.0 ? 1.0 : 0.0; };
    return unary_op(a, f, df, "relu");
}

inline Tensor silu(const Tensor& a) {
    auto f = [](double x) { return x / (1.0 + std::exp(-x)); };
    auto df = [](double x, double) {
        double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
    };
    return unary_op(a, f, df, "silu");
}

inline Tensor tanh_op(const Tensor& a) {
    auto f = [](double x) { return std::tanh(x); };
    auto df = [](double, double y) { return 1.0 - y * y; };
    return unary_op(a, f, df, "tanh");
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Array out(Shape{m, n});
    const double* A = a.value().data.data();
    const double* B = b.value().data.data();
    double* C = out.data.data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            double av = A[i * k + p];
            if (av == 0.0) continue;
            const double* Bp = B + p * n;
            double* Ci = C + i * n;
            for (int j = 0; j < n; ++j) Ci[j] += av * Bp[j];
        }
    return OpBuilder::make(std::move(out), {a, b}, [a, b, m, k, n](detail::Node* on) {
        detail::Node *an = a.node(), *bn = b.node();
        on->back = [on, an, bn, m, k, n] {
            const double* G = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                const double* B = bn->val.data.data();
                double* dA = an->grad.data();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double g = G[i * n + j];
                        if (g == 0.0) continue;
                        const double* Bj = B + j;
                        for (int p = 0; p < k; ++p) dA[i * k + p] += g * Bj[p * n];
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                const double* A = an->val.data.data();
                double* dB = bn->grad.data();
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double av = A[i * k + p];
                        if (av == 0.0) continue;
                        const double* Gi = G + i * n;
                        double* dBp = dB + p * n;
                        for (int j = 0; j < n; ++j) dBp[j] += av * Gi[j];
                    }
            }
        };
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2) throw ShapeError("transpose: need 2D tensor");
    int m = a.shape()[0], n = a.shape()[1];
    Array out(Shape{n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out(j, i) = a.value()(i, j);
    return OpBuilder::make(std::move(out), {a}, [a, m, n](detail::Node* on) {
        detail::Node* an = a.node();
        on->back = [on, an, m, n] {
            an->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    an->grad[static_cast<size_t>(i) * n + j] +=
                        on->grad[static_cast<size_t>(j) * m + i];
        };
    });
}

inline Tensor reshape(const Tensor& a, Shape s) {
    if (numel(s) != a.size())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(s));
    Array out(std::move(s), a.value().data);
    return OpBuilder::make(std::move(out), {a}, [a](detail::Node* on) {
        detail::Node* an = a.node();
        on->back = [on, an] {
            an->ensure_grad();
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        };
    });
}

// Concatenates along axis 0; trailing dims must agree.
inline Tensor concat0(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat0: empty input");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    int total = 0;
    for (const auto& p : parts) {
        Shape t(p.shape().begin() + 1, p.shape().end());
        if (t != tail) throw ShapeError("concat0: trailing dims differ");
        total += p.shape()[0];
    }
    Shape os = parts[0].shape();
    os[0] = total;
    Array out(os);
    size_t off = 0;
    for (const auto& p : parts) {
        const auto& d = p.value().data;
        std::copy(d.begin(), d.end(), out.data.begin() + static_cast<ptrdiff_t>(off));
        off += d.size();
    }
    return OpBuilder::make(std::move(out), parts, [parts](detail::Node* on) {
        on->back = [on, parts] {
            size_t off = 0;
            for (const auto& p : parts) {
                detail::Node* pn = p.node();
                size_t n = pn->val.data.size();
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    for (size_t i = 0; i < n; ++i) pn->grad[i] += on->grad[off + i];
                }
                off += n;
            }
        };
    });
}

// Rows [r0, r1) along axis 0.
inline Tensor slice0(const Tensor& a, int r0, int r1) {
    if (r0 < 0 || r1 > a.shape()[0] || r0 >= r1)
        throw IndexError("slice0: bad range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") for " + shape_str(a.shape()));
    Shape os = a.shape();
    os[0] = r1 - r0;
    size_t stride = static_cast<size_t>(numel(os)) / static_cast<size_t>(os[0]);
    Array out(os);
    std::copy(a.value().data.begin() + static_cast<ptrdiff_t>(r0 * stride),
              a.value().data.begin() + static_cast<ptrdiff_t>(r1 * stride), out.data.begin());
    return OpBuilder::make(std::move(out), {a}, [a, r0, stride](detail::Node* on) {
        detail::Node* an = a.node();
        on->back = [on, an, r0, stride] {
            an->ensure_grad();
            size_t base = static_cast<size_t>(r0) * stride;
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[base + i] += on->grad[i];
        };
    });
}

// ---- reductions & softmax ----

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    Array out(Shape{1});
    out.data[0] = s;
    return OpBuilder::make(std::move(out), {a}, [a](detail::Node* on) {
        detail::Node* an = a.node();
        on->back = [on, an] {
            an->ensure_grad();
            for (auto& g : an->grad) g += on->grad[0];
        };
    });
}

inline Tensor mean(const Tensor& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor softmax_rows(const Tensor& a) {
    if (a.shape().size() != 2) throw ShapeError("softmax_rows: need 2D tensor");
    int m = a.shape()[0], n = a.shape()[1];
    Array out = a.value();
    for (int i = 0; i < m; ++i) {
        double* row = out.data.data() + static_cast<size_t>(i) * n;
        double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (int j = 0; j < n; ++j) row[j] /= z;
    }
    return OpBuilder::make(std::move(out), {a}, [a, m, n](detail::Node* on) {
        detail::Node* an = a.node();
        on->back = [on, an, m, n] {
            an->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const double* y = on->val.data.data() + static_cast<size_t>(i) * n;
                const double* gy = on->grad.data() + static_cast<size_t>(i) * n;
                double* gx = an->grad.data() + static_cast<size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
                for (int j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        };
    });
}

inline Tensor log_softmax_rows(const Tensor& a) {
    if (a.shape().size() != 2) throw ShapeError("log_softmax_rows: need 2D tensor");
    int m = a.shape()[0], n = a.shape()[1];
    Array out = a.value();
    for (int i = 0; i < m; ++i) {
        double* row = out.data.data() + static_cast<size_t>(i) * n;
        double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
        double lz = mx + std::log(z);
        for (int j = 0; j < n; ++j) row[j] -= lz;
    }
    return OpBuilder::make(std::move(out), {a}, [a, m, n](detail::Node* on) {
        detail::Node* an = a.node();
        on->back = [on, an, m, n] {
            an->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const double* ls = on->val.data.data() + static_cast<size_t>(i) * n;
                const double* gy = on->grad.data() + static_cast<size_t>(i) * n;
                double* gx = an->grad.data() + static_cast<size_t>(i) * n;
                double gsum = 0.0;
                for (int j = 0; j < n; ++j) gsum += gy[j];
                for (int j = 0; j < n; ++j) gx[j] += gy[j] - std::exp(ls[j]) * gsum;
            }
        };
    });
}

// out[i] = a(i, idx[i]); used to pull target log-probs out of a row matrix.
inline Tensor pick(const Tensor& a, const std::vector<int>& idx) {
    if (a.shape().size() != 2) throw ShapeError("pick: need 2D tensor");
    int m = a.shape()[0], n = a.shape()[1];
    if (static_cast<int>(idx.size()) != m) throw ShapeError("pick: index count != rows");
    Array out(Shape{m});
    for (int i = 0; i < m; ++i) {
        if (idx[static_cast<size_t>(i)] < 0 || idx[static_cast<size_t>(i)] >= n)
            throw IndexError("pick: index out of range");
        out.data[static_cast<size_t>(i)] = a.value()(i, idx[static_cast<size_t>(i)]);
    }
    return OpBuilder::make(std::move(out), {a}, [a, idx, n](detail::Node* on) {
        detail::Node* an = a.node();
        on->back = [on, an, idx, n] {
            an->ensure_grad();
            for (size_t i = 0; i < idx.size(); ++i)
                an->grad[i * static_cast<size_t>(n) + static_cast<size_t>(idx[i])] += on->grad[i];
        };
    });
}

// Mean over entries where mask != 0. Errors if the mask selects nothing.
inline Tensor masked_mean(const Tensor& a, const std::vector<int>& mask) {
    if (static_cast<int64_t>(mask.size()) != a.size())
        throw ShapeError("masked_mean: mask size mismatch");
    int cnt = 0;
    double s = 0.0;
    for (size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) {
            s += a.value().data[i];
            ++cnt;
        }
    if (cnt == 0) throw ValueError("masked_mean: mask selects no entries");
    Array out(Shape{1});
    out.data[0] = s / cnt;
    return OpBuilder::make(std::move(out), {a}, [a, mask, cnt](detail::Node* on) {
        detail::Node* an = a.node();
        on->back = [on, an, mask, cnt] {
            an->ensure_grad();
            double g = on->grad[0] / cnt;
            for (size_t i = 0; i < mask.size(); ++i)
                if (mask[i]) an->grad[i] += g;
        };
    });
}

// Embedding lookup: table [V x C], ids -> [T x C].
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) throw ShapeError("embedding: table must be 2D");
    int V = table.shape()[0], C = table.shape()[1];
    Array out(Shape{static_cast<int>(ids.size()), C});
    for (size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || ids[t] >= V) throw IndexError("embedding: id out of range");
        const double* src = table.value().data.data() + static_cast<size_t>(ids[t]) * C;
        std::copy(src, src + C, out.data.data() + t * static_cast<size_t>(C));
    }
    return OpBuilder::make(std::move(out), {table}, [table, ids, C](detail::Node* on) {
        detail::Node* tn = table.node();
        on->back = [on, tn, ids, C] {
            tn->ensure_grad();
            for (size_t t = 0; t < ids.size(); ++t) {
                double* dst = tn->grad.data() + static_cast<size_t>(ids[t]) * C;
                const double* g = on->grad.data() + t * static_cast<size_t>(C);
                for (int c = 0; c < C; ++c) dst[c] += g[c];
            }
        };
    });
}

// ---- image ops (channels-first [C, H, W]) ----

inline Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 3 || w.shape().size() != 4 || w.shape()[2] != 3 || w.shape()[3] != 3)
        throw ShapeError("conv3x3: want x [C,H,W], w [Co,Ci,3,3]");
    int Ci = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    int Co = w.shape()[0];
    if (w.shape()[1] != Ci || b.size() != Co) throw ShapeError("conv3x3: channel mismatch");
    Array out(Shape{Co, H, W});
    const double* X = x.value().data.data();
    const double* K = w.value().data.data();
    const double* B = b.value().data.data();
    double* Y = out.data.data();
    for (int co = 0; co < Co; ++co) {
        double* Yc = Y + static_cast<size_t>(co) * H * W;
        for (int i = 0; i < H * W; ++i) Yc[i] = B[co];
        for (int ci = 0; ci < Ci; ++ci) {
            const double* Xc = X + static_cast<size_t>(ci) * H * W;
            const double* Kc = K + (static_cast<size_t>(co) * Ci + ci) * 9;
            for (int di = -1; di <= 1; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    double kv = Kc[(di + 1) * 3 + (dj + 1)];
                    if (kv == 0.0) continue;
                    int i0 = std::max(0, -di), i1 = std::min(H, H - di);
                    int j0 = std::max(0, -dj), j1 = std::min(W, W - dj);
                    for (int i = i0; i < i1; ++i) {
                        const double* xr = Xc + static_cast<size_t>(i + di) * W + dj;
                        double* yr = Yc + static_cast<size_t>(i) * W;
                        for (int j = j0; j < j1; ++j) yr[j] += kv * xr[j];
                    }
                }
        }
    }
    return OpBuilder::make(std::move(out), {x, w, b}, [x, w, b, Ci, Co, H, W](detail::Node* on) {
        detail::Node *xn = x.node(), *wn = w.node(), *bn = b.node();
        on->back = [on, xn, wn, bn, Ci, Co, H, W] {
            const double* G = on->grad.data();
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int co = 0; co < Co; ++co) {
                    double s = 0.0;
                    const double* Gc = G + static_cast<size_t>(co) * H * W;
                    for (int i = 0; i < H * W; ++i) s += Gc[i];
                    bn->grad[static_cast<size_t>(co)] += s;
                }
            }
            for (int co = 0; co < Co; ++co) {
                const double* Gc = G + static_cast<size_t>(co) * H * W;
                for (int ci = 0; ci < Ci; ++ci) {
                    const double* Xc = xn->val.data.data() + static_cast<size_t>(ci) * H * W;
                    const double* Kc =
                        wn->val.data.data() + (static_cast<size_t>(co) * Ci + ci) * 9;
                    for (int di = -1; di <= 1; ++di)
                        for (int dj = -1; dj <= 1; ++dj) {
                            int i0 = std::max(0, -di), i1 = std::min(H, H - di);
                            int j0 = std::max(0, -dj), j1 = std::min(W, W - dj);
                            if (wn->requires_grad) {
                                wn->ensure_grad();
                                double s = 0.0;
                                for (int i = i0; i < i1; ++i) {
                                    const double* xr = Xc + static_cast<size_t>(i + di) * W + dj;
                                    const double* gr = Gc + static_cast<size_t>(i) * W;
                                    for (int j = j0; j < j1; ++j) s += gr[j] * xr[j];
                                }
                                wn->grad[(static_cast<size_t>(co) * Ci + ci) * 9 +
                                         (di + 1) * 3 + (dj + 1)] += s;
                            }
                            if (xn->requires_grad) {
                                xn->ensure_grad();
                                double kv = Kc[(di + 1) * 3 + (dj + 1)];
                                if (kv == 0.0) continue;
                                double* dX = xn->grad.data() + static_cast<size_t>(ci) * H * W;
                                for (int i = i0; i < i1; ++i) {
                                    double* dxr = dX + static_cast<size_t>(i + di) * W + dj;
                                    const double* gr = Gc + static_cast<size_t>(i) * W;
                                    for (int j = j0; j < j1; ++j) dxr[j] += kv * gr[j];
                                }
                            }
                        }
                }
            }
        };
    });
}

inline Tensor avgpool2(const Tensor& x) {
    if (x.shape().size() != 3 || x.shape()[1] % 2 || x.shape()[2] % 2)
        throw ShapeError("avgpool2: want [C, even H, even W]");
    int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    int Ho = H / 2, Wo = W / 2;
    Array out(Shape{C, Ho, Wo});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                const double* X = x.value().data.data() + static_cast<size_t>(c) * H * W;
                double s = X[(2 * i) * W + 2 * j] + X[(2 * i) * W + 2 * j + 1] +
                           X[(2 * i + 1) * W + 2 * j] + X[(2 * i + 1) * W + 2 * j + 1];
                out.data[(static_cast<size_t>(c) * Ho + i) * Wo + j] = 0.25 * s;
            }
    return OpBuilder::make(std::move(out), {x}, [x, C, H, W, Ho, Wo](detail::Node* on) {
        detail::Node* xn = x.node();
        on->back = [on, xn, C, H, W, Ho, Wo] {
            xn->ensure_grad();
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < Ho; ++i)
                    for (int j = 0; j < Wo; ++j) {
                        double g = 0.25 * on->grad[(static_cast<size_t>(c) * Ho + i) * Wo + j];
                        double* dX = xn->grad.data() + static_cast<size_t>(c) * H * W;
                        dX[(2 * i) * W + 2 * j] += g;
                        dX[(2 * i) * W + 2 * j + 1] += g;
                        dX[(2 * i + 1) * W + 2 * j] += g;
                        dX[(2 * i + 1) * W + 2 * j + 1] += g;
                    }
        };
    });
}

inline Tensor upsample2(const Tensor& x) {
    if (x.shape().size() != 3) throw ShapeError("upsample2: want [C,H,W]");
    int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    Array out(Shape{C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                double v = x.value().data[(static_cast<size_t>(c) * H + i) * W + j];
                size_t base = (static_cast<size_t>(c) * 2 * H + 2 * i) * 2 * W + 2 * j;
                out.data[base] = v;
                out.data[base + 1] = v;
                out.data[base + 2 * W] = v;
                out.data[base + 2 * W + 1] = v;
            }
    return OpBuilder::make(std::move(out), {x}, [x, C, H, W](detail::Node* on) {
        detail::Node* xn = x.node();
        on->back = [on, xn, C, H, W] {
            xn->ensure_grad();
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        size_t base = (static_cast<size_t>(c) * 2 * H + 2 * i) * 2 * W + 2 * j;
                        xn->grad[(static_cast<size_t>(c) * H + i) * W + j] +=
                            on->grad[base] + on->grad[base + 1] + on->grad[base + 2 * W] +
                            on->grad[base + 2 * W + 1];
                    }
        };
    });
}

// [C,H,W] -> [H*W, C] token matrix, and back. Used around attention sites.
inline Tensor tokens_from_chw(const Tensor& x) {
    if (x.shape().size() != 3) throw ShapeError("tokens_from_chw: want [C,H,W]");
    int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    int T = H * W;
    Array out(Shape{T, C});
    for (int c = 0; c < C; ++c)
        for (int t = 0; t < T; ++t)
            out.data[static_cast<size_t>(t) * C + c] = x.value().data[static_cast<size_t>(c) * T + t];
    return OpBuilder::make(std::move(out), {x}, [x, C, T](detail::Node* on) {
        detail::Node* xn = x.node();
        on->back = [on, xn, C, T] {
            xn->ensure_grad();
            for (int c = 0; c < C; ++c)
                for (int t = 0; t < T; ++t)
                    xn->grad[static_cast<size_t>(c) * T + t] +=
                        on->grad[static_cast<size_t>(t) * C + c];
        };
    });
}

inline Tensor chw_from_tokens(const Tensor& t, int H, int W) {
    if (t.shape().size() != 2 || t.shape()[0] != H * W)
        throw ShapeError("chw_from_tokens: want [H*W, C]");
    int C = t.shape()[1];
    int T = H * W;
    Array out(Shape{C, H, W});
    for (int c = 0; c < C; ++c)
        for (int k = 0; k < T; ++k)
            out.data[static_cast<size_t>(c) * T + k] = t.value().data[static_cast<size_t>(k) * C + c];
    return OpBuilder::make(std::move(out), {t}, [t, C, T](detail::Node* on) {
        detail::Node* tn = t.node();
        on->back = [on, tn, C, T] {
            tn->ensure_grad();
            for (int c = 0; c < C; ++c)
                for (int k = 0; k < T; ++k)
                    tn->grad[static_cast<size_t>(k) * C + c] +=
                        on->grad[static_cast<size_t>(c) * T + k];
        };
    });
}

}  // namespace fable
