#include "rafe/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace rafe {

Tensor::Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    data.assign(n, fill);
}

Tensor Tensor::scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
}

Tensor Tensor::vector(std::vector<double> v) {
    Tensor t;
    t.shape = {v.size()};
    t.data = std::move(v);
    return t;
}

Tensor Tensor::randn(std::vector<std::size_t> s, SplitMix64& rng, double stddev) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = rng.normal() * stddev;
    return t;
}

std::size_t Tensor::rows() const {
    if (shape.size() != 2) raise(ErrorCode::internal, "Tensor::rows on non-matrix");
    return shape[0];
}

std::size_t Tensor::cols() const {
    if (shape.size() != 2) raise(ErrorCode::internal, "Tensor::cols on non-matrix");
    return shape[1];
}

double& Tensor::at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
double Tensor::at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

namespace {

Value make_node(Tensor value, std::vector<Value> parents, std::function<void(Node&)> backprop) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->parents = std::move(parents);
    bool any = false;
    for (const auto& p : node->parents) any = any || p->requires_grad;
    node->requires_grad = any;
    if (any) node->backprop = std::move(backprop);
    return node;
}

void ensure_grad(Node& n) {
    if (n.grad.data.size() != n.value.data.size()) {
        n.grad.shape = n.value.shape;
        n.grad.data.assign(n.value.data.size(), 0.0);
    }
}

// Generic unary elementwise op: f(value) and df(value) * upstream.
template <typename F, typename DF>
Value unary_op(const Value& a, F f, DF df) {
    Tensor out = a->value;
    for (auto& v : out.data) v = f(v);
    return make_node(std::move(out), {a}, [a, df](Node& self) {
        if (!a->requires_grad) return;
        ensure_grad(*a);
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            a->grad.data[i] += self.grad.data[i] * df(a->value.data[i], self.value.data[i]);
    });
}

}  // namespace

Value make_leaf(const Tensor& t) {
    auto node = std::make_shared<Node>();
    node->value = t;
    node->requires_grad = true;
    return node;
}

Value make_const(Tensor t) {
    auto node = std::make_shared<Node>();
    node->value = std::move(t);
    node->requires_grad = false;
    return node;
}

Value make_const_scalar(double v) { return make_const(Tensor::scalar(v)); }
Value make_const_vector(std::vector<double> v) { return make_const(Tensor::vector(std::move(v))); }

Value matmul(const Value& a, const Value& b) {
    const Tensor& A = a->value;
    const Tensor& B = b->value;
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.cols() != B.rows())
        raise(ErrorCode::internal, "matmul: shape mismatch");
    Tensor out({A.rows(), B.cols()});
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t k = 0; k < A.cols(); ++k) {
            const double av = A.at(i, k);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < B.cols(); ++j) out.at(i, j) += av * B.at(k, j);
        }
    return make_node(std::move(out), {a, b}, [a, b](Node& self) {
        const Tensor& G = self.grad;
        if (a->requires_grad) {
            ensure_grad(*a);
            // dA += G * B^T
            for (std::size_t i = 0; i < a->value.rows(); ++i)
                for (std::size_t j = 0; j < G.cols(); ++j) {
                    const double g = G.at(i, j);
                    if (g == 0.0) continue;
                    for (std::size_t k = 0; k < a->value.cols(); ++k)
                        a->grad.at(i, k) += g * b->value.at(k, j);
                }
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            // dB += A^T * G
            for (std::size_t i = 0; i < a->value.rows(); ++i)
                for (std::size_t k = 0; k < a->value.cols(); ++k) {
                    const double av = a->value.at(i, k);
                    if (av == 0.0) continue;
                    for (std::size_t j = 0; j < G.cols(); ++j)
                        b->grad.at(k, j) += av * G.at(i, j);
                }
        }
    });
}

Value matmul_nt(const Value& a, const Value& b) {
    const Tensor& A = a->value;
    const Tensor& B = b->value;
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.cols() != B.cols())
        raise(ErrorCode::internal, "matmul_nt: shape mismatch");
    Tensor out({A.rows(), B.rows()});
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < B.rows(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < A.cols(); ++k) s += A.at(i, k) * B.at(j, k);
            out.at(i, j) = s;
        }
    return make_node(std::move(out), {a, b}, [a, b](Node& self) {
        const Tensor& G = self.grad;
        if (a->requires_grad) {
            ensure_grad(*a);
            // dA += G * B
            for (std::size_t i = 0; i < G.rows(); ++i)
                for (std::size_t j = 0; j < G.cols(); ++j) {
                    const double g = G.at(i, j);
                    if (g == 0.0) continue;
                    for (std::size_t k = 0; k < a->value.cols(); ++k)
                        a->grad.at(i, k) += g * b->value.at(j, k);
                }
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            // dB += G^T * A
            for (std::size_t i = 0; i < G.rows(); ++i)
                for (std::size_t j = 0; j < G.cols(); ++j) {
                    const double g = G.at(i, j);
                    if (g == 0.0) continue;
                    for (std::size_t k = 0; k < a->value.cols(); ++k)
                        b->grad.at(j, k) += g * a->value.at(i, k);
                }
        }
    });
}

Value add(const Value& a, const Value& b) {
    if (!a->value.same_shape(b->value)) raise(ErrorCode::internal, "add: shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& self) {
        for (const auto& p : {a, b}) {
            if (!p->requires_grad) continue;
            ensure_grad(*p);
            for (std::size_t i = 0; i < self.grad.data.size(); ++i)
                p->grad.data[i] += self.grad.data[i];
        }
    });
}

Value sub(const Value& a, const Value& b) {
    if (!a->value.same_shape(b->value)) raise(ErrorCode::internal, "sub: shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b->value.data[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) {
            ensure_grad(*a);
            for (std::size_t i = 0; i < self.grad.data.size(); ++i)
                a->grad.data[i] += self.grad.data[i];
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            for (std::size_t i = 0; i < self.grad.data.size(); ++i)
                b->grad.data[i] -= self.grad.data[i];
        }
    });
}

Value mul(const Value& a, const Value& b) {
    if (!a->value.same_shape(b->value)) raise(ErrorCode::internal, "mul: shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->value.data[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) {
            ensure_grad(*a);
            for (std::size_t i = 0; i < self.grad.data.size(); ++i)
                a->grad.data[i] += self.grad.data[i] * b->value.data[i];
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            for (std::size_t i = 0; i < self.grad.data.size(); ++i)
                b->grad.data[i] += self.grad.data[i] * a->value.data[i];
        }
    });
}

Value add_rowvec(const Value& a, const Value& b) {
    const Tensor& A = a->value;
    const Tensor& B = b->value;
    if (A.shape.size() != 2 || B.shape.size() != 1 || B.shape[0] != A.cols())
        raise(ErrorCode::internal, "add_rowvec: shape mismatch");
    Tensor out = A;
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j) out.at(i, j) += B.data[j];
    return make_node(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) {
            ensure_grad(*a);
            for (std::size_t i = 0; i < self.grad.data.size(); ++i)
                a->grad.data[i] += self.grad.data[i];
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            for (std::size_t i = 0; i < self.grad.rows(); ++i)
                for (std::size_t j = 0; j < self.grad.cols(); ++j)
                    b->grad.data[j] += self.grad.at(i, j);
        }
    });
}

Value scale(const Value& a, double c) {
    return unary_op(a, [c](double v) { return v * c; },
                    [c](double, double) { return c; });
}

Value add_scalar(const Value& a, double c) {
    return unary_op(a, [c](double v) { return v + c; },
                    [](double, double) { return 1.0; });
}

Value neg(const Value& a) { return scale(a, -1.0); }

Value exp_v(const Value& a) {
    return unary_op(a, [](double v) { return std::exp(v); },
                    [](double, double out) { return out; });
}

Value log_v(const Value& a) {
    return unary_op(a, [](double v) { return std::log(v); },
                    [](double in, double) { return 1.0 / in; });
}

Value sigmoid(const Value& a) {
    return unary_op(a, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                    [](double, double out) { return out * (1.0 - out); });
}

Value log_sigmoid(const Value& a) {
    return unary_op(a,
                    [](double v) { return -(std::max(0.0, -v) + std::log1p(std::exp(-std::abs(v)))); },
                    [](double in, double) { return 1.0 / (1.0 + std::exp(in)); });
}

Value gelu(const Value& a) {
    // tanh approximation; smooth everywhere, which keeps finite-difference
    // gradient checks clean.
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    auto f = [](double x) {
        const double u = kC * (x + kA * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
    };
    auto df = [](double x, double) {
        const double u = kC * (x + kA * x * x * x);
        const double t = std::tanh(u);
        const double du = kC * (1.0 + 3.0 * kA * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    };
    return unary_op(a, f, df);
}

Value minimum(const Value& a, const Value& b) {
    if (!a->value.same_shape(b->value)) raise(ErrorCode::internal, "minimum: shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = std::min(out.data[i], b->value.data[i]);
    return make_node(std::move(out), {a, b}, [a, b](Node& self) {
        // Ties route the gradient to the first argument.
        for (std::size_t i = 0; i < self.grad.data.size(); ++i) {
            const bool take_a = a->value.data[i] <= b->value.data[i];
            const Value& p = take_a ? a : b;
            if (!p->requires_grad) continue;
            ensure_grad(*p);
            p->grad.data[i] += self.grad.data[i];
        }
    });
}

Value clamp(const Value& a, double lo, double hi) {
    Tensor out = a->value;
    for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
    return make_node(std::move(out), {a}, [a, lo, hi](Node& self) {
        if (!a->requires_grad) return;
        ensure_grad(*a);
        for (std::size_t i = 0; i < self.grad.data.size(); ++i) {
            const double v = a->value.data[i];
            if (v >= lo && v <= hi) a->grad.data[i] += self.grad.data[i];
        }
    });
}

Value rows(const Value& table, const std::vector<int>& ids) {
    const Tensor& T = table->value;
    if (T.shape.size() != 2) raise(ErrorCode::internal, "rows: table must be a matrix");
    Tensor out({ids.size(), T.cols()});
    for (std::size_t t = 0; t < ids.size(); ++t) {
        const int id = ids[t];
        if (id < 0 || static_cast<std::size_t>(id) >= T.rows())
            raise(ErrorCode::internal, "rows: id out of range");
        for (std::size_t j = 0; j < T.cols(); ++j) out.at(t, j) = T.at(static_cast<std::size_t>(id), j);
    }
    return make_node(std::move(out), {table}, [table, ids](Node& self) {
        if (!table->requires_grad) return;
        ensure_grad(*table);
        for (std::size_t t = 0; t < ids.size(); ++t)
            for (std::size_t j = 0; j < self.grad.cols(); ++j)
                table->grad.at(static_cast<std::size_t>(ids[t]), j) += self.grad.at(t, j);
    });
}

Value col_slice(const Value& x, std::size_t c0, std::size_t c1) {
    const Tensor& X = x->value;
    if (X.shape.size() != 2 || c0 >= c1 || c1 > X.cols())
        raise(ErrorCode::internal, "col_slice: bad range");
    Tensor out({X.rows(), c1 - c0});
    for (std::size_t i = 0; i < X.rows(); ++i)
        for (std::size_t j = c0; j < c1; ++j) out.at(i, j - c0) = X.at(i, j);
    return make_node(std::move(out), {x}, [x, c0](Node& self) {
        if (!x->requires_grad) return;
        ensure_grad(*x);
        for (std::size_t i = 0; i < self.grad.rows(); ++i)
            for (std::size_t j = 0; j < self.grad.cols(); ++j)
                x->grad.at(i, c0 + j) += self.grad.at(i, j);
    });
}

Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) raise(ErrorCode::internal, "concat_cols: empty");
    const std::size_t m = parts[0]->value.rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p->value.rows() != m) raise(ErrorCode::internal, "concat_cols: row mismatch");
        total += p->value.cols();
    }
    Tensor out({m, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p->value.cols(); ++j) out.at(i, off + j) = p->value.at(i, j);
        off += p->value.cols();
    }
    return make_node(std::move(out), parts, [parts](Node& self) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) {
                ensure_grad(*p);
                for (std::size_t i = 0; i < p->value.rows(); ++i)
                    for (std::size_t j = 0; j < p->value.cols(); ++j)
                        p->grad.at(i, j) += self.grad.at(i, off + j);
            }
            off += p->value.cols();
        }
    });
}

Value stack_scalars(const std::vector<Value>& xs) {
    Tensor out({xs.size()});
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i]->value.numel() != 1) raise(ErrorCode::internal, "stack_scalars: non-scalar input");
        out.data[i] = xs[i]->value.data[0];
    }
    return make_node(std::move(out), xs, [xs](Node& self) {
        for (std::size_t i = 0; i < xs.size(); ++i) {
            if (!xs[i]->requires_grad) continue;
            ensure_grad(*xs[i]);
            xs[i]->grad.data[0] += self.grad.data[i];
        }
    });
}

Value pick(const Value& matrix, const std::vector<std::pair<int, int>>& coords) {
    const Tensor& M = matrix->value;
    if (M.shape.size() != 2) raise(ErrorCode::internal, "pick: input must be a matrix");
    Tensor out({coords.size()});
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const auto [r, c] = coords[i];
        if (r < 0 || c < 0 || static_cast<std::size_t>(r) >= M.rows() ||
            static_cast<std::size_t>(c) >= M.cols())
            raise(ErrorCode::internal, "pick: coordinate out of range");
        out.data[i] = M.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    }
    return make_node(std::move(out), {matrix}, [matrix, coords](Node& self) {
        if (!matrix->requires_grad) return;
        ensure_grad(*matrix);
        for (std::size_t i = 0; i < coords.size(); ++i)
            matrix->grad.at(static_cast<std::size_t>(coords[i].first),
                            static_cast<std::size_t>(coords[i].second)) += self.grad.data[i];
    });
}

Value layer_norm(const Value& x, const Value& gain, const Value& bias, double eps) {
    const Tensor& X = x->value;
    if (X.shape.size() != 2) raise(ErrorCode::internal, "layer_norm: input must be a matrix");
    const std::size_t m = X.rows(), n = X.cols();
    if (gain->value.numel() != n || bias->value.numel() != n)
        raise(ErrorCode::internal, "layer_norm: gain/bias size mismatch");

    Tensor out({m, n});
    Tensor xhat({m, n});
    std::vector<double> inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += X.at(i, j);
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = X.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat.at(i, j) = (X.at(i, j) - mu) * inv_std[i];
            out.at(i, j) = gain->value.data[j] * xhat.at(i, j) + bias->value.data[j];
        }
    }
    auto xhat_ptr = std::make_shared<Tensor>(std::move(xhat));
    auto inv_ptr = std::make_shared<std::vector<double>>(std::move(inv_std));
    return make_node(std::move(out), {x, gain, bias}, [x, gain, bias, xhat_ptr, inv_ptr](Node& self) {
        const std::size_t m = self.grad.rows(), n = self.grad.cols();
        if (gain->requires_grad) {
            ensure_grad(*gain);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    gain->grad.data[j] += self.grad.at(i, j) * xhat_ptr->at(i, j);
        }
        if (bias->requires_grad) {
            ensure_grad(*bias);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) bias->grad.data[j] += self.grad.at(i, j);
        }
        if (x->requires_grad) {
            ensure_grad(*x);
            for (std::size_t i = 0; i < m; ++i) {
                double sum_g = 0.0, sum_gx = 0.0;
                std::vector<double> gy(n);
                for (std::size_t j = 0; j < n; ++j) {
                    gy[j] = self.grad.at(i, j) * gain->value.data[j];
                    sum_g += gy[j];
                    sum_gx += gy[j] * xhat_ptr->at(i, j);
                }
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    x->grad.at(i, j) += (*inv_ptr)[i] *
                        (gy[j] - inv_n * sum_g - xhat_ptr->at(i, j) * inv_n * sum_gx);
                }
            }
        }
    });
}

Value softmax_rows(const Value& x) {
    const Tensor& X = x->value;
    if (X.shape.size() != 2) raise(ErrorCode::internal, "softmax_rows: input must be a matrix");
    Tensor out = X;
    for (std::size_t i = 0; i < X.rows(); ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < X.cols(); ++j) mx = std::max(mx, X.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < X.cols(); ++j) {
            out.at(i, j) = std::exp(X.at(i, j) - mx);
            z += out.at(i, j);
        }
        for (std::size_t j = 0; j < X.cols(); ++j) out.at(i, j) /= z;
    }
    return make_node(std::move(out), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        ensure_grad(*x);
        for (std::size_t i = 0; i < self.value.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < self.value.cols(); ++j)
                dot += self.grad.at(i, j) * self.value.at(i, j);
            for (std::size_t j = 0; j < self.value.cols(); ++j)
                x->grad.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
        }
    });
}

Value log_softmax_rows(const Value& x) {
    const Tensor& X = x->value;
    if (X.shape.size() != 2) raise(ErrorCode::internal, "log_softmax_rows: input must be a matrix");
    Tensor out = X;
    for (std::size_t i = 0; i < X.rows(); ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < X.cols(); ++j) mx = std::max(mx, X.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < X.cols(); ++j) z += std::exp(X.at(i, j) - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < X.cols(); ++j) out.at(i, j) = X.at(i, j) - lse;
    }
    return make_node(std::move(out), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        ensure_grad(*x);
        for (std::size_t i = 0; i < self.value.rows(); ++i) {
            double sum_g = 0.0;
            for (std::size_t j = 0; j < self.value.cols(); ++j) sum_g += self.grad.at(i, j);
            for (std::size_t j = 0; j < self.value.cols(); ++j)
                x->grad.at(i, j) += self.grad.at(i, j) - std::exp(self.value.at(i, j)) * sum_g;
        }
    });
}

Value causal_mask(const Value& scores) {
    const Tensor& X = scores->value;
    if (X.shape.size() != 2 || X.rows() != X.cols())
        raise(ErrorCode::internal, "causal_mask: input must be square");
    Tensor out = X;
    for (std::size_t i = 0; i < X.rows(); ++i)
        for (std::size_t j = i + 1; j < X.cols(); ++j) out.at(i, j) = -1e30;
    return make_node(std::move(out), {scores}, [scores](Node& self) {
        if (!scores->requires_grad) return;
        ensure_grad(*scores);
        for (std::size_t i = 0; i < self.grad.rows(); ++i)
            for (std::size_t j = 0; j <= i; ++j) scores->grad.at(i, j) += self.grad.at(i, j);
    });
}

Value sum(const Value& x) {
    double s = 0.0;
    for (double v : x->value.data) s += v;
    return make_node(Tensor::scalar(s), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        ensure_grad(*x);
        for (auto& g : x->grad.data) g += self.grad.data[0];
    });
}

Value mean(const Value& x) {
    const double n = static_cast<double>(x->value.numel());
    double s = 0.0;
    for (double v : x->value.data) s += v;
    return make_node(Tensor::scalar(s / n), {x}, [x, n](Node& self) {
        if (!x->requires_grad) return;
        ensure_grad(*x);
        for (auto& g : x->grad.data) g += self.grad.data[0] / n;
    });
}

void backward(const Value& root) {
    if (root->value.numel() != 1) raise(ErrorCode::invalid_argument, "backward: root must be scalar");
    if (!std::isfinite(root->value.data[0]))
        raise(ErrorCode::invalid_argument, "backward: loss is not finite");

    // Iterative post-order topological sort.
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* parent = node->parents[idx].get();
            ++idx;
            if (parent->requires_grad && visited.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : topo) {
        n->grad.shape = n->value.shape;
        n->grad.data.assign(n->value.data.size(), 0.0);
    }
    root->grad.data[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

}  // namespace rafe
