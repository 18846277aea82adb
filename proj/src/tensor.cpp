#include "peftdml/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#ifdef PEFTDML_USE_OPENBLAS
#include <cblas.h>
#endif

namespace peftdml {

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor: shape entries must be positive");
        n *= d;
    }
    return n;
}

namespace {

void check_finite(const std::vector<double>& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) throw DomainError(std::string(what) + ": non-finite value");
    }
}

std::shared_ptr<TensorNode> make_leaf(const Shape& shape, std::vector<double> values, bool requires_grad) {
    if (numel_of(shape) != static_cast<int64_t>(values.size())) {
        throw ShapeError("tensor: shape/value length mismatch");
    }
    check_finite(values, "tensor");
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return n;
}

Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> bp) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    for (const auto& p : parents) {
        n->parents.push_back(p.node);
        if (p.node->requires_grad) n->requires_grad = true;
    }
    if (n->requires_grad) n->backprop = std::move(bp);
    return Tensor(n);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) throw ShapeError(std::string(op) + ": operand shapes differ");
}

void require_rank(const Tensor& t, int r, const char* op) {
    if (t.rank() != r) throw ShapeError(std::string(op) + ": unexpected rank");
}

// Dense accumulate kernels. When OpenBLAS is available these route
// through dgemm; the loop fallbacks keep the build self-contained.

// out[m x n] += A[m x k] * B[k x n]
void mm_nn_acc(double* out, const double* a, const double* b, int m, int k, int n) {
#ifdef PEFTDML_USE_OPENBLAS
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, a, k, b, n, 1.0, out, n);
#else
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<int64_t>(i) * k;
        double* oi = out + static_cast<int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = b + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) oi[j] += aip * bp[j];
        }
    }
#endif
}

// out[m x n] += A[m x k] * B[n x k]^T
void mm_nt_acc(double* out, const double* a, const double* b, int m, int k, int n) {
#ifdef PEFTDML_USE_OPENBLAS
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0, a, k, b, k, 1.0, out, n);
#else
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<int64_t>(i) * k;
        double* oi = out + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<int64_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            oi[j] += acc;
        }
    }
#endif
}

// out[k x n] += A[m x k]^T * B[m x n]
void mm_tn_acc(double* out, const double* a, const double* b, int m, int k, int n) {
#ifdef PEFTDML_USE_OPENBLAS
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0, a, k, b, n, 1.0, out, n);
#else
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<int64_t>(i) * k;
        const double* bi = b + static_cast<int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            double* op = out + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) op[j] += aip * bi[j];
        }
    }
#endif
}

using UnaryFwd = double (*)(double);
using UnaryBwd = double (*)(double x, double y);  // d y / d x given input x and output y

Tensor unary_op(const Tensor& x, UnaryFwd fwd, UnaryBwd bwd) {
    std::vector<double> out(x.numel());
    const auto& xv = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
    return make_op(x.shape(), std::move(out), {x}, [bwd](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < self.value.size(); ++i) {
            p.grad[i] += self.grad[i] * bwd(p.value[i], self.value[i]);
        }
    });
}

}  // namespace

Tensor Tensor::of(const Shape& shape, std::vector<double> values, bool requires_grad) {
    return Tensor(make_leaf(shape, std::move(values), requires_grad));
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return Tensor(make_leaf(shape, std::vector<double>(numel_of(shape), 0.0), requires_grad));
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
    return Tensor(make_leaf(shape, std::vector<double>(numel_of(shape), v), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(make_leaf({1}, {v}, requires_grad));
}

int Tensor::rows() const {
    if (rank() != 2) throw ShapeError("rows: rank-2 tensor required");
    return node->shape[0];
}

int Tensor::cols() const {
    if (rank() != 2) throw ShapeError("cols: rank-2 tensor required");
    return node->shape[1];
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor is not a scalar");
    return node->value[0];
}

// ---- elementwise binary ----

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        for (int s = 0; s < 2; ++s) {
            auto& p = *self.parents[s];
            if (!p.requires_grad) continue;
            for (size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (size_t i = 0; i < self.value.size(); ++i) {
            if (pa.requires_grad) pa.grad[i] += self.grad[i];
            if (pb.requires_grad) pb.grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (size_t i = 0; i < self.value.size(); ++i) {
            if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.value[i];
            if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.value[i];
        }
    });
}

Tensor div_ew(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        if (b.data()[i] == 0.0) throw DomainError("div: division by zero");
        out[i] = a.data()[i] / b.data()[i];
    }
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (size_t i = 0; i < self.value.size(); ++i) {
            const double inv = 1.0 / pb.value[i];
            if (pa.requires_grad) pa.grad[i] += self.grad[i] * inv;
            if (pb.requires_grad) pb.grad[i] -= self.grad[i] * pa.value[i] * inv * inv;
        }
    });
}

Tensor min_ew(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "min");
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.data()[i], b.data()[i]);
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (size_t i = 0; i < self.value.size(); ++i) {
            // ties route to the first operand
            if (pa.value[i] <= pb.value[i]) {
                if (pa.requires_grad) pa.grad[i] += self.grad[i];
            } else if (pb.requires_grad) {
                pb.grad[i] += self.grad[i];
            }
        }
    });
}

Tensor max_ew(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max");
    std::vector<double> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data()[i], b.data()[i]);
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (size_t i = 0; i < self.value.size(); ++i) {
            if (pa.value[i] >= pb.value[i]) {
                if (pa.requires_grad) pa.grad[i] += self.grad[i];
            } else if (pb.requires_grad) {
                pb.grad[i] += self.grad[i];
            }
        }
    });
}

// ---- elementwise unary ----

Tensor relu(const Tensor& x) {
    return unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor square(const Tensor& x) {
    return unary_op(
        x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt_ew(const Tensor& x) {
    for (double v : x.data()) {
        if (v < 0.0) throw DomainError("sqrt: negative input");
    }
    return unary_op(
        x, [](double v) { return std::sqrt(v); },
        [](double, double y) { return 0.5 / std::max(y, 1e-12); });
}

Tensor log_ew(const Tensor& x) {
    for (double v : x.data()) {
        if (v <= 0.0) throw DomainError("log: non-positive input");
    }
    return unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp_ew(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor abs_ew(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor neg(const Tensor& x) {
    return unary_op(
        x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor reciprocal(const Tensor& x) {
    for (double v : x.data()) {
        if (v == 0.0) throw DomainError("reciprocal: division by zero");
    }
    return unary_op(
        x, [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

Tensor pow_const(const Tensor& x, double exponent) {
    if (exponent == 0.0) {
        std::vector<double> out(x.numel(), 1.0);
        return make_op(x.shape(), std::move(out), {x}, [](TensorNode&) {});
    }
    std::vector<double> out(x.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        if (v < 0.0 && exponent != std::floor(exponent)) {
            throw DomainError("pow: negative base with fractional exponent");
        }
        if (v == 0.0 && exponent < 1.0) throw DomainError("pow: zero base with exponent below 1");
        out[i] = std::pow(v, exponent);
    }
    return make_op(x.shape(), std::move(out), {x}, [exponent](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < self.value.size(); ++i) {
            p.grad[i] += self.grad[i] * exponent * std::pow(p.value[i], exponent - 1.0);
        }
    });
}

Tensor add_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + c;
    return make_op(x.shape(), std::move(out), {x}, [](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.grad[i];
    });
}

Tensor mul_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
    return make_op(x.shape(), std::move(out), {x}, [c](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.grad[i] * c;
    });
}

Tensor add_scalar_tensor(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("add_scalar_tensor: scalar operand must have one entry");
    std::vector<double> out(x.numel());
    const double c = s.data()[0];
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + c;
    return make_op(x.shape(), std::move(out), {x, s}, [](TensorNode& self) {
        auto& px = *self.parents[0];
        auto& ps = *self.parents[1];
        double acc = 0.0;
        for (size_t i = 0; i < self.value.size(); ++i) {
            if (px.requires_grad) px.grad[i] += self.grad[i];
            acc += self.grad[i];
        }
        if (ps.requires_grad) ps.grad[0] += acc;
    });
}

Tensor elementwise(EwOp op, const std::vector<Tensor>& operands) {
    auto unary = [&]() -> const Tensor& {
        if (operands.size() != 1) throw ContractError("elementwise: unary op expects one operand");
        return operands[0];
    };
    auto binary = [&]() {
        if (operands.size() != 2) throw ContractError("elementwise: binary op expects two operands");
    };
    switch (op) {
        case EwOp::Add: binary(); return add(operands[0], operands[1]);
        case EwOp::Mul: binary(); return mul(operands[0], operands[1]);
        case EwOp::Sub: binary(); return sub(operands[0], operands[1]);
        case EwOp::Relu: return relu(unary());
        case EwOp::Sigmoid: return sigmoid(unary());
        case EwOp::Square: return square(unary());
        case EwOp::Sqrt: return sqrt_ew(unary());
        case EwOp::Log: return log_ew(unary());
    }
    throw ContractError("elementwise: unknown op");
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) throw ShapeError("matmul: inner dimensions differ");
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    mm_nn_acc(out.data(), a.data().data(), b.data().data(), m, k, n);
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        // dA += dY * B^T ; dB += A^T * dY
        if (pa.requires_grad) mm_nt_acc(pa.grad.data(), self.grad.data(), pb.value.data(), m, n, k);
        if (pb.requires_grad) mm_tn_acc(pb.grad.data(), pa.value.data(), self.grad.data(), m, k, n);
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul_nt");
    require_rank(b, 2, "matmul_nt");
    const int m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) throw ShapeError("matmul_nt: inner dimensions differ");
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    mm_nt_acc(out.data(), a.data().data(), b.data().data(), m, k, n);
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        // Y = A B^T : dA += dY * B ; dB += dY^T * A
        if (pa.requires_grad) mm_nn_acc(pa.grad.data(), self.grad.data(), pb.value.data(), m, n, k);
        if (pb.requires_grad) mm_tn_acc(pb.grad.data(), self.grad.data(), pa.value.data(), m, n, k);
    });
}

Tensor matvec(const Tensor& m, const Tensor& v) {
    require_rank(m, 2, "matvec");
    require_rank(v, 1, "matvec");
    const int n = m.rows(), k = m.cols();
    if (v.numel() != k) throw ShapeError("matvec: dimensions differ");
    std::vector<double> out(n, 0.0);
    for (int i = 0; i < n; ++i) {
        const double* mi = m.data().data() + static_cast<int64_t>(i) * k;
        double acc = 0.0;
        for (int j = 0; j < k; ++j) acc += mi[j] * v.data()[j];
        out[i] = acc;
    }
    return make_op({n}, std::move(out), {m, v}, [n, k](TensorNode& self) {
        auto& pm = *self.parents[0];
        auto& pv = *self.parents[1];
        for (int i = 0; i < n; ++i) {
            const double g = self.grad[i];
            if (g == 0.0) continue;
            const double* mi = pm.value.data() + static_cast<int64_t>(i) * k;
            double* gmi = pm.grad.data() + static_cast<int64_t>(i) * k;
            for (int j = 0; j < k; ++j) {
                if (pm.requires_grad) gmi[j] += g * pv.value[j];
                if (pv.requires_grad) pv.grad[j] += g * mi[j];
            }
        }
    });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    require_rank(a, 1, "dot");
    require_same_shape(a, b, "dot");
    double acc = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) acc += a.data()[i] * b.data()[i];
    return make_op({1}, {acc}, {a, b}, [](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const double g = self.grad[0];
        for (size_t i = 0; i < pa.value.size(); ++i) {
            if (pa.requires_grad) pa.grad[i] += g * pb.value[i];
            if (pb.requires_grad) pb.grad[i] += g * pa.value[i];
        }
    });
}

// ---- row/column structure ----

Tensor add_row_bias(const Tensor& m, const Tensor& bias) {
    require_rank(m, 2, "add_row_bias");
    require_rank(bias, 1, "add_row_bias");
    const int n = m.rows(), k = m.cols();
    if (bias.numel() != k) throw ShapeError("add_row_bias: bias length differs from column count");
    std::vector<double> out(m.data());
    for (int i = 0; i < n; ++i) {
        double* oi = out.data() + static_cast<int64_t>(i) * k;
        for (int j = 0; j < k; ++j) oi[j] += bias.data()[j];
    }
    return make_op({n, k}, std::move(out), {m, bias}, [n, k](TensorNode& self) {
        auto& pm = *self.parents[0];
        auto& pb = *self.parents[1];
        for (int i = 0; i < n; ++i) {
            const double* gi = self.grad.data() + static_cast<int64_t>(i) * k;
            for (int j = 0; j < k; ++j) {
                if (pm.requires_grad) pm.grad[static_cast<int64_t>(i) * k + j] += gi[j];
                if (pb.requires_grad) pb.grad[j] += gi[j];
            }
        }
    });
}

Tensor row_sums(const Tensor& m) {
    require_rank(m, 2, "row_sums");
    const int n = m.rows(), k = m.cols();
    std::vector<double> out(n, 0.0);
    for (int i = 0; i < n; ++i) {
        const double* mi = m.data().data() + static_cast<int64_t>(i) * k;
        for (int j = 0; j < k; ++j) out[i] += mi[j];
    }
    return make_op({n}, std::move(out), {m}, [n, k](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int i = 0; i < n; ++i) {
            const double g = self.grad[i];
            double* gi = p.grad.data() + static_cast<int64_t>(i) * k;
            for (int j = 0; j < k; ++j) gi[j] += g;
        }
    });
}

Tensor scale_rows(const Tensor& m, const Tensor& s) {
    require_rank(m, 2, "scale_rows");
    require_rank(s, 1, "scale_rows");
    const int n = m.rows(), k = m.cols();
    if (s.numel() != n) throw ShapeError("scale_rows: scale length differs from row count");
    std::vector<double> out(m.data());
    for (int i = 0; i < n; ++i) {
        double* oi = out.data() + static_cast<int64_t>(i) * k;
        for (int j = 0; j < k; ++j) oi[j] *= s.data()[i];
    }
    return make_op({n, k}, std::move(out), {m, s}, [n, k](TensorNode& self) {
        auto& pm = *self.parents[0];
        auto& ps = *self.parents[1];
        for (int i = 0; i < n; ++i) {
            const double si = ps.value[i];
            const double* gi = self.grad.data() + static_cast<int64_t>(i) * k;
            const double* mi = pm.value.data() + static_cast<int64_t>(i) * k;
            double* gmi = pm.grad.data() + static_cast<int64_t>(i) * k;
            double acc = 0.0;
            for (int j = 0; j < k; ++j) {
                if (pm.requires_grad) gmi[j] += gi[j] * si;
                acc += gi[j] * mi[j];
            }
            if (ps.requires_grad) ps.grad[i] += acc;
        }
    });
}

Tensor stack_cols(const std::vector<Tensor>& cols) {
    if (cols.empty()) throw ContractError("stack_cols: no columns");
    const int n = static_cast<int>(cols[0].numel());
    const int k = static_cast<int>(cols.size());
    std::vector<Tensor> parents;
    std::vector<double> out(static_cast<size_t>(n) * k);
    for (int j = 0; j < k; ++j) {
        require_rank(cols[j], 1, "stack_cols");
        if (cols[j].numel() != n) throw ShapeError("stack_cols: column lengths differ");
        for (int i = 0; i < n; ++i) out[static_cast<int64_t>(i) * k + j] = cols[j].data()[i];
        parents.push_back(cols[j]);
    }
    return make_op({n, k}, std::move(out), std::move(parents), [n, k](TensorNode& self) {
        for (int j = 0; j < k; ++j) {
            auto& p = *self.parents[j];
            if (!p.requires_grad) continue;
            for (int i = 0; i < n; ++i) p.grad[i] += self.grad[static_cast<int64_t>(i) * k + j];
        }
    });
}

Tensor slice_col(const Tensor& m, int j) {
    require_rank(m, 2, "slice_col");
    const int n = m.rows(), k = m.cols();
    if (j < 0 || j >= k) throw ShapeError("slice_col: column out of range");
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) out[i] = m.data()[static_cast<int64_t>(i) * k + j];
    return make_op({n}, std::move(out), {m}, [n, k, j](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int i = 0; i < n; ++i) p.grad[static_cast<int64_t>(i) * k + j] += self.grad[i];
    });
}

Tensor slice_cols(const Tensor& m, int j0, int j1) {
    require_rank(m, 2, "slice_cols");
    const int n = m.rows(), k = m.cols();
    if (j0 < 0 || j1 > k || j0 >= j1) throw ShapeError("slice_cols: bad column range");
    const int w = j1 - j0;
    std::vector<double> out(static_cast<size_t>(n) * w);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < w; ++j) {
            out[static_cast<int64_t>(i) * w + j] = m.data()[static_cast<int64_t>(i) * k + j0 + j];
        }
    }
    return make_op({n, w}, std::move(out), {m}, [n, k, j0, w](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < w; ++j) {
                p.grad[static_cast<int64_t>(i) * k + j0 + j] += self.grad[static_cast<int64_t>(i) * w + j];
            }
        }
    });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "concat_cols");
    require_rank(b, 2, "concat_cols");
    const int n = a.rows();
    if (b.rows() != n) throw ShapeError("concat_cols: row counts differ");
    const int ka = a.cols(), kb = b.cols(), k = ka + kb;
    std::vector<double> out(static_cast<size_t>(n) * k);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < ka; ++j) out[static_cast<int64_t>(i) * k + j] = a.data()[static_cast<int64_t>(i) * ka + j];
        for (int j = 0; j < kb; ++j) out[static_cast<int64_t>(i) * k + ka + j] = b.data()[static_cast<int64_t>(i) * kb + j];
    }
    return make_op({n, k}, std::move(out), {a, b}, [n, ka, kb, k](TensorNode& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (int i = 0; i < n; ++i) {
            const double* gi = self.grad.data() + static_cast<int64_t>(i) * k;
            if (pa.requires_grad) {
                for (int j = 0; j < ka; ++j) pa.grad[static_cast<int64_t>(i) * ka + j] += gi[j];
            }
            if (pb.requires_grad) {
                for (int j = 0; j < kb; ++j) pb.grad[static_cast<int64_t>(i) * kb + j] += gi[ka + j];
            }
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const int k = parts[0].cols();
    int n = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_rows");
        if (p.cols() != k) throw ShapeError("concat_rows: column counts differ");
        n += p.rows();
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(n) * k);
    std::vector<Tensor> parents;
    std::vector<int> row_counts;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        parents.push_back(p);
        row_counts.push_back(p.rows());
    }
    return make_op({n, k}, std::move(out), std::move(parents),
                   [row_counts, k](TensorNode& self) {
                       int64_t off = 0;
                       for (size_t s = 0; s < row_counts.size(); ++s) {
                           auto& p = *self.parents[s];
                           const int64_t sz = static_cast<int64_t>(row_counts[s]) * k;
                           if (p.requires_grad) {
                               for (int64_t i = 0; i < sz; ++i) p.grad[i] += self.grad[off + i];
                           }
                           off += sz;
                       }
                   });
}

Tensor gather_rows(const Tensor& m, const std::vector<int>& rows) {
    require_rank(m, 2, "gather_rows");
    const int n = m.rows(), k = m.cols();
    const int g = static_cast<int>(rows.size());
    if (g == 0) throw ContractError("gather_rows: empty row list");
    std::vector<double> out(static_cast<size_t>(g) * k);
    for (int r = 0; r < g; ++r) {
        if (rows[r] < 0 || rows[r] >= n) throw ShapeError("gather_rows: row out of range");
        std::copy_n(m.data().data() + static_cast<int64_t>(rows[r]) * k, k,
                    out.data() + static_cast<int64_t>(r) * k);
    }
    return make_op({g, k}, std::move(out), {m}, [rows, k](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t r = 0; r < rows.size(); ++r) {
            const double* gr = self.grad.data() + static_cast<int64_t>(r) * k;
            double* pr = p.grad.data() + static_cast<int64_t>(rows[r]) * k;
            for (int j = 0; j < k; ++j) pr[j] += gr[j];
        }
    });
}

Tensor gather_cols(const Tensor& m, const std::vector<int>& col_of_row) {
    require_rank(m, 2, "gather_cols");
    const int n = m.rows(), k = m.cols();
    if (static_cast<int>(col_of_row.size()) != n) {
        throw ShapeError("gather_cols: index count differs from row count");
    }
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) {
        if (col_of_row[i] < 0 || col_of_row[i] >= k) throw ShapeError("gather_cols: column out of range");
        out[i] = m.data()[static_cast<int64_t>(i) * k + col_of_row[i]];
    }
    return make_op({n}, std::move(out), {m}, [col_of_row, k](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < col_of_row.size(); ++i) {
            p.grad[static_cast<int64_t>(i) * k + col_of_row[i]] += self.grad[i];
        }
    });
}

namespace {

Tensor reshape_passthrough(const Tensor& x, Shape shape) {
    return make_op(std::move(shape), std::vector<double>(x.data()), {x}, [](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.grad[i];
    });
}

}  // namespace

Tensor as_row(const Tensor& v) {
    require_rank(v, 1, "as_row");
    return reshape_passthrough(v, {1, static_cast<int>(v.numel())});
}

Tensor as_vector(const Tensor& m) {
    require_rank(m, 2, "as_vector");
    if (m.rows() != 1) throw ShapeError("as_vector: single-row tensor required");
    return reshape_passthrough(m, {m.cols()});
}

// ---- reductions & nonlinear blocks ----

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return make_op({1}, {acc}, {x}, [](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < p.value.size(); ++i) p.grad[i] += self.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    return make_op({1}, {acc * inv}, {x}, [inv](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < p.value.size(); ++i) p.grad[i] += self.grad[0] * inv;
    });
}

Tensor log_softmax_rows(const Tensor& m) {
    require_rank(m, 2, "log_softmax_rows");
    const int n = m.rows(), k = m.cols();
    std::vector<double> out(static_cast<size_t>(n) * k);
    for (int i = 0; i < n; ++i) {
        const double* mi = m.data().data() + static_cast<int64_t>(i) * k;
        double mx = mi[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, mi[j]);
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(mi[j] - mx);
        const double lz = std::log(z) + mx;
        for (int j = 0; j < k; ++j) out[static_cast<int64_t>(i) * k + j] = mi[j] - lz;
    }
    return make_op({n, k}, std::move(out), {m}, [n, k](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int i = 0; i < n; ++i) {
            const double* gi = self.grad.data() + static_cast<int64_t>(i) * k;
            const double* yi = self.value.data() + static_cast<int64_t>(i) * k;
            double gsum = 0.0;
            for (int j = 0; j < k; ++j) gsum += gi[j];
            double* pi = p.grad.data() + static_cast<int64_t>(i) * k;
            for (int j = 0; j < k; ++j) pi[j] += gi[j] - std::exp(yi[j]) * gsum;
        }
    });
}

Tensor masked_softmax_rows(const Tensor& m, const std::vector<uint8_t>& mask) {
    require_rank(m, 2, "masked_softmax_rows");
    const int n = m.rows(), k = m.cols();
    if (static_cast<int>(mask.size()) != n * k) throw ShapeError("masked_softmax_rows: mask size differs");
    std::vector<double> out(static_cast<size_t>(n) * k, 0.0);
    for (int i = 0; i < n; ++i) {
        const double* mi = m.data().data() + static_cast<int64_t>(i) * k;
        const uint8_t* qi = mask.data() + static_cast<int64_t>(i) * k;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < k; ++j) {
            if (qi[j]) mx = std::max(mx, mi[j]);
        }
        if (!std::isfinite(mx)) throw AvailabilityError("masked_softmax: no surviving entry");
        double z = 0.0;
        for (int j = 0; j < k; ++j) {
            if (qi[j]) z += std::exp(mi[j] - mx);
        }
        for (int j = 0; j < k; ++j) {
            if (qi[j]) out[static_cast<int64_t>(i) * k + j] = std::exp(mi[j] - mx) / z;
        }
    }
    return make_op({n, k}, std::move(out), {m}, [n, k, mask](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int i = 0; i < n; ++i) {
            const double* gi = self.grad.data() + static_cast<int64_t>(i) * k;
            const double* ai = self.value.data() + static_cast<int64_t>(i) * k;
            const uint8_t* qi = mask.data() + static_cast<int64_t>(i) * k;
            double dsum = 0.0;
            for (int j = 0; j < k; ++j) {
                if (qi[j]) dsum += gi[j] * ai[j];
            }
            double* pi = p.grad.data() + static_cast<int64_t>(i) * k;
            for (int j = 0; j < k; ++j) {
                if (qi[j]) pi[j] += ai[j] * (gi[j] - dsum);
            }
        }
    });
}

Tensor masked_softmax(const Tensor& scores, const std::vector<uint8_t>& mask) {
    require_rank(scores, 1, "masked_softmax");
    if (mask.size() != scores.data().size()) throw ShapeError("masked_softmax: mask size differs");
    return as_vector(masked_softmax_rows(as_row(scores), mask));
}

Tensor normalize_rows(const Tensor& m) {
    require_rank(m, 2, "normalize_rows");
    const int n = m.rows(), k = m.cols();
    std::vector<double> out(static_cast<size_t>(n) * k);
    std::vector<double> norms(n);
    for (int i = 0; i < n; ++i) {
        const double* mi = m.data().data() + static_cast<int64_t>(i) * k;
        double sq = 0.0;
        for (int j = 0; j < k; ++j) sq += mi[j] * mi[j];
        const double r = std::sqrt(sq);
        if (r < 1e-12) throw DomainError("normalize_rows: degenerate (near-zero) row");
        norms[i] = r;
        for (int j = 0; j < k; ++j) out[static_cast<int64_t>(i) * k + j] = mi[j] / r;
    }
    return make_op({n, k}, std::move(out), {m}, [n, k, norms](TensorNode& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int i = 0; i < n; ++i) {
            const double* gi = self.grad.data() + static_cast<int64_t>(i) * k;
            const double* yi = self.value.data() + static_cast<int64_t>(i) * k;
            double ydotg = 0.0;
            for (int j = 0; j < k; ++j) ydotg += yi[j] * gi[j];
            double* pi = p.grad.data() + static_cast<int64_t>(i) * k;
            const double inv = 1.0 / norms[i];
            for (int j = 0; j < k; ++j) pi[j] += (gi[j] - yi[j] * ydotg) * inv;
        }
    });
}

void backward(const Tensor& objective) {
    if (!objective.defined() || objective.numel() != 1) {
        throw ContractError("backward: objective must be a defined scalar");
    }
    // iterative post-order DFS; traversal order is fixed by graph structure
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({objective.node.get(), 0});
    visited.insert(objective.node.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode* p = f.node->parents[f.next_parent++].get();
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }
    for (TensorNode* n : topo) {
        if (n->requires_grad) n->grad.assign(n->value.size(), 0.0);
    }
    if (!objective.node->requires_grad) return;  // nothing trainable upstream
    objective.node->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* n = *it;
        if (n->requires_grad && n->backprop) n->backprop(*n);
    }
}

}  // namespace peftdml
