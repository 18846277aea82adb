#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "peftdml/errors.hpp"

namespace peftdml {

using Shape = std::vector<int>;

int64_t numel_of(const Shape& shape);

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized by backward(); empty until then
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Accumulates this node's grad into its parents' grads.
    std::function<void(TensorNode&)> backprop;
};

// Handle to a node of a dynamically-built reverse-mode graph. Dense
// 64-bit floats, rank 1 ([n]) and rank 2 ([n x k]) shapes only.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node(std::move(n)) {}

    // Leaf constructors. Values must be finite and match the shape.
    static Tensor of(const Shape& shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double v, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node != nullptr; }
    const Shape& shape() const { return node->shape; }
    int64_t numel() const { return static_cast<int64_t>(node->value.size()); }
    int rank() const { return static_cast<int>(node->shape.size()); }
    int rows() const;
    int cols() const;

    std::vector<double>& data() { return node->value; }
    const std::vector<double>& data() const { return node->value; }
    const std::vector<double>& grad() const { return node->grad; }
    bool has_grad() const { return !node->grad.empty(); }
    double item() const;

    bool requires_grad() const { return node->requires_grad; }
    void set_requires_grad(bool rg) { node->requires_grad = rg; }

    std::shared_ptr<TensorNode> node;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div_ew(const Tensor& a, const Tensor& b);
Tensor min_ew(const Tensor& a, const Tensor& b);
Tensor max_ew(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt_ew(const Tensor& x);
Tensor log_ew(const Tensor& x);
Tensor exp_ew(const Tensor& x);
Tensor abs_ew(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor reciprocal(const Tensor& x);
Tensor pow_const(const Tensor& x, double exponent);

// scalar-with-tensor broadcasts
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
// broadcast of a trainable [1] tensor over all entries
Tensor add_scalar_tensor(const Tensor& x, const Tensor& s);

// Dispatcher over the elementwise family (shared by property tests).
enum class EwOp { Add, Mul, Relu, Sigmoid, Sub, Square, Sqrt, Log };
Tensor elementwise(EwOp op, const std::vector<Tensor>& operands);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k] * [k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m x k] * [n x k]^T
Tensor matvec(const Tensor& m, const Tensor& v);     // [n x k] * [k] -> [n]
Tensor dot(const Tensor& a, const Tensor& b);        // [k] . [k] -> [1]

// ---- row/column structure ----
Tensor add_row_bias(const Tensor& m, const Tensor& bias);  // [n x k] + [k] per row
Tensor row_sums(const Tensor& m);                          // [n x k] -> [n]
Tensor scale_rows(const Tensor& m, const Tensor& s);       // row i scaled by s[i]
Tensor stack_cols(const std::vector<Tensor>& cols);        // k vectors [n] -> [n x k]
Tensor slice_col(const Tensor& m, int j);                  // -> [n]
Tensor slice_cols(const Tensor& m, int j0, int j1);        // -> [n x (j1-j0)]
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const std::vector<Tensor>& parts);      // same col count
Tensor gather_rows(const Tensor& m, const std::vector<int>& rows);
Tensor gather_cols(const Tensor& m, const std::vector<int>& col_of_row);  // -> [n]
Tensor as_row(const Tensor& v);     // [k] -> [1 x k]
Tensor as_vector(const Tensor& m);  // [1 x k] -> [k]

// ---- reductions & nonlinear blocks ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor log_softmax_rows(const Tensor& m);
// Softmax over surviving entries only; exact zeros where masked.
// Throws AvailabilityError when a row has no survivor.
Tensor masked_softmax(const Tensor& scores, const std::vector<uint8_t>& mask);
Tensor masked_softmax_rows(const Tensor& m, const std::vector<uint8_t>& mask);
// Rowwise L2 normalization; DomainError if a row norm is below 1e-12.
Tensor normalize_rows(const Tensor& m);

// Reverse-mode sweep from a scalar objective. Grads of every
// requires_grad node reachable from the objective are zeroed and then
// accumulated; repeated calls therefore yield identical gradients.
void backward(const Tensor& objective);

}  // namespace peftdml
