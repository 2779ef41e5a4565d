#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace readpvla {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

namespace detail {

// One recorded primitive application (or a leaf). Children hold owning
// pointers to their parents, so a graph stays alive exactly as long as
// some tensor downstream of it does.
struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;  // trainable leaf
  bool grad_needed = false;    // some trainable leaf is reachable from here
  std::vector<double> grad;    // persistent adjoint accumulator (leaves)
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates d(root)/d(parent_i) into parent_adj[i] given d(root)/d(this).
  // Entries of parent_adj may be null for parents that need no gradient.
  std::function<void(const std::vector<double>& out_adj,
                     const std::vector<std::vector<double>*>& parent_adj)>
      backprop;

  std::size_t numel() const { return value.size(); }
};

}  // namespace detail

// Dense row-major tensor of 64-bit reals with an optional recorded gradient.
// Values are immutable once an op has consumed them; `mutable_data` exists
// for the single-threaded optimizer update between training steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;  // 2-d only
  std::size_t cols() const;  // 2-d only

  const std::vector<double>& data() const&;
  // An rvalue tensor owns the last handle to its node; hand out a copy so
  // range-for over `f(...).data()` cannot dangle.
  std::vector<double> data() &&;
  std::vector<double>& mutable_data();
  double at(std::size_t i, std::size_t j) const;
  double item() const;  // scalar tensors

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  const std::vector<double>& grad() const;  // throws if never populated
  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(Shape shape, std::vector<double> value,
                        std::vector<Tensor> parents,
                        std::function<void(const std::vector<double>&,
                                           const std::vector<std::vector<double>*>&)>
                            backprop);
};

enum class Activation { kGelu, kTanh, kSigmoid, kRelu };

// Primitive ops. Each one records its adjoint rule on the implicit tape.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& a, double scale, double shift);
Tensor add_row_bias(const Tensor& a, const Tensor& bias);
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps);
Tensor activation(Activation kind, const Tensor& x);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor mean_rows(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor l2_normalize_rows(const Tensor& x);
// Mean binary cross-entropy on logits; labels are constants in {0,1}.
Tensor bce_with_logits_mean(const Tensor& logits,
                            const std::vector<double>& labels);

double gelu_scalar(double x);

// Replays adjoints of the graph below `root` in reverse topological order,
// visiting each node exactly once.
class Tape {
 public:
  explicit Tape(const Tensor& root);
  // Accumulates adjoints into the grad buffer of every requires_grad leaf.
  void run();
  std::size_t size() const { return order_.size(); }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;  // parents before children
};

// Scalar loss -> leaf gradients. Repeated calls accumulate.
void backward(const Tensor& loss);

// Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h = 1e-5);

}  // namespace readpvla
