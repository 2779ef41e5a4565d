#include "readpvla/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>
#include <unordered_set>

#include "readpvla/errors.hpp"

namespace readpvla {

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-d tensor, got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_data(shape, std::vector<double>(shape_numel(shape), 0.0),
                   requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  return from_data(shape, std::vector<double>(shape_numel(shape), fill),
                   requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor: empty shape");
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor: zero extent in " + shape_str(shape));
  }
  if (data.size() != shape_numel(shape)) {
    throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  node->grad_needed = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  require_2d(*this, "rows");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  require_2d(*this, "cols");
  return node_->shape[1];
}

const std::vector<double>& Tensor::data() const& { return node_->value; }
std::vector<double> Tensor::data() && { return node_->value; }
std::vector<double>& Tensor::mutable_data() { return node_->value; }

double Tensor::at(std::size_t i, std::size_t j) const {
  require_2d(*this, "at");
  return node_->value[i * node_->shape[1] + j];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item: tensor " + shape_str(shape()) + " is not scalar");
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  node_->grad_needed = flag;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) {
    throw ConfigError("grad: no gradient recorded for this tensor");
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

// ---------------------------------------------------------------------------
// Op plumbing

Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<Tensor> parents,
               std::function<void(const std::vector<double>&,
                                  const std::vector<std::vector<double>*>&)>
                   backprop) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->parents.reserve(parents.size());
  bool needed = false;
  for (const Tensor& p : parents) {
    needed = needed || p.node()->grad_needed;
    node->parents.push_back(p.node());
  }
  node->grad_needed = needed;
  if (needed) node->backprop = std::move(backprop);
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Primitives

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
  if (k != k2) {
    throw DimensionError("matmul: inner extents mismatch " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op(
      {m, n}, std::move(out), {a, b},
      [an, bn, m, k, n](const std::vector<double>& g,
                        const std::vector<std::vector<double>*>& padj) {
        if (padj[0]) {  // dA = g . B^T
          auto& da = *padj[0];
          const auto& bv = bn->value;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              const double* grow = &g[i * n];
              const double* brow = &bv[p * n];
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              da[i * k + p] += acc;
            }
        }
        if (padj[1]) {  // dB = A^T . g
          auto& db = *padj[1];
          const auto& av = an->value;
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = &g[i * n];
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = av[i * k + p];
              if (aip == 0.0) continue;
              double* drow = &db[p * n];
              for (std::size_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
            }
          }
        }
      });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  const auto& av = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_op({n, m}, std::move(out), {a},
                 [m, n](const std::vector<double>& g,
                        const std::vector<std::vector<double>*>& padj) {
                   if (!padj[0]) return;
                   auto& da = *padj[0];
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j)
                       da[i * n + j] += g[j * m + i];
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [](const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& padj) {
                   for (int side = 0; side < 2; ++side) {
                     if (!padj[side]) continue;
                     auto& d = *padj[side];
                     for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                   }
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op(a.shape(), std::move(out), {a, b},
                 [](const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& padj) {
                   if (padj[0]) {
                     auto& d = *padj[0];
                     for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                   }
                   if (padj[1]) {
                     auto& d = *padj[1];
                     for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b},
                 [an, bn](const std::vector<double>& g,
                          const std::vector<std::vector<double>*>& padj) {
                   if (padj[0]) {
                     auto& d = *padj[0];
                     for (std::size_t i = 0; i < g.size(); ++i)
                       d[i] += g[i] * bn->value[i];
                   }
                   if (padj[1]) {
                     auto& d = *padj[1];
                     for (std::size_t i = 0; i < g.size(); ++i)
                       d[i] += g[i] * an->value[i];
                   }
                 });
}

Tensor affine(const Tensor& a, double scale, double shift) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = scale * a.data()[i] + shift;
  return make_op(a.shape(), std::move(out), {a},
                 [scale](const std::vector<double>& g,
                         const std::vector<std::vector<double>*>& padj) {
                   if (!padj[0]) return;
                   auto& d = *padj[0];
                   for (std::size_t i = 0; i < g.size(); ++i) d[i] += scale * g[i];
                 });
}

Tensor add_row_bias(const Tensor& a, const Tensor& bias) {
  require_2d(a, "add_row_bias");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.rank() != 1 || bias.numel() != n) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) +
                         " does not match row width of " + shape_str(a.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = a.data()[i * n + j] + bias.data()[j];
  return make_op({m, n}, std::move(out), {a, bias},
                 [m, n](const std::vector<double>& g,
                        const std::vector<std::vector<double>*>& padj) {
                   if (padj[0]) {
                     auto& d = *padj[0];
                     for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                   }
                   if (padj[1]) {
                     auto& d = *padj[1];
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
                   }
                 });
}

Tensor softmax_rows(const Tensor& x) {
  require_2d(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  const auto& xv = x.data();
  for (double v : xv) {
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &xv[i * n];
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      sum += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
  }
  auto yv = out;  // captured forward values
  return make_op({m, n}, std::move(out), {x},
                 [yv = std::move(yv), m, n](
                     const std::vector<double>& g,
                     const std::vector<std::vector<double>*>& padj) {
                   if (!padj[0]) return;
                   auto& d = *padj[0];
                   for (std::size_t i = 0; i < m; ++i) {
                     const double* y = &yv[i * n];
                     const double* gr = &g[i * n];
                     double dot = 0.0;
                     for (std::size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
                     for (std::size_t j = 0; j < n; ++j)
                       d[i * n + j] += y[j] * (gr[j] - dot);
                   }
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  require_2d(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.rank() != 1 || gain.numel() != n || bias.rank() != 1 ||
      bias.numel() != n) {
    throw DimensionError("layer_norm: gain/bias must be length " +
                         std::to_string(n) + ", got " + shape_str(gain.shape()) +
                         " and " + shape_str(bias.shape()));
  }
  const auto& xv = x.data();
  std::vector<double> xhat(m * n);
  std::vector<double> inv_sigma(m);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = &xv[i * n];
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(n);  // population variance
    const double denom2 = var + eps;
    if (denom2 <= 0.0) {
      throw NumericError("layer_norm: zero variance with eps=" +
                         std::to_string(eps) + " at row " + std::to_string(i));
    }
    const double s = 1.0 / std::sqrt(denom2);
    inv_sigma[i] = s;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * s;
      out[i * n + j] = gain.data()[j] * xhat[i * n + j] + bias.data()[j];
    }
  }
  auto gn = gain.node();
  return make_op(
      {m, n}, std::move(out), {x, gain, bias},
      [xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), gn, m, n](
          const std::vector<double>& g,
          const std::vector<std::vector<double>*>& padj) {
        for (std::size_t i = 0; i < m; ++i) {
          const double* xh = &xhat[i * n];
          const double* gr = &g[i * n];
          if (padj[0]) {
            // dyhat_j = g_j * gain_j; dx = s*(dyhat - mean(dyhat) - xhat*mean(dyhat*xhat))
            double mean_dy = 0.0, mean_dyxh = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dy = gr[j] * gn->value[j];
              mean_dy += dy;
              mean_dyxh += dy * xh[j];
            }
            mean_dy /= static_cast<double>(n);
            mean_dyxh /= static_cast<double>(n);
            auto& dx = *padj[0];
            for (std::size_t j = 0; j < n; ++j) {
              const double dy = gr[j] * gn->value[j];
              dx[i * n + j] += inv_sigma[i] * (dy - mean_dy - xh[j] * mean_dyxh);
            }
          }
          if (padj[1]) {
            auto& dg = *padj[1];
            for (std::size_t j = 0; j < n; ++j) dg[j] += gr[j] * xh[j];
          }
          if (padj[2]) {
            auto& db = *padj[2];
            for (std::size_t j = 0; j < n; ++j) db[j] += gr[j];
          }
        }
      });
}

double gelu_scalar(double x) {
  // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
  static const double kRoot2OverPi = std::sqrt(2.0 / M_PI);
  const double u = kRoot2OverPi * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

namespace {

double gelu_grad(double x) {
  static const double kRoot2OverPi = std::sqrt(2.0 / M_PI);
  const double u = kRoot2OverPi * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = kRoot2OverPi * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor activation(Activation kind, const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto& xv = x.data();
  switch (kind) {
    case Activation::kGelu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(xv[i]);
      break;
    case Activation::kTanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
      break;
    case Activation::kSigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(xv[i]);
      break;
    case Activation::kRelu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, xv[i]);
      break;
  }
  auto xn = x.node();
  auto yv = out;
  return make_op(x.shape(), std::move(out), {x},
                 [kind, xn, yv = std::move(yv)](
                     const std::vector<double>& g,
                     const std::vector<std::vector<double>*>& padj) {
                   if (!padj[0]) return;
                   auto& d = *padj[0];
                   switch (kind) {
                     case Activation::kGelu:
                       for (std::size_t i = 0; i < g.size(); ++i)
                         d[i] += g[i] * gelu_grad(xn->value[i]);
                       break;
                     case Activation::kTanh:
                       for (std::size_t i = 0; i < g.size(); ++i)
                         d[i] += g[i] * (1.0 - yv[i] * yv[i]);
                       break;
                     case Activation::kSigmoid:
                       for (std::size_t i = 0; i < g.size(); ++i)
                         d[i] += g[i] * yv[i] * (1.0 - yv[i]);
                       break;
                     case Activation::kRelu:
                       for (std::size_t i = 0; i < g.size(); ++i)
                         d[i] += xn->value[i] > 0.0 ? g[i] : 0.0;
                       break;
                   }
                 });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  require_2d(x, "slice_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (count == 0 || start + count > m) {
    throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin() + start * n,
                          x.data().begin() + (start + count) * n);
  return make_op({count, n}, std::move(out), {x},
                 [start, n](const std::vector<double>& g,
                            const std::vector<std::vector<double>*>& padj) {
                   if (!padj[0]) return;
                   auto& d = *padj[0];
                   for (std::size_t i = 0; i < g.size(); ++i)
                     d[start * n + i] += g[i];
                 });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_2d(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (count == 0 || start + count > n) {
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j)
      out[i * count + j] = x.data()[i * n + start + j];
  return make_op({m, count}, std::move(out), {x},
                 [m, n, start, count](const std::vector<double>& g,
                                      const std::vector<std::vector<double>*>& padj) {
                   if (!padj[0]) return;
                   auto& d = *padj[0];
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < count; ++j)
                       d[i * n + start + j] += g[i * count + j];
                 });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != n) {
      throw DimensionError("concat_rows: column mismatch " +
                           shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  std::vector<std::size_t> row_of(parts.size());
  std::size_t r = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    row_of[k] = r;
    r += parts[k].rows();
    out.insert(out.end(), parts[k].data().begin(), parts[k].data().end());
  }
  return make_op({m, n}, std::move(out), parts,
                 [row_of, n](const std::vector<double>& g,
                             const std::vector<std::vector<double>*>& padj) {
                   for (std::size_t k = 0; k < padj.size(); ++k) {
                     if (!padj[k]) continue;
                     auto& d = *padj[k];
                     const std::size_t off = row_of[k] * n;
                     for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[off + i];
                   }
                 });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row mismatch " +
                           shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::vector<std::size_t> col_of(parts.size());
  std::vector<std::size_t> width(parts.size());
  std::size_t c = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    col_of[k] = c;
    width[k] = parts[k].cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < width[k]; ++j)
        out[i * n + c + j] = parts[k].data()[i * width[k] + j];
    c += width[k];
  }
  return make_op({m, n}, std::move(out), parts,
                 [col_of, width, m, n](const std::vector<double>& g,
                                       const std::vector<std::vector<double>*>& padj) {
                   for (std::size_t k = 0; k < padj.size(); ++k) {
                     if (!padj[k]) continue;
                     auto& d = *padj[k];
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < width[k]; ++j)
                         d[i * width[k] + j] += g[i * n + col_of[k] + j];
                   }
                 });
}

Tensor mean_rows(const Tensor& x) {
  require_2d(x, "mean_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x.data()[i * n + j];
  for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
  return make_op({1, n}, std::move(out), {x},
                 [m, n](const std::vector<double>& g,
                        const std::vector<std::vector<double>*>& padj) {
                   if (!padj[0]) return;
                   auto& d = *padj[0];
                   const double inv = 1.0 / static_cast<double>(m);
                   for (std::size_t i = 0; i < m; ++i)
                     for (std::size_t j = 0; j < n; ++j)
                       d[i * n + j] += g[j] * inv;
                 });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_op({1}, {s}, {x},
                 [](const std::vector<double>& g,
                    const std::vector<std::vector<double>*>& padj) {
                   if (!padj[0]) return;
                   auto& d = *padj[0];
                   for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0];
                 });
}

Tensor l2_normalize_rows(const Tensor& x) {
  require_2d(x, "l2_normalize_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  std::vector<double> inv_norm(m);
  for (std::size_t i = 0; i < m; ++i) {
    double nrm = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = x.data()[i * n + j];
      nrm += v * v;
    }
    nrm = std::sqrt(nrm);
    if (nrm == 0.0) {
      throw DataError("l2_normalize_rows: zero-norm row " + std::to_string(i));
    }
    inv_norm[i] = 1.0 / nrm;
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = x.data()[i * n + j] * inv_norm[i];
  }
  auto yv = out;
  return make_op({m, n}, std::move(out), {x},
                 [yv = std::move(yv), inv_norm = std::move(inv_norm), m, n](
                     const std::vector<double>& g,
                     const std::vector<std::vector<double>*>& padj) {
                   if (!padj[0]) return;
                   auto& d = *padj[0];
                   for (std::size_t i = 0; i < m; ++i) {
                     const double* y = &yv[i * n];
                     const double* gr = &g[i * n];
                     double dot = 0.0;
                     for (std::size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
                     for (std::size_t j = 0; j < n; ++j)
                       d[i * n + j] += inv_norm[i] * (gr[j] - y[j] * dot);
                   }
                 });
}

Tensor bce_with_logits_mean(const Tensor& logits,
                            const std::vector<double>& labels) {
  if (logits.numel() != labels.size()) {
    throw DimensionError("bce_with_logits_mean: " +
                         std::to_string(logits.numel()) + " logits vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size();
  const auto& z = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    // max(z,0) - z*y + log(1 + exp(-|z|)), stable for large |z|
    loss += std::max(z[i], 0.0) - z[i] * labels[i] +
            std::log1p(std::exp(-std::abs(z[i])));
  }
  loss /= static_cast<double>(n);
  auto zn = logits.node();
  return make_op({1}, {loss}, {logits},
                 [zn, labels, n](const std::vector<double>& g,
                                 const std::vector<std::vector<double>*>& padj) {
                   if (!padj[0]) return;
                   auto& d = *padj[0];
                   const double inv = g[0] / static_cast<double>(n);
                   for (std::size_t i = 0; i < n; ++i)
                     d[i] += inv * (sigmoid_scalar(zn->value[i]) - labels[i]);
                 });
}

// ---------------------------------------------------------------------------
// Tape & backward

Tape::Tape(const Tensor& root) : root_(root.node()) {
  // Iterative post-order DFS: parents land before children.
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root_.get(), 0);
  visited.insert(root_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

void Tape::run() {
  std::unordered_map<detail::Node*, std::size_t> index;
  index.reserve(order_.size());
  for (std::size_t i = 0; i < order_.size(); ++i) index[order_[i]] = i;
  std::vector<std::vector<double>> adj(order_.size());
  adj.back().assign(root_->numel(), 0.0);
  adj.back()[0] = 1.0;

  for (std::size_t i = order_.size(); i-- > 0;) {
    detail::Node* node = order_[i];
    if (adj[i].empty()) continue;
    if (node->backprop && !node->parents.empty()) {
      std::vector<std::vector<double>*> padj(node->parents.size(), nullptr);
      for (std::size_t k = 0; k < node->parents.size(); ++k) {
        detail::Node* p = node->parents[k].get();
        if (!p->grad_needed) continue;
        auto& buf = adj[index[p]];
        if (buf.empty()) buf.assign(p->numel(), 0.0);
        padj[k] = &buf;
      }
      node->backprop(adj[i], padj);
    }
    if (node->requires_grad) {
      if (node->grad.empty()) node->grad.assign(node->numel(), 0.0);
      for (std::size_t k = 0; k < adj[i].size(); ++k) node->grad[k] += adj[i][k];
    }
    adj[i].clear();
  }
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ConfigError("backward: loss must be scalar, got " +
                      shape_str(loss.shape()));
  }
  Tape tape(loss);
  tape.run();
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double h) {
  if (h <= 0.0) throw ConfigError("finite_diff_grad: h must be positive");
  std::vector<double> base = x.data();
  std::vector<double> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> plus = base, minus = base;
    plus[i] += h;
    minus[i] -= h;
    const double fp = f(Tensor::from_data(x.shape(), std::move(plus)));
    const double fm = f(Tensor::from_data(x.shape(), std::move(minus)));
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor::from_data(x.shape(), std::move(grad));
}

}  // namespace readpvla
