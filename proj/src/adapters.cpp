#include "readpvla/adapters.hpp"

#include <cmath>

#include "readpvla/errors.hpp"
#include "readpvla/rng.hpp"

namespace readpvla {

const char* cell_kind_name(CellKind kind) {
  switch (kind) {
    case CellKind::kRnn: return "rnn";
    case CellKind::kGru: return "gru";
    case CellKind::kLstm: return "lstm";
  }
  return "rnn";
}

CellKind cell_kind_from_name(const std::string& name) {
  if (name == "rnn") return CellKind::kRnn;
  if (name == "gru") return CellKind::kGru;
  if (name == "lstm") return CellKind::kLstm;
  throw ConfigError("unknown recurrent cell '" + name + "' (rnn|gru|lstm)");
}

namespace {

std::size_t gate_count(CellKind kind) {
  switch (kind) {
    case CellKind::kRnn: return 1;
    case CellKind::kGru: return 3;
    case CellKind::kLstm: return 4;
  }
  return 1;
}

void require_row(const Tensor& t, std::size_t k, const char* what) {
  if (t.rank() != 2 || t.rows() != 1 || t.cols() != k) {
    throw DimensionError(std::string(what) + ": expected [1x" +
                         std::to_string(k) + "], got " + shape_str(t.shape()));
  }
}

}  // namespace

RecurrentCell RecurrentCell::create(CellKind kind, std::size_t width) {
  if (width == 0) throw ConfigError("recurrent cell: width must be positive");
  RecurrentCell cell;
  cell.kind = kind;
  cell.width = width;
  const std::size_t gates = gate_count(kind);
  for (std::size_t g = 0; g < gates; ++g) {
    cell.weights.push_back(Tensor::zeros({width, width}));  // input map
    cell.weights.push_back(Tensor::zeros({width, width}));  // hidden map
    cell.biases.push_back(Tensor::zeros({width}));
  }
  return cell;
}

CellState RecurrentCell::initial_state() const {
  CellState s;
  s.h = Tensor::zeros({1, width});
  if (kind == CellKind::kLstm) s.c = Tensor::zeros({1, width});
  return s;
}

CellState RecurrentCell::step(const Tensor& x_t, const CellState& prev) const {
  require_row(x_t, width, "recurrent step input");
  require_row(prev.h, width, "recurrent step state");
  auto gate = [&](std::size_t g, const Tensor& h_in, Activation act) {
    const Tensor pre = add_row_bias(
        add(matmul(x_t, weights[2 * g]), matmul(h_in, weights[2 * g + 1])),
        biases[g]);
    return activation(act, pre);
  };
  CellState next;
  switch (kind) {
    case CellKind::kRnn: {
      next.h = gate(0, prev.h, Activation::kTanh);
      break;
    }
    case CellKind::kGru: {
      const Tensor z = gate(0, prev.h, Activation::kSigmoid);
      const Tensor r = gate(1, prev.h, Activation::kSigmoid);
      const Tensor n = gate(2, mul(r, prev.h), Activation::kTanh);
      // h' = z (*) h + (1 - z) (*) n
      next.h = add(mul(z, prev.h), mul(affine(z, -1.0, 1.0), n));
      break;
    }
    case CellKind::kLstm: {
      require_row(prev.c, width, "lstm cell state");
      const Tensor i = gate(0, prev.h, Activation::kSigmoid);
      const Tensor f = gate(1, prev.h, Activation::kSigmoid);
      const Tensor g = gate(2, prev.h, Activation::kTanh);
      const Tensor o = gate(3, prev.h, Activation::kSigmoid);
      next.c = add(mul(f, prev.c), mul(i, g));
      next.h = mul(o, activation(Activation::kTanh, next.c));
      break;
    }
  }
  return next;
}

std::size_t RecurrentCell::param_count() const {
  return gate_count(kind) * (2 * width * width + width);
}

void RecurrentCell::visit(const std::string& prefix, const ParamVisitor& f) {
  static const char* kGateNames[] = {"g0", "g1", "g2", "g3"};
  for (std::size_t g = 0; g < biases.size(); ++g) {
    const std::string base = prefix + "." + kGateNames[g];
    f(base + ".wx", weights[2 * g], false);
    f(base + ".wh", weights[2 * g + 1], false);
    f(base + ".b", biases[g], true);
  }
}

ReadAdapter ReadAdapter::create(std::size_t d, std::size_t k, CellKind kind) {
  if (k == 0 || k >= d) {
    throw ConfigError("read adapter: bottleneck k=" + std::to_string(k) +
                      " must satisfy 0 < k < d=" + std::to_string(d));
  }
  ReadAdapter adapter;
  adapter.d = d;
  adapter.k = k;
  adapter.w_down = Tensor::zeros({d, k});
  adapter.cell = RecurrentCell::create(kind, k);
  adapter.w_up = Tensor::zeros({k, d});
  adapter.up_bias = Tensor::zeros({d});
  return adapter;
}

std::size_t ReadAdapter::param_count() const {
  return d * k + cell.param_count() + k * d + d;
}

void ReadAdapter::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".w_down", w_down, false);
  cell.visit(prefix + ".cell", f);
  f(prefix + ".w_up", w_up, false);
  f(prefix + ".up_bias", up_bias, true);
}

PlainAdapter PlainAdapter::create(std::size_t d, std::size_t k) {
  if (k == 0 || k >= d) {
    throw ConfigError("adapter: bottleneck k=" + std::to_string(k) +
                      " must satisfy 0 < k < d=" + std::to_string(d));
  }
  PlainAdapter adapter;
  adapter.d = d;
  adapter.k = k;
  adapter.w_down = Tensor::zeros({d, k});
  adapter.down_bias = Tensor::zeros({k});
  adapter.w_up = Tensor::zeros({k, d});
  adapter.up_bias = Tensor::zeros({d});
  return adapter;
}

std::size_t PlainAdapter::param_count() const { return d * k + k + k * d + d; }

void PlainAdapter::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".w_down", w_down, false);
  f(prefix + ".down_bias", down_bias, true);
  f(prefix + ".w_up", w_up, false);
  f(prefix + ".up_bias", up_bias, true);
}

LoraPatch LoraPatch::create(std::size_t d, std::size_t rank) {
  if (rank == 0 || rank >= d) {
    throw ConfigError("lora: rank " + std::to_string(rank) +
                      " must satisfy 0 < rank < d=" + std::to_string(d));
  }
  LoraPatch patch;
  patch.d = d;
  patch.rank = rank;
  patch.a = Tensor::zeros({d, rank});
  patch.b = Tensor::zeros({rank, d});
  return patch;
}

void LoraPatch::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".a", a, false);
  f(prefix + ".b", b, false);
}

Tensor read_forward(const ReadAdapter& adapter, const Tensor& o) {
  if (o.rank() != 2 || o.cols() != adapter.d) {
    throw DimensionError("read adapter: input " + shape_str(o.shape()) +
                         " does not match width " + std::to_string(adapter.d));
  }
  const Tensor down = matmul(o, adapter.w_down);  // n x k
  const std::size_t n = down.rows();
  std::vector<Tensor> hidden;
  hidden.reserve(n);
  CellState state = adapter.cell.initial_state();
  for (std::size_t t = 0; t < n; ++t) {
    state = adapter.cell.step(slice_rows(down, t, 1), state);
    hidden.push_back(state.h);
  }
  const Tensor scanned = n == 1 ? hidden.front() : concat_rows(hidden);
  const Tensor up = add_row_bias(
      matmul(activation(Activation::kGelu, scanned), adapter.w_up),
      adapter.up_bias);
  return add(o, up);
}

Tensor plain_adapter_forward(const PlainAdapter& adapter, const Tensor& o) {
  if (o.rank() != 2 || o.cols() != adapter.d) {
    throw DimensionError("adapter: input " + shape_str(o.shape()) +
                         " does not match width " + std::to_string(adapter.d));
  }
  const Tensor down = activation(
      Activation::kGelu, add_row_bias(matmul(o, adapter.w_down), adapter.down_bias));
  return add(o, add_row_bias(matmul(down, adapter.w_up), adapter.up_bias));
}

Tensor lora_effective_weight(const Tensor& w, const LoraPatch& patch) {
  if (w.rank() != 2 || w.rows() != patch.d || w.cols() != patch.d) {
    throw DimensionError("lora: base weight " + shape_str(w.shape()) +
                         " does not match patch width " +
                         std::to_string(patch.d));
  }
  return add(w, matmul(patch.a, patch.b));
}

namespace {

void fill_kaiming(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
}

void fill_zero(Tensor& t) {
  for (double& v : t.mutable_data()) v = 0.0;
}

}  // namespace

void init_adapter_params(ReadAdapter& adapter, std::uint64_t seed) {
  Rng rng(seed);
  fill_kaiming(adapter.w_down, adapter.d, rng);
  for (Tensor& w : adapter.cell.weights) fill_zero(w);
  for (Tensor& b : adapter.cell.biases) fill_zero(b);
  fill_zero(adapter.w_up);
  fill_zero(adapter.up_bias);
}

void init_adapter_params(PlainAdapter& adapter, std::uint64_t seed) {
  Rng rng(seed);
  fill_kaiming(adapter.w_down, adapter.d, rng);
  fill_zero(adapter.down_bias);
  fill_zero(adapter.w_up);
  fill_zero(adapter.up_bias);
}

void init_adapter_params(LoraPatch& patch, std::uint64_t seed) {
  Rng rng(seed);
  fill_kaiming(patch.a, patch.d, rng);
  fill_zero(patch.b);
}

}  // namespace readpvla
