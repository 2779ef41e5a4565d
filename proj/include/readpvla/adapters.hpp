#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "readpvla/tensor.hpp"

namespace readpvla {

// Shared visitation hook: every module exposes its named parameters through
// this, which is what strategy masks, the optimizer, and checkpoints consume.
using ParamVisitor =
    std::function<void(const std::string& name, Tensor& value, bool is_bias)>;

enum class CellKind { kRnn, kGru, kLstm };

const char* cell_kind_name(CellKind kind);
CellKind cell_kind_from_name(const std::string& name);

// Hidden (and for LSTM, cell) state threaded through a recurrent scan.
struct CellState {
  Tensor h;  // 1 x k
  Tensor c;  // 1 x k, LSTM only
};

// One shared recurrent cell applied across token steps.
struct RecurrentCell {
  CellKind kind = CellKind::kRnn;
  std::size_t width = 0;             // k
  std::vector<Tensor> weights;       // k x k maps, fixed order per kind
  std::vector<Tensor> biases;        // k vectors, fixed order per kind

  static RecurrentCell create(CellKind kind, std::size_t width);
  CellState initial_state() const;
  // One recurrence step; x_t and h are 1 x k rows on the tape.
  CellState step(const Tensor& x_t, const CellState& prev) const;
  std::size_t param_count() const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

// Recurrent bottleneck adapter: down-projection, recurrent scan over the
// token sequence, GELU, up-projection with bias, residual.
struct ReadAdapter {
  std::size_t d = 0;
  std::size_t k = 0;
  Tensor w_down;  // d x k, no bias
  RecurrentCell cell;
  Tensor w_up;    // k x d
  Tensor up_bias; // d

  static ReadAdapter create(std::size_t d, std::size_t k, CellKind kind);
  std::size_t param_count() const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

// Tokenwise bottleneck baseline: O + GELU(O W_down + b) W_up + b.
struct PlainAdapter {
  std::size_t d = 0;
  std::size_t k = 0;
  Tensor w_down;     // d x k
  Tensor down_bias;  // k
  Tensor w_up;       // k x d
  Tensor up_bias;    // d

  static PlainAdapter create(std::size_t d, std::size_t k);
  std::size_t param_count() const;
  void visit(const std::string& prefix, const ParamVisitor& f);
};

// Low-rank weight patch for a frozen linear projection.
struct LoraPatch {
  std::size_t d = 0;
  std::size_t rank = 0;
  Tensor a;  // d x rank
  Tensor b;  // rank x d

  static LoraPatch create(std::size_t d, std::size_t rank);
  std::size_t param_count() const { return 2 * d * rank; }
  void visit(const std::string& prefix, const ParamVisitor& f);
};

Tensor read_forward(const ReadAdapter& adapter, const Tensor& o);
Tensor plain_adapter_forward(const PlainAdapter& adapter, const Tensor& o);
Tensor lora_effective_weight(const Tensor& w, const LoraPatch& patch);

// Down-projections get Kaiming-normal entries (variance 2/d); the recurrent
// cell, up-projections, and every bias start at exactly zero, so a freshly
// initialized adapter is an identity map.
void init_adapter_params(ReadAdapter& adapter, std::uint64_t seed);
void init_adapter_params(PlainAdapter& adapter, std::uint64_t seed);
// LoRA: a is Kaiming-normal, b starts at zero.
void init_adapter_params(LoraPatch& patch, std::uint64_t seed);

}  // namespace readpvla
