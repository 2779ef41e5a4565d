#pragma once

#include <cstddef>
#include <vector>

#include "readpvla/tensor.hpp"

namespace readpvla {

// Weights of a discrete distribution; strictly positive, summing to 1.
struct DiscreteDistribution {
  std::vector<double> weights;

  static DiscreteDistribution uniform(std::size_t n);
  void validate() const;
  std::size_t size() const { return weights.size(); }
};

// Pairwise ground costs, video rows by language columns.
struct CostMatrix {
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<double> entries;  // row-major

  double at(std::size_t i, std::size_t j) const { return entries[i * n_cols + j]; }
  double& at(std::size_t i, std::size_t j) { return entries[i * n_cols + j]; }
};

// Nonnegative plan with capped marginals and a fixed total mass.
struct TransportPlan {
  std::size_t n_rows = 0;
  std::size_t n_cols = 0;
  std::vector<double> values;  // row-major
  double mass = 0.0;

  double at(std::size_t i, std::size_t j) const { return values[i * n_cols + j]; }
  double total() const;
  // Largest violation of the row caps, column caps, and total-mass constraint.
  double feasibility_gap(const DiscreteDistribution& a,
                         const DiscreteDistribution& b) const;
  double cost_against(const CostMatrix& c) const;
};

enum class TransportMode { kPartial, kFull };

struct SolverConfig {
  double tau = 0.05;          // entropic temperature
  std::size_t n_iter = 1000;  // Sinkhorn sweeps
  // Number of candidate masses; 0 means "use min(N_V, N_L)".
  std::size_t mass_grid_size = 0;
  TransportMode mode = TransportMode::kPartial;

  void validate() const;
  std::size_t resolved_grid(std::size_t n_rows, std::size_t n_cols) const;
};

struct PvlaResult {
  Tensor loss;       // scalar; differentiable through the cost matrix
  double best_mass = 0.0;
  TransportPlan plan;
};

// C[i][j] = 1 - <hv_i, hl_j> / (|hv_i| |hl_j|), recorded on the tape.
Tensor cosine_cost(const Tensor& hv, const Tensor& hl);

// Entropic kernel scaling at a fixed total mass: alternating row cap,
// column cap, and total rescale for cfg.n_iter sweeps.
TransportPlan sinkhorn_partial(const CostMatrix& c,
                               const DiscreteDistribution& a,
                               const DiscreteDistribution& b, double mass,
                               const SolverConfig& cfg);

// Alignment loss between two representation sequences: minimum transport
// cost over the candidate mass grid (partial) or at mass 1 (full). The
// returned plan is a constant; gradients flow only through the cost.
PvlaResult pvla_loss(const Tensor& hv, const Tensor& hl,
                     const SolverConfig& cfg);

// Same search, but on a caller-supplied cost matrix (no gradient).
struct PlainPotResult {
  double loss = 0.0;
  double best_mass = 0.0;
  TransportPlan plan;
};
PlainPotResult pot_distance(const CostMatrix& c, const DiscreteDistribution& a,
                            const DiscreteDistribution& b,
                            const SolverConfig& cfg);

// Exact small-instance oracle for the fixed-mass problem, via the balanced
// reduction with a zero-cost dummy row/column absorbing untransported mass.
struct ExactResult {
  TransportPlan plan;
  double cost = 0.0;
};
ExactResult exact_partial_ot(const CostMatrix& c, const DiscreteDistribution& a,
                             const DiscreteDistribution& b, double mass);

enum class Pooling { kAvg, kMax };
enum class PooledMetric { kCosine, kL2 };

// Baseline sequence distance: pool each modality, compare the pooled vectors.
double pooled_distance(const Tensor& hv, const Tensor& hl, Pooling pooling,
                       PooledMetric metric);

}  // namespace readpvla
