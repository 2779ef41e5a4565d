#include "readpvla/pot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>

#include "readpvla/errors.hpp"

namespace readpvla {

// ---------------------------------------------------------------------------
// Basic types

DiscreteDistribution DiscreteDistribution::uniform(std::size_t n) {
  if (n == 0) throw DimensionError("distribution: empty support");
  return {std::vector<double>(n, 1.0 / static_cast<double>(n))};
}

void DiscreteDistribution::validate() const {
  if (weights.empty()) throw DimensionError("distribution: empty support");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw DataError("distribution: weights must be strictly positive");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw DataError("distribution: weights sum to " + std::to_string(sum) +
                    ", expected 1");
  }
}

double TransportPlan::total() const {
  return std::accumulate(values.begin(), values.end(), 0.0);
}

double TransportPlan::feasibility_gap(const DiscreteDistribution& a,
                                      const DiscreteDistribution& b) const {
  double gap = std::abs(total() - mass);
  for (std::size_t i = 0; i < n_rows; ++i) {
    double rs = 0.0;
    for (std::size_t j = 0; j < n_cols; ++j) rs += at(i, j);
    gap = std::max(gap, rs - a.weights[i]);
  }
  for (std::size_t j = 0; j < n_cols; ++j) {
    double cs = 0.0;
    for (std::size_t i = 0; i < n_rows; ++i) cs += at(i, j);
    gap = std::max(gap, cs - b.weights[j]);
  }
  return gap;
}

double TransportPlan::cost_against(const CostMatrix& c) const {
  double acc = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) acc += values[k] * c.entries[k];
  return acc;
}

void SolverConfig::validate() const {
  if (!(tau > 0.0)) throw ConfigError("solver: tau must be positive");
  if (n_iter < 1) throw ConfigError("solver: n_iter must be at least 1");
}

std::size_t SolverConfig::resolved_grid(std::size_t n_rows,
                                        std::size_t n_cols) const {
  return mass_grid_size > 0 ? mass_grid_size : std::min(n_rows, n_cols);
}

// ---------------------------------------------------------------------------
// Cosine cost

Tensor cosine_cost(const Tensor& hv, const Tensor& hl) {
  if (hv.rank() != 2 || hl.rank() != 2 || hv.cols() != hl.cols()) {
    throw DimensionError("cosine_cost: incompatible shapes " +
                         shape_str(hv.shape()) + " vs " + shape_str(hl.shape()));
  }
  const Tensor nv = l2_normalize_rows(hv);
  const Tensor nl = l2_normalize_rows(hl);
  return affine(matmul(nv, transpose(nl)), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Sinkhorn

namespace {

void check_mass(double mass) {
  if (!(mass > 0.0)) throw ConfigError("sinkhorn: mass must be positive");
  if (mass > 1.0 + 1e-12) {
    throw ConfigError("sinkhorn: mass " + std::to_string(mass) +
                      " exceeds the unit marginal mass; infeasible");
  }
}

}  // namespace

TransportPlan sinkhorn_partial(const CostMatrix& c,
                               const DiscreteDistribution& a,
                               const DiscreteDistribution& b, double mass,
                               const SolverConfig& cfg) {
  cfg.validate();
  a.validate();
  b.validate();
  check_mass(mass);
  const std::size_t nv = c.n_rows, nl = c.n_cols;
  if (nv != a.size() || nl != b.size()) {
    throw DimensionError("sinkhorn: cost is " + std::to_string(nv) + "x" +
                         std::to_string(nl) + " but marginals have " +
                         std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " atoms");
  }

  // Scaling on the balanced extension: a zero-cost dummy column absorbs the
  // untransported row mass and a zero-cost dummy row the untransported
  // column mass, with the dummy-dummy cell excluded so the real block
  // carries exactly `mass`. Equality scalings on the extended marginals lift
  // deficient rows and columns directly, which the capped one-sided scaling
  // cannot do within a fixed sweep budget at a small temperature.
  const std::size_t rows = nv + 1, cols = nl + 1;
  std::vector<double> kern(rows * cols);
  double max_entry = 0.0;
  for (std::size_t i = 0; i < nv; ++i)
    for (std::size_t j = 0; j < nl; ++j) {
      const double k = std::exp(-c.at(i, j) / cfg.tau);
      kern[i * cols + j] = k;
      max_entry = std::max(max_entry, k);
    }
  if (max_entry == 0.0) {
    throw NumericError("sinkhorn: every kernel entry underflowed; increase tau");
  }
  for (std::size_t i = 0; i < nv; ++i) kern[i * cols + nl] = 1.0;
  for (std::size_t j = 0; j < nl; ++j) kern[nv * cols + j] = 1.0;
  kern[nv * cols + nl] = 0.0;

  std::vector<double> row_mass(a.weights);
  row_mass.push_back(1.0 - mass);
  std::vector<double> col_mass(b.weights);
  col_mass.push_back(1.0 - mass);

  std::vector<double> u(rows, 1.0), v(cols, 1.0);
  for (std::size_t iter = 0; iter < cfg.n_iter; ++iter) {
    for (std::size_t i = 0; i < rows; ++i) {
      double denom = 0.0;
      for (std::size_t j = 0; j < cols; ++j) denom += kern[i * cols + j] * v[j];
      if (denom <= 0.0 || !std::isfinite(denom)) {
        throw NumericError("sinkhorn: scaling collapsed; increase tau");
      }
      u[i] = row_mass[i] / denom;
    }
    for (std::size_t j = 0; j < cols; ++j) {
      double denom = 0.0;
      for (std::size_t i = 0; i < rows; ++i) denom += kern[i * cols + j] * u[i];
      if (denom <= 0.0 || !std::isfinite(denom)) {
        throw NumericError("sinkhorn: scaling collapsed; increase tau");
      }
      v[j] = col_mass[j] / denom;
    }
  }

  TransportPlan plan;
  plan.n_rows = nv;
  plan.n_cols = nl;
  plan.values.resize(nv * nl);
  for (std::size_t i = 0; i < nv; ++i)
    for (std::size_t j = 0; j < nl; ++j)
      plan.values[i * nl + j] = u[i] * kern[i * cols + j] * v[j];
  plan.mass = mass;
  return plan;
}

// ---------------------------------------------------------------------------
// Mass-grid search

namespace {

std::vector<double> candidate_masses(const SolverConfig& cfg, std::size_t nv,
                                     std::size_t nl) {
  if (cfg.mode == TransportMode::kFull) return {1.0};
  const std::size_t grid = cfg.resolved_grid(nv, nl);
  std::vector<double> masses(grid);
  for (std::size_t g = 1; g <= grid; ++g)
    masses[g - 1] = static_cast<double>(g) / static_cast<double>(grid);
  return masses;
}

}  // namespace

PlainPotResult pot_distance(const CostMatrix& c, const DiscreteDistribution& a,
                            const DiscreteDistribution& b,
                            const SolverConfig& cfg) {
  PlainPotResult best;
  best.loss = std::numeric_limits<double>::infinity();
  for (double mass : candidate_masses(cfg, c.n_rows, c.n_cols)) {
    TransportPlan plan = sinkhorn_partial(c, a, b, mass, cfg);
    const double cost = plan.cost_against(c);
    if (cost < best.loss) {
      best.loss = cost;
      best.best_mass = mass;
      best.plan = std::move(plan);
    }
  }
  return best;
}

PvlaResult pvla_loss(const Tensor& hv, const Tensor& hl,
                     const SolverConfig& cfg) {
  const Tensor cost_tensor = cosine_cost(hv, hl);
  CostMatrix c{hv.rows(), hl.rows(), cost_tensor.data()};

  const auto a = DiscreteDistribution::uniform(c.n_rows);
  const auto b = DiscreteDistribution::uniform(c.n_cols);
  PlainPotResult found = pot_distance(c, a, b, cfg);

  // The plan enters the loss as a constant: gradients reach hv and hl only
  // through the cost matrix.
  const Tensor plan_const =
      Tensor::from_data({c.n_rows, c.n_cols}, found.plan.values);
  PvlaResult result;
  result.loss = sum_all(mul(cost_tensor, plan_const));
  result.best_mass = found.best_mass;
  result.plan = std::move(found.plan);
  return result;
}

// ---------------------------------------------------------------------------
// Exact oracle: balanced reduction + exact min-cost flow.
//
// The fixed-mass problem becomes a balanced transportation instance once a
// zero-cost dummy column absorbs unused row mass and a zero-cost dummy row
// absorbs unused column mass (the dummy-dummy cell is structurally excluded,
// which pins the transported total to `mass`). Marginals and mass are
// rationalized onto one integer grid, and the balanced instance is solved to
// optimality with successive shortest paths.

namespace {

struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;
};

Rational rationalize(double x, std::int64_t max_den) {
  // Continued-fraction expansion, best approximation with bounded denominator.
  Rational best{static_cast<std::int64_t>(std::llround(x)), 1};
  double err = std::abs(x - static_cast<double>(best.num));
  std::int64_t p0 = 1, q0 = 0;
  std::int64_t p1 = static_cast<std::int64_t>(std::floor(x)), q1 = 1;
  double frac = x - std::floor(x);
  for (int k = 0; k < 40 && q1 <= max_den; ++k) {
    const double approx = static_cast<double>(p1) / static_cast<double>(q1);
    if (std::abs(x - approx) < err) {
      best = {p1, q1};
      err = std::abs(x - approx);
    }
    if (frac < 1e-15) break;
    const double inv = 1.0 / frac;
    const double fl = std::floor(inv);
    if (fl > 9e17) break;
    const std::int64_t ai = static_cast<std::int64_t>(fl);
    const std::int64_t p2 = ai * p1 + p0;
    const std::int64_t q2 = ai * q1 + q0;
    p0 = p1;
    q0 = q1;
    p1 = p2;
    q1 = q2;
    frac = inv - fl;
  }
  return best;
}

std::int64_t lcm64(std::int64_t a, std::int64_t b) {
  return a / std::gcd(a, b) * b;
}

// Minimal successive-shortest-path min-cost flow; costs are nonnegative.
class MinCostFlow {
 public:
  explicit MinCostFlow(int n) : head_(n, -1), potential_(n, 0.0) {}

  int add_edge(int from, int to, std::int64_t cap, double cost) {
    const int id = static_cast<int>(to_.size());
    to_.push_back(to);
    next_.push_back(head_[from]);
    head_[from] = id;
    cap_.push_back(cap);
    cost_.push_back(cost);
    to_.push_back(from);
    next_.push_back(head_[to]);
    head_[to] = id + 1;
    cap_.push_back(0);
    cost_.push_back(-cost);
    return id;
  }

  std::int64_t flow_on(int edge_id) const { return cap_[edge_id ^ 1]; }

  // Pushes up to `target` units from s to t; returns units actually sent.
  std::int64_t run(int s, int t, std::int64_t target) {
    const int n = static_cast<int>(head_.size());
    std::int64_t sent = 0;
    while (sent < target) {
      // Dijkstra on reduced costs (O(V^2); instances are tiny).
      const double inf = std::numeric_limits<double>::infinity();
      std::vector<double> dist(n, inf);
      std::vector<int> prev_edge(n, -1);
      std::vector<char> done(n, 0);
      dist[s] = 0.0;
      for (int round = 0; round < n; ++round) {
        int u = -1;
        double best = inf;
        for (int v = 0; v < n; ++v)
          if (!done[v] && dist[v] < best) {
            best = dist[v];
            u = v;
          }
        if (u < 0) break;
        done[u] = 1;
        for (int e = head_[u]; e >= 0; e = next_[e]) {
          if (cap_[e] <= 0) continue;
          const int v = to_[e];
          const double nd =
              dist[u] + cost_[e] + potential_[u] - potential_[v];
          if (nd < dist[v] - 1e-15) {
            dist[v] = nd;
            prev_edge[v] = e;
          }
        }
      }
      if (dist[t] == inf) break;
      for (int v = 0; v < n; ++v)
        if (dist[v] < inf) potential_[v] += dist[v];
      std::int64_t push = target - sent;
      for (int v = t; v != s; v = to_[prev_edge[v] ^ 1])
        push = std::min(push, cap_[prev_edge[v]]);
      for (int v = t; v != s; v = to_[prev_edge[v] ^ 1]) {
        cap_[prev_edge[v]] -= push;
        cap_[prev_edge[v] ^ 1] += push;
      }
      sent += push;
    }
    return sent;
  }

 private:
  std::vector<int> head_, next_, to_;
  std::vector<std::int64_t> cap_;
  std::vector<double> cost_;
  std::vector<double> potential_;
};

}  // namespace

ExactResult exact_partial_ot(const CostMatrix& c, const DiscreteDistribution& a,
                             const DiscreteDistribution& b, double mass) {
  const std::size_t nv = c.n_rows, nl = c.n_cols;
  if (nv * nl > 20) {
    throw ConfigError("exact_partial_ot: instance " + std::to_string(nv) + "x" +
                      std::to_string(nl) + " exceeds the 20-cell oracle limit");
  }
  a.validate();
  b.validate();
  if (nv != a.size() || nl != b.size()) {
    throw DimensionError("exact_partial_ot: marginal sizes do not match cost");
  }
  for (double v : c.entries) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw DataError("exact_partial_ot: cost entries must be finite and nonnegative");
    }
  }
  ExactResult result;
  result.plan.n_rows = nv;
  result.plan.n_cols = nl;
  result.plan.values.assign(nv * nl, 0.0);
  result.plan.mass = std::max(mass, 0.0);
  if (mass <= 1e-15) return result;  // zero-mass limit: empty plan, zero cost
  if (mass > 1.0 + 1e-12) {
    throw ConfigError("exact_partial_ot: mass exceeds the unit marginal mass");
  }

  // Rationalize all weights and the mass onto one denominator.
  std::int64_t denom = 1;
  auto absorb = [&denom](double x) {
    const Rational r = rationalize(x, 100000);
    if (r.den > 0) denom = lcm64(denom, r.den);
  };
  for (double w : a.weights) absorb(w);
  for (double w : b.weights) absorb(w);
  absorb(std::min(mass, 1.0));
  auto units = [denom](double x) {
    return static_cast<std::int64_t>(std::llround(x * static_cast<double>(denom)));
  };

  std::vector<std::int64_t> ua(nv), ub(nl);
  std::int64_t sum_a = 0, sum_b = 0;
  for (std::size_t i = 0; i < nv; ++i) sum_a += ua[i] = units(a.weights[i]);
  for (std::size_t j = 0; j < nl; ++j) sum_b += ub[j] = units(b.weights[j]);
  const std::int64_t um = std::min(units(std::min(mass, 1.0)),
                                   std::min(sum_a, sum_b));

  // Nodes: source, video rows, language columns, dummy row, dummy column, sink.
  const int source = 0;
  const int row0 = 1;
  const int col0 = row0 + static_cast<int>(nv);
  const int dummy_row = col0 + static_cast<int>(nl);
  const int dummy_col = dummy_row + 1;
  const int sink = dummy_col + 1;
  MinCostFlow flow(sink + 1);

  std::vector<int> cell_edge(nv * nl);
  for (std::size_t i = 0; i < nv; ++i) {
    flow.add_edge(source, row0 + static_cast<int>(i), ua[i], 0.0);
    for (std::size_t j = 0; j < nl; ++j) {
      cell_edge[i * nl + j] = flow.add_edge(row0 + static_cast<int>(i),
                                            col0 + static_cast<int>(j),
                                            std::min(ua[i], ub[j]), c.at(i, j));
    }
    flow.add_edge(row0 + static_cast<int>(i), dummy_col, ua[i], 0.0);
  }
  for (std::size_t j = 0; j < nl; ++j) {
    flow.add_edge(col0 + static_cast<int>(j), sink, ub[j], 0.0);
    flow.add_edge(dummy_row, col0 + static_cast<int>(j), ub[j], 0.0);
  }
  flow.add_edge(source, dummy_row, sum_b - um, 0.0);
  flow.add_edge(dummy_col, sink, sum_a - um, 0.0);
  // No dummy_row -> dummy_col arc: transported total is exactly `um`.

  const std::int64_t want = sum_a + sum_b - um;
  const std::int64_t got = flow.run(source, sink, want);
  if (got != want) {
    throw NumericError("exact_partial_ot: balanced reduction infeasible");
  }

  double cost = 0.0;
  for (std::size_t k = 0; k < nv * nl; ++k) {
    const double v =
        static_cast<double>(flow.flow_on(cell_edge[k])) / static_cast<double>(denom);
    result.plan.values[k] = v;
    cost += v * c.entries[k];
  }
  result.cost = cost;
  return result;
}

// ---------------------------------------------------------------------------
// Pooled baselines

double pooled_distance(const Tensor& hv, const Tensor& hl, Pooling pooling,
                       PooledMetric metric) {
  if (hv.rank() != 2 || hl.rank() != 2 || hv.cols() != hl.cols()) {
    throw DimensionError("pooled_distance: incompatible shapes " +
                         shape_str(hv.shape()) + " vs " + shape_str(hl.shape()));
  }
  const std::size_t d = hv.cols();
  auto pool = [&](const Tensor& t) {
    std::vector<double> out(d, pooling == Pooling::kMax
                                   ? -std::numeric_limits<double>::infinity()
                                   : 0.0);
    const std::size_t m = t.rows();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double v = t.at(i, j);
        if (pooling == Pooling::kMax)
          out[j] = std::max(out[j], v);
        else
          out[j] += v / static_cast<double>(m);
      }
    return out;
  };
  const std::vector<double> pv = pool(hv);
  const std::vector<double> pl = pool(hl);
  if (metric == PooledMetric::kL2) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = pv[j] - pl[j];
      acc += diff * diff;
    }
    return std::sqrt(acc);
  }
  double dot = 0.0, nv2 = 0.0, nl2 = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    dot += pv[j] * pl[j];
    nv2 += pv[j] * pv[j];
    nl2 += pl[j] * pl[j];
  }
  if (nv2 == 0.0 || nl2 == 0.0) {
    throw DataError("pooled_distance: zero-norm pooled vector under cosine");
  }
  return 1.0 - dot / (std::sqrt(nv2) * std::sqrt(nl2));
}

}  // namespace readpvla
