#pragma once

// Parameter-efficient adapters over frozen base weights. The low-rank
// adapter keeps base output exactly at initialization (the down-projection
// starts at zero); the budgeted variant decomposes the update as
// P diag(lambda) Q with a prunable diagonal and an orthogonality penalty on
// the factors. Neither ever materializes the dense update during forward.

#include <cstdint>
#include <functional>
#include <vector>

#include "peftlab/ops.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab {

class Rng;

struct LoraAdapter {
  Tensor a;  // in_dim x rank, zero-initialized
  Tensor b;  // rank x out_dim, N(0, stddev^2)
  std::size_t rank = 0;
  // Identity of the base this adapter was built for; forwards verify it.
  const void* base_id = nullptr;

  // Requires 1 <= rank <= min(base dims). Both factors are trainable; the
  // base is left untouched and must already be frozen.
  static LoraAdapter create(const Tensor& base, std::size_t rank, Rng& rng,
                            double init_stddev = 0.02);

  std::size_t trainable_params() const { return a.size() + b.size(); }
};

// Dense parameters of an n x k matrix per adapter parameter at this rank.
double lora_param_ratio(std::size_t n, std::size_t k, std::size_t rank);

// y = x W + (x A) B. The update is applied factor by factor; an n x k
// intermediate is never formed.
Tensor lora_forward(const Tensor& x, const Tensor& base, const LoraAdapter& adapter);

struct BudgetSchedule {
  std::size_t initial_budget = 8;
  std::size_t final_budget = 2;
  std::size_t total_steps = 500;
  std::size_t warmup_steps = 0;

  void validate() const;
};

// Budget at step t: the initial budget through warmup, then linear decay
// reaching the final budget exactly at total_steps. Monotone non-increasing.
// Queries beyond total_steps raise ScheduleError.
std::size_t budget_at(const BudgetSchedule& s, std::size_t t);

struct AdaLoraAdapter {
  Tensor p;       // d1 x rank
  Tensor lambda;  // 1 x rank, zero-initialized
  Tensor q;       // rank x d2
  double gamma = 0.1;
  BudgetSchedule schedule;
  // One flag per singular direction; pruning clears flags permanently.
  std::vector<std::uint8_t> mask;
  // Schedule position, advanced by prune_step.
  std::size_t step = 0;
  const void* base_id = nullptr;

  static AdaLoraAdapter create(const Tensor& base, std::size_t rank,
                               const BudgetSchedule& schedule, Rng& rng, double gamma = 0.1,
                               double init_stddev = 0.02);

  std::size_t rank() const { return mask.size(); }
  std::size_t active_count() const;
  std::size_t trainable_params() const { return p.size() + lambda.size() + q.size(); }
};

// y = x W + ((x P) o (lambda o mask)) Q, with o applied per column.
Tensor adalora_forward(const Tensor& x, const Tensor& base, const AdaLoraAdapter& adapter);

// gamma (|P^T P - I|_F^2 + |Q Q^T - I|_F^2) as a 1x1 tensor. Zero exactly
// when P has orthonormal columns and Q orthonormal rows.
Tensor orthogonality_penalty(const AdaLoraAdapter& adapter);

// Per-direction importance; masked directions score zero. The default is the
// magnitude of the direction's diagonal entry.
std::vector<double> importance_scores(const AdaLoraAdapter& adapter);

using ImportanceFn = std::function<std::vector<double>(const AdaLoraAdapter&)>;

// Keeps the top-b(step) active directions by importance (ties favor the
// lower index), zeroes and permanently masks the rest, then advances the
// step. Beyond the schedule horizon the final budget applies. A budget
// larger than the active count is a ScheduleError.
void prune_step(AdaLoraAdapter& adapter, const ImportanceFn& score = {});

// The dense update P diag(lambda o mask) Q, materialized for inspection and
// tests only; never used on the forward path.
Tensor adalora_delta(const AdaLoraAdapter& adapter);

// Rank by Gaussian elimination with partial pivoting; entries below
// tol * max|entry| count as zero.
std::size_t numerical_rank(const Tensor& m, double tol = 1e-9);

}  // namespace peftlab
