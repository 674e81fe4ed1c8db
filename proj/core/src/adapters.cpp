#include "peftlab/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "peftlab/rng.hpp"

namespace peftlab {

namespace {

void check_adapter_base(const Tensor& base, const void* base_id, const char* what) {
  if (base.requires_grad()) {
    throw UsageError(std::string(what) + ": base must be frozen (requires_grad set)");
  }
  if (base.id() != base_id) {
    throw UsageError(std::string(what) + ": adapter was built for a different base tensor");
  }
}

void check_rank(std::size_t rank, std::size_t d1, std::size_t d2, const char* what) {
  if (rank == 0 || rank > std::min(d1, d2)) {
    throw ConfigError(std::string(what) + ": rank " + std::to_string(rank) +
                      " outside [1, " + std::to_string(std::min(d1, d2)) + "] for a " +
                      std::to_string(d1) + "x" + std::to_string(d2) + " base");
  }
}

}  // namespace

LoraAdapter LoraAdapter::create(const Tensor& base, std::size_t rank, Rng& rng,
                                double init_stddev) {
  check_rank(rank, base.rows(), base.cols(), "lora");
  LoraAdapter ad;
  ad.rank = rank;
  ad.base_id = base.id();
  ad.a = Tensor::zeros(base.rows(), rank, base.precision());
  ad.a.set_requires_grad(true);
  ad.b = Tensor::random_normal(rank, base.cols(), init_stddev, rng, base.precision());
  ad.b.set_requires_grad(true);
  return ad;
}

double lora_param_ratio(std::size_t n, std::size_t k, std::size_t rank) {
  if (rank == 0 || n + k == 0) throw UsageError("lora_param_ratio: degenerate dimensions");
  return static_cast<double>(n) * static_cast<double>(k) /
         (static_cast<double>(rank) * static_cast<double>(n + k));
}

Tensor lora_forward(const Tensor& x, const Tensor& base, const LoraAdapter& adapter) {
  check_adapter_base(base, adapter.base_id, "lora_forward");
  Tensor dense = matmul(x, base);
  Tensor update = matmul(matmul(x, adapter.a), adapter.b);
  return add(dense, update);
}

void BudgetSchedule::validate() const {
  if (final_budget == 0) throw ConfigError("budget schedule: final budget must be positive");
  if (final_budget > initial_budget) {
    throw ConfigError("budget schedule: final budget " + std::to_string(final_budget) +
                      " exceeds initial budget " + std::to_string(initial_budget));
  }
  if (total_steps == 0) throw ConfigError("budget schedule: horizon must be positive");
  if (warmup_steps > total_steps) {
    throw ConfigError("budget schedule: warmup " + std::to_string(warmup_steps) +
                      " exceeds horizon " + std::to_string(total_steps));
  }
}

std::size_t budget_at(const BudgetSchedule& s, std::size_t t) {
  s.validate();
  if (t > s.total_steps) {
    throw ScheduleError("budget queried at step " + std::to_string(t) + " beyond horizon " +
                        std::to_string(s.total_steps));
  }
  if (t == s.total_steps) return s.final_budget;
  if (t < s.warmup_steps) return s.initial_budget;
  double frac = static_cast<double>(t - s.warmup_steps) /
                static_cast<double>(s.total_steps - s.warmup_steps);
  double raw = static_cast<double>(s.initial_budget) -
               static_cast<double>(s.initial_budget - s.final_budget) * frac;
  auto b = static_cast<std::size_t>(std::floor(raw));
  return std::max(b, s.final_budget);
}

AdaLoraAdapter AdaLoraAdapter::create(const Tensor& base, std::size_t rank,
                                      const BudgetSchedule& schedule, Rng& rng, double gamma,
                                      double init_stddev) {
  check_rank(rank, base.rows(), base.cols(), "adalora");
  schedule.validate();
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
    throw ConfigError("adalora: penalty weight must be finite and non-negative");
  }
  AdaLoraAdapter ad;
  ad.gamma = gamma;
  ad.schedule = schedule;
  ad.base_id = base.id();
  ad.mask.assign(rank, 1);
  ad.p = Tensor::random_normal(base.rows(), rank, init_stddev, rng, base.precision());
  ad.p.set_requires_grad(true);
  ad.lambda = Tensor::zeros(1, rank, base.precision());
  ad.lambda.set_requires_grad(true);
  ad.q = Tensor::random_normal(rank, base.cols(), init_stddev, rng, base.precision());
  ad.q.set_requires_grad(true);
  return ad;
}

std::size_t AdaLoraAdapter::active_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

namespace {

Tensor mask_tensor(const AdaLoraAdapter& ad, Precision prec) {
  Tensor m(1, ad.rank(), prec);
  for (std::size_t i = 0; i < ad.rank(); ++i) m.set(0, i, ad.mask[i] ? 1.0 : 0.0);
  return m;
}

}  // namespace

Tensor adalora_forward(const Tensor& x, const Tensor& base, const AdaLoraAdapter& adapter) {
  check_adapter_base(base, adapter.base_id, "adalora_forward");
  Tensor dense = matmul(x, base);
  Tensor masked = col_scale(adapter.lambda, mask_tensor(adapter, adapter.lambda.precision()));
  Tensor update = matmul(col_scale(matmul(x, adapter.p), masked), adapter.q);
  return add(dense, update);
}

Tensor orthogonality_penalty(const AdaLoraAdapter& adapter) {
  std::size_t r = adapter.rank();
  Tensor eye_p = Tensor::identity(r, adapter.p.precision());
  Tensor eye_q = Tensor::identity(r, adapter.q.precision());
  Tensor pterm = sum_squares(add(matmul(transpose(adapter.p), adapter.p), scale(eye_p, -1.0)));
  Tensor qterm = sum_squares(add(matmul(adapter.q, transpose(adapter.q)), scale(eye_q, -1.0)));
  return scale(add(pterm, qterm), adapter.gamma);
}

std::vector<double> importance_scores(const AdaLoraAdapter& adapter) {
  std::vector<double> s(adapter.rank(), 0.0);
  for (std::size_t i = 0; i < adapter.rank(); ++i) {
    if (adapter.mask[i]) s[i] = std::fabs(adapter.lambda.at(0, i));
  }
  return s;
}

void prune_step(AdaLoraAdapter& adapter, const ImportanceFn& score) {
  std::size_t t = std::min(adapter.step, adapter.schedule.total_steps);
  std::size_t budget = budget_at(adapter.schedule, t);
  std::vector<double> s = score ? score(adapter) : importance_scores(adapter);
  if (s.size() != adapter.rank()) {
    throw UsageError("prune_step: scorer returned " + std::to_string(s.size()) +
                     " scores for rank " + std::to_string(adapter.rank()));
  }
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < adapter.rank(); ++i) {
    if (adapter.mask[i]) active.push_back(i);
  }
  if (budget > active.size()) {
    throw ScheduleError("prune_step: budget " + std::to_string(budget) + " at step " +
                        std::to_string(t) + " exceeds the " + std::to_string(active.size()) +
                        " still-active directions");
  }
  // Stable sort on descending score: equal scores keep ascending index order,
  // which is exactly the tie-break the contract asks for.
  std::stable_sort(active.begin(), active.end(),
                   [&](std::size_t l, std::size_t r) { return s[l] > s[r]; });
  std::vector<std::uint8_t> keep(adapter.rank(), 0);
  for (std::size_t i = 0; i < budget; ++i) keep[active[i]] = 1;
  for (std::size_t i = 0; i < adapter.rank(); ++i) {
    if (adapter.mask[i] && !keep[i]) {
      adapter.mask[i] = 0;
      adapter.lambda.set(0, i, 0.0);
    }
  }
  ++adapter.step;
}

Tensor adalora_delta(const AdaLoraAdapter& adapter) {
  // Plain loops: this helper may run while a tape is active and must not
  // record anything.
  std::size_t d1 = adapter.p.rows(), r = adapter.rank(), d2 = adapter.q.cols();
  Tensor out(d1, d2, adapter.p.precision());
  for (std::size_t i = 0; i < d1; ++i) {
    for (std::size_t j = 0; j < d2; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < r; ++k) {
        double lam = adapter.mask[k] ? adapter.lambda.at(0, k) : 0.0;
        acc += adapter.p.at(i, k) * lam * adapter.q.at(k, j);
      }
      out.set(i, j, acc);
    }
  }
  return out;
}

std::size_t numerical_rank(const Tensor& m, double tol) {
  std::size_t rows = m.rows(), cols = m.cols();
  if (rows == 0 || cols == 0) return 0;
  std::vector<double> a(m.data().begin(), m.data().end());
  double maxabs = 0.0;
  for (double v : a) maxabs = std::max(maxabs, std::fabs(v));
  if (maxabs == 0.0) return 0;
  double cutoff = tol * maxabs;
  std::size_t rank = 0;
  std::size_t pivot_row = 0;
  for (std::size_t col = 0; col < cols && pivot_row < rows; ++col) {
    std::size_t best = pivot_row;
    for (std::size_t i = pivot_row + 1; i < rows; ++i) {
      if (std::fabs(a[i * cols + col]) > std::fabs(a[best * cols + col])) best = i;
    }
    if (std::fabs(a[best * cols + col]) <= cutoff) continue;
    if (best != pivot_row) {
      for (std::size_t j = 0; j < cols; ++j) std::swap(a[best * cols + j], a[pivot_row * cols + j]);
    }
    for (std::size_t i = pivot_row + 1; i < rows; ++i) {
      double f = a[i * cols + col] / a[pivot_row * cols + col];
      for (std::size_t j = col; j < cols; ++j) a[i * cols + j] -= f * a[pivot_row * cols + j];
    }
    ++pivot_row;
    ++rank;
  }
  return rank;
}

}  // namespace peftlab
