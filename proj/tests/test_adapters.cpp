#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "peftlab/adapters.hpp"
#include "peftlab/rng.hpp"
#include "test_util.hpp"

using namespace peftlab;
using testutil::fd_gradient;
using testutil::max_grad_err;
using testutil::random_tensor;

TEST_CASE("fresh low-rank adapter starts at zero and leaves the base output bitwise unchanged") {
  for (Precision prec : {Precision::f64, Precision::f32}) {
    Rng rng(1);
    Tensor w = random_tensor(12, 9, rng, 0.8, prec);
    LoraAdapter ad = LoraAdapter::create(w, 4, rng);
    CHECK(ad.a.rows() == 12);
    CHECK(ad.a.cols() == 4);
    CHECK(ad.b.rows() == 4);
    CHECK(ad.b.cols() == 9);
    for (double v : ad.a.data()) CHECK(v == 0.0);
    bool b_nonzero = false;
    for (double v : ad.b.data()) b_nonzero = b_nonzero || v != 0.0;
    CHECK(b_nonzero);

    Tensor x = random_tensor(5, 12, rng, 1.2, prec);
    Tensor base_out = matmul(x, w);
    Tensor adapted = lora_forward(x, w, ad);
    REQUIRE(adapted.rows() == base_out.rows());
    for (std::size_t k = 0; k < base_out.size(); ++k) {
      CHECK(adapted.data()[k] == base_out.data()[k]);
    }
  }
}

TEST_CASE("adapter parameter count and compression ratio") {
  Rng rng(2);
  Tensor w = Tensor::zeros(768, 768);
  for (std::size_t r : {1ul, 2ul, 4ul, 8ul, 16ul}) {
    LoraAdapter ad = LoraAdapter::create(w, r, rng);
    CHECK(ad.trainable_params() == r * (768 + 768));
  }
  CHECK(lora_param_ratio(768, 768, 8) == 48.0);
  CHECK(lora_param_ratio(100, 60, 4) == doctest::Approx(100.0 * 60.0 / (4 * 160.0)));
}

TEST_CASE("rank bounds are enforced at construction") {
  Rng rng(3);
  Tensor w = Tensor::zeros(10, 6);
  CHECK_THROWS_AS(LoraAdapter::create(w, 0, rng), ConfigError);
  CHECK_THROWS_AS(LoraAdapter::create(w, 7, rng), ConfigError);
  CHECK_NOTHROW(LoraAdapter::create(w, 6, rng));
}

TEST_CASE("adapter forward rejects a mismatched or trainable base") {
  Rng rng(4);
  Tensor w = random_tensor(6, 6, rng);
  Tensor other = random_tensor(6, 6, rng);
  Tensor x = random_tensor(2, 6, rng);
  LoraAdapter ad = LoraAdapter::create(w, 2, rng);
  CHECK_THROWS_AS(lora_forward(x, other, ad), UsageError);
  w.set_requires_grad(true);
  CHECK_THROWS_AS(lora_forward(x, w, ad), UsageError);
}

TEST_CASE("gradients flow to the factors only; the base stays untouched bitwise") {
  Rng rng(5);
  Tensor w = random_tensor(8, 7, rng);
  Tensor w_copy = w.clone();
  LoraAdapter ad = LoraAdapter::create(w, 3, rng);
  Tensor x = random_tensor(4, 8, rng);
  Tensor target = random_tensor(4, 7, rng);

  SgdConfig cfg;
  cfg.learning_rate = 0.05;
  std::vector<Tensor> params{ad.a, ad.b};
  for (int step = 0; step < 10; ++step) {
    Tape tape;
    Tensor err = add(lora_forward(x, w, ad), scale(target, -1.0));
    Tensor loss = sum_squares(err);
    backward(loss);
    CHECK_FALSE(w.has_grad());
    sgd_step(params, cfg);
  }
  for (std::size_t k = 0; k < w.size(); ++k) CHECK(w.data()[k] == w_copy.data()[k]);

  // After training the update matters: adapted differs from the base output.
  Tensor adapted = lora_forward(x, w, ad);
  Tensor plain = matmul(x, w);
  double diff = 0.0;
  for (std::size_t k = 0; k < adapted.size(); ++k) {
    diff = std::max(diff, std::fabs(adapted.data()[k] - plain.data()[k]));
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("finite differences confirm the low-rank factor gradients") {
  for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
    Rng rng(seed);
    Tensor w = random_tensor(5, 4, rng);
    Tensor x = random_tensor(3, 5, rng);
    Tensor c = random_tensor(3, 4, rng);
    LoraAdapter ad = LoraAdapter::create(w, 2, rng);
    // Move A off its zero init so the B gradient is non-trivial.
    for (std::size_t i = 0; i < ad.a.rows(); ++i) {
      for (std::size_t j = 0; j < ad.a.cols(); ++j) ad.a.set(i, j, rng.normal(0.0, 0.3));
    }
    auto loss_fn = [&] { return testutil::scalarize(lora_forward(x, w, ad), c); };
    {
      Tape tape;
      Tensor loss = loss_fn();
      backward(loss);
    }
    for (Tensor* t : {&ad.a, &ad.b}) {
      std::vector<double> analytic(t->grad().begin(), t->grad().end());
      auto fd = fd_gradient(*t, [&] { return loss_fn().at(0, 0); }, 1e-5);
      CHECK(max_grad_err(analytic, fd) < 1e-6);
    }
  }
}

TEST_CASE("budgeted adapter starts inert: zero diagonal means base output exactly") {
  Rng rng(21);
  Tensor w = random_tensor(10, 8, rng);
  BudgetSchedule sched{4, 2, 10, 0};
  AdaLoraAdapter ad = AdaLoraAdapter::create(w, 4, sched, rng);
  CHECK(ad.active_count() == 4);
  for (double v : ad.lambda.data()) CHECK(v == 0.0);

  Tensor x = random_tensor(3, 10, rng);
  Tensor base_out = matmul(x, w);
  Tensor adapted = adalora_forward(x, w, ad);
  for (std::size_t k = 0; k < base_out.size(); ++k) {
    CHECK(adapted.data()[k] == base_out.data()[k]);
  }
  CHECK(ad.trainable_params() == 4 * (10 + 8 + 1));
}

TEST_CASE("orthogonality penalty is zero for orthonormal factors and matches the 2I example") {
  Rng rng(22);
  Tensor w = Tensor::zeros(3, 3);
  BudgetSchedule sched{3, 1, 10, 0};
  AdaLoraAdapter ad = AdaLoraAdapter::create(w, 3, sched, rng, 0.1);

  // Orthonormal: P = I, Q = I.
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      ad.p.set(i, j, i == j ? 1.0 : 0.0);
      ad.q.set(i, j, i == j ? 1.0 : 0.0);
    }
  }
  CHECK(orthogonality_penalty(ad).at(0, 0) == 0.0);

  // P = 2I doubles every column: P^T P - I = 3I, squared norm 9r.
  for (std::size_t i = 0; i < 3; ++i) ad.p.set(i, i, 2.0);
  CHECK(orthogonality_penalty(ad).at(0, 0) == doctest::Approx(0.1 * 9.0 * 3.0).epsilon(1e-12));
}

TEST_CASE("penalty gradients check out against finite differences and drive the factors orthonormal") {
  Rng rng(23);
  Tensor w = Tensor::zeros(6, 5);
  BudgetSchedule sched{3, 1, 200, 0};
  AdaLoraAdapter ad = AdaLoraAdapter::create(w, 3, sched, rng, 0.1, 0.3);

  {
    Tape tape;
    backward(orthogonality_penalty(ad));
  }
  CHECK_FALSE(ad.lambda.has_grad());  // diagonal is not in the penalty
  for (Tensor* t : {&ad.p, &ad.q}) {
    std::vector<double> analytic(t->grad().begin(), t->grad().end());
    auto fd = fd_gradient(*t, [&] { return orthogonality_penalty(ad).at(0, 0); }, 1e-5);
    CHECK(max_grad_err(analytic, fd) < 1e-6);
    t->clear_grad();
  }

  double initial = orthogonality_penalty(ad).at(0, 0);
  SgdConfig cfg;
  cfg.learning_rate = 0.2;
  std::vector<Tensor> params{ad.p, ad.q};
  for (int step = 0; step < 200; ++step) {
    Tape tape;
    backward(orthogonality_penalty(ad));
    sgd_step(params, cfg);
  }
  double final = orthogonality_penalty(ad).at(0, 0);
  CHECK(final < initial);
  CHECK(final < 1e-3);
}

TEST_CASE("budget schedule matches the worked example and honors its endpoints") {
  BudgetSchedule s{8, 2, 6, 0};
  std::size_t expect[] = {8, 7, 6, 5, 4, 3, 2};
  for (std::size_t t = 0; t <= 6; ++t) CHECK(budget_at(s, t) == expect[t]);
  CHECK_THROWS_AS(budget_at(s, 7), ScheduleError);

  BudgetSchedule warm{8, 2, 9, 3};
  CHECK(budget_at(warm, 0) == 8);
  CHECK(budget_at(warm, 2) == 8);
  CHECK(budget_at(warm, 3) == 8);
  CHECK(budget_at(warm, 9) == 2);

  // Degenerate horizon: warmup fills the whole schedule.
  BudgetSchedule flat{5, 5, 4, 4};
  for (std::size_t t = 0; t <= 4; ++t) CHECK(budget_at(flat, t) == 5);

  BudgetSchedule bad{2, 4, 10, 0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  BudgetSchedule bad2{4, 2, 10, 11};
  CHECK_THROWS_AS(bad2.validate(), ConfigError);
}

TEST_CASE("budget schedules are monotone non-increasing across an exhaustive sweep") {
  for (std::size_t b0 = 1; b0 <= 8; ++b0) {
    for (std::size_t bT = 1; bT <= b0; ++bT) {
      for (std::size_t total = 1; total <= 20; ++total) {
        for (std::size_t warm = 0; warm <= total; ++warm) {
          BudgetSchedule s{b0, bT, total, warm};
          std::size_t prev = budget_at(s, 0);
          CHECK(prev == b0);
          for (std::size_t t = 1; t <= total; ++t) {
            std::size_t b = budget_at(s, t);
            CHECK(b <= prev);
            CHECK(b >= bT);
            if (t < warm) CHECK(b == b0);
            prev = b;
          }
          CHECK(prev == bT);
        }
      }
    }
  }
}

TEST_CASE("pruning keeps the largest diagonal magnitudes and breaks ties toward lower indices") {
  Rng rng(31);
  Tensor w = Tensor::zeros(6, 6);
  BudgetSchedule sched{2, 2, 10, 0};
  AdaLoraAdapter ad = AdaLoraAdapter::create(w, 4, sched, rng);
  double lam[] = {0.9, -0.5, 0.1, 0.7};
  for (std::size_t i = 0; i < 4; ++i) ad.lambda.set(0, i, lam[i]);
  prune_step(ad);
  CHECK(ad.mask == std::vector<std::uint8_t>{1, 0, 0, 1});
  CHECK(ad.lambda.at(0, 1) == 0.0);
  CHECK(ad.lambda.at(0, 2) == 0.0);
  CHECK(ad.lambda.at(0, 0) == 0.9);
  CHECK(ad.step == 1);

  AdaLoraAdapter tie = AdaLoraAdapter::create(w, 4, sched, rng);
  double lam2[] = {0.5, -0.5, 0.3, 0.2};
  for (std::size_t i = 0; i < 4; ++i) tie.lambda.set(0, i, lam2[i]);
  prune_step(tie);
  CHECK(tie.mask == std::vector<std::uint8_t>{1, 1, 0, 0});
}

TEST_CASE("a budget above the active count is a schedule error") {
  Rng rng(32);
  Tensor w = Tensor::zeros(8, 8);
  BudgetSchedule sched{6, 2, 10, 0};  // initial budget exceeds the rank below
  AdaLoraAdapter ad = AdaLoraAdapter::create(w, 4, sched, rng);
  CHECK_THROWS_AS(prune_step(ad), ScheduleError);
}

TEST_CASE("a custom importance scorer changes survivor selection") {
  Rng rng(33);
  Tensor w = Tensor::zeros(5, 5);
  BudgetSchedule sched{1, 1, 10, 0};
  AdaLoraAdapter ad = AdaLoraAdapter::create(w, 3, sched, rng);
  ad.lambda.set(0, 0, 5.0);
  ad.lambda.set(0, 1, 1.0);
  ad.lambda.set(0, 2, 0.5);
  // Score favors the *smallest* magnitude instead.
  prune_step(ad, [](const AdaLoraAdapter& a) {
    std::vector<double> s(a.rank());
    for (std::size_t i = 0; i < a.rank(); ++i) {
      s[i] = a.mask[i] ? -std::fabs(a.lambda.at(0, i)) : -1e30;
    }
    return s;
  });
  CHECK(ad.mask == std::vector<std::uint8_t>{0, 0, 1});
}

TEST_CASE("masked directions stay dead through further training and bound the update rank") {
  Rng rng(34);
  Tensor w = random_tensor(6, 6, rng, 0.5);
  BudgetSchedule sched{2, 1, 40, 0};
  AdaLoraAdapter ad = AdaLoraAdapter::create(w, 4, sched, rng, 0.1, 0.3);
  Tensor x = random_tensor(4, 6, rng);
  Tensor target = random_tensor(4, 6, rng);
  for (std::size_t i = 0; i < 4; ++i) ad.lambda.set(0, i, 0.1 * (i + 1.0));

  prune_step(ad);  // budget 2 at t=0: directions 2 and 3 survive
  CHECK(ad.active_count() == 2);
  CHECK(ad.lambda.at(0, 0) == 0.0);
  CHECK(ad.lambda.at(0, 1) == 0.0);

  SgdConfig cfg;
  cfg.learning_rate = 0.05;
  std::vector<Tensor> params{ad.p, ad.lambda, ad.q};
  for (int step = 0; step < 20; ++step) {
    Tape tape;
    Tensor err = add(adalora_forward(x, w, ad), scale(target, -1.0));
    Tensor loss = add(sum_squares(err), orthogonality_penalty(ad));
    backward(loss);
    sgd_step(params, cfg);
    std::size_t t = std::min(ad.step, ad.schedule.total_steps);
    prune_step(ad);
    // Right after pruning at t, the dense update cannot exceed the budget.
    CHECK(ad.active_count() <= budget_at(ad.schedule, t));
    CHECK(numerical_rank(adalora_delta(ad)) <= budget_at(ad.schedule, t));
  }
  // Once-pruned directions never come back, even after 20 more updates.
  CHECK(ad.lambda.at(0, 0) == 0.0);
  CHECK(ad.lambda.at(0, 1) == 0.0);
  CHECK(ad.active_count() == 1);
  bool survivor_alive = std::fabs(ad.lambda.at(0, 2)) > 0.0 || std::fabs(ad.lambda.at(0, 3)) > 0.0;
  CHECK(survivor_alive);
}

TEST_CASE("finite differences confirm the full budgeted-adapter gradient including the penalty") {
  for (std::uint64_t seed : {41ull, 42ull}) {
    Rng rng(seed);
    Tensor w = random_tensor(5, 4, rng);
    Tensor x = random_tensor(3, 5, rng);
    Tensor c = random_tensor(3, 4, rng);
    BudgetSchedule sched{3, 1, 10, 0};
    AdaLoraAdapter ad = AdaLoraAdapter::create(w, 3, sched, rng, 0.1, 0.4);
    for (std::size_t i = 0; i < 3; ++i) ad.lambda.set(0, i, rng.normal(0.0, 0.5));
    ad.mask = {1, 0, 1};  // partially pruned state

    auto loss_fn = [&] {
      return add(testutil::scalarize(adalora_forward(x, w, ad), c), orthogonality_penalty(ad));
    };
    {
      Tape tape;
      backward(loss_fn());
    }
    for (Tensor* t : {&ad.p, &ad.lambda, &ad.q}) {
      std::vector<double> analytic(t->grad().begin(), t->grad().end());
      auto fd = fd_gradient(*t, [&] { return loss_fn().at(0, 0); }, 1e-5);
      CHECK(max_grad_err(analytic, fd) < 1e-6);
    }
    // The masked diagonal entry must see exactly zero gradient.
    CHECK(ad.lambda.grad()[1] == 0.0);
  }
}
