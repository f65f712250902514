// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "uniflow/experts.hpp"

using namespace uniflow;
using namespace uniflow::experts;

namespace {

MoFStack hand_stack(const Vec& logits, int top_k) {
  // identity router on a one-hot-free context: logits come straight from b
  MoFStack s = MoFStack::init(3, 4, 2, static_cast<int>(logits.size()), top_k,
                              /*ctx_dim=*/2, Rng(1));
  s.router_w.setZero();
  s.router_b = logits;
  return s;
}

}  // namespace

TEST_CASE("top-k routing softmaxes the selected logits and zeroes the rest") {
  Vec logits(4);
  logits << 3.0, 1.0, 2.0, 0.0;
  const auto s = hand_stack(logits, 2);
  const auto r = route_topk(s, Vec::Zero(2));
  REQUIRE(r.active == std::vector<int>{0, 2});
  const double e3 = std::exp(3.0), e2 = std::exp(2.0);
  CHECK(r.weights[0] == doctest::Approx(e3 / (e3 + e2)).epsilon(1e-12));
  CHECK(r.weights[2] == doctest::Approx(e2 / (e3 + e2)).epsilon(1e-12));
  CHECK(r.weights[1] == 0.0);
  CHECK(r.weights[3] == 0.0);
  CHECK(r.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("top-k equal to E is a full softmax") {
  Vec logits(3);
  logits << 0.5, -1.0, 2.0;
  const auto s = hand_stack(logits, 3);
  const auto r = route_topk(s, Vec::Zero(2));
  CHECK(r.active.size() == 3);
  double denom = 0.0;
  for (int e = 0; e < 3; ++e) denom += std::exp(logits[e] - 2.0);
  for (int e = 0; e < 3; ++e)
    CHECK(r.weights[e] == doctest::Approx(std::exp(logits[e] - 2.0) / denom).epsilon(1e-12));
}

TEST_CASE("ties break toward the lower expert index") {
  const auto s = hand_stack(Vec::Zero(4), 2);
  const auto r = route_topk(s, Vec::Zero(2));
  CHECK(r.active == std::vector<int>{0, 1});
  CHECK(r.weights[0] == 0.5);
  CHECK(r.weights[1] == 0.5);
}

TEST_CASE("routing weight vector always has exactly top_k nonzeros summing to one") {
  Rng rng(2);
  auto s = MoFStack::init(3, 4, 2, 5, 3, 4, Rng(3));
  for (int trial = 0; trial < 50; ++trial) {
    Vec ctx(4);
    for (int i = 0; i < 4; ++i) ctx[i] = rng.normal();
    const auto r = route_topk(s, ctx);
    int nonzeros = 0;
    for (int e = 0; e < 5; ++e) nonzeros += (r.weights[e] != 0.0);
    CHECK(nonzeros == 3);
    CHECK(std::abs(r.weights.sum() - 1.0) <= 1e-12);
  }
}

TEST_CASE("a single expert receives weight one") {
  auto s = MoFStack::init(3, 4, 2, 1, 1, 2, Rng(4));
  Vec input(3);
  input << 0.3, -0.2, 0.9;
  const Vec h = s.foundation_forward(input);
  const Vec expected = s.specialists[0].w * h + s.specialists[0].b;
  CHECK((mof_forward(s, input, Vec::Zero(2)) - expected).norm() == 0.0);
}

TEST_CASE("identical specialists make the output routing-independent") {
  auto s = MoFStack::init(3, 4, 2, 4, 2, 2, Rng(5));
  for (auto& sp : s.specialists) sp = s.specialists[0];
  Vec input(3);
  input << 1.0, 0.5, -0.5;
  Vec ctx(2);
  ctx << 0.7, -0.3;
  const Vec h = s.foundation_forward(input);
  const Vec single = s.specialists[0].w * h + s.specialists[0].b;
  CHECK((mof_forward(s, input, ctx) - single).norm() < 1e-12);
}

TEST_CASE("mof_forward matches an explicit dense summation oracle") {
  auto s = MoFStack::init(4, 6, 3, 4, 2, 3, Rng(6));
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Vec input(4), ctx(3);
    for (int i = 0; i < 4; ++i) input[i] = rng.normal();
    for (int i = 0; i < 3; ++i) ctx[i] = rng.normal();
    const auto r = route_topk(s, ctx);
    const Vec h = s.foundation_forward(input);
    Vec oracle = Vec::Zero(3);
    for (int e = 0; e < s.expert_count(); ++e)
      oracle += r.weights[e] * (s.specialists[static_cast<size_t>(e)].w * h +
                                s.specialists[static_cast<size_t>(e)].b);
    CHECK((mof_forward(s, input, ctx) - oracle).norm() == 0.0);
  }
}

TEST_CASE("training touches only the routed experts") {
  auto s = MoFStack::init(3, 4, 2, 4, 2, 2, Rng(8));
  Vec ctx(2);
  ctx << 5.0, 0.0;  // strongly prefers whatever experts this context routes to
  const auto routed = route_topk(s, ctx).active;
  std::vector<Mat> before_w;
  std::vector<Vec> before_b;
  for (const auto& sp : s.specialists) {
    before_w.push_back(sp.w);
    before_b.push_back(sp.b);
  }
  Vec input(3), target(2);
  input << 0.1, 0.2, 0.3;
  target << 1.0, -1.0;
  for (int step = 0; step < 10; ++step) mof_train_step(s, input, ctx, target, 1e-2);

  for (int e = 0; e < 4; ++e) {
    const bool active = std::find(routed.begin(), routed.end(), e) != routed.end();
    if (active) {
      CHECK(s.specialists[static_cast<size_t>(e)].w != before_w[static_cast<size_t>(e)]);
    } else {
      CHECK(s.specialists[static_cast<size_t>(e)].w == before_w[static_cast<size_t>(e)]);
      CHECK(s.specialists[static_cast<size_t>(e)].b == before_b[static_cast<size_t>(e)]);
    }
  }
}

TEST_CASE("mof training reduces the loss") {
  auto s = MoFStack::init(3, 8, 2, 4, 2, 2, Rng(9));
  Vec input(3), ctx(2), target(2);
  input << 0.4, -0.1, 0.6;
  ctx << 1.0, -0.5;
  target << 0.8, -0.3;
  const double first = mof_train_step(s, input, ctx, target, 5e-2);
  double last = first;
  for (int i = 0; i < 200; ++i) last = mof_train_step(s, input, ctx, target, 5e-2);
  CHECK(last < 0.05 * first);
}

TEST_CASE("esa applies only active adapters and rejects leakage") {
  auto bank = AdapterBank::init(3, 2, 2, Rng(10));
  std::map<int, Vec> features;
  features[0] = Vec::Ones(2);
  features[1] = Vec::Ones(2);
  const auto out = esa_apply(bank, {0, 1}, features);
  CHECK(out.size() == 2);
  CHECK((out.at(0) - (bank.w[0] * features[0] + bank.b[0])).norm() == 0.0);

  features[2] = Vec::Ones(2);  // inactive group
  CHECK_THROWS_AS(esa_apply(bank, {0, 1}, features), std::invalid_argument);
}

TEST_CASE("zero-initialized adapters emit the bias only") {
  auto bank = AdapterBank::zeros(2, 3, 4);
  bank.b[1] = Vec::Constant(3, 0.7);
  std::map<int, Vec> features;
  features[1] = Vec::Random(4);
  const auto out = esa_apply(bank, {1}, features);
  CHECK(out.at(1) == bank.b[1]);
}

TEST_CASE("training an embodiment leaves its inactive adapters bit-identical") {
  auto bank = AdapterBank::init(3, 2, 2, Rng(11));
  const Mat w2_before = bank.w[2];
  const Vec b2_before = bank.b[2];
  std::map<int, Vec> features, targets;
  features[0] = Vec::Random(2);
  features[1] = Vec::Random(2);
  targets[0] = Vec::Random(2);
  targets[1] = Vec::Random(2);
  for (int step = 0; step < 25; ++step) esa_train_step(bank, {0, 1}, features, targets, 1e-2);
  CHECK(bank.w[2] == w2_before);
  CHECK(bank.b[2] == b2_before);
}

TEST_CASE("overlapping embodiments update the shared adapter from both sides") {
  auto bank = AdapterBank::init(3, 2, 2, Rng(12));
  int updates[3] = {0, 0, 0};
  auto snapshot = bank;
  auto count_changes = [&]() {
    for (int k = 0; k < 3; ++k)
      if (bank.w[static_cast<size_t>(k)] != snapshot.w[static_cast<size_t>(k)]) {
        ++updates[k];
        snapshot.w[static_cast<size_t>(k)] = bank.w[static_cast<size_t>(k)];
      }
  };
  std::map<int, Vec> fa{{0, Vec::Ones(2)}, {1, Vec::Ones(2)}};
  std::map<int, Vec> ta{{0, Vec::Constant(2, 2.0)}, {1, Vec::Constant(2, -1.0)}};
  std::map<int, Vec> fb{{1, Vec::Ones(2)}, {2, Vec::Ones(2)}};
  std::map<int, Vec> tb{{1, Vec::Constant(2, 0.5)}, {2, Vec::Constant(2, 1.5)}};
  for (int round = 0; round < 4; ++round) {
    esa_train_step(bank, {0, 1}, fa, ta, 1e-2);
    count_changes();
    esa_train_step(bank, {1, 2}, fb, tb, 1e-2);
    count_changes();
  }
  CHECK(updates[0] == 4);
  CHECK(updates[2] == 4);
  CHECK(updates[1] == 8);  // shared slot updated by both embodiments
}

TEST_CASE("active parameter count decouples from the total") {
  const auto s = MoFStack::init(4, 8, 3, 4, 2, 5, Rng(13));
  const auto bank = AdapterBank::init(6, 3, 3, Rng(14));
  const auto counts = count_params(s, bank, {0, 2});
  CHECK(counts.total > counts.active);
  const std::int64_t per_expert = s.specialists[0].w.size() + s.specialists[0].b.size();
  const std::int64_t per_adapter = bank.w[0].size() + bank.b[0].size();
  CHECK(counts.total - counts.active == 2 * per_expert + 4 * per_adapter);
}

TEST_CASE("stack and bank round-trip through the flat-array format") {
  const auto dir = std::filesystem::temp_directory_path();
  const auto s = MoFStack::init(4, 6, 3, 4, 2, 3, Rng(15));
  const auto stack_path = (dir / "uniflow_stack_test.ufp").string();
  save_stack(s, stack_path, 15);
  const auto s2 = load_stack(stack_path);
  CHECK(s2.top_k == s.top_k);
  CHECK(s2.router_w == s.router_w);
  CHECK(s2.specialists[3].w == s.specialists[3].w);
  CHECK(s2.foundation[1].b == s.foundation[1].b);

  const auto bank = AdapterBank::init(3, 2, 4, Rng(16));
  const auto bank_path = (dir / "uniflow_bank_test.ufp").string();
  save_bank(bank, bank_path, 16);
  const auto bank2 = load_bank(bank_path);
  CHECK(bank2.w[2] == bank.w[2]);
  CHECK(bank2.b[1] == bank.b[1]);
  std::filesystem::remove(stack_path);
  std::filesystem::remove(bank_path);
}
