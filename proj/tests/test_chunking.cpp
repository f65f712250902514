// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "uniflow/chunking.hpp"
#include "uniflow/errors.hpp"

using namespace uniflow;
using namespace uniflow::chunking;
using flow::ContextFeatures;
using flow::NetArch;
using flow::VelocityField;

namespace {

ContextFeatures make_ctx(int prefix, int state, int chunk_len, int d_model) {
  ContextFeatures ctx;
  ctx.tokens = Mat::Zero(prefix + state + chunk_len, d_model);
  ctx.prefix = {0, prefix};
  ctx.state = {prefix, prefix + state};
  ctx.action_tokens = {prefix + state, prefix + state + chunk_len};
  return ctx;
}

}  // namespace

TEST_CASE("point-mass delay always returns its atom") {
  const auto model = space::DelayModel::point_mass(3);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) CHECK(sample_delay(model, rng) == 3);
}

TEST_CASE("d_max=1 always samples zero") {
  const auto model = space::DelayModel::uniform(1);
  Rng rng(2);
  for (int i = 0; i < 100; ++i) CHECK(sample_delay(model, rng) == 0);
}

TEST_CASE("uniform delay frequencies converge to the pmf") {
  const auto model = space::DelayModel::uniform(4);
  Rng rng(3);
  std::array<int, 4> counts{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[static_cast<size_t>(sample_delay(model, rng))]++;
  for (const int c : counts)
    CHECK(std::abs(static_cast<double>(c) / n - 0.25) < 0.01);
}

TEST_CASE("assign_timesteps marks the committed prefix clean") {
  const Vec t = assign_timesteps(8, 3, 0.4);
  REQUIRE(t.size() == 8);
  for (int i = 0; i < 3; ++i) CHECK(t[i] == 1.0);
  for (int i = 3; i < 8; ++i) CHECK(t[i] == 0.4);

  CHECK(assign_timesteps(4, 0, 0.7) == Vec::Constant(4, 0.7));
  CHECK(assign_timesteps(4, 4, 0.7) == Vec::Ones(4));
  CHECK_THROWS_AS(assign_timesteps(4, 5, 0.5), std::invalid_argument);
}

TEST_CASE("masked loss vanishes on a fully committed chunk") {
  const VelocityField field(NetArch{4, 2, 6, 1, {8}}, Rng(5));
  const auto ctx = make_ctx(2, 1, 4, 6);
  Mat target = Mat::Random(4, 2), x0 = Mat::Random(4, 2);
  const auto lg = masked_fm_loss(field, target, target, x0, 4, 0.5, ctx, 0);
  CHECK(lg.loss == 0.0);
  CHECK(lg.dparams.isZero(0.0));
}

TEST_CASE("masked loss with zero delay is bit-identical to fm_loss") {
  const VelocityField field(NetArch{4, 2, 6, 1, {8}}, Rng(6));
  const auto ctx = make_ctx(2, 1, 4, 6);
  const Mat target = Mat::Random(4, 2), x0 = Mat::Random(4, 2);
  const auto masked = masked_fm_loss(field, target, Mat(), x0, 0, 0.3, ctx, 0);
  const auto plain = flow::fm_loss(field, target, x0, 0.3, ctx, 0);
  CHECK(masked.loss == plain.loss);
  CHECK(masked.dparams == plain.dparams);
}

TEST_CASE("loss and gradient are exactly independent of prefix targets") {
  const VelocityField field(NetArch{8, 2, 6, 1, {16}}, Rng(7));
  const auto ctx = make_ctx(2, 2, 8, 6);
  Mat target = Mat::Random(8, 2);
  const Mat x0 = Mat::Random(8, 2);
  const Mat committed = target.topRows(3);  // clean actions, held separately
  const auto base = masked_fm_loss(field, target, committed, x0, 3, 0.4, ctx, 0);

  Mat perturbed = target;
  perturbed.row(1).array() += 10.0;  // prefix row
  const auto same = masked_fm_loss(field, perturbed, committed, x0, 3, 0.4, ctx, 0);
  CHECK(same.loss == base.loss);
  CHECK(same.dparams == base.dparams);

  perturbed = target;
  perturbed.row(5).array() += 1e-3;  // postfix row
  const auto changed = masked_fm_loss(field, perturbed, committed, x0, 3, 0.4, ctx, 0);
  CHECK(changed.loss != base.loss);
}

TEST_CASE("commit_delay applies the ceiling plus safety margin") {
  CHECK(commit_delay(0.120, 0.050, 1) == 4);  // ceil(2.4) + 1
  CHECK(commit_delay(0.0, 0.050, 0) == 0);
  CHECK(commit_delay(0.100, 0.050, 0) == 2);  // exact multiple
  CHECK_THROWS_AS(commit_delay(-0.01, 0.05, 0), std::invalid_argument);
  CHECK_THROWS_AS(commit_delay(0.1, 0.0, 0), std::invalid_argument);
  CHECK_THROWS_AS(commit_delay(0.1, 0.05, -1), std::invalid_argument);
}

TEST_CASE("lock_prefix overwrites exactly the committed rows") {
  const Mat iterate = Mat::Random(8, 3);
  const Mat buffer = Mat::Random(8, 3);
  SUBCASE("zero delay is the identity") { CHECK(lock_prefix(iterate, buffer, 0) == iterate); }
  SUBCASE("full delay returns the buffer") { CHECK(lock_prefix(iterate, buffer, 8) == buffer); }
  SUBCASE("partial lock is row-exact") {
    const Mat locked = lock_prefix(iterate, buffer, 3);
    for (int i = 0; i < 3; ++i) REQUIRE(locked.row(i) == buffer.row(i));
    for (int i = 3; i < 8; ++i) REQUIRE(locked.row(i) == iterate.row(i));
  }
  SUBCASE("under-committed buffer is a protocol violation") {
    CHECK_THROWS_AS(lock_prefix(iterate, buffer.topRows(2), 3), ProtocolError);
  }
}

TEST_CASE("the lock hook holds the prefix through every Euler step") {
  const VelocityField field(NetArch{4, 2, 6, 1, {8}}, Rng(8));
  const auto ctx = make_ctx(2, 1, 4, 6);
  const Mat x0 = Mat::Random(4, 2);
  const Mat buffer = Mat::Random(4, 2);
  const int delay = 2;
  int checks = 0;
  auto lock = chunking::make_lock_hook(buffer, delay);
  const auto chunk = flow::euler_denoise(field, x0, 8, ctx, 0, [&](Mat& x) {
    lock(x);
    for (int i = 0; i < delay; ++i) REQUIRE(x.row(i) == buffer.row(i));
    ++checks;
  });
  CHECK(checks == 9);  // initial state + 8 updates
  for (int i = 0; i < delay; ++i) CHECK(chunk.actions.row(i) == buffer.row(i));
}

TEST_CASE("stitch admits only the postfix of the new chunk") {
  const Mat prev = Mat::Random(8, 3);
  const Mat next = Mat::Random(8, 3);
  CHECK(stitch(prev, next, 0) == next);
  CHECK(stitch(prev, next, 8) == prev);
  const Mat mixed = stitch(prev, next, 3);
  for (int i = 0; i < 3; ++i) REQUIRE(mixed.row(i) == prev.row(i));
  for (int i = 3; i < 8; ++i) REQUIRE(mixed.row(i) == next.row(i));
  CHECK_THROWS_AS(stitch(prev, next, 9), std::invalid_argument);
}
