// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "uniflow/rng.hpp"

namespace uniflow::flow {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct Span {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool contains(int i) const { return i >= begin && i < end; }
};

/// Token-level conditioning consumed by the velocity field: a stand-in for
/// the vision-language suffix features. Rows are tokens; spans are disjoint,
/// contiguous, in prefix < state < action order, and cover every row. The
/// action_tokens span length equals the chunk length T.
struct ContextFeatures {
  Mat tokens;  // n_tokens x d_model
  Span prefix;
  Span state;
  Span action_tokens;

  int rows() const { return static_cast<int>(tokens.rows()); }
  int d_model() const { return static_cast<int>(tokens.cols()); }
  /// First row of the suffix (state + action tokens) modulated by gating.
  Span suffix() const { return {state.begin, action_tokens.end}; }
  /// Column-wise mean over all rows; the field's conditioning summary.
  Vec pooled() const { return tokens.colwise().mean().transpose(); }
  void validate(int chunk_len) const;
};

/// One inference cycle's worth of actions in the unified space, with
/// per-token flow timesteps and the committed-prefix boundary.
struct ActionChunk {
  Mat actions;       // T x d
  Vec timesteps;     // length T, each in [0, 1]
  int committed_prefix = 0;
  bool diverged = false;  // set when refinement fell back to an earlier round

  int length() const { return static_cast<int>(actions.rows()); }
  void validate() const;
};

/// Architecture of the toy velocity network: tanh MLP over
/// [flatten(x), t, mean-pooled context, embodiment one-hot].
struct NetArch {
  int chunk_len = 8;      // T
  int action_dim = 2;     // d
  int d_model = 16;
  int n_embodiments = 1;  // one-hot width
  std::vector<int> hidden = {64, 64};

  int input_dim() const { return chunk_len * action_dim + 1 + d_model + n_embodiments; }
  int output_dim() const { return chunk_len * action_dim; }
  std::vector<int> layer_dims() const;
  std::int64_t param_count() const;
  bool operator==(const NetArch&) const = default;
};

/// Trainable velocity field v(x, t, ctx, embodiment) -> T x d with exact
/// analytic parameter gradients (hand-rolled backprop, no autodiff).
/// Evaluation is deterministic given the parameter vector.
class VelocityField {
 public:
  VelocityField(NetArch arch, Rng init_rng);
  VelocityField(NetArch arch, Vec params);

  const NetArch& arch() const { return arch_; }
  const Vec& params() const { return params_; }
  Vec& mutable_params() { return params_; }

  Mat eval(const Mat& x, double t, const ContextFeatures& ctx, int embodiment) const;

  /// Forward pass retaining activations for backprop.
  struct Forward {
    Vec input;
    std::vector<Vec> pre_act;   // z per layer
    std::vector<Vec> post_act;  // tanh(z) per hidden layer
    Mat output;                 // T x d
  };
  Forward forward(const Mat& x, double t, const ContextFeatures& ctx, int embodiment) const;

  /// Accumulates dL/dparams given dL/doutput; optionally also returns
  /// dL/dinput (used to chain gradients into the context pathway).
  void backward(const Forward& fw, const Mat& dloss_doutput, Vec& dparams,
                Vec* dloss_dinput = nullptr) const;

  /// Slice boundaries of the flattened input vector.
  int input_offset_x() const { return 0; }
  int input_offset_t() const { return arch_.chunk_len * arch_.action_dim; }
  int input_offset_pooled() const { return input_offset_t() + 1; }
  int input_offset_onehot() const { return input_offset_pooled() + arch_.d_model; }

 private:
  NetArch arch_;
  Vec params_;

  struct LayerView {
    Eigen::Map<const Mat> w;
    Eigen::Map<const Vec> b;
  };
  LayerView layer(int l) const;
  int layer_count() const { return static_cast<int>(arch_.layer_dims().size()) - 1; }
};

/// Hook applied to the denoising iterate: once to the initial state and
/// again after every Euler update (prefix locking plugs in here).
using IterateHook = std::function<void(Mat&)>;

/// Integrates the field with K Euler steps from x0 at t_k = k/K,
/// step 1/K. Throws DivergenceError naming the step if the iterate leaves
/// the finite range.
ActionChunk euler_denoise(const VelocityField& field, const Mat& x0, int steps,
                          const ContextFeatures& ctx, int embodiment,
                          const IterateHook& hook = {});

/// Same loop with a per-step context (gating refinement plugs in here).
/// ctx_at(k, x) is consulted before the k-th field evaluation.
using ContextProvider = std::function<const ContextFeatures&(int step, const Mat& x)>;
Mat denoise_loop(const VelocityField& field, Mat x, int steps, const ContextProvider& ctx_at,
                 int embodiment, const IterateHook& hook);

struct LossGrad {
  double loss = 0.0;
  Vec dparams;
};

/// Flow-matching loss at one sampled timestep: interpolates
/// x_t = (1-t) x0 + t a row-wise and penalizes the squared deviation of the
/// predicted velocity from the ideal field a - x0 on the given rows
/// (default: all rows). The gradient is exact.
LossGrad fm_loss(const VelocityField& field, const Mat& target, const Mat& x0, double t,
                 const ContextFeatures& ctx, int embodiment,
                 const std::vector<int>* rows = nullptr);

namespace detail {
/// Kernel shared with the async-chunking masked loss: rows below
/// `committed_count` enter the field input as committed constants and carry
/// no loss term; with committed_count == 0 this is exactly fm_loss.
LossGrad fm_loss_kernel(const VelocityField& field, const Mat& target, const Mat* committed,
                        int committed_count, const Mat& x0, double t, const ContextFeatures& ctx,
                        int embodiment, const std::vector<int>* rows);
}  // namespace detail

struct TrainConfig {
  double lr = 1e-2;
  long steps = 2000;
  int batch = 1;
  std::uint64_t seed = 0;
};

struct TrainSample {
  ContextFeatures ctx;
  Mat target;  // T x d
  int embodiment = 0;
};

struct TrainResult {
  std::vector<double> loss_curve;  // per-step mean batch loss
};

/// Plain SGD on fm_loss with fresh x0 ~ N(0, I) and t ~ U[0,1) per sample.
/// Zero steps leaves the parameters bit-identical. A loss above 1e6 aborts
/// with a DivergenceError.
TrainResult train_toy_field(VelocityField& field, const std::vector<TrainSample>& dataset,
                            const TrainConfig& cfg);

/// Worst relative error between the analytic fm_loss gradient and central
/// finite differences over every parameter, on a deterministic probe.
/// rel = |a - fd| / max(1, |a|, |fd|).
double finite_diff_check(const VelocityField& field, const ContextFeatures& ctx, double eps,
                         int embodiment = 0, std::uint64_t probe_seed = 17);

/// Parameter (de)serialization: JSON header {arch, d_model, T, d, seed}
/// + flat little-endian doubles.
void save_field(const VelocityField& field, const std::string& path, std::uint64_t seed);
VelocityField load_field(const std::string& path);

}  // namespace uniflow::flow
