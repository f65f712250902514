// SPDX-License-Identifier: Apache-2.0
#include "uniflow/flow.hpp"

#include <cmath>
#include <numeric>

#include <json.hpp>

#include "uniflow/errors.hpp"
#include "uniflow/io.hpp"

namespace uniflow::flow {

void ContextFeatures::validate(int chunk_len) const {
  if (prefix.begin != 0 || prefix.end != state.begin || state.end != action_tokens.begin ||
      action_tokens.end != rows())
    throw std::invalid_argument(
        "ContextFeatures: spans must be contiguous in prefix<state<action order and cover all rows");
  if (action_tokens.size() != chunk_len)
    throw std::invalid_argument("ContextFeatures: action_tokens span must have length T");
  if (!tokens.allFinite()) throw std::invalid_argument("ContextFeatures: non-finite tokens");
}

void ActionChunk::validate() const {
  if (length() < 1) throw std::invalid_argument("ActionChunk: T must be >= 1");
  if (timesteps.size() != length())
    throw std::invalid_argument("ActionChunk: timestep vector must have length T");
  if (!actions.allFinite()) throw std::invalid_argument("ActionChunk: non-finite actions");
  for (int i = 0; i < timesteps.size(); ++i)
    if (!(timesteps[i] >= 0.0 && timesteps[i] <= 1.0))
      throw std::invalid_argument("ActionChunk: timesteps must lie in [0,1]");
  if (committed_prefix < 0 || committed_prefix > length())
    throw std::invalid_argument("ActionChunk: committed prefix out of range");
}

std::vector<int> NetArch::layer_dims() const {
  std::vector<int> dims;
  dims.push_back(input_dim());
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(output_dim());
  return dims;
}

std::int64_t NetArch::param_count() const {
  const auto dims = layer_dims();
  std::int64_t n = 0;
  for (size_t l = 0; l + 1 < dims.size(); ++l)
    n += static_cast<std::int64_t>(dims[l + 1]) * dims[l] + dims[l + 1];
  return n;
}

VelocityField::VelocityField(NetArch arch, Rng init_rng) : arch_(std::move(arch)) {
  const auto dims = arch_.layer_dims();
  params_ = Vec::Zero(arch_.param_count());
  Eigen::Index pos = 0;
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    const Eigen::Index w_count = static_cast<Eigen::Index>(dims[l + 1]) * dims[l];
    for (Eigen::Index i = 0; i < w_count; ++i) params_[pos + i] = scale * init_rng.normal();
    pos += w_count + dims[l + 1];  // biases stay zero
  }
}

VelocityField::VelocityField(NetArch arch, Vec params) : arch_(std::move(arch)), params_(std::move(params)) {
  if (params_.size() != arch_.param_count())
    throw std::invalid_argument("VelocityField: parameter vector size does not match architecture");
}

VelocityField::LayerView VelocityField::layer(int l) const {
  const auto dims = arch_.layer_dims();
  Eigen::Index pos = 0;
  for (int i = 0; i < l; ++i) pos += static_cast<Eigen::Index>(dims[i + 1]) * dims[i] + dims[i + 1];
  const int rows = dims[l + 1], cols = dims[l];
  return {Eigen::Map<const Mat>(params_.data() + pos, rows, cols),
          Eigen::Map<const Vec>(params_.data() + pos + static_cast<Eigen::Index>(rows) * cols, rows)};
}

namespace {

Vec build_input(const NetArch& arch, const Mat& x, double t, const ContextFeatures& ctx,
                int embodiment) {
  if (x.rows() != arch.chunk_len || x.cols() != arch.action_dim)
    throw std::invalid_argument("VelocityField: iterate shape must be T x d");
  ctx.validate(arch.chunk_len);
  if (ctx.d_model() != arch.d_model)
    throw std::invalid_argument("VelocityField: context width does not match architecture");
  if (embodiment < 0 || embodiment >= arch.n_embodiments)
    throw std::invalid_argument("VelocityField: embodiment index out of range");
  Vec input(arch.input_dim());
  input.head(arch.chunk_len * arch.action_dim) =
      Eigen::Map<const Vec>(x.data(), x.size());  // column-major flatten
  input[arch.chunk_len * arch.action_dim] = t;
  input.segment(arch.chunk_len * arch.action_dim + 1, arch.d_model) = ctx.pooled();
  input.tail(arch.n_embodiments).setZero();
  input[arch.input_dim() - arch.n_embodiments + embodiment] = 1.0;
  return input;
}

}  // namespace

VelocityField::Forward VelocityField::forward(const Mat& x, double t, const ContextFeatures& ctx,
                                              int embodiment) const {
  Forward fw;
  fw.input = build_input(arch_, x, t, ctx, embodiment);
  const int L = layer_count();
  fw.pre_act.resize(static_cast<size_t>(L));
  fw.post_act.resize(static_cast<size_t>(L));
  Vec a = fw.input;
  for (int l = 0; l < L; ++l) {
    const auto lv = layer(l);
    fw.pre_act[static_cast<size_t>(l)] = lv.w * a + lv.b;
    if (l + 1 < L) {
      fw.post_act[static_cast<size_t>(l)] = fw.pre_act[static_cast<size_t>(l)].array().tanh();
      a = fw.post_act[static_cast<size_t>(l)];
    }
  }
  const Vec& out_flat = fw.pre_act.back();
  fw.output = Eigen::Map<const Mat>(out_flat.data(), arch_.chunk_len, arch_.action_dim);
  return fw;
}

Mat VelocityField::eval(const Mat& x, double t, const ContextFeatures& ctx, int embodiment) const {
  return forward(x, t, ctx, embodiment).output;
}

void VelocityField::backward(const Forward& fw, const Mat& dloss_doutput, Vec& dparams,
                             Vec* dloss_dinput) const {
  const auto dims = arch_.layer_dims();
  const int L = layer_count();
  if (dparams.size() != params_.size()) dparams = Vec::Zero(params_.size());

  Vec delta = Eigen::Map<const Vec>(dloss_doutput.data(), dloss_doutput.size());
  // layer parameter offsets
  std::vector<Eigen::Index> offset(static_cast<size_t>(L));
  Eigen::Index pos = 0;
  for (int l = 0; l < L; ++l) {
    offset[static_cast<size_t>(l)] = pos;
    pos += static_cast<Eigen::Index>(dims[l + 1]) * dims[l] + dims[l + 1];
  }
  for (int l = L - 1; l >= 0; --l) {
    const Vec& a_prev = (l == 0) ? fw.input : fw.post_act[static_cast<size_t>(l - 1)];
    const int rows = dims[l + 1], cols = dims[l];
    Eigen::Map<Mat> dw(dparams.data() + offset[static_cast<size_t>(l)], rows, cols);
    Eigen::Map<Vec> db(dparams.data() + offset[static_cast<size_t>(l)] +
                           static_cast<Eigen::Index>(rows) * cols,
                       rows);
    dw.noalias() += delta * a_prev.transpose();
    db += delta;
    if (l > 0 || dloss_dinput != nullptr) {
      const auto lv = layer(l);
      Vec back = lv.w.transpose() * delta;
      if (l > 0) {
        const Vec& act = fw.post_act[static_cast<size_t>(l - 1)];
        delta = back.array() * (1.0 - act.array().square());
      } else if (dloss_dinput != nullptr) {
        *dloss_dinput = back;
      }
    }
  }
}

ActionChunk euler_denoise(const VelocityField& field, const Mat& x0, int steps,
                          const ContextFeatures& ctx, int embodiment, const IterateHook& hook) {
  const ContextFeatures& fixed = ctx;
  Mat out = denoise_loop(
      field, x0, steps, [&fixed](int, const Mat&) -> const ContextFeatures& { return fixed; },
      embodiment, hook);
  ActionChunk chunk;
  chunk.actions = std::move(out);
  chunk.timesteps = Vec::Ones(x0.rows());
  chunk.committed_prefix = 0;
  chunk.validate();
  return chunk;
}

Mat denoise_loop(const VelocityField& field, Mat x, int steps, const ContextProvider& ctx_at,
                 int embodiment, const IterateHook& hook) {
  if (steps < 1) throw std::invalid_argument("euler_denoise: steps must be >= 1");
  if (!x.allFinite()) throw std::invalid_argument("euler_denoise: non-finite initial state");
  if (hook) hook(x);
  const double dt = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) / steps;
    const Mat v = field.eval(x, t, ctx_at(k, x), embodiment);
    x += dt * v;
    if (hook) hook(x);
    if (!x.allFinite())
      throw DivergenceError("euler_denoise: iterate diverged at step " + std::to_string(k + 1), k + 1);
  }
  return x;
}

namespace detail {

LossGrad fm_loss_kernel(const VelocityField& field, const Mat& target, const Mat* committed,
                        int committed_count, const Mat& x0, double t, const ContextFeatures& ctx,
                        int embodiment, const std::vector<int>* rows) {
  const int T = static_cast<int>(target.rows());
  if (x0.rows() != T || x0.cols() != target.cols())
    throw std::invalid_argument("fm_loss: x0 shape must match the target chunk");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("fm_loss: t must lie in [0,1]");
  if (!target.allFinite() || !x0.allFinite())
    throw std::invalid_argument("fm_loss: non-finite inputs");

  Mat x_t(T, target.cols());
  for (int i = 0; i < T; ++i) {
    if (i < committed_count)
      x_t.row(i) = committed->row(i);
    else
      x_t.row(i) = (1.0 - t) * x0.row(i) + t * target.row(i);
  }

  const auto fw = field.forward(x_t, t, ctx, embodiment);
  Mat residual = Mat::Zero(T, target.cols());
  double loss = 0.0;
  auto add_row = [&](int i) {
    residual.row(i) = fw.output.row(i) - (target.row(i) - x0.row(i));
    loss += residual.row(i).squaredNorm();
  };
  if (rows != nullptr) {
    for (const int i : *rows) {
      if (i < committed_count || i >= T)
        throw std::invalid_argument("fm_loss: loss row outside the generated postfix");
      add_row(i);
    }
  } else {
    for (int i = committed_count; i < T; ++i) add_row(i);
  }

  LossGrad lg;
  lg.loss = loss;
  lg.dparams = Vec::Zero(field.params().size());
  const Mat dl_dout = 2.0 * residual;
  field.backward(fw, dl_dout, lg.dparams);
  return lg;
}

}  // namespace detail

LossGrad fm_loss(const VelocityField& field, const Mat& target, const Mat& x0, double t,
                 const ContextFeatures& ctx, int embodiment, const std::vector<int>* rows) {
  return detail::fm_loss_kernel(field, target, nullptr, 0, x0, t, ctx, embodiment, rows);
}

TrainResult train_toy_field(VelocityField& field, const std::vector<TrainSample>& dataset,
                            const TrainConfig& cfg) {
  if (dataset.empty()) throw std::invalid_argument("train_toy_field: empty dataset");
  if (cfg.batch < 1) throw std::invalid_argument("train_toy_field: batch must be >= 1");
  TrainResult result;
  if (cfg.steps <= 0) return result;  // parameters untouched, bit-exactly

  Rng rng(cfg.seed);
  Rng pick_rng = rng.child("shuffle");
  Rng noise_rng = rng.child("noise");
  Rng t_rng = rng.child("timestep");
  const auto& arch = field.arch();

  result.loss_curve.reserve(static_cast<size_t>(cfg.steps));
  Vec grad(field.params().size());
  for (long step = 0; step < cfg.steps; ++step) {
    grad.setZero();
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& sample = dataset[pick_rng.below(dataset.size())];
      Mat x0(arch.chunk_len, arch.action_dim);
      for (int i = 0; i < x0.rows(); ++i)
        for (int j = 0; j < x0.cols(); ++j) x0(i, j) = noise_rng.normal();
      const double t = t_rng.uniform();
      const auto lg = fm_loss(field, sample.target, x0, t, sample.ctx, sample.embodiment);
      batch_loss += lg.loss;
      grad += lg.dparams;
    }
    batch_loss /= cfg.batch;
    result.loss_curve.push_back(batch_loss);
    if (!(batch_loss < 1e6) || !std::isfinite(batch_loss))
      throw DivergenceError("train_toy_field: loss " + std::to_string(batch_loss) +
                                " exceeded 1e6 at step " + std::to_string(step),
                            step);
    field.mutable_params() -= (cfg.lr / cfg.batch) * grad;
  }
  return result;
}

double finite_diff_check(const VelocityField& field, const ContextFeatures& ctx, double eps,
                         int embodiment, std::uint64_t probe_seed) {
  if (!(eps >= 1e-7 && eps <= 1e-3))
    throw std::invalid_argument("finite_diff_check: eps must lie in [1e-7, 1e-3]");
  const auto& arch = field.arch();
  Rng rng(probe_seed);
  Mat target(arch.chunk_len, arch.action_dim), x0(arch.chunk_len, arch.action_dim);
  for (int i = 0; i < target.rows(); ++i)
    for (int j = 0; j < target.cols(); ++j) {
      target(i, j) = rng.normal();
      x0(i, j) = rng.normal();
    }
  const double t = rng.uniform();

  const auto analytic = fm_loss(field, target, x0, t, ctx, embodiment);
  VelocityField probe = field;
  double worst = 0.0;
  for (Eigen::Index p = 0; p < probe.params().size(); ++p) {
    const double saved = probe.params()[p];
    probe.mutable_params()[p] = saved + eps;
    const double lp = fm_loss(probe, target, x0, t, ctx, embodiment).loss;
    probe.mutable_params()[p] = saved - eps;
    const double lm = fm_loss(probe, target, x0, t, ctx, embodiment).loss;
    probe.mutable_params()[p] = saved;
    const double fd = (lp - lm) / (2.0 * eps);
    const double a = analytic.dparams[p];
    const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
    worst = std::max(worst, rel);
  }
  return worst;
}

void save_field(const VelocityField& field, const std::string& path, std::uint64_t seed) {
  const auto& arch = field.arch();
  nlohmann::json header;
  header["arch"] = {{"hidden", arch.hidden},
                    {"activation", "tanh"},
                    {"n_embodiments", arch.n_embodiments}};
  header["d_model"] = arch.d_model;
  header["T"] = arch.chunk_len;
  header["d"] = arch.action_dim;
  header["seed"] = seed;
  std::vector<double> data(field.params().data(), field.params().data() + field.params().size());
  io::save_flat_params(path, std::move(header), data);
}

VelocityField load_field(const std::string& path) {
  auto [header, data] = io::load_flat_params(path);
  NetArch arch;
  arch.chunk_len = header.at("T").get<int>();
  arch.action_dim = header.at("d").get<int>();
  arch.d_model = header.at("d_model").get<int>();
  arch.hidden = header.at("arch").at("hidden").get<std::vector<int>>();
  arch.n_embodiments = header.at("arch").at("n_embodiments").get<int>();
  Vec params = Eigen::Map<const Vec>(data.data(), static_cast<Eigen::Index>(data.size()));
  return VelocityField(std::move(arch), std::move(params));
}

}  // namespace uniflow::flow
