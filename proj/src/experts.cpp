// SPDX-License-Identifier: Apache-2.0
#include "uniflow/experts.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "uniflow/errors.hpp"
#include "uniflow/io.hpp"

namespace uniflow::experts {

DenseLayer DenseLayer::init(int out_dim, int in_dim, Rng rng) {
  DenseLayer l;
  l.w.resize(out_dim, in_dim);
  const double scale = 1.0 / std::sqrt(in_dim);
  for (int i = 0; i < out_dim; ++i)
    for (int j = 0; j < in_dim; ++j) l.w(i, j) = scale * rng.normal();
  l.b = Vec::Zero(out_dim);
  return l;
}

void MoFStack::validate() const {
  if (foundation.empty() || specialists.empty())
    throw std::invalid_argument("MoFStack: foundation and specialists must be non-empty");
  if (top_k < 1 || top_k > expert_count())
    throw std::invalid_argument("MoFStack: top_k must lie in [1, E]");
  const auto rows = specialists.front().w.rows();
  const auto cols = specialists.front().w.cols();
  for (const auto& s : specialists)
    if (s.w.rows() != rows || s.w.cols() != cols)
      throw std::invalid_argument("MoFStack: specialists must share input/output dimensions");
  if (router_w.rows() != expert_count())
    throw std::invalid_argument("MoFStack: router must emit one logit per expert");
}

MoFStack MoFStack::init(int input_dim, int hidden_dim, int output_dim, int n_experts, int top_k,
                        int ctx_dim, Rng rng) {
  MoFStack s;
  s.foundation.push_back(DenseLayer::init(hidden_dim, input_dim, rng.child("f0")));
  s.foundation.push_back(DenseLayer::init(hidden_dim, hidden_dim, rng.child("f1")));
  for (int e = 0; e < n_experts; ++e)
    s.specialists.push_back(DenseLayer::init(output_dim, hidden_dim, rng.child(0x1000 + e)));
  s.router_w.resize(n_experts, ctx_dim);
  Rng router_rng = rng.child("router");
  const double scale = 1.0 / std::sqrt(ctx_dim);
  for (int i = 0; i < n_experts; ++i)
    for (int j = 0; j < ctx_dim; ++j) s.router_w(i, j) = scale * router_rng.normal();
  s.router_b = Vec::Zero(n_experts);
  s.top_k = top_k;
  s.validate();
  return s;
}

Vec MoFStack::foundation_forward(const Vec& input) const {
  Vec a = input;
  for (const auto& l : foundation) a = (l.w * a + l.b).array().tanh();
  return a;
}

Routing route_topk(const MoFStack& stack, const Vec& ctx_summary) {
  stack.validate();
  if (!ctx_summary.allFinite()) throw std::invalid_argument("route_topk: non-finite context");
  const Vec logits = stack.router_w * ctx_summary + stack.router_b;
  std::vector<int> order(static_cast<size_t>(stack.expert_count()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits[a] > logits[b]; });  // ties keep lower index
  Routing r;
  r.active.assign(order.begin(), order.begin() + stack.top_k);
  std::sort(r.active.begin(), r.active.end());

  double max_logit = -std::numeric_limits<double>::infinity();
  for (const int e : r.active) max_logit = std::max(max_logit, logits[e]);
  double denom = 0.0;
  r.weights = Vec::Zero(stack.expert_count());
  for (const int e : r.active) {
    r.weights[e] = std::exp(logits[e] - max_logit);
    denom += r.weights[e];
  }
  for (const int e : r.active) r.weights[e] /= denom;
  return r;
}

Vec mof_forward(const MoFStack& stack, const Vec& input, const Vec& ctx_summary) {
  const Routing r = route_topk(stack, ctx_summary);
  const Vec h = stack.foundation_forward(input);
  Vec out = Vec::Zero(stack.specialists.front().w.rows());
  for (const int e : r.active) {
    const auto& s = stack.specialists[static_cast<size_t>(e)];
    out += r.weights[e] * (s.w * h + s.b);
  }
  if (!out.allFinite()) throw DivergenceError("mof_forward: non-finite output");
  return out;
}

double mof_train_step(MoFStack& stack, const Vec& input, const Vec& ctx_summary,
                      const Vec& target, double lr) {
  const Routing r = route_topk(stack, ctx_summary);

  // forward with activations retained
  std::vector<Vec> acts;  // post-tanh per foundation layer
  Vec a = input;
  for (const auto& l : stack.foundation) {
    a = (l.w * a + l.b).array().tanh();
    acts.push_back(a);
  }
  const Vec& h = acts.back();
  std::vector<Vec> expert_out(static_cast<size_t>(stack.expert_count()));
  Vec out = Vec::Zero(stack.specialists.front().w.rows());
  for (const int e : r.active) {
    const auto& s = stack.specialists[static_cast<size_t>(e)];
    expert_out[static_cast<size_t>(e)] = s.w * h + s.b;
    out += r.weights[e] * expert_out[static_cast<size_t>(e)];
  }
  const Vec residual = out - target;
  const double loss = residual.squaredNorm();
  const Vec dout = 2.0 * residual;

  // specialists + routing weights (softmax over the active set only)
  Vec dh = Vec::Zero(h.size());
  Vec dweights = Vec::Zero(stack.expert_count());
  for (const int e : r.active) {
    auto& s = stack.specialists[static_cast<size_t>(e)];
    const Vec dse = r.weights[e] * dout;
    dh += s.w.transpose() * dse;
    dweights[e] = dout.dot(expert_out[static_cast<size_t>(e)]);
    s.w -= lr * (dse * h.transpose());
    s.b -= lr * dse;
  }
  // softmax jacobian restricted to active logits
  double weighted = 0.0;
  for (const int e : r.active) weighted += r.weights[e] * dweights[e];
  for (const int e : r.active) {
    const double dlogit = r.weights[e] * (dweights[e] - weighted);
    stack.router_w.row(e) -= lr * dlogit * ctx_summary.transpose();
    stack.router_b[e] -= lr * dlogit;
  }
  // foundation
  Vec delta = dh;
  for (int l = static_cast<int>(stack.foundation.size()) - 1; l >= 0; --l) {
    delta = delta.array() * (1.0 - acts[static_cast<size_t>(l)].array().square());
    const Vec& prev = (l == 0) ? input : acts[static_cast<size_t>(l - 1)];
    auto& layer = stack.foundation[static_cast<size_t>(l)];
    const Vec db = delta;
    Vec next = layer.w.transpose() * delta;
    layer.w -= lr * (db * prev.transpose());
    layer.b -= lr * db;
    delta = next;
  }
  return loss;
}

AdapterBank AdapterBank::init(int groups, int d_out, int d_in, Rng rng) {
  AdapterBank bank;
  for (int k = 0; k < groups; ++k) {
    const auto layer = DenseLayer::init(d_out, d_in, rng.child(0x2000 + k));
    bank.w.push_back(layer.w);
    bank.b.push_back(layer.b);
  }
  return bank;
}

AdapterBank AdapterBank::zeros(int groups, int d_out, int d_in) {
  AdapterBank bank;
  for (int k = 0; k < groups; ++k) {
    bank.w.push_back(Mat::Zero(d_out, d_in));
    bank.b.push_back(Vec::Zero(d_out));
  }
  return bank;
}

namespace {

void check_features(const AdapterBank& bank, const std::vector<int>& active_groups,
                    const std::map<int, Vec>& features) {
  for (const auto& [k, f] : features) {
    if (k < 0 || k >= bank.adapter_count())
      throw std::invalid_argument("esa: adapter index out of range");
    if (std::find(active_groups.begin(), active_groups.end(), k) == active_groups.end())
      throw std::invalid_argument("esa: feature supplied for inactive slot group " +
                                  std::to_string(k));
    if (f.size() != bank.w[static_cast<size_t>(k)].cols())
      throw std::invalid_argument("esa: feature width mismatch for group " + std::to_string(k));
  }
}

}  // namespace

std::map<int, Vec> esa_apply(const AdapterBank& bank, const std::vector<int>& active_groups,
                             const std::map<int, Vec>& features) {
  check_features(bank, active_groups, features);
  std::map<int, Vec> out;
  for (const auto& [k, f] : features)
    out[k] = bank.w[static_cast<size_t>(k)] * f + bank.b[static_cast<size_t>(k)];
  return out;
}

double esa_train_step(AdapterBank& bank, const std::vector<int>& active_groups,
                      const std::map<int, Vec>& features, const std::map<int, Vec>& targets,
                      double lr) {
  const auto out = esa_apply(bank, active_groups, features);
  double loss = 0.0;
  for (const auto& [k, y] : out) {
    const auto it = targets.find(k);
    if (it == targets.end())
      throw std::invalid_argument("esa_train_step: missing target for group " + std::to_string(k));
    const Vec residual = y - it->second;
    loss += residual.squaredNorm();
    const Vec dout = 2.0 * residual;
    bank.w[static_cast<size_t>(k)] -= lr * (dout * features.at(k).transpose());
    bank.b[static_cast<size_t>(k)] -= lr * dout;
  }
  return loss;
}

ParamCounts count_params(const MoFStack& stack, const AdapterBank& bank,
                         const std::vector<int>& active_groups) {
  ParamCounts c;
  std::int64_t foundation = 0;
  for (const auto& l : stack.foundation) foundation += l.w.size() + l.b.size();
  const std::int64_t per_expert =
      stack.specialists.front().w.size() + stack.specialists.front().b.size();
  const std::int64_t router = stack.router_w.size() + stack.router_b.size();
  std::int64_t adapters_total = 0;
  for (int k = 0; k < bank.adapter_count(); ++k)
    adapters_total += bank.w[static_cast<size_t>(k)].size() + bank.b[static_cast<size_t>(k)].size();
  std::int64_t adapters_active = 0;
  for (const int k : active_groups)
    adapters_active +=
        bank.w[static_cast<size_t>(k)].size() + bank.b[static_cast<size_t>(k)].size();

  c.total = foundation + per_expert * stack.expert_count() + router + adapters_total;
  c.active = foundation + per_expert * stack.top_k + router + adapters_active;
  return c;
}

namespace {

void append(std::vector<double>& flat, const Mat& m) {
  flat.insert(flat.end(), m.data(), m.data() + m.size());
}
void append(std::vector<double>& flat, const Vec& v) {
  flat.insert(flat.end(), v.data(), v.data() + v.size());
}

Eigen::Index take(const std::vector<double>& flat, Eigen::Index pos, Mat& m, int rows, int cols) {
  m = Eigen::Map<const Mat>(flat.data() + pos, rows, cols);
  return pos + static_cast<Eigen::Index>(rows) * cols;
}
Eigen::Index take(const std::vector<double>& flat, Eigen::Index pos, Vec& v, int n) {
  v = Eigen::Map<const Vec>(flat.data() + pos, n);
  return pos + n;
}

}  // namespace

void save_stack(const MoFStack& stack, const std::string& path, std::uint64_t seed) {
  nlohmann::json header;
  header["component"] = "mof_stack";
  header["arch"] = {{"foundation_dims",
                     nlohmann::json::array({stack.foundation[0].w.cols(), stack.foundation[0].w.rows(),
                                            stack.foundation[1].w.rows()})},
                    {"experts", stack.expert_count()},
                    {"expert_out", stack.specialists.front().w.rows()},
                    {"top_k", stack.top_k},
                    {"ctx_dim", stack.router_w.cols()}};
  header["seed"] = seed;
  std::vector<double> flat;
  for (const auto& l : stack.foundation) {
    append(flat, l.w);
    append(flat, l.b);
  }
  for (const auto& s : stack.specialists) {
    append(flat, s.w);
    append(flat, s.b);
  }
  append(flat, stack.router_w);
  append(flat, stack.router_b);
  io::save_flat_params(path, std::move(header), flat);
}

MoFStack load_stack(const std::string& path) {
  auto [header, flat] = io::load_flat_params(path);
  const auto dims = header.at("arch").at("foundation_dims").get<std::vector<int>>();
  const int experts = header.at("arch").at("experts").get<int>();
  const int expert_out = header.at("arch").at("expert_out").get<int>();
  const int ctx_dim = header.at("arch").at("ctx_dim").get<int>();
  MoFStack s;
  s.top_k = header.at("arch").at("top_k").get<int>();
  Eigen::Index pos = 0;
  s.foundation.resize(2);
  pos = take(flat, pos, s.foundation[0].w, dims[1], dims[0]);
  pos = take(flat, pos, s.foundation[0].b, dims[1]);
  pos = take(flat, pos, s.foundation[1].w, dims[2], dims[1]);
  pos = take(flat, pos, s.foundation[1].b, dims[2]);
  s.specialists.resize(static_cast<size_t>(experts));
  for (auto& sp : s.specialists) {
    pos = take(flat, pos, sp.w, expert_out, dims[2]);
    pos = take(flat, pos, sp.b, expert_out);
  }
  pos = take(flat, pos, s.router_w, experts, ctx_dim);
  pos = take(flat, pos, s.router_b, experts);
  s.validate();
  return s;
}

void save_bank(const AdapterBank& bank, const std::string& path, std::uint64_t seed) {
  nlohmann::json header;
  header["component"] = "esa_bank";
  header["arch"] = {{"groups", bank.adapter_count()},
                    {"d_out", bank.w.front().rows()},
                    {"d_in", bank.w.front().cols()}};
  header["seed"] = seed;
  std::vector<double> flat;
  for (int k = 0; k < bank.adapter_count(); ++k) {
    append(flat, bank.w[static_cast<size_t>(k)]);
    append(flat, bank.b[static_cast<size_t>(k)]);
  }
  io::save_flat_params(path, std::move(header), flat);
}

AdapterBank load_bank(const std::string& path) {
  auto [header, flat] = io::load_flat_params(path);
  const int groups = header.at("arch").at("groups").get<int>();
  const int d_out = header.at("arch").at("d_out").get<int>();
  const int d_in = header.at("arch").at("d_in").get<int>();
  AdapterBank bank;
  Eigen::Index pos = 0;
  bank.w.resize(static_cast<size_t>(groups));
  bank.b.resize(static_cast<size_t>(groups));
  for (int k = 0; k < groups; ++k) {
    pos = take(flat, pos, bank.w[static_cast<size_t>(k)], d_out, d_in);
    pos = take(flat, pos, bank.b[static_cast<size_t>(k)], d_out);
  }
  return bank;
}

}  // namespace uniflow::experts
