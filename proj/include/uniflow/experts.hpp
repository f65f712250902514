// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <vector>

#include "uniflow/flow.hpp"

namespace uniflow::experts {

using flow::Mat;
using flow::Vec;

struct DenseLayer {
  Mat w;
  Vec b;
  static DenseLayer init(int out_dim, int in_dim, Rng rng);
};

/// Two-tier action module: shared foundation layers feeding sparsely routed
/// specialist experts. Foundation layers use tanh; specialists are linear
/// maps of identical shape.
struct MoFStack {
  std::vector<DenseLayer> foundation;
  std::vector<DenseLayer> specialists;  // E experts, one layer each
  Mat router_w;                         // E x ctx_dim
  Vec router_b;                         // E
  int top_k = 1;

  int expert_count() const { return static_cast<int>(specialists.size()); }
  void validate() const;
  static MoFStack init(int input_dim, int hidden_dim, int output_dim, int n_experts, int top_k,
                       int ctx_dim, Rng rng);

  Vec foundation_forward(const Vec& input) const;
};

struct Routing {
  Vec weights;              // length E, exactly top_k nonzeros summing to 1
  std::vector<int> active;  // ascending expert indices
};

/// Softmax over the top_k largest router logits (ties to the lower index);
/// all other weights are exactly zero.
Routing route_topk(const MoFStack& stack, const Vec& ctx_summary);

/// foundation(input), then the routed convex combination of specialists.
Vec mof_forward(const MoFStack& stack, const Vec& input, const Vec& ctx_summary);

/// One SGD step on the squared error target. Gradients reach the foundation,
/// the active specialists, and the router rows of active experts only;
/// parameters of inactive experts are untouched bit-exactly.
double mof_train_step(MoFStack& stack, const Vec& input, const Vec& ctx_summary,
                      const Vec& target, double lr);

/// Slot-wise adapter bank aligned with the layout's slot groups.
struct AdapterBank {
  std::vector<Mat> w;  // K adapters, each d_out x d_in
  std::vector<Vec> b;

  int adapter_count() const { return static_cast<int>(w.size()); }
  static AdapterBank init(int groups, int d_out, int d_in, Rng rng);
  static AdapterBank zeros(int groups, int d_out, int d_in);
};

/// Applies only the adapters of active slot groups. Supplying features for
/// an inactive group is rejected (cross-embodiment leakage guard).
std::map<int, Vec> esa_apply(const AdapterBank& bank, const std::vector<int>& active_groups,
                             const std::map<int, Vec>& features);

/// One masked SGD step: only adapters in the active set receive gradients.
double esa_train_step(AdapterBank& bank, const std::vector<int>& active_groups,
                      const std::map<int, Vec>& features, const std::map<int, Vec>& targets,
                      double lr);

/// Active-parameter accounting: foundation + top_k specialists + the given
/// adapters, versus the total across everything.
struct ParamCounts {
  std::int64_t total = 0;
  std::int64_t active = 0;
};
ParamCounts count_params(const MoFStack& stack, const AdapterBank& bank,
                         const std::vector<int>& active_groups);

/// Serialization in the shared flat-array + JSON-header format.
void save_stack(const MoFStack& stack, const std::string& path, std::uint64_t seed);
MoFStack load_stack(const std::string& path);
void save_bank(const AdapterBank& bank, const std::string& path, std::uint64_t seed);
AdapterBank load_bank(const std::string& path);

}  // namespace uniflow::experts
