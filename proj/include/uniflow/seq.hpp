// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "uniflow/rng.hpp"

namespace uniflow::seq {

using Mat = Eigen::MatrixXd;
using MaskMat = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;
using Vec = Eigen::VectorXd;

enum class Modality { vision, text, state, action };
enum class Role { query, answer_fm, answer_mask };

const char* to_string(Modality m);
const char* to_string(Role r);

struct Segment {
  Modality modality = Modality::text;
  int length = 0;  // content tokens, excluding sentinels
  Role role = Role::query;
};

/// A serialized training sample: query segments first, then answer segments.
/// Non-text segments are bracketed by begin/end sentinel tokens. Loss-index
/// sets are derived from the roles; sentinels and queries never carry loss.
struct TokenStream {
  struct Token {
    Modality modality;
    Role role;
    bool sentinel = false;
  };
  std::vector<Token> tokens;
  std::vector<int> omega_text;  // answer text content positions
  std::vector<int> omega_fm;    // continuous action answer positions
  std::vector<int> omega_mask;  // discrete motion answer positions

  int size() const { return static_cast<int>(tokens.size()); }
  int query_len() const;
};

TokenStream serialize_qa(const std::vector<Segment>& segments);

/// Token-level attention gate for [query ; fm answer ; mask answer]: the
/// block structure [[1,0,0],[1,1,0],[1,0,1]] composed elementwise with the
/// causal mask. entry(i, j) == 1 iff token i may attend to token j.
MaskMat gate_matrix(int query_len, int fm_len, int mask_len);

/// Positional indices: identity on the query; both answer segments restart
/// at p0 = query_len (0 for an empty query) and count up independently.
std::vector<int> assign_positions(int query_len, int fm_len, int mask_len);

/// Uniform sample without replacement of round(rho * t_z) indices
/// (round-half-down, minimum 1) from {0, ..., t_z-1}, ascending.
std::vector<int> sample_mask(int t_z, double rho, Rng& rng);

/// Row-wise softmax with exact zeros on masked-out entries.
Mat softmax_masked(const Mat& scores, const MaskMat& mask);

struct CeLossGrad {
  double loss = 0.0;
  Mat dlogits;  // same shape as logits; zero rows off the masked set
};

/// Cross-entropy over masked positions only. `logits` has one row per token
/// position; `targets` are 1-based codebook ids; positions outside
/// `omega_mask` contribute neither loss nor gradient.
CeLossGrad masked_ce_loss(const Mat& logits, const std::vector<int>& targets,
                          const std::vector<int>& omega_mask);

struct JointWeights {
  double text = 1.0;
  double act = 1.0;
  double fm = 1.0;    // lambda_1
  double mask = 0.1;  // lambda_2
};

/// L = w_text * L_text + w_act * (w_fm * L_FM + w_mask * L_MASK); absent
/// parts contribute zero; negative weights are rejected.
double joint_loss(const double* l_text, const double* l_fm, const double* l_mask,
                  const JointWeights& w);

/// Fixed k-means codebook quantizing action rows into 1-based token ids; the
/// motion-tokenizer stand-in that feeds the masked-prediction channel.
struct Codebook {
  Mat centroids;  // |C| x dim
  int size() const { return static_cast<int>(centroids.rows()); }
  std::vector<int> quantize(const Mat& rows) const;
  static Codebook train_kmeans(const Mat& rows, int codes, int iterations, Rng rng);
  void save(const std::string& path, std::uint64_t seed) const;
  static Codebook load(const std::string& path);
};

}  // namespace uniflow::seq
