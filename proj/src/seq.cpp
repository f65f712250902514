// SPDX-License-Identifier: Apache-2.0
#include "uniflow/seq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "uniflow/io.hpp"

namespace uniflow::seq {

const char* to_string(Modality m) {
  switch (m) {
    case Modality::vision: return "vision";
    case Modality::text: return "text";
    case Modality::state: return "state";
    case Modality::action: return "action";
  }
  return "?";
}

const char* to_string(Role r) {
  switch (r) {
    case Role::query: return "query";
    case Role::answer_fm: return "answer_fm";
    case Role::answer_mask: return "answer_mask";
  }
  return "?";
}

int TokenStream::query_len() const {
  int n = 0;
  for (const auto& t : tokens) n += (t.role == Role::query);
  return n;
}

TokenStream serialize_qa(const std::vector<Segment>& segments) {
  bool answer_seen = false;
  bool query_seen = false;
  for (const auto& s : segments) {
    if (s.length < 1) throw std::invalid_argument("serialize_qa: segment length must be >= 1");
    if (s.role == Role::query) {
      if (answer_seen)
        throw std::invalid_argument("serialize_qa: query segment after an answer segment");
      query_seen = true;
    } else {
      answer_seen = true;
    }
  }
  if (!query_seen) throw std::invalid_argument("serialize_qa: at least one query segment required");

  TokenStream stream;
  for (const auto& s : segments) {
    const bool bracketed = s.modality != Modality::text;
    if (bracketed) stream.tokens.push_back({s.modality, s.role, true});
    for (int i = 0; i < s.length; ++i) {
      const int pos = stream.size();
      stream.tokens.push_back({s.modality, s.role, false});
      if (s.role == Role::query) continue;  // queries never carry loss
      // text answers route to the text loss; motion answers to FM or MASK
      if (s.modality == Modality::text)
        stream.omega_text.push_back(pos);
      else if (s.role == Role::answer_fm)
        stream.omega_fm.push_back(pos);
      else
        stream.omega_mask.push_back(pos);
    }
    if (bracketed) stream.tokens.push_back({s.modality, s.role, true});
  }
  return stream;
}

MaskMat gate_matrix(int query_len, int fm_len, int mask_len) {
  if (query_len < 0 || fm_len < 0 || mask_len < 0)
    throw std::invalid_argument("gate_matrix: negative span length");
  const int n = query_len + fm_len + mask_len;
  MaskMat mask(n, n);
  auto block_of = [&](int i) { return i < query_len ? 0 : (i < query_len + fm_len ? 1 : 2); };
  // visibility of block row -> block col
  const int gate[3][3] = {{1, 0, 0}, {1, 1, 0}, {1, 0, 1}};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      mask(i, j) = gate[block_of(i)][block_of(j)] && j <= i;  // composed with causal
  return mask;
}

std::vector<int> assign_positions(int query_len, int fm_len, int mask_len) {
  if (query_len < 0 || fm_len < 0 || mask_len < 0)
    throw std::invalid_argument("assign_positions: negative span length");
  std::vector<int> pe;
  pe.reserve(static_cast<size_t>(query_len + fm_len + mask_len));
  for (int j = 0; j < query_len; ++j) pe.push_back(j);
  const int p0 = query_len;  // max_j(j+1) over the query; 0 when empty
  for (int r = 0; r < fm_len; ++r) pe.push_back(p0 + r);
  for (int r = 0; r < mask_len; ++r) pe.push_back(p0 + r);
  return pe;
}

std::vector<int> sample_mask(int t_z, double rho, Rng& rng) {
  if (t_z < 1) throw std::invalid_argument("sample_mask: t_z must be >= 1");
  if (!(rho > 0.0 && rho < 1.0)) throw std::invalid_argument("sample_mask: rho must lie in (0,1)");
  // nearest integer, half rounds down, at least one masked position
  const double exact = rho * t_z;
  int count = static_cast<int>(std::ceil(exact - 0.5));
  count = std::max(1, std::min(count, t_z));

  std::vector<int> pool(static_cast<size_t>(t_z));
  for (int i = 0; i < t_z; ++i) pool[static_cast<size_t>(i)] = i;
  for (int i = 0; i < count; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(t_z - i)));
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  std::vector<int> out(pool.begin(), pool.begin() + count);
  std::sort(out.begin(), out.end());
  return out;
}

Mat softmax_masked(const Mat& scores, const MaskMat& mask) {
  if (scores.rows() != mask.rows() || scores.cols() != mask.cols())
    throw std::invalid_argument("softmax_masked: shape mismatch");
  Mat out = Mat::Zero(scores.rows(), scores.cols());
  for (int i = 0; i < scores.rows(); ++i) {
    double max_score = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < scores.cols(); ++j)
      if (mask(i, j)) max_score = std::max(max_score, scores(i, j));
    if (max_score == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
    double denom = 0.0;
    for (int j = 0; j < scores.cols(); ++j)
      if (mask(i, j)) denom += std::exp(scores(i, j) - max_score);
    for (int j = 0; j < scores.cols(); ++j)
      if (mask(i, j)) out(i, j) = std::exp(scores(i, j) - max_score) / denom;
  }
  return out;
}

CeLossGrad masked_ce_loss(const Mat& logits, const std::vector<int>& targets,
                          const std::vector<int>& omega_mask) {
  if (!logits.allFinite()) throw std::invalid_argument("masked_ce_loss: non-finite logits");
  if (targets.size() != static_cast<size_t>(logits.rows()))
    throw std::invalid_argument("masked_ce_loss: one target per logit row required");
  const int codes = static_cast<int>(logits.cols());
  CeLossGrad out;
  out.dlogits = Mat::Zero(logits.rows(), logits.cols());
  for (const int i : omega_mask) {
    if (i < 0 || i >= logits.rows())
      throw std::invalid_argument("masked_ce_loss: masked index out of range");
    const int z = targets[static_cast<size_t>(i)];
    if (z < 1 || z > codes)
      throw std::invalid_argument("masked_ce_loss: target outside the codebook range [1, |C|]");
    const double max_logit = logits.row(i).maxCoeff();
    double denom = 0.0;
    for (int c = 0; c < codes; ++c) denom += std::exp(logits(i, c) - max_logit);
    const double log_denom = std::log(denom) + max_logit;
    out.loss += log_denom - logits(i, z - 1);
    for (int c = 0; c < codes; ++c) {
      const double p = std::exp(logits(i, c) - max_logit) / denom;
      out.dlogits(i, c) = p - (c == z - 1 ? 1.0 : 0.0);
    }
  }
  return out;
}

double joint_loss(const double* l_text, const double* l_fm, const double* l_mask,
                  const JointWeights& w) {
  if (w.text < 0.0 || w.act < 0.0 || w.fm < 0.0 || w.mask < 0.0)
    throw std::invalid_argument("joint_loss: negative weights rejected");
  if (l_text == nullptr && l_fm == nullptr && l_mask == nullptr)
    throw std::invalid_argument("joint_loss: at least one loss part required");
  const double text = l_text ? *l_text : 0.0;
  const double fm = l_fm ? *l_fm : 0.0;
  const double mask = l_mask ? *l_mask : 0.0;
  return w.text * text + w.act * (w.fm * fm + w.mask * mask);
}

std::vector<int> Codebook::quantize(const Mat& rows) const {
  std::vector<int> ids;
  ids.reserve(static_cast<size_t>(rows.rows()));
  for (int i = 0; i < rows.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < size(); ++c) {
      const double d = (rows.row(i) - centroids.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    ids.push_back(best + 1);  // 1-based codebook ids
  }
  return ids;
}

Codebook Codebook::train_kmeans(const Mat& rows, int codes, int iterations, Rng rng) {
  if (rows.rows() < codes) throw std::invalid_argument("kmeans: fewer samples than codes");
  Codebook book;
  book.centroids.resize(codes, rows.cols());
  // seed centroids from distinct random rows
  std::vector<int> pool(static_cast<size_t>(rows.rows()));
  for (size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);
  for (int c = 0; c < codes; ++c) {
    const int j = c + static_cast<int>(rng.below(pool.size() - static_cast<size_t>(c)));
    std::swap(pool[static_cast<size_t>(c)], pool[static_cast<size_t>(j)]);
    book.centroids.row(c) = rows.row(pool[static_cast<size_t>(c)]);
  }
  std::vector<int> assignment(static_cast<size_t>(rows.rows()));
  for (int it = 0; it < iterations; ++it) {
    for (int i = 0; i < rows.rows(); ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < codes; ++c) {
        const double d = (rows.row(i) - book.centroids.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      assignment[static_cast<size_t>(i)] = best;
    }
    Mat sums = Mat::Zero(codes, rows.cols());
    std::vector<int> counts(static_cast<size_t>(codes), 0);
    for (int i = 0; i < rows.rows(); ++i) {
      sums.row(assignment[static_cast<size_t>(i)]) += rows.row(i);
      counts[static_cast<size_t>(assignment[static_cast<size_t>(i)])]++;
    }
    for (int c = 0; c < codes; ++c)
      if (counts[static_cast<size_t>(c)] > 0)
        book.centroids.row(c) = sums.row(c) / counts[static_cast<size_t>(c)];
  }
  return book;
}

void Codebook::save(const std::string& path, std::uint64_t seed) const {
  nlohmann::json header;
  header["component"] = "motion_codebook";
  header["codes"] = size();
  header["dim"] = centroids.cols();
  header["seed"] = seed;
  std::vector<double> flat(centroids.data(), centroids.data() + centroids.size());
  io::save_flat_params(path, std::move(header), flat);
}

Codebook Codebook::load(const std::string& path) {
  auto [header, flat] = io::load_flat_params(path);
  const int codes = header.at("codes").get<int>();
  const int dim = header.at("dim").get<int>();
  Codebook book;
  book.centroids = Eigen::Map<const Mat>(flat.data(), codes, dim);
  return book;
}

}  // namespace uniflow::seq
