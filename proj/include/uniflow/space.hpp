// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <map>
#include <string>
#include <vector>

namespace uniflow::space {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Semantic slot families of the unified state-action space. Values carry
/// physical units; no statistical normalization is ever applied.
enum class SlotKind {
  arm_joint_rad,
  eef_delta_m,
  eef_rot_axis_angle,
  gripper_width_m,
  finger_rad,
  base_vel,
  base_heading,
};

const char* to_string(SlotKind kind);
SlotKind slot_kind_from_string(const std::string& s);

struct SlotGroup {
  std::string name;
  int width = 0;
  SlotKind kind = SlotKind::arm_joint_rad;
};

/// Fixed, ordered partition of the unified vector into semantically isolated
/// slot groups. Slot indices of distinct groups are disjoint and contiguous
/// in declaration order; dim() is the sum of widths.
class SlotLayout {
 public:
  SlotLayout() = default;
  explicit SlotLayout(std::vector<SlotGroup> groups);

  int dim() const { return dim_; }
  const std::vector<SlotGroup>& groups() const { return groups_; }
  int group_count() const { return static_cast<int>(groups_.size()); }

  /// First slot index of group g.
  int group_offset(int g) const { return offsets_.at(static_cast<size_t>(g)); }
  /// Group owning a slot index.
  int group_of_slot(int slot) const;
  SlotKind kind_of_slot(int slot) const;
  int group_index(const std::string& name) const;

  /// The layout every experiment starts from: two 7-DoF arms, per-arm EEF
  /// delta/rotation, two 6-DoF hands, two gripper widths, and a mobile base.
  static SlotLayout default_layout();

 private:
  std::vector<SlotGroup> groups_;
  std::vector<int> offsets_;
  int dim_ = 0;
};

/// Per-embodiment inference-delay distribution over {0, ..., d_max-1}
/// control steps. `pmf` always sums to 1 within 1e-12.
struct DelayModel {
  int d_max = 1;
  std::vector<double> pmf;  // size d_max

  static DelayModel uniform(int d_max);
  static DelayModel point_mass(int d);
  static DelayModel from_pmf(std::vector<double> p);
  void validate() const;
};

/// One robot morphology: the slots it drives, its control period, and its
/// latency characteristics. Two embodiments may share slots (same arm,
/// different hand).
struct EmbodimentSpec {
  std::string id;
  std::vector<int> active_slots;  // ascending, unique, within [0, d)
  double control_period_s = 0.0;
  double latency_budget_s = 0.0;
  DelayModel delay_model = DelayModel::uniform(1);

  EmbodimentSpec() = default;
  EmbodimentSpec(std::string id, std::vector<int> slots, double control_period_s,
                 double latency_budget_s, const SlotLayout& layout);

  int active_count() const { return static_cast<int>(active_slots.size()); }
  /// Slot-group indices intersecting the active slots (for adapter banks).
  std::vector<int> active_groups(const SlotLayout& layout) const;
};

/// Sparse slot assignment: raw embodiment-order values land in the active
/// slots (ascending), all other slots are exactly zero.
Vec project(const Vec& raw, const EmbodimentSpec& emb, const SlotLayout& layout);

/// Inverse of project: the unified vector restricted to the active slots.
Vec extract(const Vec& unified, const EmbodimentSpec& emb);

struct Pose {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
};

/// Canonical axis-angle (theta * unit_axis, theta in [0, pi]) from a
/// quaternion. The double cover is resolved by forcing w >= 0; at
/// theta == pi the axis sign is fixed so its first nonzero component is
/// positive. A quaternion must have norm within 1e-6 of 1 (it is then
/// renormalized); the zero quaternion is rejected.
Eigen::Vector3d to_axis_angle(const Eigen::Quaterniond& q);

/// Same, from intrinsic XYZ Euler angles (radians).
Eigen::Vector3d to_axis_angle_euler_xyz(const Eigen::Vector3d& euler);

Eigen::Matrix3d axis_angle_to_matrix(const Eigen::Vector3d& aa);
Eigen::Vector3d matrix_to_axis_angle(const Eigen::Matrix3d& rot);

/// World-frame position delta and right-relative rotation delta
/// (axis-angle of R_t^-1 * R_t1) between two poses.
Eigen::Matrix<double, 6, 1> delta_pose(const Pose& pose_t, const Pose& pose_t1);

/// Applies a delta_pose result to a pose; recovers the second pose of the
/// pair to 1e-9.
Pose apply_delta(const Pose& pose_t, const Eigen::Matrix<double, 6, 1>& delta);

/// Per-kind clamp bounds. Physical single-step magnitudes, not statistics.
struct ClipBounds {
  std::map<SlotKind, std::pair<double, double>> bounds;
  static ClipBounds defaults();
  void validate() const;
};

/// Clamps every slot value to its kind's bounds. Idempotent; applies no
/// rescaling. In-bounds vectors pass through bit-exactly.
std::vector<Vec> clip_outliers(const std::vector<Vec>& series, const ClipBounds& bounds,
                               const SlotLayout& layout);

struct SpaceConfig {
  SlotLayout layout;
  std::vector<EmbodimentSpec> embodiments;

  const EmbodimentSpec& embodiment(const std::string& id) const;
};

/// Loads {"groups":[{"name","width","kind"}], "embodiments":[{"id",
/// "active_slots","control_period_s","latency_budget_s","delay_model"}]}.
SpaceConfig load_space_config(const std::string& json_text);
SpaceConfig load_space_config_file(const std::string& path);

}  // namespace uniflow::space
