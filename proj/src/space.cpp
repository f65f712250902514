// SPDX-License-Identifier: Apache-2.0
#include "uniflow/space.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "uniflow/errors.hpp"

namespace uniflow::space {

namespace {

constexpr double kPi = 3.14159265358979323846;

void require_finite(const Vec& v, const char* what) {
  if (!v.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

}  // namespace

const char* to_string(SlotKind kind) {
  switch (kind) {
    case SlotKind::arm_joint_rad: return "arm_joint_rad";
    case SlotKind::eef_delta_m: return "eef_delta_m";
    case SlotKind::eef_rot_axis_angle: return "eef_rot_axis_angle";
    case SlotKind::gripper_width_m: return "gripper_width_m";
    case SlotKind::finger_rad: return "finger_rad";
    case SlotKind::base_vel: return "base_vel";
    case SlotKind::base_heading: return "base_heading";
  }
  return "?";
}

SlotKind slot_kind_from_string(const std::string& s) {
  if (s == "arm_joint_rad") return SlotKind::arm_joint_rad;
  if (s == "eef_delta_m") return SlotKind::eef_delta_m;
  if (s == "eef_rot_axis_angle") return SlotKind::eef_rot_axis_angle;
  if (s == "gripper_width_m") return SlotKind::gripper_width_m;
  if (s == "finger_rad") return SlotKind::finger_rad;
  if (s == "base_vel") return SlotKind::base_vel;
  if (s == "base_heading") return SlotKind::base_heading;
  throw std::invalid_argument("unknown slot kind: " + s);
}

SlotLayout::SlotLayout(std::vector<SlotGroup> groups) : groups_(std::move(groups)) {
  if (groups_.empty()) throw std::invalid_argument("SlotLayout: no groups");
  std::set<std::string> names;
  offsets_.reserve(groups_.size());
  for (const auto& g : groups_) {
    if (g.width < 1) throw std::invalid_argument("SlotLayout: group width must be >= 1");
    if (!names.insert(g.name).second)
      throw std::invalid_argument("SlotLayout: duplicate group name " + g.name);
    offsets_.push_back(dim_);
    dim_ += g.width;
  }
}

int SlotLayout::group_of_slot(int slot) const {
  if (slot < 0 || slot >= dim_) throw std::out_of_range("SlotLayout: slot out of range");
  const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), slot);
  return static_cast<int>(it - offsets_.begin()) - 1;
}

SlotKind SlotLayout::kind_of_slot(int slot) const {
  return groups_[static_cast<size_t>(group_of_slot(slot))].kind;
}

int SlotLayout::group_index(const std::string& name) const {
  for (size_t i = 0; i < groups_.size(); ++i)
    if (groups_[i].name == name) return static_cast<int>(i);
  throw std::out_of_range("SlotLayout: no group named " + name);
}

SlotLayout SlotLayout::default_layout() {
  return SlotLayout({
      {"left_arm_joints", 7, SlotKind::arm_joint_rad},
      {"right_arm_joints", 7, SlotKind::arm_joint_rad},
      {"left_eef_delta", 3, SlotKind::eef_delta_m},
      {"left_eef_rot", 3, SlotKind::eef_rot_axis_angle},
      {"right_eef_delta", 3, SlotKind::eef_delta_m},
      {"right_eef_rot", 3, SlotKind::eef_rot_axis_angle},
      {"left_fingers", 6, SlotKind::finger_rad},
      {"right_fingers", 6, SlotKind::finger_rad},
      {"left_gripper", 1, SlotKind::gripper_width_m},
      {"right_gripper", 1, SlotKind::gripper_width_m},
      {"base_vel", 2, SlotKind::base_vel},
      {"base_heading", 1, SlotKind::base_heading},
  });
}

DelayModel DelayModel::uniform(int d_max) {
  if (d_max < 1) throw std::invalid_argument("DelayModel: d_max must be >= 1");
  DelayModel m;
  m.d_max = d_max;
  m.pmf.assign(static_cast<size_t>(d_max), 1.0 / d_max);
  return m;
}

DelayModel DelayModel::point_mass(int d) {
  if (d < 0) throw std::invalid_argument("DelayModel: delay must be >= 0");
  DelayModel m;
  m.d_max = d + 1;
  m.pmf.assign(static_cast<size_t>(d + 1), 0.0);
  m.pmf.back() = 1.0;
  return m;
}

DelayModel DelayModel::from_pmf(std::vector<double> p) {
  DelayModel m;
  m.d_max = static_cast<int>(p.size());
  m.pmf = std::move(p);
  m.validate();
  return m;
}

void DelayModel::validate() const {
  if (d_max < 1 || pmf.size() != static_cast<size_t>(d_max))
    throw std::invalid_argument("DelayModel: pmf size must equal d_max >= 1");
  double sum = 0.0;
  for (const double p : pmf) {
    if (!(p >= 0.0)) throw std::invalid_argument("DelayModel: negative probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-12)
    throw std::invalid_argument("DelayModel: probabilities must sum to 1");
}

EmbodimentSpec::EmbodimentSpec(std::string id_in, std::vector<int> slots,
                               double control_period, double latency_budget,
                               const SlotLayout& layout)
    : id(std::move(id_in)),
      active_slots(std::move(slots)),
      control_period_s(control_period),
      latency_budget_s(latency_budget) {
  if (active_slots.empty())
    throw std::invalid_argument("EmbodimentSpec " + id + ": active_slots must be non-empty");
  std::sort(active_slots.begin(), active_slots.end());
  for (size_t i = 0; i < active_slots.size(); ++i) {
    if (active_slots[i] < 0 || active_slots[i] >= layout.dim())
      throw std::invalid_argument("EmbodimentSpec " + id + ": slot index out of range");
    if (i > 0 && active_slots[i] == active_slots[i - 1])
      throw std::invalid_argument("EmbodimentSpec " + id + ": duplicate slot index");
  }
  if (!(control_period_s > 0.0))
    throw std::invalid_argument("EmbodimentSpec " + id + ": control period must be > 0");
  if (latency_budget_s < 0.0)
    throw std::invalid_argument("EmbodimentSpec " + id + ": latency budget must be >= 0");
}

std::vector<int> EmbodimentSpec::active_groups(const SlotLayout& layout) const {
  std::set<int> groups;
  for (const int slot : active_slots) groups.insert(layout.group_of_slot(slot));
  return {groups.begin(), groups.end()};
}

Vec project(const Vec& raw, const EmbodimentSpec& emb, const SlotLayout& layout) {
  if (raw.size() != emb.active_count())
    throw std::invalid_argument("project: raw length " + std::to_string(raw.size()) +
                                " does not match |active_slots| = " +
                                std::to_string(emb.active_count()));
  require_finite(raw, "project");
  Vec u = Vec::Zero(layout.dim());
  for (int k = 0; k < emb.active_count(); ++k)
    u[emb.active_slots[static_cast<size_t>(k)]] = raw[k];
  return u;
}

Vec extract(const Vec& unified, const EmbodimentSpec& emb) {
  const int max_slot = emb.active_slots.back();
  if (unified.size() <= max_slot)
    throw std::invalid_argument("extract: unified vector shorter than layout dimension");
  Vec raw(emb.active_count());
  for (int k = 0; k < emb.active_count(); ++k)
    raw[k] = unified[emb.active_slots[static_cast<size_t>(k)]];
  return raw;
}

Eigen::Vector3d to_axis_angle(const Eigen::Quaterniond& q_in) {
  const double norm = q_in.norm();
  if (norm < 1e-12) throw std::invalid_argument("to_axis_angle: zero quaternion");
  if (std::abs(norm - 1.0) > 1e-6)
    throw std::invalid_argument("to_axis_angle: quaternion norm deviates from 1 by more than 1e-6");
  Eigen::Quaterniond q = q_in;
  q.coeffs() /= norm;
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();  // double cover: w >= 0 => theta <= pi

  const double sin_half = q.vec().norm();
  const double theta = 2.0 * std::atan2(sin_half, q.w());
  if (sin_half < 1e-300 || theta == 0.0) return Eigen::Vector3d::Zero();
  Eigen::Vector3d axis = q.vec() / sin_half;
  if (std::abs(theta - kPi) < 1e-12) {
    // tie at pi: first nonzero axis component positive
    for (int i = 0; i < 3; ++i) {
      if (axis[i] != 0.0) {
        if (axis[i] < 0.0) axis = -axis;
        break;
      }
    }
    return kPi * axis;
  }
  return theta * axis;
}

Eigen::Vector3d to_axis_angle_euler_xyz(const Eigen::Vector3d& euler) {
  if (!euler.allFinite()) throw std::invalid_argument("to_axis_angle: non-finite Euler angles");
  const Eigen::Quaterniond q = Eigen::AngleAxisd(euler.x(), Eigen::Vector3d::UnitX()) *
                               Eigen::AngleAxisd(euler.y(), Eigen::Vector3d::UnitY()) *
                               Eigen::AngleAxisd(euler.z(), Eigen::Vector3d::UnitZ());
  return to_axis_angle(q);
}

Eigen::Matrix3d axis_angle_to_matrix(const Eigen::Vector3d& aa) {
  const double theta = aa.norm();
  if (theta < 1e-300) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(theta, aa / theta).toRotationMatrix();
}

Eigen::Vector3d matrix_to_axis_angle(const Eigen::Matrix3d& rot) {
  return to_axis_angle(Eigen::Quaterniond(rot));
}

Eigen::Matrix<double, 6, 1> delta_pose(const Pose& pose_t, const Pose& pose_t1) {
  Eigen::Matrix<double, 6, 1> delta;
  delta.head<3>() = pose_t1.position - pose_t.position;
  const Eigen::Quaterniond rel = pose_t.rotation.conjugate() * pose_t1.rotation;
  delta.tail<3>() = to_axis_angle(rel);
  return delta;
}

Pose apply_delta(const Pose& pose_t, const Eigen::Matrix<double, 6, 1>& delta) {
  Pose out;
  out.position = pose_t.position + delta.head<3>();
  out.rotation = pose_t.rotation * Eigen::Quaterniond(axis_angle_to_matrix(delta.tail<3>()));
  out.rotation.normalize();
  return out;
}

ClipBounds ClipBounds::defaults() {
  ClipBounds b;
  b.bounds[SlotKind::arm_joint_rad] = {-kPi, kPi};
  b.bounds[SlotKind::finger_rad] = {-kPi, kPi};
  b.bounds[SlotKind::eef_delta_m] = {-0.25, 0.25};
  b.bounds[SlotKind::eef_rot_axis_angle] = {-kPi, kPi};
  b.bounds[SlotKind::gripper_width_m] = {0.0, 0.12};
  b.bounds[SlotKind::base_vel] = {-1.5, 1.5};
  b.bounds[SlotKind::base_heading] = {-kPi, kPi};
  return b;
}

void ClipBounds::validate() const {
  for (const auto& [kind, mm] : bounds) {
    if (!std::isfinite(mm.first) || !std::isfinite(mm.second) || !(mm.first < mm.second))
      throw std::invalid_argument(std::string("ClipBounds: invalid bounds for ") +
                                  to_string(kind));
  }
}

std::vector<Vec> clip_outliers(const std::vector<Vec>& series, const ClipBounds& bounds,
                               const SlotLayout& layout) {
  bounds.validate();
  std::vector<Vec> out;
  out.reserve(series.size());
  for (const Vec& v : series) {
    if (v.size() != layout.dim())
      throw std::invalid_argument("clip_outliers: vector dimension does not match layout");
    Vec c = v;
    int slot = 0;
    for (const auto& g : layout.groups()) {
      const auto it = bounds.bounds.find(g.kind);
      if (it != bounds.bounds.end()) {
        for (int k = 0; k < g.width; ++k) {
          double& x = c[slot + k];
          x = std::clamp(x, it->second.first, it->second.second);
        }
      }
      slot += g.width;
    }
    out.push_back(std::move(c));
  }
  return out;
}

const EmbodimentSpec& SpaceConfig::embodiment(const std::string& id) const {
  for (const auto& e : embodiments)
    if (e.id == id) return e;
  throw std::out_of_range("SpaceConfig: no embodiment with id " + id);
}

namespace {

using nlohmann::json;

DelayModel parse_delay_model(const json& j, const std::string& ptr) {
  if (!j.is_object()) throw ConfigError(ptr, "delay_model must be an object");
  const std::string type = j.value("type", "");
  if (type == "uniform") {
    if (!j.contains("d_max") || !j["d_max"].is_number_integer())
      throw ConfigError(ptr + "/d_max", "required integer");
    return DelayModel::uniform(j["d_max"].get<int>());
  }
  if (type == "pmf") {
    if (!j.contains("p") || !j["p"].is_array())
      throw ConfigError(ptr + "/p", "required probability array");
    return DelayModel::from_pmf(j["p"].get<std::vector<double>>());
  }
  throw ConfigError(ptr + "/type", "must be \"uniform\" or \"pmf\"");
}

}  // namespace

SpaceConfig load_space_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("invalid JSON: ") + e.what());
  }

  if (!j.contains("groups") || !j["groups"].is_array() || j["groups"].empty())
    throw ConfigError("/groups", "required non-empty array");
  std::vector<SlotGroup> groups;
  for (size_t i = 0; i < j["groups"].size(); ++i) {
    const auto& g = j["groups"][i];
    const std::string ptr = "/groups/" + std::to_string(i);
    if (!g.contains("name") || !g["name"].is_string()) throw ConfigError(ptr + "/name", "required string");
    if (!g.contains("width") || !g["width"].is_number_integer() || g["width"].get<int>() < 1)
      throw ConfigError(ptr + "/width", "required integer >= 1");
    if (!g.contains("kind") || !g["kind"].is_string()) throw ConfigError(ptr + "/kind", "required string");
    SlotKind kind;
    try {
      kind = slot_kind_from_string(g["kind"].get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(ptr + "/kind", e.what());
    }
    groups.push_back({g["name"].get<std::string>(), g["width"].get<int>(), kind});
  }

  SpaceConfig cfg;
  try {
    cfg.layout = SlotLayout(std::move(groups));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("/groups", e.what());
  }

  if (!j.contains("embodiments") || !j["embodiments"].is_array())
    throw ConfigError("/embodiments", "required array");
  for (size_t i = 0; i < j["embodiments"].size(); ++i) {
    const auto& e = j["embodiments"][i];
    const std::string ptr = "/embodiments/" + std::to_string(i);
    if (!e.contains("id") || !e["id"].is_string()) throw ConfigError(ptr + "/id", "required string");
    if (!e.contains("active_slots") || !e["active_slots"].is_array())
      throw ConfigError(ptr + "/active_slots", "required array");
    if (!e.contains("control_period_s") || !e["control_period_s"].is_number())
      throw ConfigError(ptr + "/control_period_s", "required number");
    EmbodimentSpec spec;
    try {
      spec = EmbodimentSpec(e["id"].get<std::string>(),
                            e["active_slots"].get<std::vector<int>>(),
                            e["control_period_s"].get<double>(),
                            e.value("latency_budget_s", 0.0), cfg.layout);
    } catch (const std::invalid_argument& err) {
      throw ConfigError(ptr, err.what());
    }
    if (e.contains("delay_model")) {
      try {
        spec.delay_model = parse_delay_model(e["delay_model"], ptr + "/delay_model");
      } catch (const std::invalid_argument& err) {
        throw ConfigError(ptr + "/delay_model", err.what());
      }
    } else {
      // default: uniform over {0..d_max-1}, d_max = ceil(L/dt)+1 safety +1
      const int committed = static_cast<int>(
          std::ceil(spec.latency_budget_s / spec.control_period_s)) + 1;
      spec.delay_model = DelayModel::uniform(committed + 1);
    }
    cfg.embodiments.push_back(std::move(spec));
  }
  return cfg;
}

SpaceConfig load_space_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return load_space_config(ss.str());
}

}  // namespace uniflow::space
