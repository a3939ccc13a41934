#pragma once

// Named parameter arrays partitioned into the five detector groups.

#include <array>
#include <cmath>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ledet {

enum class ParamGroup { backbone = 0, neck = 1, rpn = 2, roi_classifier = 3, roi_regressor = 4 };

inline constexpr std::array<ParamGroup, 5> kParamGroups = {ParamGroup::backbone, ParamGroup::neck, ParamGroup::rpn,
                                                           ParamGroup::roi_classifier, ParamGroup::roi_regressor};

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::neck: return "neck";
    case ParamGroup::rpn: return "rpn";
    case ParamGroup::roi_classifier: return "roi_classifier";
    case ParamGroup::roi_regressor: return "roi_regressor";
  }
  return "?";
}

inline ParamGroup parse_param_group(std::string_view s) {
  for (ParamGroup g : kParamGroups) {
    if (s == group_name(g)) return g;
  }
  throw std::invalid_argument("unknown parameter group '" + std::string(s) + "'");
}

/// One flag per ParamGroup, indexed by the enum value.
using GroupMask = std::array<bool, 5>;

inline GroupMask all_groups() { return {true, true, true, true, true}; }

inline GroupMask groups_mask(std::initializer_list<ParamGroup> gs) {
  GroupMask m{};
  for (ParamGroup g : gs) m[static_cast<int>(g)] = true;
  return m;
}

inline bool has(const GroupMask& m, ParamGroup g) { return m[static_cast<int>(g)]; }

struct Param {
  std::string name;
  ParamGroup group = ParamGroup::backbone;
  std::vector<int> shape;
  std::vector<double> value;

  friend bool operator==(const Param&, const Param&) = default;
};

class ParamSet {
 public:
  Param& add(std::string name, ParamGroup group, std::vector<int> shape) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), group, std::move(shape), std::vector<double>(n, 0.0)});
    return params_.back();
  }

  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }

  Param& at(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
    return params_[it->second];
  }
  const Param& at(std::string_view name) const { return const_cast<ParamSet*>(this)->at(name); }

  const std::vector<double>& value(std::string_view name) const { return at(name).value; }
  std::vector<double>& value(std::string_view name) { return at(name).value; }

  std::vector<Param>& entries() { return params_; }
  const std::vector<Param>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet out = *this;
    out.set_zero();
    return out;
  }

  void set_zero() {
    for (auto& p : params_) std::fill(p.value.begin(), p.value.end(), 0.0);
  }

  bool same_layout(const ParamSet& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name != other.params_[i].name || params_[i].shape != other.params_[i].shape) return false;
    }
    return true;
  }

  bool all_finite() const {
    for (const auto& p : params_) {
      for (double v : p.value) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }

  /// Bitwise equality of every parameter in group `g`.
  bool group_equal(const ParamSet& other, ParamGroup g) const {
    for (const auto& p : params_) {
      if (p.group != g) continue;
      if (!other.contains(p.name)) return false;
      const auto& q = other.at(p.name).value;
      if (q.size() != p.value.size() ||
          (!q.empty() && std::memcmp(q.data(), p.value.data(), q.size() * sizeof(double)) != 0)) {
        return false;
      }
    }
    return true;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.params_ == b.params_; }

 private:
  std::vector<Param> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

}  // namespace ledet
