#pragma once

// Versioned binary checkpoint: magic, format version, a JSON header with
// metadata and the parameter table, then little-endian float64 payloads
// for the student and (optionally) the teacher branch.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "ledet/detector.hpp"

namespace ledet {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'L', 'E', 'D', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct Checkpoint {
  std::string stage;  // base_pretrain | novel_head | balanced_finetune
  std::vector<int> class_ids;  // dataset category id per foreground logit
  std::string config_hash;
  long long step = 0;
  DetectorParams student;
  std::optional<DetectorParams> teacher;

  /// The branch evaluation and few-shot initialization use.
  const DetectorParams& teacher_or_throw() const {
    if (!teacher) throw std::runtime_error("checkpoint has no teacher branch");
    return *teacher;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline nlohmann::ordered_json param_table(const ParamSet& p) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : p.entries()) arr.push_back({{"name", e.name}, {"group", group_name(e.group)}, {"shape", e.shape}});
  return arr;
}

inline ParamSet params_from_table(const nlohmann::json& table) {
  ParamSet p;
  for (const auto& e : table) {
    p.add(e.at("name").get<std::string>(), parse_param_group(e.at("group").get<std::string>()),
          e.at("shape").get<std::vector<int>>());
  }
  return p;
}

inline void write_values(std::ostream& os, const ParamSet& p) {
  for (const auto& e : p.entries()) {
    os.write(reinterpret_cast<const char*>(e.value.data()), static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  }
}

inline void read_values(std::istream& is, ParamSet& p) {
  for (auto& e : p.entries()) {
    is.read(reinterpret_cast<char*>(e.value.data()), static_cast<std::streamsize>(e.value.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint truncated in parameter " + e.name);
  }
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  if (c.teacher && !(c.teacher->arch == c.student.arch && c.teacher->params.same_layout(c.student.params))) {
    throw std::invalid_argument("checkpoint: teacher and student layouts differ");
  }
  nlohmann::ordered_json header = {{"stage", c.stage},
                                   {"class_ids", c.class_ids},
                                   {"config_hash", c.config_hash},
                                   {"step", c.step},
                                   {"arch", c.student.arch.to_json()},
                                   {"params", detail::param_table(c.student.params)},
                                   {"has_teacher", c.teacher.has_value()}};
  const std::string h = header.dump();
  std::ostringstream os;
  os.write(kCheckpointMagic, 8);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = h.size();
  os.write(reinterpret_cast<const char*>(&version), sizeof version);
  os.write(reinterpret_cast<const char*>(&len), sizeof len);
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  detail::write_values(os, c.student.params);
  if (c.teacher) detail::write_values(os, c.teacher->params);
  return os.str();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw std::runtime_error("not a checkpoint file");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
  if (len > bytes.size()) throw std::runtime_error("checkpoint header truncated");
  std::string h(len, '\0');
  is.read(h.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(h);
  Checkpoint c;
  c.stage = header.at("stage").get<std::string>();
  c.class_ids = header.at("class_ids").get<std::vector<int>>();
  c.config_hash = header.at("config_hash").get<std::string>();
  c.step = header.at("step").get<long long>();
  c.student.arch = DetectorArch::from_json(header.at("arch"));
  c.student.params = detail::params_from_table(header.at("params"));
  detail::read_values(is, c.student.params);
  if (header.at("has_teacher").get<bool>()) {
    c.teacher = DetectorParams{c.student.arch, c.student.params.zeros_like()};
    detail::read_values(is, c.teacher->params);
  }
  is.peek();
  if (!is.eof()) throw std::runtime_error("checkpoint has trailing bytes");
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const std::string bytes = serialize_checkpoint(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace ledet
