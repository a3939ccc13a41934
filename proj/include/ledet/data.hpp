#pragma once

// Dataset index (COCO-style JSON), few-shot and partial-label splits, and the
// synthetic shape-scene generator used by the desk-scale benchmark.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ledet/geometry.hpp"
#include "ledet/image.hpp"
#include "ledet/rng.hpp"

namespace ledet {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageRecord {
  int id = 0;
  std::string file_name;
  int width = 0;
  int height = 0;
};

struct Annotation {
  int id = 0;
  int image_id = 0;
  int category_id = 0;
  Box box;
};

struct Category {
  int id = 0;
  std::string name;
};

/// Immutable, validated collection of images, annotations and categories.
class DatasetIndex {
 public:
  DatasetIndex() = default;

  DatasetIndex(std::vector<ImageRecord> images, std::vector<Annotation> annotations,
               std::vector<Category> categories)
      : images_(std::move(images)), annotations_(std::move(annotations)), categories_(std::move(categories)) {
    for (std::size_t i = 0; i < images_.size(); ++i) {
      if (!image_pos_.emplace(images_[i].id, i).second) {
        throw DataError("duplicate image id " + std::to_string(images_[i].id));
      }
    }
    for (const auto& c : categories_) {
      if (!category_ids_.insert(c.id).second) {
        throw DataError("duplicate category id " + std::to_string(c.id));
      }
    }
    std::set<int> ann_ids;
    for (auto& a : annotations_) {
      if (!ann_ids.insert(a.id).second) throw DataError("duplicate annotation id " + std::to_string(a.id));
      auto it = image_pos_.find(a.image_id);
      if (it == image_pos_.end()) {
        throw DataError("annotation " + std::to_string(a.id) + " references missing image_id " +
                        std::to_string(a.image_id));
      }
      if (!category_ids_.count(a.category_id)) {
        throw DataError("annotation " + std::to_string(a.id) + " references missing category_id " +
                        std::to_string(a.category_id));
      }
      if (!a.box.valid()) throw DataError("annotation " + std::to_string(a.id) + " has an invalid box");
      const auto& im = images_[it->second];
      a.box = clip_box(a.box, im.width, im.height);
    }
    for (std::size_t i = 0; i < annotations_.size(); ++i) {
      by_image_[annotations_[i].image_id].push_back(i);
    }
  }

  const std::vector<ImageRecord>& images() const { return images_; }
  const std::vector<Annotation>& annotations() const { return annotations_; }
  const std::vector<Category>& categories() const { return categories_; }

  bool has_image(int id) const { return image_pos_.count(id) != 0; }
  bool has_category(int id) const { return category_ids_.count(id) != 0; }

  const ImageRecord& image(int id) const {
    auto it = image_pos_.find(id);
    if (it == image_pos_.end()) throw DataError("unknown image id " + std::to_string(id));
    return images_[it->second];
  }

  std::vector<Annotation> annotations_for(int image_id) const {
    std::vector<Annotation> out;
    auto it = by_image_.find(image_id);
    if (it == by_image_.end()) return out;
    for (std::size_t i : it->second) out.push_back(annotations_[i]);
    return out;
  }

  const Annotation& annotation(int id) const {
    for (const auto& a : annotations_) {
      if (a.id == id) return a;
    }
    throw DataError("unknown annotation id " + std::to_string(id));
  }

  std::vector<int> image_ids() const {
    std::vector<int> ids;
    for (const auto& im : images_) ids.push_back(im.id);
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  std::vector<int> category_ids() const { return {category_ids_.begin(), category_ids_.end()}; }

  std::string category_name(int id) const {
    for (const auto& c : categories_) {
      if (c.id == id) return c.name;
    }
    throw DataError("unknown category id " + std::to_string(id));
  }

 private:
  std::vector<ImageRecord> images_;
  std::vector<Annotation> annotations_;
  std::vector<Category> categories_;
  std::unordered_map<int, std::size_t> image_pos_;
  std::set<int> category_ids_;
  std::map<int, std::vector<std::size_t>> by_image_;
};

namespace detail {

template <class T>
T require(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DataError(where + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline DatasetIndex parse_coco(const nlohmann::json& root) {
  if (!root.is_object()) throw DataError("COCO root must be an object");
  for (const char* key : {"images", "annotations", "categories"}) {
    if (!root.contains(key) || !root.at(key).is_array()) {
      throw DataError(std::string("COCO file: missing array '") + key + "'");
    }
  }
  std::vector<ImageRecord> images;
  for (std::size_t i = 0; i < root["images"].size(); ++i) {
    const auto& j = root["images"][i];
    const std::string where = "images[" + std::to_string(i) + "]";
    ImageRecord r;
    r.id = detail::require<int>(j, "id", where);
    r.file_name = j.value("file_name", std::string{});
    r.width = detail::require<int>(j, "width", where);
    r.height = detail::require<int>(j, "height", where);
    if (r.width <= 0 || r.height <= 0) throw DataError(where + ": non-positive image size");
    images.push_back(std::move(r));
  }
  std::vector<Category> categories;
  for (std::size_t i = 0; i < root["categories"].size(); ++i) {
    const auto& j = root["categories"][i];
    const std::string where = "categories[" + std::to_string(i) + "]";
    categories.push_back({detail::require<int>(j, "id", where), j.value("name", std::string{})});
  }
  std::vector<Annotation> anns;
  for (std::size_t i = 0; i < root["annotations"].size(); ++i) {
    const auto& j = root["annotations"][i];
    const std::string where = "annotations[" + std::to_string(i) + "]";
    Annotation a;
    a.id = detail::require<int>(j, "id", where);
    a.image_id = detail::require<int>(j, "image_id", where);
    a.category_id = detail::require<int>(j, "category_id", where);
    if (j.value("iscrowd", 0) != 0) {
      throw DataError(where + " (id " + std::to_string(a.id) + "): iscrowd annotations are unsupported");
    }
    const auto bbox = detail::require<std::vector<double>>(j, "bbox", where);
    if (bbox.size() != 4 || bbox[2] < 0 || bbox[3] < 0) {
      throw DataError(where + " (id " + std::to_string(a.id) + "): bbox must be [x, y, w, h] with w, h >= 0");
    }
    a.box = Box{bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]};
    anns.push_back(a);
  }
  return DatasetIndex(std::move(images), std::move(anns), std::move(categories));
}

inline DatasetIndex load_coco_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotation file " + path);
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("cannot parse " + path + ": " + e.what());
  }
  return parse_coco(root);
}

inline nlohmann::ordered_json to_coco_json(const DatasetIndex& index) {
  nlohmann::ordered_json root;
  root["images"] = nlohmann::ordered_json::array();
  for (const auto& im : index.images()) {
    root["images"].push_back(
        {{"id", im.id}, {"file_name", im.file_name}, {"width", im.width}, {"height", im.height}});
  }
  root["annotations"] = nlohmann::ordered_json::array();
  for (const auto& a : index.annotations()) {
    root["annotations"].push_back({{"id", a.id},
                                   {"image_id", a.image_id},
                                   {"category_id", a.category_id},
                                   {"bbox", {a.box.x1, a.box.y1, a.box.width(), a.box.height()}},
                                   {"area", a.box.area()},
                                   {"iscrowd", 0}});
  }
  root["categories"] = nlohmann::ordered_json::array();
  for (const auto& c : index.categories()) root["categories"].push_back({{"id", c.id}, {"name", c.name}});
  return root;
}

inline void save_coco_json(const std::string& path, const DatasetIndex& index) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << to_coco_json(index).dump(1) << "\n";
}

// ---------------------------------------------------------------------------
// Splits

struct ShotInstance {
  int image_id = 0;
  int annotation_id = 0;
  friend bool operator==(const ShotInstance&, const ShotInstance&) = default;
};

struct FewShotSplit {
  std::vector<int> base_class_ids;
  std::vector<int> novel_class_ids;
  int k = 0;
  std::uint64_t seed = 0;
  std::map<int, std::vector<ShotInstance>> shot_instances;  // class id -> shots

  std::vector<int> all_class_ids() const {
    std::vector<int> ids = base_class_ids;
    ids.insert(ids.end(), novel_class_ids.begin(), novel_class_ids.end());
    return ids;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["base_class_ids"] = base_class_ids;
    j["novel_class_ids"] = novel_class_ids;
    j["k"] = k;
    j["seed"] = seed;
    auto shots = nlohmann::ordered_json::array();
    for (const auto& [cls, list] : shot_instances) {
      auto inst = nlohmann::ordered_json::array();
      for (const auto& s : list) inst.push_back({{"image_id", s.image_id}, {"annotation_id", s.annotation_id}});
      shots.push_back({{"class_id", cls}, {"instances", inst}});
    }
    j["shot_instances"] = shots;
    return j;
  }

  std::string serialize() const { return to_json().dump(2) + "\n"; }

  static FewShotSplit from_json(const nlohmann::json& j) {
    FewShotSplit s;
    s.base_class_ids = detail::require<std::vector<int>>(j, "base_class_ids", "split");
    s.novel_class_ids = detail::require<std::vector<int>>(j, "novel_class_ids", "split");
    s.k = detail::require<int>(j, "k", "split");
    s.seed = detail::require<std::uint64_t>(j, "seed", "split");
    if (!j.contains("shot_instances") || !j["shot_instances"].is_array()) {
      throw DataError("split: missing array 'shot_instances'");
    }
    for (const auto& e : j["shot_instances"]) {
      const int cls = detail::require<int>(e, "class_id", "split.shot_instances");
      auto& list = s.shot_instances[cls];
      for (const auto& inst : e.at("instances")) {
        list.push_back({detail::require<int>(inst, "image_id", "split.shot_instances"),
                        detail::require<int>(inst, "annotation_id", "split.shot_instances")});
      }
    }
    return s;
  }
};

/// Samples k instances per class, independently per class. An image may
/// contribute shots to several classes.
inline FewShotSplit build_few_shot_split(const DatasetIndex& index, const std::vector<int>& base,
                                         const std::vector<int>& novel, int k, std::uint64_t seed) {
  if (k < 1) throw DataError("few-shot split: k must be >= 1");
  std::set<int> b(base.begin(), base.end());
  for (int c : novel) {
    if (b.count(c)) throw DataError("few-shot split: class " + std::to_string(c) + " is both base and novel");
  }
  FewShotSplit split;
  split.base_class_ids = std::vector<int>(b.begin(), b.end());
  std::set<int> n(novel.begin(), novel.end());
  split.novel_class_ids = std::vector<int>(n.begin(), n.end());
  split.k = k;
  split.seed = seed;

  std::vector<std::string> short_classes;
  for (int cls : split.all_class_ids()) {
    if (!index.has_category(cls)) throw DataError("few-shot split: unknown category " + std::to_string(cls));
    std::vector<const Annotation*> pool;
    for (const auto& a : index.annotations()) {
      if (a.category_id == cls) pool.push_back(&a);
    }
    std::sort(pool.begin(), pool.end(), [](auto* x, auto* y) { return x->id < y->id; });
    if (static_cast<int>(pool.size()) < k) {
      short_classes.push_back(std::to_string(cls) + " (" + std::to_string(pool.size()) + " instances)");
      continue;
    }
    Rng rng = make_rng(seed, 0x5107ULL + static_cast<std::uint64_t>(cls));
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(k);
    std::sort(pool.begin(), pool.end(), [](auto* x, auto* y) { return x->id < y->id; });
    auto& list = split.shot_instances[cls];
    for (const auto* a : pool) list.push_back({a->image_id, a->id});
  }
  if (!short_classes.empty()) {
    std::string msg = "few-shot split: fewer than k=" + std::to_string(k) + " instances for class";
    for (const auto& s : short_classes) msg += " " + s;
    throw DataError(msg);
  }
  return split;
}

struct LabeledPartition {
  std::vector<int> labeled;
  std::vector<int> unlabeled;

  nlohmann::ordered_json to_json() const {
    return {{"labeled", labeled}, {"unlabeled", unlabeled}};
  }
};

/// Image-level partition with |labeled| = round(percent / 100 * |images|).
inline LabeledPartition sample_labeled_fraction(const DatasetIndex& index, double percent, std::uint64_t seed) {
  if (!(percent > 0.0 && percent <= 100.0)) throw DataError("labeled percent must be in (0, 100]");
  auto ids = index.image_ids();
  if (ids.empty()) throw DataError("labeled fraction: dataset has no images");
  const auto n_labeled = static_cast<std::size_t>(std::llround(percent / 100.0 * static_cast<double>(ids.size())));
  Rng rng = make_rng(seed, 0x1abe1ULL);
  std::shuffle(ids.begin(), ids.end(), rng);
  LabeledPartition part;
  part.labeled.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_labeled));
  part.unlabeled.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_labeled), ids.end());
  std::sort(part.labeled.begin(), part.labeled.end());
  std::sort(part.unlabeled.begin(), part.unlabeled.end());
  return part;
}

// ---------------------------------------------------------------------------
// COCO 60/20 convention: the 20 novel classes carry the PASCAL VOC names.

inline const std::vector<Category>& coco_categories() {
  static const std::vector<Category> cats = {
      {1, "person"}, {2, "bicycle"}, {3, "car"}, {4, "motorcycle"}, {5, "airplane"}, {6, "bus"},
      {7, "train"}, {8, "truck"}, {9, "boat"}, {10, "traffic light"}, {11, "fire hydrant"},
      {13, "stop sign"}, {14, "parking meter"}, {15, "bench"}, {16, "bird"}, {17, "cat"}, {18, "dog"},
      {19, "horse"}, {20, "sheep"}, {21, "cow"}, {22, "elephant"}, {23, "bear"}, {24, "zebra"},
      {25, "giraffe"}, {27, "backpack"}, {28, "umbrella"}, {31, "handbag"}, {32, "tie"},
      {33, "suitcase"}, {34, "frisbee"}, {35, "skis"}, {36, "snowboard"}, {37, "sports ball"},
      {38, "kite"}, {39, "baseball bat"}, {40, "baseball glove"}, {41, "skateboard"},
      {42, "surfboard"}, {43, "tennis racket"}, {44, "bottle"}, {46, "wine glass"}, {47, "cup"},
      {48, "fork"}, {49, "knife"}, {50, "spoon"}, {51, "bowl"}, {52, "banana"}, {53, "apple"},
      {54, "sandwich"}, {55, "orange"}, {56, "broccoli"}, {57, "carrot"}, {58, "hot dog"},
      {59, "pizza"}, {60, "donut"}, {61, "cake"}, {62, "chair"}, {63, "couch"}, {64, "potted plant"},
      {65, "bed"}, {67, "dining table"}, {70, "toilet"}, {72, "tv"}, {73, "laptop"}, {74, "mouse"},
      {75, "remote"}, {76, "keyboard"}, {77, "cell phone"}, {78, "microwave"}, {79, "oven"},
      {80, "toaster"}, {81, "sink"}, {82, "refrigerator"}, {84, "book"}, {85, "clock"}, {86, "vase"},
      {87, "scissors"}, {88, "teddy bear"}, {89, "hair drier"}, {90, "toothbrush"}};
  return cats;
}

/// COCO category ids whose classes share a PASCAL VOC name.
inline const std::vector<int>& coco_voc_novel_ids() {
  static const std::vector<int> ids = {1, 2, 3, 4, 5, 6, 7, 9, 16, 17, 18, 19, 20, 21, 44, 62, 63, 64, 67, 72};
  return ids;
}

/// (base, novel) category id lists for the 60/20 COCO convention, restricted
/// to categories present in `index`.
inline std::pair<std::vector<int>, std::vector<int>> coco_base_novel(const DatasetIndex& index) {
  std::set<int> novel(coco_voc_novel_ids().begin(), coco_voc_novel_ids().end());
  std::pair<std::vector<int>, std::vector<int>> out;
  for (int id : index.category_ids()) (novel.count(id) ? out.second : out.first).push_back(id);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic shape scenes

inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names = {"square", "circle", "triangle", "plus",
                                                 "ring",   "diamond", "frame",   "xcross"};
  return names;
}

/// Membership test in the unit square for each shape in the vocabulary.
inline bool shape_contains(int shape, double u, double v) {
  const double du = u - 0.5;
  const double dv = v - 0.5;
  const double r2 = du * du + dv * dv;
  switch (shape) {
    case 0: return true;
    case 1: return r2 <= 0.25;
    case 2: return std::abs(du) <= 0.5 * v;
    case 3: return std::abs(du) <= 0.17 || std::abs(dv) <= 0.17;
    case 4: return r2 <= 0.25 && r2 >= 0.09;
    case 5: return std::abs(du) + std::abs(dv) <= 0.5;
    case 6: return !(u > 0.22 && u < 0.78 && v > 0.22 && v < 0.78);
    case 7: return std::abs(u - v) <= 0.2 || std::abs(u + v - 1.0) <= 0.2;
    default: throw std::out_of_range("unknown shape index " + std::to_string(shape));
  }
}

struct SyntheticSceneSpec {
  int canvas_width = 64;
  int canvas_height = 64;
  int num_shapes = 8;
  int min_objects = 1;
  int max_objects = 4;
  int min_size = 10;
  int max_size = 22;
  double aspect_jitter = 0.2;    // relative width/height jitter
  double background_max = 0.45;  // background channel levels in [0.05, background_max]
  double object_min = 0.55;      // object channel levels in [object_min, 1]
  double noise = 0.04;           // per-pixel uniform noise amplitude
  std::uint64_t seed = 7;
};

struct SceneObject {
  Box box;        // tight bounding box of the rendered pixels
  int shape = 0;  // index into shape_names()
};

struct SyntheticScene {
  Image image;
  std::vector<SceneObject> objects;
};

/// Renders one scene. Objects never overlap (2 px clearance), so each
/// annotation box is the tight extent of that object's visible pixels.
inline SyntheticScene generate_synthetic_scene(const SyntheticSceneSpec& spec, Rng& rng) {
  if (spec.num_shapes < 1 || spec.num_shapes > static_cast<int>(shape_names().size())) {
    throw DataError("synthetic spec: num_shapes must be in [1, " + std::to_string(shape_names().size()) + "]");
  }
  if (spec.min_size < 3 || spec.max_size < spec.min_size) throw DataError("synthetic spec: invalid size range");
  if (spec.canvas_width < spec.min_size + 2 || spec.canvas_height < spec.min_size + 2) {
    throw DataError("synthetic spec: canvas too small for the minimum object size");
  }
  if (spec.min_objects < 0 || spec.max_objects < spec.min_objects) {
    throw DataError("synthetic spec: invalid object count range");
  }
  const int W = spec.canvas_width;
  const int H = spec.canvas_height;
  SyntheticScene scene;
  scene.image = Image(3, H, W);
  std::array<double, 3> bg{};
  for (auto& c : bg) c = uniform(rng, 0.05, spec.background_max);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) scene.image.at(c, y, x) = static_cast<float>(bg[c]);
    }
  }
  const int count = spec.max_objects == 0 ? 0 : uniform_int(rng, spec.min_objects, spec.max_objects);
  std::vector<Box> placed;
  for (int n = 0; n < count; ++n) {
    const int shape = uniform_int(rng, 0, spec.num_shapes - 1);
    const int max_size = std::min({spec.max_size, W - 2, H - 2});
    const int base = uniform_int(rng, spec.min_size, max_size);
    const double jit = uniform(rng, -spec.aspect_jitter, spec.aspect_jitter);
    const int w = std::clamp(static_cast<int>(std::lround(base * (1.0 + jit))), spec.min_size, max_size);
    const int h = std::clamp(static_cast<int>(std::lround(base * (1.0 - jit))), spec.min_size, max_size);
    std::array<double, 3> color{};
    for (auto& c : color) c = uniform(rng, spec.object_min, 1.0);
    bool ok = false;
    int ox = 0;
    int oy = 0;
    for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
      ox = uniform_int(rng, 1, W - w - 1);
      oy = uniform_int(rng, 1, H - h - 1);
      const Box cand{ox - 2.0, oy - 2.0, ox + w + 2.0, oy + h + 2.0};
      ok = std::none_of(placed.begin(), placed.end(),
                        [&](const Box& p) { return intersection_area(cand, p) > 0.0; });
    }
    if (!ok) continue;
    placed.push_back(Box{double(ox), double(oy), double(ox + w), double(oy + h)});
    int minx = W, miny = H, maxx = -1, maxy = -1;
    for (int y = oy; y < oy + h; ++y) {
      for (int x = ox; x < ox + w; ++x) {
        const double u = (x + 0.5 - ox) / w;
        const double v = (y + 0.5 - oy) / h;
        if (!shape_contains(shape, u, v)) continue;
        for (int c = 0; c < 3; ++c) scene.image.at(c, y, x) = static_cast<float>(color[c]);
        minx = std::min(minx, x);
        miny = std::min(miny, y);
        maxx = std::max(maxx, x);
        maxy = std::max(maxy, y);
      }
    }
    if (maxx < 0) continue;
    scene.objects.push_back({Box{double(minx), double(miny), double(maxx + 1), double(maxy + 1)}, shape});
  }
  for (auto& v : scene.image.data) {
    const double noisy = v + uniform(rng, -spec.noise, spec.noise);
    v = static_cast<float>(std::round(std::clamp(noisy, 0.0, 1.0) * 255.0) / 255.0);
  }
  return scene;
}

struct SyntheticDataset {
  DatasetIndex index;
  std::vector<Image> images;  // parallel to index.images()
};

/// `count` scenes; image i uses its own generator stream so scenes can be
/// produced independently. Category id = shape index + 1.
inline SyntheticDataset generate_synthetic_dataset(const SyntheticSceneSpec& spec, int count,
                                                   std::uint64_t stream, int first_image_id = 1) {
  std::vector<ImageRecord> images;
  std::vector<Annotation> anns;
  std::vector<Category> cats;
  for (int s = 0; s < spec.num_shapes; ++s) cats.push_back({s + 1, shape_names()[s]});
  SyntheticDataset out;
  int ann_id = 1;
  for (int i = 0; i < count; ++i) {
    Rng rng = make_rng(spec.seed, (stream << 32) + static_cast<std::uint64_t>(i));
    auto scene = generate_synthetic_scene(spec, rng);
    const int id = first_image_id + i;
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.png", id);
    images.push_back({id, name, spec.canvas_width, spec.canvas_height});
    for (const auto& obj : scene.objects) anns.push_back({ann_id++, id, obj.shape + 1, obj.box});
    out.images.push_back(std::move(scene.image));
  }
  out.index = DatasetIndex(std::move(images), std::move(anns), std::move(cats));
  return out;
}

}  // namespace ledet
