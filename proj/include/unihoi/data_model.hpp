#pragma once

// Annotation schema, category registry, synthetic scene generation and
// zero-shot category splits.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "unihoi/common.hpp"
#include "unihoi/image_io.hpp"

namespace unihoi {

using json = nlohmann::json;

struct HoiTriplet {
  BoxCxcywh human_box{};
  BoxCxcywh object_box{};
  int object_class = 0;
  int verb_class = 0;
  int hoi_class = 0;
  // Object not visible (V-COCO style role without a box).
  bool occluded = false;
  friend bool operator==(const HoiTriplet&, const HoiTriplet&) = default;
};

struct HoiSample {
  Image image;
  std::vector<HoiTriplet> triplets;
  std::string image_id;
  friend bool operator==(const HoiSample&, const HoiSample&) = default;
};

class CategoryRegistry {
 public:
  struct Pair {
    int verb = 0;
    int object = 0;
    friend bool operator==(const Pair&, const Pair&) = default;
    friend auto operator<=>(const Pair&, const Pair&) = default;
  };

  CategoryRegistry() = default;
  CategoryRegistry(std::vector<std::string> objects, std::vector<std::string> verbs, std::vector<Pair> pairs,
                   std::map<int, std::string> phrases = {})
      : objects_(std::move(objects)), verbs_(std::move(verbs)), pairs_(std::move(pairs)), phrases_(std::move(phrases)) {
    rebuild();
  }

  const std::vector<std::string>& objects() const { return objects_; }
  const std::vector<std::string>& verbs() const { return verbs_; }
  const std::vector<Pair>& hoi_pairs() const { return pairs_; }
  const std::map<int, std::string>& phrases() const { return phrases_; }
  int num_objects() const { return static_cast<int>(objects_.size()); }
  int num_verbs() const { return static_cast<int>(verbs_.size()); }
  int num_hoi() const { return static_cast<int>(pairs_.size()); }

  int object_id(const std::string& name) const {
    auto it = object_index_.find(name);
    if (it == object_index_.end()) throw RegistryError("unknown object category '" + name + "'");
    return it->second;
  }
  int verb_id(const std::string& name) const {
    auto it = verb_index_.find(name);
    if (it == verb_index_.end()) throw RegistryError("unknown verb category '" + name + "'");
    return it->second;
  }
  std::optional<int> find_hoi(int verb, int object) const {
    auto it = pair_index_.find(Pair{verb, object});
    if (it == pair_index_.end()) return std::nullopt;
    return it->second;
  }
  int hoi_id(int verb, int object) const {
    auto id = find_hoi(verb, object);
    if (!id) {
      throw RegistryError("(" + verb_name(verb) + ", " + object_name(object) + ") is not a registered interaction");
    }
    return *id;
  }
  const Pair& pair(int hoi) const {
    if (hoi < 0 || hoi >= num_hoi()) throw RegistryError("hoi id " + std::to_string(hoi) + " out of range");
    return pairs_[static_cast<std::size_t>(hoi)];
  }
  std::string object_name(int id) const {
    return id >= 0 && id < num_objects() ? objects_[static_cast<std::size_t>(id)] : "#" + std::to_string(id);
  }
  std::string verb_name(int id) const {
    return id >= 0 && id < num_verbs() ? verbs_[static_cast<std::size_t>(id)] : "#" + std::to_string(id);
  }

  // Annotation phrase for an interaction; falls back to "human <verb> <object>".
  std::string phrase(int hoi) const {
    auto it = phrases_.find(hoi);
    if (it != phrases_.end()) return it->second;
    const Pair& p = pair(hoi);
    std::string s = "human " + verb_name(p.verb) + " " + object_name(p.object);
    std::replace(s.begin(), s.end(), '_', ' ');
    return s;
  }

  json to_json() const {
    json j;
    j["objects"] = objects_;
    j["verbs"] = verbs_;
    j["hoi_pairs"] = json::array();
    for (const auto& p : pairs_) j["hoi_pairs"].push_back({verb_name(p.verb), object_name(p.object)});
    j["phrases"] = json::object();
    for (const auto& [id, text] : phrases_) j["phrases"][std::to_string(id)] = text;
    return j;
  }

  static CategoryRegistry from_json(const json& j) {
    try {
      std::vector<std::string> objects = j.at("objects").get<std::vector<std::string>>();
      std::vector<std::string> verbs = j.at("verbs").get<std::vector<std::string>>();
      CategoryRegistry partial(objects, verbs, {});
      std::vector<Pair> pairs;
      for (const auto& p : j.at("hoi_pairs")) {
        if (!p.is_array() || p.size() != 2) throw RegistryError("hoi_pairs entries must be [verb, object]");
        const int v = p[0].is_number() ? p[0].get<int>() : partial.verb_id(p[0].get<std::string>());
        const int o = p[1].is_number() ? p[1].get<int>() : partial.object_id(p[1].get<std::string>());
        pairs.push_back({v, o});
      }
      std::map<int, std::string> phrases;
      if (j.contains("phrases")) {
        for (const auto& [key, text] : j.at("phrases").items()) phrases[std::stoi(key)] = text.get<std::string>();
      }
      return CategoryRegistry(std::move(objects), std::move(verbs), std::move(pairs), std::move(phrases));
    } catch (const json::exception& e) {
      throw RegistryError(std::string("malformed registry: ") + e.what());
    }
  }

  friend bool operator==(const CategoryRegistry& a, const CategoryRegistry& b) {
    return a.objects_ == b.objects_ && a.verbs_ == b.verbs_ && a.pairs_ == b.pairs_ && a.phrases_ == b.phrases_;
  }

 private:
  void rebuild() {
    object_index_.clear();
    verb_index_.clear();
    pair_index_.clear();
    for (std::size_t i = 0; i < objects_.size(); ++i) object_index_[objects_[i]] = static_cast<int>(i);
    for (std::size_t i = 0; i < verbs_.size(); ++i) verb_index_[verbs_[i]] = static_cast<int>(i);
    for (std::size_t i = 0; i < pairs_.size(); ++i) {
      const Pair& p = pairs_[i];
      if (p.verb < 0 || p.verb >= num_verbs() || p.object < 0 || p.object >= num_objects()) {
        throw RegistryError("hoi pair " + std::to_string(i) + " references an unknown category");
      }
      if (!pair_index_.emplace(p, static_cast<int>(i)).second) {
        throw RegistryError("duplicate hoi pair (" + verb_name(p.verb) + ", " + object_name(p.object) + ")");
      }
    }
    for (const auto& [id, _] : phrases_) {
      if (id < 0 || id >= num_hoi()) throw RegistryError("phrase key " + std::to_string(id) + " is not a hoi id");
    }
  }

  std::vector<std::string> objects_;
  std::vector<std::string> verbs_;
  std::vector<Pair> pairs_;
  std::map<int, std::string> phrases_;
  std::map<std::string, int> object_index_;
  std::map<std::string, int> verb_index_;
  std::map<Pair, int> pair_index_;
};

inline CategoryRegistry load_registry(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open registry " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(std::string("registry is not valid JSON: ") + e.what(), 1);
  }
  return CategoryRegistry::from_json(j);
}

inline void save_registry(const std::string& path, const CategoryRegistry& reg) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write registry " + path);
  out << reg.to_json().dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// JSON-lines annotation files

namespace detail {

inline BoxCxcywh normalize_box(const json& b, int width, int height, std::size_t line) {
  if (!b.is_array() || b.size() != 4) throw ParseError("box must be [x1, y1, x2, y2]", line);
  const double x1 = b[0].get<double>(), y1 = b[1].get<double>(), x2 = b[2].get<double>(), y2 = b[3].get<double>();
  const BoxCxcywh n{0.5 * (x1 + x2) / width, 0.5 * (y1 + y2) / height, (x2 - x1) / width, (y2 - y1) / height};
  if (!(n[2] > 0 && n[3] > 0)) throw ParseError("box has non-positive extent", line);
  for (double v : to_xyxy(n)) {
    if (v < -1e-9 || v > 1 + 1e-9) throw ParseError("box lies outside the image", line);
  }
  return n;
}

inline json pixel_box(const BoxCxcywh& b, int width, int height) {
  const BoxXyxy c = to_xyxy(b);
  return json::array({c[0] * width, c[1] * height, c[2] * width, c[3] * height});
}

}  // namespace detail

inline HoiSample parse_sample(const json& rec, const CategoryRegistry& reg, const std::filesystem::path& base_dir,
                              std::size_t line) {
  HoiSample s;
  try {
    s.image_id = rec.at("image_id").get<std::string>();
    const int width = rec.at("width").get<int>();
    const int height = rec.at("height").get<int>();
    if (width <= 0 || height <= 0) throw ParseError("width and height must be positive", line);
    if (rec.contains("pixels")) {
      const int channels = rec.value("channels", 3);
      const auto& px = rec.at("pixels");
      if (!px.is_array() || px.size() != static_cast<std::size_t>(width) * height * channels) {
        throw ParseError("pixels must hold width*height*channels values", line);
      }
      s.image = Image(height, width, channels);
      for (std::size_t i = 0; i < px.size(); ++i) s.image.data[i] = px[i].get<float>();
    } else if (rec.contains("file")) {
      std::filesystem::path p = rec.at("file").get<std::string>();
      if (p.is_relative()) p = base_dir / p;
      s.image = read_ppm(p.string());
      if (s.image.width != width || s.image.height != height) {
        throw ParseError("image file size does not match width/height", line);
      }
    } else {
      throw ParseError("record needs \"pixels\" or \"file\"", line);
    }
    for (const auto& t : rec.at("triplets")) {
      HoiTriplet trip;
      trip.human_box = detail::normalize_box(t.at("h_box"), width, height, line);
      trip.occluded = t.value("occluded", false);
      if (!trip.occluded) trip.object_box = detail::normalize_box(t.at("o_box"), width, height, line);
      trip.object_class = reg.object_id(t.at("object").get<std::string>());
      trip.verb_class = reg.verb_id(t.at("verb").get<std::string>());
      trip.hoi_class = reg.hoi_id(trip.verb_class, trip.object_class);
      s.triplets.push_back(trip);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed record: ") + e.what(), line);
  }
  return s;
}

inline std::vector<HoiSample> load_dataset(const std::string& path, const CategoryRegistry& reg) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotation file " + path);
  const auto base = std::filesystem::path(path).parent_path();
  std::vector<HoiSample> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line);
    }
    out.push_back(parse_sample(rec, reg, base, line));
  }
  return out;
}

inline json sample_to_json(const HoiSample& s, const CategoryRegistry& reg) {
  json rec;
  rec["image_id"] = s.image_id;
  rec["width"] = s.image.width;
  rec["height"] = s.image.height;
  rec["channels"] = s.image.channels;
  rec["pixels"] = s.image.data;
  rec["triplets"] = json::array();
  for (const auto& t : s.triplets) {
    json jt;
    jt["h_box"] = detail::pixel_box(t.human_box, s.image.width, s.image.height);
    if (t.occluded) {
      jt["occluded"] = true;
    } else {
      jt["o_box"] = detail::pixel_box(t.object_box, s.image.width, s.image.height);
    }
    jt["object"] = reg.object_name(t.object_class);
    jt["verb"] = reg.verb_name(t.verb_class);
    rec["triplets"].push_back(jt);
  }
  return rec;
}

inline void save_dataset(const std::string& path, const std::vector<HoiSample>& samples, const CategoryRegistry& reg) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write annotation file " + path);
  for (const auto& s : samples) out << sample_to_json(s, reg).dump() << "\n";
}

// Training-set frequency of every interaction.
inline std::map<int, int> count_hoi(const std::vector<HoiSample>& samples) {
  std::map<int, int> counts;
  for (const auto& s : samples) {
    for (const auto& t : s.triplets) ++counts[t.hoi_class];
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Synthetic scenes
//
// One red "human" rectangle per image and up to max_triplets colored object
// squares. Each verb is a fixed direction from the human to the object, so the
// interaction is decided by geometry alone and is learnable from pixels.

struct SynthSpec {
  int image_size = 64;
  int num_objects = 3;
  int num_verbs = 4;
  int num_samples = 20;
  int max_triplets = 2;
  // Relative sampling weight per hoi id (object-major: hoi = object * num_verbs + verb).
  std::vector<double> hoi_weights;

  static SynthSpec from_json(const json& j) {
    SynthSpec s;
    s.image_size = j.value("image_size", s.image_size);
    s.num_objects = j.value("num_objects", s.num_objects);
    s.num_verbs = j.value("num_verbs", s.num_verbs);
    s.num_samples = j.value("num_samples", s.num_samples);
    s.max_triplets = j.value("max_triplets", s.max_triplets);
    s.hoi_weights = j.value("hoi_weights", std::vector<double>{});
    return s;
  }
};

namespace detail {

struct Relation {
  const char* name;
  double dx;
  double dy;
};

// Image coordinates: y grows downward.
inline constexpr Relation kRelations[] = {
    {"right_of", 1, 0},     {"above", 0, -1},      {"left_of", -1, 0},    {"below", 0, 1},
    {"above_right", 1, -1}, {"above_left", -1, -1}, {"below_left", -1, 1}, {"below_right", 1, 1},
};
inline constexpr int kMaxVerbs = static_cast<int>(sizeof(kRelations) / sizeof(kRelations[0]));

inline constexpr const char* kObjectNames[] = {"ball", "cup", "kite", "book", "bottle", "chair", "phone", "umbrella"};
inline constexpr float kObjectColors[][3] = {
    {0.1f, 0.9f, 0.1f}, {0.1f, 0.3f, 1.0f}, {1.0f, 0.9f, 0.1f}, {0.1f, 0.9f, 0.9f},
    {0.9f, 0.2f, 0.9f}, {1.0f, 1.0f, 1.0f}, {1.0f, 0.55f, 0.0f}, {0.55f, 0.3f, 0.1f},
};
inline constexpr int kMaxObjects = static_cast<int>(sizeof(kObjectNames) / sizeof(kObjectNames[0]));

struct IntBox {
  int x1, y1, x2, y2;
  bool overlaps(const IntBox& o, int margin) const {
    return x1 < o.x2 + margin && o.x1 < x2 + margin && y1 < o.y2 + margin && o.y1 < y2 + margin;
  }
};

inline void fill(Image& img, const IntBox& b, const float* rgb) {
  for (int y = b.y1; y < b.y2; ++y) {
    for (int x = b.x1; x < b.x2; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
    }
  }
}

inline BoxCxcywh normalized(const IntBox& b, int size) {
  const double s = size;
  return {0.5 * (b.x1 + b.x2) / s, 0.5 * (b.y1 + b.y2) / s, (b.x2 - b.x1) / s, (b.y2 - b.y1) / s};
}

}  // namespace detail

inline CategoryRegistry synthetic_registry(int num_objects, int num_verbs) {
  std::vector<std::string> objects, verbs;
  for (int o = 0; o < num_objects; ++o) objects.emplace_back(detail::kObjectNames[o]);
  for (int v = 0; v < num_verbs; ++v) verbs.emplace_back(detail::kRelations[v].name);
  std::vector<CategoryRegistry::Pair> pairs;
  for (int o = 0; o < num_objects; ++o) {
    for (int v = 0; v < num_verbs; ++v) pairs.push_back({v, o});
  }
  return CategoryRegistry(std::move(objects), std::move(verbs), std::move(pairs));
}

inline std::pair<std::vector<HoiSample>, CategoryRegistry> generate_synthetic(const SynthSpec& spec,
                                                                            std::uint64_t seed) {
  if (spec.num_objects <= 0 || spec.num_verbs <= 0) throw InvalidInput("synthetic spec needs at least one object and verb");
  if (spec.num_objects > detail::kMaxObjects || spec.num_verbs > detail::kMaxVerbs) {
    throw InvalidInput("synthetic spec supports at most " + std::to_string(detail::kMaxObjects) + " objects and " +
                       std::to_string(detail::kMaxVerbs) + " verbs");
  }
  if (spec.num_samples < 0 || spec.max_triplets <= 0 || spec.image_size < 32) {
    throw InvalidInput("synthetic spec needs num_samples >= 0, max_triplets >= 1 and image_size >= 32");
  }
  CategoryRegistry reg = synthetic_registry(spec.num_objects, spec.num_verbs);
  std::vector<double> weights = spec.hoi_weights;
  if (weights.empty()) weights.assign(static_cast<std::size_t>(reg.num_hoi()), 1.0);
  if (weights.size() != static_cast<std::size_t>(reg.num_hoi())) {
    throw InvalidInput("hoi_weights must have one entry per hoi pair (" + std::to_string(reg.num_hoi()) + ")");
  }
  std::vector<double> cdf(weights.size());
  std::partial_sum(weights.begin(), weights.end(), cdf.begin());
  if (!(cdf.back() > 0)) throw InvalidInput("hoi_weights must have a positive sum");

  SplitMix rng(seed);
  auto draw_hoi = [&]() {
    const double u = rng.uniform() * cdf.back();
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    return static_cast<int>(std::min<std::ptrdiff_t>(it - cdf.begin(), static_cast<std::ptrdiff_t>(cdf.size()) - 1));
  };
  const int S = spec.image_size;
  constexpr float kHuman[3] = {0.95f, 0.1f, 0.1f};
  std::vector<HoiSample> samples;
  samples.reserve(static_cast<std::size_t>(spec.num_samples));
  for (int n = 0; n < spec.num_samples; ++n) {
    HoiSample s;
    s.image_id = "synth_" + std::to_string(n);
    s.image = Image(S, S, 3);
    for (float& v : s.image.data) v = static_cast<float>(0.05 * rng.uniform());
    const int want = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_triplets)));
    std::vector<int> hois;
    std::set<int> used_verbs;
    for (int tries = 0; static_cast<int>(hois.size()) < want && tries < 8 * want; ++tries) {
      const int h = draw_hoi();
      if (hois.empty() || used_verbs.count(reg.pair(h).verb) == 0) {
        hois.push_back(h);
        used_verbs.insert(reg.pair(h).verb);
      }
    }
    // Place the human, then each object in its verb's direction; resample on failure.
    for (int attempt = 0;; ++attempt) {
      const int hw = static_cast<int>(S * rng.uniform(0.18, 0.28));
      const int hh = static_cast<int>(S * rng.uniform(0.28, 0.4));
      const int hx = static_cast<int>(rng.below(static_cast<std::uint64_t>(S - hw + 1)));
      const int hy = static_cast<int>(rng.below(static_cast<std::uint64_t>(S - hh + 1)));
      const detail::IntBox human{hx, hy, hx + hw, hy + hh};
      std::vector<detail::IntBox> objs;
      bool ok = true;
      for (int h : hois) {
        const auto& rel = detail::kRelations[reg.pair(h).verb];
        const int ow = static_cast<int>(S * rng.uniform(0.12, 0.2));
        const int oh = static_cast<int>(S * rng.uniform(0.12, 0.2));
        const int gap = 1 + static_cast<int>(rng.below(4));
        const double cx = 0.5 * (human.x1 + human.x2) + rel.dx * (0.5 * (hw + ow) + gap);
        const double cy = 0.5 * (human.y1 + human.y2) + rel.dy * (0.5 * (hh + oh) + gap);
        const int ox = static_cast<int>(std::lround(cx - 0.5 * ow));
        const int oy = static_cast<int>(std::lround(cy - 0.5 * oh));
        const detail::IntBox ob{ox, oy, ox + ow, oy + oh};
        if (ob.x1 < 0 || ob.y1 < 0 || ob.x2 > S || ob.y2 > S || ob.overlaps(human, 0)) {
          ok = false;
          break;
        }
        for (const auto& other : objs) ok = ok && !ob.overlaps(other, 1);
        if (!ok) break;
        objs.push_back(ob);
      }
      if (!ok && attempt < 200) continue;
      if (!ok) {
        // Give up on extra objects and keep the first interaction only.
        hois.resize(1);
        continue;
      }
      detail::fill(s.image, human, kHuman);
      for (std::size_t i = 0; i < hois.size(); ++i) {
        const auto& p = reg.pair(hois[i]);
        detail::fill(s.image, objs[i], detail::kObjectColors[p.object]);
        HoiTriplet t;
        t.human_box = detail::normalized(human, S);
        t.object_box = detail::normalized(objs[i], S);
        t.object_class = p.object;
        t.verb_class = p.verb;
        t.hoi_class = hois[i];
        s.triplets.push_back(t);
      }
      break;
    }
    samples.push_back(std::move(s));
  }
  return {std::move(samples), std::move(reg)};
}

// ---------------------------------------------------------------------------
// Zero-shot splits

enum class SplitKind { kRareFirst, kNonRareFirst, kUnseenObject, kUnseenVerb };

inline std::string to_string(SplitKind k) {
  switch (k) {
    case SplitKind::kRareFirst:
      return "RF-UC";
    case SplitKind::kNonRareFirst:
      return "NF-UC";
    case SplitKind::kUnseenObject:
      return "UO";
    case SplitKind::kUnseenVerb:
      return "UV";
  }
  return "?";
}

inline SplitKind parse_split_kind(const std::string& s) {
  if (s == "RF-UC") return SplitKind::kRareFirst;
  if (s == "NF-UC") return SplitKind::kNonRareFirst;
  if (s == "UO") return SplitKind::kUnseenObject;
  if (s == "UV") return SplitKind::kUnseenVerb;
  throw ConfigError("unknown split kind '" + s + "' (expected RF-UC, NF-UC, UO or UV)");
}

struct ZeroShotSplit {
  SplitKind kind = SplitKind::kRareFirst;
  std::set<int> unseen_hoi_ids;
  std::set<int> seen_hoi_ids;
  std::set<int> unseen_objects;
  std::set<int> unseen_verbs;

  json to_json() const {
    return json{{"kind", to_string(kind)},
                {"unseen", unseen_hoi_ids},
                {"seen", seen_hoi_ids},
                {"unseen_objects", unseen_objects},
                {"unseen_verbs", unseen_verbs}};
  }

  static ZeroShotSplit from_json(const json& j) {
    try {
      ZeroShotSplit s;
      s.kind = parse_split_kind(j.at("kind").get<std::string>());
      s.unseen_hoi_ids = j.at("unseen").get<std::set<int>>();
      s.seen_hoi_ids = j.value("seen", std::set<int>{});
      s.unseen_objects = j.value("unseen_objects", std::set<int>{});
      s.unseen_verbs = j.value("unseen_verbs", std::set<int>{});
      return s;
    } catch (const json::exception& e) {
      throw DataError(std::string("malformed split file: ") + e.what());
    }
  }

  // Identity of the split for contamination checks.
  std::string digest() const {
    std::string canon = to_string(kind) + "|";
    for (int id : unseen_hoi_ids) canon += std::to_string(id) + ",";
    return hex64(fnv1a(canon));
  }
};

inline int default_unseen_count(const CategoryRegistry& reg) {
  return static_cast<int>(std::lround(0.2 * reg.num_hoi()));
}

namespace detail {

// Ids sorted by (count, id) ascending or by (-count, id).
inline std::vector<int> rank_by_count(const std::vector<long long>& counts, bool descending) {
  std::vector<int> ids(counts.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    const auto ca = counts[static_cast<std::size_t>(a)], cb = counts[static_cast<std::size_t>(b)];
    if (ca != cb) return descending ? ca > cb : ca < cb;
    return a < b;
  });
  return ids;
}

}  // namespace detail

inline ZeroShotSplit make_split(const CategoryRegistry& reg, const std::map<int, int>& counts, SplitKind kind, int k) {
  auto count_of = [&](int hoi) -> long long {
    auto it = counts.find(hoi);
    return it == counts.end() ? 0 : it->second;
  };
  ZeroShotSplit split;
  split.kind = kind;
  const int available = (kind == SplitKind::kUnseenObject)  ? reg.num_objects()
                        : (kind == SplitKind::kUnseenVerb) ? reg.num_verbs()
                                                           : reg.num_hoi();
  if (k < 0 || k > available) {
    throw RangeError("split size k=" + std::to_string(k) + " exceeds the " + std::to_string(available) +
                     " available categories");
  }
  std::vector<long long> hoi_counts(static_cast<std::size_t>(reg.num_hoi()));
  for (int h = 0; h < reg.num_hoi(); ++h) hoi_counts[static_cast<std::size_t>(h)] = count_of(h);

  if (kind == SplitKind::kRareFirst || kind == SplitKind::kNonRareFirst) {
    const auto ranked = detail::rank_by_count(hoi_counts, kind == SplitKind::kNonRareFirst);
    split.unseen_hoi_ids.insert(ranked.begin(), ranked.begin() + k);
  } else {
    const bool objects = kind == SplitKind::kUnseenObject;
    std::vector<long long> sums(static_cast<std::size_t>(objects ? reg.num_objects() : reg.num_verbs()), 0);
    for (int h = 0; h < reg.num_hoi(); ++h) {
      const auto& p = reg.pair(h);
      sums[static_cast<std::size_t>(objects ? p.object : p.verb)] += hoi_counts[static_cast<std::size_t>(h)];
    }
    const auto ranked = detail::rank_by_count(sums, false);
    std::set<int>& chosen = objects ? split.unseen_objects : split.unseen_verbs;
    chosen.insert(ranked.begin(), ranked.begin() + k);
    for (int h = 0; h < reg.num_hoi(); ++h) {
      const auto& p = reg.pair(h);
      if (chosen.count(objects ? p.object : p.verb)) split.unseen_hoi_ids.insert(h);
    }
  }
  for (int h = 0; h < reg.num_hoi(); ++h) {
    if (!split.unseen_hoi_ids.count(h)) split.seen_hoi_ids.insert(h);
  }
  return split;
}

// Removes unseen interactions from a training set; samples left without any
// triplet are dropped.
inline std::vector<HoiSample> exclude_unseen(const std::vector<HoiSample>& samples, const ZeroShotSplit& split) {
  std::vector<HoiSample> out;
  for (const auto& s : samples) {
    HoiSample kept{s.image, {}, s.image_id};
    for (const auto& t : s.triplets) {
      if (!split.unseen_hoi_ids.count(t.hoi_class)) kept.triplets.push_back(t);
    }
    if (!kept.triplets.empty()) out.push_back(std::move(kept));
  }
  return out;
}

inline ZeroShotSplit load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open split file " + path);
  try {
    return ZeroShotSplit::from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw DataError("split file " + path + " is not valid JSON: " + e.what());
  }
}

inline void save_split(const std::string& path, const ZeroShotSplit& split) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write split file " + path);
  json j = split.to_json();
  j["digest"] = split.digest();
  out << j.dump(2) << "\n";
}

}  // namespace unihoi
