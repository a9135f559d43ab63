#pragma once

// HICO-style mAP (Default / Known Objects, Full / Rare / Non-rare) and
// V-COCO role AP under both occluded-object scenarios.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unihoi/common.hpp"
#include "unihoi/data_model.hpp"

namespace unihoi {

struct Detection {
  std::string image_id;
  BoxXyxy human_box{};   // corner pixels
  BoxXyxy object_box{};  // [0,0,0,0] is the null box
  int hoi_class = 0;
  double score = 0;
};

struct GroundTruth {
  std::string image_id;
  BoxXyxy human_box{};
  BoxXyxy object_box{};
  int hoi_class = 0;
  int object_class = 0;
  bool occluded = false;
};

enum class HicoSetting { kDefault, kKnownObjects };

inline std::string to_string(HicoSetting s) { return s == HicoSetting::kDefault ? "default" : "known_objects"; }

inline HicoSetting parse_hico_setting(const std::string& s) {
  if (s == "default") return HicoSetting::kDefault;
  if (s == "known_objects" || s == "known-objects" || s == "known") return HicoSetting::kKnownObjects;
  throw ConfigError("unknown evaluation setting '" + s + "'");
}

// 0: plain HICO rule; 1, 2: V-COCO scenarios for occluded-object ground truths.
enum class OcclusionRule { kNone = 0, kScenario1 = 1, kScenario2 = 2 };

constexpr double kIouThreshold = 0.5;

inline bool is_null_box(const BoxXyxy& b) { return b[0] == 0 && b[1] == 0 && b[2] == 0 && b[3] == 0; }

inline BoxXyxy pixel_corners(const BoxCxcywh& b, int width, int height) {
  const BoxXyxy x = to_xyxy(b);
  return {x[0] * width, x[1] * height, x[2] * width, x[3] * height};
}

// Ground truths of one sample in pixel corners.
inline std::vector<GroundTruth> ground_truths(const HoiSample& s) {
  std::vector<GroundTruth> out;
  for (const auto& t : s.triplets) {
    GroundTruth g;
    g.image_id = s.image_id;
    g.human_box = pixel_corners(t.human_box, s.image.width, s.image.height);
    g.object_box = t.occluded ? BoxXyxy{0, 0, 0, 0} : pixel_corners(t.object_box, s.image.width, s.image.height);
    g.hoi_class = t.hoi_class;
    g.object_class = t.object_class;
    g.occluded = t.occluded;
    out.push_back(g);
  }
  return out;
}

// Quality of a detection against one ground truth; nullopt when it does not
// qualify. Larger is better.
inline std::optional<double> match_quality(const Detection& det, const GroundTruth& gt, OcclusionRule rule) {
  const double ih = iou_xyxy(det.human_box, gt.human_box);
  if (ih < kIouThreshold) return std::nullopt;
  if (gt.occluded && rule != OcclusionRule::kNone) {
    if (rule == OcclusionRule::kScenario1 && !is_null_box(det.object_box)) return std::nullopt;
    return ih;
  }
  const double io = iou_xyxy(det.object_box, gt.object_box);
  if (io < kIouThreshold) return std::nullopt;
  return std::min(ih, io);
}

// Index of the consumed ground truth, or nullopt for a false positive. gts are
// already restricted to the detection's image and class; used marks consumed ones.
inline std::optional<std::size_t> match_detection(const Detection& det, const std::vector<GroundTruth>& gts,
                                                  std::vector<char>& used,
                                                  OcclusionRule rule = OcclusionRule::kNone) {
  std::optional<std::size_t> best;
  double best_q = -1;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (used[i]) continue;
    const auto q = match_quality(det, gts[i], rule);
    if (q && *q > best_q) {
      best_q = *q;
      best = i;
    }
  }
  if (best) used[*best] = 1;
  return best;
}

// All-point AP: area under the precision-recall curve after making precision
// non-increasing in recall. Returns nullopt when num_gt is 0.
inline std::optional<double> average_precision(const std::vector<bool>& ranked_tp, std::size_t num_gt) {
  if (num_gt == 0) return std::nullopt;
  const std::size_t n = ranked_tp.size();
  std::vector<double> prec(n), rec(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += ranked_tp[i] ? 1 : 0;
    prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  for (std::size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0, prev = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (rec[i] - prev) * prec[i];
    prev = rec[i];
  }
  return ap;
}

// Ranked TP flags and the ground-truth count for one class over an image subset.
inline std::pair<std::vector<bool>, std::size_t> class_pr_flags(const std::vector<Detection>& dets,
                                                                const std::vector<GroundTruth>& gts, int hoi_class,
                                                                const std::set<std::string>* images,
                                                                OcclusionRule rule) {
  auto in_scope = [&](const std::string& id) { return images == nullptr || images->count(id) > 0; };
  std::map<std::string, std::vector<GroundTruth>> by_image;
  std::size_t num_gt = 0;
  for (const auto& g : gts) {
    if (g.hoi_class != hoi_class || !in_scope(g.image_id)) continue;
    by_image[g.image_id].push_back(g);
    ++num_gt;
  }
  std::vector<const Detection*> ranked;
  for (const auto& d : dets) {
    if (d.hoi_class == hoi_class && in_scope(d.image_id)) ranked.push_back(&d);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Detection* a, const Detection* b) { return a->score > b->score; });
  std::map<std::string, std::vector<char>> used;
  for (const auto& [id, v] : by_image) used[id].assign(v.size(), 0);
  std::vector<bool> flags;
  flags.reserve(ranked.size());
  for (const Detection* d : ranked) {
    auto it = by_image.find(d->image_id);
    if (it == by_image.end()) {
      flags.push_back(false);
      continue;
    }
    flags.push_back(match_detection(*d, it->second, used[d->image_id], rule).has_value());
  }
  return {std::move(flags), num_gt};
}

struct APReport {
  std::map<int, double> per_class_ap;  // classes with at least one ground truth
  std::map<int, std::size_t> num_gt;
  std::optional<double> full;
  std::optional<double> rare;
  std::optional<double> non_rare;
  std::string setting;

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [c, ap] : per_class_ap) per[std::to_string(c)] = {{"ap", ap}, {"num_gt", num_gt.at(c)}};
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"setting", setting}, {"full", opt(full)}, {"rare", opt(rare)}, {"non_rare", opt(non_rare)},
            {"per_class", per}};
  }
};

inline std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// The one place that decides which images count for a class under Known
// Objects: those whose ground truth contains the class's object category.
inline std::set<std::string> known_object_images(const std::vector<GroundTruth>& gts, int object_class) {
  std::set<std::string> out;
  for (const auto& g : gts) {
    if (g.object_class == object_class) out.insert(g.image_id);
  }
  return out;
}

// counts: training samples per hoi class; fewer than 10 makes a class rare.
inline APReport evaluate_hico(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                              const CategoryRegistry& reg, const std::map<int, int>& counts,
                              HicoSetting setting = HicoSetting::kDefault, const std::vector<int>& classes = {}) {
  for (const auto& d : dets) {
    if (!std::isfinite(d.score)) throw InvalidInput("detection score is not finite");
  }
  std::vector<int> ids = classes;
  if (ids.empty()) {
    ids.resize(static_cast<std::size_t>(reg.num_hoi()));
    std::iota(ids.begin(), ids.end(), 0);
  }
  APReport rep;
  rep.setting = to_string(setting);
  std::vector<double> all, rare, non_rare;
  for (int c : ids) {
    std::set<std::string> scope;
    if (setting == HicoSetting::kKnownObjects) scope = known_object_images(gts, reg.pair(c).object);
    auto [flags, n] = class_pr_flags(dets, gts, c, setting == HicoSetting::kKnownObjects ? &scope : nullptr,
                                     OcclusionRule::kNone);
    const auto ap = average_precision(flags, n);
    if (!ap) continue;
    rep.per_class_ap[c] = *ap;
    rep.num_gt[c] = n;
    all.push_back(*ap);
    auto it = counts.find(c);
    const int count = it == counts.end() ? 0 : it->second;
    (count < 10 ? rare : non_rare).push_back(*ap);
  }
  rep.full = mean_of(all);
  rep.rare = mean_of(rare);
  rep.non_rare = mean_of(non_rare);
  return rep;
}

struct VcocoReport {
  std::map<int, double> per_class_ap;
  std::optional<double> ap_role;
  int scenario = 1;

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [c, ap] : per_class_ap) per[std::to_string(c)] = ap;
    return {{"scenario", scenario}, {"ap_role", ap_role ? nlohmann::json(*ap_role) : nlohmann::json(nullptr)},
            {"per_class", per}};
  }
};

inline VcocoReport evaluate_vcoco(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                  int scenario) {
  if (scenario != 1 && scenario != 2) throw ConfigError("V-COCO scenario must be 1 or 2");
  std::set<int> classes;
  for (const auto& g : gts) classes.insert(g.hoi_class);
  VcocoReport rep;
  rep.scenario = scenario;
  std::vector<double> aps;
  for (int c : classes) {
    auto [flags, n] = class_pr_flags(dets, gts, c, nullptr, static_cast<OcclusionRule>(scenario));
    const auto ap = average_precision(flags, n);
    if (!ap) continue;
    rep.per_class_ap[c] = *ap;
    aps.push_back(*ap);
  }
  rep.ap_role = mean_of(aps);
  return rep;
}

// ---------------------------------------------------------------------------
// Files

inline nlohmann::json detection_to_json(const Detection& d) {
  return {{"image_id", d.image_id}, {"h_box", d.human_box}, {"o_box", d.object_box}, {"hoi", d.hoi_class},
          {"score", d.score}};
}

inline std::vector<Detection> load_detections(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open detections file " + path);
  std::vector<Detection> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Detection d;
      d.image_id = j.at("image_id").get<std::string>();
      d.human_box = j.at("h_box").get<BoxXyxy>();
      d.object_box = j.at("o_box").get<BoxXyxy>();
      d.hoi_class = j.at("hoi").get<int>();
      d.score = j.at("score").get<double>();
      if (!std::isfinite(d.score)) throw ParseError("non-finite score", n);
      out.push_back(d);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad detection record: ") + e.what(), n);
    }
  }
  return out;
}

inline void save_detections(const std::string& path, const std::vector<Detection>& dets) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& d : dets) out << detection_to_json(d).dump() << "\n";
}

// One row per setting with Full / Rare / Non-rare columns; empty cells are absent partitions.
inline std::string hico_csv(const std::vector<APReport>& reports) {
  std::ostringstream os;
  os << "setting,full,rare,non_rare\n";
  auto cell = [](const std::optional<double>& v) {
    if (!v) return std::string();
    std::ostringstream c;
    c.precision(6);
    c << std::fixed << 100.0 * *v;
    return c.str();
  };
  for (const auto& r : reports) os << r.setting << "," << cell(r.full) << "," << cell(r.rare) << "," << cell(r.non_rare) << "\n";
  return os.str();
}

}  // namespace unihoi
