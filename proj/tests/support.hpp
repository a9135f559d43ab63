#pragma once

// Independent reference implementations and fixtures shared by the unit and
// acceptance suites. Nothing here calls into the code it checks.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "unihoi/evaluation.hpp"
#include "unihoi/matching_loss.hpp"
#include "unihoi/model.hpp"

namespace unihoi::testing {

// ---------------------------------------------------------------------------
// Fixtures

inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  auto p = std::filesystem::temp_directory_path() / ("unihoi-" + tag + "-" + std::to_string(rng() % 1000000007ULL));
  std::filesystem::create_directories(p);
  return p;
}

inline std::filesystem::path source_dir() { return UNIHOI_SOURCE_DIR; }

// d_v 32, n_q 4, one layer everywhere.
inline ModelConfig tiny_config(int num_objects = 3, int num_verbs = 4) {
  ModelConfig c;
  c.d_v = 32;
  c.n_q = 4;
  c.heads = 4;
  c.ffn_dim = 64;
  c.encoder_layers = 1;
  c.instance_decoder_layers = c.interaction_decoder_layers = c.hopd_layers = 1;
  c.patch_stride = 8;
  c.num_objects = num_objects;
  c.num_verbs = num_verbs;
  return c;
}

inline Image random_image(int h, int w, std::uint64_t seed) {
  Image img(h, w, 3);
  SplitMix rng(seed);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

// ---------------------------------------------------------------------------
// Matching oracle: minimum over every injective map from gts to queries.

inline double exhaustive_min_cost(const Eigen::MatrixXd& c) {
  const int nq = static_cast<int>(c.rows()), ng = static_cast<int>(c.cols());
  std::vector<int> q(static_cast<std::size_t>(nq));
  std::iota(q.begin(), q.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // Every permutation of queries; the first ng entries are the assignment.
  do {
    double s = 0;
    for (int g = 0; g < ng; ++g) s += c(q[static_cast<std::size_t>(g)], g);
    best = std::min(best, s);
  } while (std::next_permutation(q.begin(), q.end()));
  return best;
}

// ---------------------------------------------------------------------------
// AP oracle. For every prefix length k of the ranked list the greedy matching
// is redone from scratch, giving precision and recall at k; AP is the
// all-point area with the precision envelope taken as a running max from the
// right.

struct OracleGt {
  std::string image;
  std::array<double, 4> h, o;
  int cls;
  int obj;
  bool occluded;
};

struct OracleDet {
  std::string image;
  std::array<double, 4> h, o;
  int cls;
  double score;
};

inline double oracle_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double iw = std::max(0.0, std::min(a[2], b[2]) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, std::min(a[3], b[3]) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
  return ua > 0 ? inter / ua : 0.0;
}

// scenario 0 is the plain rule.
inline int oracle_tp_count(const std::vector<OracleDet>& ranked_prefix, const std::vector<OracleGt>& gts, int scenario) {
  std::vector<bool> used(gts.size(), false);
  int tp = 0;
  for (const auto& d : ranked_prefix) {
    int pick = -1;
    double best = -1;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      const auto& g = gts[i];
      if (used[i] || g.image != d.image) continue;
      const double ih = oracle_iou(d.h, g.h);
      if (ih < 0.5) continue;
      double q;
      if (g.occluded && scenario != 0) {
        const bool null_box = d.o[0] == 0 && d.o[1] == 0 && d.o[2] == 0 && d.o[3] == 0;
        if (scenario == 1 && !null_box) continue;
        q = ih;
      } else {
        const double io = oracle_iou(d.o, g.o);
        if (io < 0.5) continue;
        q = std::min(ih, io);
      }
      if (q > best) {
        best = q;
        pick = static_cast<int>(i);
      }
    }
    if (pick >= 0) {
      used[static_cast<std::size_t>(pick)] = true;
      ++tp;
    }
  }
  return tp;
}

// AP of one class; dets and gts already restricted to the class and images.
inline std::optional<double> oracle_ap(std::vector<OracleDet> dets, const std::vector<OracleGt>& gts, int scenario) {
  if (gts.empty()) return std::nullopt;
  std::stable_sort(dets.begin(), dets.end(), [](const OracleDet& a, const OracleDet& b) { return a.score > b.score; });
  const std::size_t n = dets.size();
  std::vector<double> p(n), r(n);
  for (std::size_t k = 1; k <= n; ++k) {
    const std::vector<OracleDet> prefix(dets.begin(), dets.begin() + static_cast<std::ptrdiff_t>(k));
    const int tp = oracle_tp_count(prefix, gts, scenario);
    p[k - 1] = static_cast<double>(tp) / static_cast<double>(k);
    r[k - 1] = static_cast<double>(tp) / static_cast<double>(gts.size());
  }
  double ap = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double prev = k == 0 ? 0.0 : r[k - 1];
    double env = 0;
    for (std::size_t j = k; j < n; ++j) env = std::max(env, p[j]);
    ap += (r[k] - prev) * env;
  }
  return ap;
}

struct OracleInstance {
  std::vector<OracleGt> gts;
  std::vector<OracleDet> dets;
  std::map<int, int> object_of;  // hoi class -> object class
};

// Per-class APs under the Default (known=false) or Known Objects rule.
inline std::map<int, double> oracle_hico(const OracleInstance& inst, bool known) {
  std::map<int, double> out;
  for (const auto& [cls, obj] : inst.object_of) {
    std::set<std::string> images;
    for (const auto& g : inst.gts) {
      if (g.obj == obj) images.insert(g.image);
    }
    std::vector<OracleGt> gts;
    for (const auto& g : inst.gts) {
      if (g.cls == cls && (!known || images.count(g.image))) gts.push_back(g);
    }
    std::vector<OracleDet> dets;
    for (const auto& d : inst.dets) {
      if (d.cls == cls && (!known || images.count(d.image))) dets.push_back(d);
    }
    if (auto ap = oracle_ap(dets, gts, 0)) out[cls] = *ap;
  }
  return out;
}

inline std::map<int, double> oracle_vcoco(const OracleInstance& inst, int scenario) {
  std::map<int, double> out;
  std::set<int> classes;
  for (const auto& g : inst.gts) classes.insert(g.cls);
  for (int cls : classes) {
    std::vector<OracleGt> gts;
    for (const auto& g : inst.gts) {
      if (g.cls == cls) gts.push_back(g);
    }
    std::vector<OracleDet> dets;
    for (const auto& d : inst.dets) {
      if (d.cls == cls) dets.push_back(d);
    }
    if (auto ap = oracle_ap(dets, gts, scenario)) out[cls] = *ap;
  }
  return out;
}

// Random micro-instance: up to 5 images, 6 detections, 3 classes. Boxes live
// on a coarse integer grid and detections are jittered copies of ground
// truths so that hits, misses and duplicates all occur; scores come from a
// small set so ties are common.
inline OracleInstance random_instance(std::mt19937_64& rng, bool with_occlusion) {
  std::uniform_int_distribution<int> n_img(1, 5), n_det(0, 6), n_cls(1, 3), coord(0, 8), ext(1, 5), coin(0, 3);
  OracleInstance inst;
  const int classes = n_cls(rng);
  for (int c = 0; c < classes; ++c) inst.object_of[c] = std::uniform_int_distribution<int>(0, 1)(rng);
  const int images = n_img(rng);
  auto box = [&]() {
    const double x = coord(rng), y = coord(rng);
    return std::array<double, 4>{x, y, x + ext(rng), y + ext(rng)};
  };
  for (int i = 0; i < images; ++i) {
    const int gcount = std::uniform_int_distribution<int>(0, 3)(rng);
    for (int g = 0; g < gcount; ++g) {
      const int cls = std::uniform_int_distribution<int>(0, classes - 1)(rng);
      const bool occ = with_occlusion && coin(rng) == 0;
      inst.gts.push_back({"img" + std::to_string(i), box(), occ ? std::array<double, 4>{0, 0, 0, 0} : box(), cls,
                          inst.object_of[cls], occ});
    }
  }
  const int dcount = n_det(rng);
  for (int d = 0; d < dcount; ++d) {
    OracleDet det;
    const double score = std::uniform_int_distribution<int>(1, 4)(rng) / 4.0;
    if (!inst.gts.empty() && coin(rng) != 0) {
      const auto& g = inst.gts[std::uniform_int_distribution<std::size_t>(0, inst.gts.size() - 1)(rng)];
      auto jitter = [&](std::array<double, 4> b) {
        const int j = std::uniform_int_distribution<int>(0, 2)(rng);
        b[2] += j;
        return b;
      };
      det = {g.image, jitter(g.h), g.occluded ? (coin(rng) < 2 ? std::array<double, 4>{0, 0, 0, 0} : box()) : jitter(g.o),
             coin(rng) == 0 ? std::uniform_int_distribution<int>(0, classes - 1)(rng) : g.cls, score};
    } else {
      det = {"img" + std::to_string(std::uniform_int_distribution<int>(0, images - 1)(rng)), box(), box(),
             std::uniform_int_distribution<int>(0, classes - 1)(rng), score};
    }
    inst.dets.push_back(det);
  }
  return inst;
}

inline std::vector<GroundTruth> to_gts(const OracleInstance& inst) {
  std::vector<GroundTruth> out;
  for (const auto& g : inst.gts) out.push_back({g.image, g.h, g.o, g.cls, g.obj, g.occluded});
  return out;
}

inline std::vector<Detection> to_dets(const OracleInstance& inst) {
  std::vector<Detection> out;
  for (const auto& d : inst.dets) out.push_back({d.image, d.h, d.o, d.cls, d.score});
  return out;
}

// Registry whose hoi i has object inst.object_of[i].
inline CategoryRegistry registry_for(const OracleInstance& inst) {
  std::vector<std::string> objects = {"obj0", "obj1"};
  std::vector<std::string> verbs;
  std::vector<CategoryRegistry::Pair> pairs;
  for (const auto& [cls, obj] : inst.object_of) {
    verbs.push_back("verb" + std::to_string(cls));
    pairs.push_back({cls, obj});
  }
  return CategoryRegistry(objects, verbs, pairs);
}

// ---------------------------------------------------------------------------
// Finite differences

// Max relative error between analytic gradients and central differences over
// sampled entries of every parameter tensor. loss() must recompute from the
// current parameter values; grads() must return the analytic gradient of the
// same scalar for each parameter (empty matrix meaning zero).
struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst;
  std::size_t entries = 0;
  std::size_t kinks = 0;  // entries whose +-h window straddles a ReLU/abs/clamp corner
};

// The floor keeps entries whose true gradient is exactly zero (attention key
// biases, for one) from turning rounding noise into a huge ratio.
inline constexpr double kRelFloor = 1e-5;

inline double rel_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kRelFloor});
}

// A tiny double-precision model with fixed inputs and a fixed assignment.
struct GradRig {
  std::unique_ptr<UniHoiModel<double>> model;
  std::vector<Image> images;
  std::vector<FoundationTokens> features;
  std::vector<std::vector<PairTarget>> targets;
  std::vector<MatchAssignment> assignments;
  LossWeights weights;

  LossTerms<double> loss() const {
    std::vector<DetectorOutputs<double>> outs;
    std::vector<const FoundationTokens*> fts;
    for (std::size_t i = 0; i < images.size(); ++i) {
      outs.push_back(model->forward(images[i], features[i]));
      fts.push_back(&features[i]);
    }
    return compute_loss(outs, targets, assignments, fts, model->relation_projection(), weights);
  }
};

inline GradRig make_grad_rig(std::uint64_t seed, const FoundationProvider& provider) {
  GradRig rig;
  rig.model = std::make_unique<UniHoiModel<double>>(tiny_config(), seed);
  SynthSpec spec;
  spec.image_size = 32;
  spec.num_samples = 2;
  auto [samples, reg] = generate_synthetic(spec, seed + 11);
  for (const auto& s : samples) {
    rig.images.push_back(s.image);
    rig.features.push_back(provide_features(s.image, provider, s.image_id));
    rig.targets.push_back(merge_targets(s.triplets));
  }
  for (std::size_t i = 0; i < rig.images.size(); ++i) {
    const auto out = rig.model->forward(rig.images[i], rig.features[i]);
    rig.assignments.push_back(match(view_of(out.instances, out.verb_logits), rig.targets[i]));
  }
  return rig;
}

inline const char* kTermNames[] = {"box_l1", "giou", "obj_class", "verb_class", "mimic", "total"};

inline const Tensor<double>& term(const LossTerms<double>& t, int i) {
  switch (i) {
    case 0:
      return t.box_l1;
    case 1:
      return t.giou;
    case 2:
      return t.obj_class;
    case 3:
      return t.verb_class;
    case 4:
      return t.mimic;
    default:
      return t.total;
  }
}

inline std::array<double, 6> term_values(const LossTerms<double>& t) {
  std::array<double, 6> v{};
  for (int i = 0; i < 6; ++i) v[static_cast<std::size_t>(i)] = term(t, i).item();
  return v;
}

// Central differences with step h on up to per_param sampled entries of every
// parameter tensor, against the analytic gradient of each loss term. An entry
// that misses tol is re-differenced at h/4; if the two estimates disagree with
// each other the window crossed a non-differentiable point and the entry is
// counted as a kink instead. A wrong gradient is wrong at both steps, so it is
// still reported.
inline std::array<GradCheckResult, 6> grad_check(GradRig& rig, int per_param, std::uint64_t seed, double h = 1e-5,
                                                 double tol = 1e-4) {
  auto& params = rig.model->params().params();
  std::array<std::vector<ag::Matrix<double>>, 6> analytic;
  for (int t = 0; t < 6; ++t) {
    rig.model->params().zero_grad();
    const auto terms = rig.loss();
    term(terms, t).backward();
    for (auto& [name, p] : params) {
      analytic[static_cast<std::size_t>(t)].push_back(
          p.grad().size() == 0 ? ag::Matrix<double>::Zero(p.rows(), p.cols()) : p.grad());
    }
  }
  std::array<GradCheckResult, 6> res;
  std::mt19937_64 rng(seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& [name, p] = params[pi];
    const Eigen::Index size = p.value().size();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(size));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(per_param)));
    for (Eigen::Index k : idx) {
      double& x = p.mutable_value().data()[k];
      const double saved = x;
      x = saved + h;
      const auto up = term_values(rig.loss());
      x = saved - h;
      const auto down = term_values(rig.loss());
      x = saved;
      std::optional<std::array<double, 6>> fine;
      for (std::size_t t = 0; t < 6; ++t) {
        const double numeric = (up[t] - down[t]) / (2 * h);
        const double a = analytic[t][pi].data()[k];
        const double e = rel_error(a, numeric);
        ++res[t].entries;
        if (e > tol) {
          if (!fine) {
            const double q = h / 4;
            x = saved + q;
            const auto u = term_values(rig.loss());
            x = saved - q;
            const auto d = term_values(rig.loss());
            x = saved;
            fine.emplace();
            for (std::size_t i = 0; i < 6; ++i) (*fine)[i] = (u[i] - d[i]) / (2 * q);
          }
          if (rel_error(numeric, (*fine)[t]) > tol) {
            ++res[t].kinks;
            continue;
          }
        }
        if (e > res[t].max_rel_error) {
          res[t].max_rel_error = e;
          res[t].worst = name + "[" + std::to_string(k) + "] analytic " + std::to_string(a) + " numeric " +
                         std::to_string(numeric);
        }
      }
    }
  }
  return res;
}

}  // namespace unihoi::testing
