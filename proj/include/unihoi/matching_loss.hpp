#pragma once

// Hungarian assignment of predictions to ground truth and the four-part
// training loss: box L1, GIoU, classification (object softmax + verb focal)
// and the mimic term against the foundation embedding.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "unihoi/autograd.hpp"
#include "unihoi/data_model.hpp"
#include "unihoi/interaction_head.hpp"

namespace unihoi {

struct MatchAssignment {
  std::vector<std::pair<int, int>> pairs;  // (query, ground truth), sorted by ground truth
  double total_cost = 0;
};

// Minimum-cost assignment of every column (ground truth) to a distinct row
// (query) of a rows x cols cost matrix. O(cols^2 * rows) shortest augmenting
// paths with dual potentials.
inline MatchAssignment hungarian(const Eigen::MatrixXd& costs) {
  const int nq = static_cast<int>(costs.rows());
  const int ng = static_cast<int>(costs.cols());
  if (ng > nq) {
    throw InfeasibleError("cannot match " + std::to_string(ng) + " ground truths to " + std::to_string(nq) + " queries");
  }
  if (!costs.allFinite()) throw NumericError("cost matrix contains non-finite entries");
  MatchAssignment out;
  if (ng == 0) return out;
  // Rows of the working problem are ground truths (n <= m), 1-based.
  const int n = ng, m = nq;
  auto a = [&](int i, int j) { return costs(j - 1, i - 1); };
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(m) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(m) + 1, 0), way(static_cast<std::size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, kInf);
    std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = a(i0, j) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= m; ++j) {
    if (p[static_cast<std::size_t>(j)] != 0) out.pairs.emplace_back(j - 1, p[static_cast<std::size_t>(j)] - 1);
  }
  std::sort(out.pairs.begin(), out.pairs.end(), [](auto& x, auto& y) { return x.second < y.second; });
  for (const auto& [q, g] : out.pairs) out.total_cost += costs(q, g);
  return out;
}

// Generalized IoU of two cxcywh boxes.
inline double giou(const BoxCxcywh& a, const BoxCxcywh& b) {
  if (!(a[2] > 0 && a[3] > 0 && b[2] > 0 && b[3] > 0)) throw DomainError("giou needs boxes with positive extent");
  const BoxXyxy x = to_xyxy(a), y = to_xyxy(b);
  const double iw = std::max(0.0, std::min(x[2], y[2]) - std::max(x[0], y[0]));
  const double ih = std::max(0.0, std::min(x[3], y[3]) - std::max(x[1], y[1]));
  const double inter = iw * ih;
  // Areas from the corners so identical boxes give exactly 1.
  const double uni = box_area(x) + box_area(y) - inter;
  const double encl = (std::max(x[2], y[2]) - std::min(x[0], y[0])) * (std::max(x[3], y[3]) - std::min(x[1], y[1]));
  return inter / uni - (encl - uni) / encl;
}

// One matching target: a human-object pair with every verb annotated on it.
struct PairTarget {
  BoxCxcywh human_box{};
  BoxCxcywh object_box{};
  int object_class = 0;
  std::vector<int> verbs;
  bool occluded = false;
};

// Triplets sharing boxes and object class collapse into one multi-verb target.
inline std::vector<PairTarget> merge_targets(const std::vector<HoiTriplet>& triplets) {
  std::vector<PairTarget> out;
  for (const auto& t : triplets) {
    auto it = std::find_if(out.begin(), out.end(), [&](const PairTarget& p) {
      return p.human_box == t.human_box && p.object_box == t.object_box && p.object_class == t.object_class &&
             p.occluded == t.occluded;
    });
    if (it == out.end()) {
      out.push_back({t.human_box, t.object_box, t.object_class, {t.verb_class}, t.occluded});
    } else if (std::find(it->verbs.begin(), it->verbs.end(), t.verb_class) == it->verbs.end()) {
      it->verbs.push_back(t.verb_class);
    }
  }
  return out;
}

struct LossWeights {
  double box = 2.5;
  double giou = 1.0;
  double cls = 1.0;
  double mimic = 20.0;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossOptions {
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double no_object_weight = 0.1;
};

struct CostMatrix {
  Eigen::MatrixXd costs;  // N^q x G
  Eigen::MatrixXd class_cost;
  Eigen::MatrixXd box_cost;
  Eigen::MatrixXd giou_cost;
  LossWeights weights;
};

// Host-side view of one image's predictions, enough for matching.
struct PredictionView {
  Eigen::MatrixXd human_boxes;    // N^q x 4
  Eigen::MatrixXd object_boxes;   // N^q x 4
  Eigen::MatrixXd object_logits;  // N^q x (N^c + 1)
  Eigen::MatrixXd verb_logits;    // N^q x N^a
};

template <typename T>
PredictionView view_of(const InstancePredictions<T>& inst, const Tensor<T>& verb_logits) {
  return {inst.human_boxes.value().template cast<double>(), inst.object_boxes.value().template cast<double>(),
          inst.object_logits.value().template cast<double>(), verb_logits.value().template cast<double>()};
}

// cost(q, g) = w_b * (L1_h + L1_o) + w_u * ((1 - GIoU_h) + (1 - GIoU_o))
//            + w_c * (-p_obj(q, class_g) + mean focal verb cost over g's verbs)
inline CostMatrix match_cost(const PredictionView& pred, const std::vector<PairTarget>& gts, const LossWeights& w = {},
                             const LossOptions& opts = {}) {
  const Eigen::Index nq = pred.human_boxes.rows();
  const Eigen::Index ng = static_cast<Eigen::Index>(gts.size());
  CostMatrix cm;
  cm.weights = w;
  cm.class_cost = Eigen::MatrixXd::Zero(nq, ng);
  cm.box_cost = Eigen::MatrixXd::Zero(nq, ng);
  cm.giou_cost = Eigen::MatrixXd::Zero(nq, ng);
  const Eigen::MatrixXd obj = detail::softmax_rows(pred.object_logits);
  constexpr double kEps = 1e-8;
  for (Eigen::Index q = 0; q < nq; ++q) {
    const BoxCxcywh hb = detail::row_box(pred.human_boxes, q);
    const BoxCxcywh ob = detail::row_box(pred.object_boxes, q);
    for (Eigen::Index g = 0; g < ng; ++g) {
      const PairTarget& t = gts[static_cast<std::size_t>(g)];
      double l1 = 0, gi = 1 - giou(hb, t.human_box);
      for (int k = 0; k < 4; ++k) l1 += std::abs(hb[static_cast<std::size_t>(k)] - t.human_box[static_cast<std::size_t>(k)]);
      if (!t.occluded) {
        for (int k = 0; k < 4; ++k) {
          l1 += std::abs(ob[static_cast<std::size_t>(k)] - t.object_box[static_cast<std::size_t>(k)]);
        }
        gi += 1 - giou(ob, t.object_box);
      }
      double verb = 0;
      for (int v : t.verbs) {
        const double p = sigmoid(pred.verb_logits(q, v));
        const double pos = opts.focal_alpha * std::pow(1 - p, opts.focal_gamma) * -std::log(p + kEps);
        const double neg = (1 - opts.focal_alpha) * std::pow(p, opts.focal_gamma) * -std::log(1 - p + kEps);
        verb += pos - neg;
      }
      if (!t.verbs.empty()) verb /= static_cast<double>(t.verbs.size());
      cm.box_cost(q, g) = l1;
      cm.giou_cost(q, g) = gi;
      cm.class_cost(q, g) = -obj(q, t.object_class) + verb;
    }
  }
  cm.costs = w.box * cm.box_cost + w.giou * cm.giou_cost + w.cls * cm.class_cost;
  return cm;
}

inline MatchAssignment match(const PredictionView& pred, const std::vector<PairTarget>& gts, const LossWeights& w = {},
                             const LossOptions& opts = {}) {
  return hungarian(match_cost(pred, gts, w, opts).costs);
}

// ---------------------------------------------------------------------------
// Loss

struct LossReport {
  double total = 0;
  double box_l1 = 0;
  double giou = 0;
  double obj_class = 0;
  double verb_class = 0;
  double mimic = 0;
  double aux = 0;  // weighted auxiliary-layer losses, 0 unless enabled
  LossWeights weights;

  double recomposed() const {
    return weights.box * box_l1 + weights.giou * giou + weights.cls * (obj_class + verb_class) +
           weights.mimic * mimic + aux;
  }

  nlohmann::json to_json(std::int64_t step) const {
    return {{"step", step},
            {"total", total},
            {"box_l1", box_l1},
            {"giou", giou},
            {"obj_class", obj_class},
            {"verb_class", verb_class},
            {"mimic", mimic},
            {"aux", aux},
            {"weights", {weights.box, weights.giou, weights.cls, weights.mimic}}};
  }
};

template <typename T>
struct LossTerms {
  Tensor<T> box_l1;
  Tensor<T> giou;
  Tensor<T> obj_class;
  Tensor<T> verb_class;
  Tensor<T> mimic;
  Tensor<T> aux;
  Tensor<T> total;
  LossWeights weights;

  LossReport report() const {
    LossReport r;
    r.total = static_cast<double>(total.item());
    r.box_l1 = static_cast<double>(box_l1.item());
    r.giou = static_cast<double>(giou.item());
    r.obj_class = static_cast<double>(obj_class.item());
    r.verb_class = static_cast<double>(verb_class.item());
    r.mimic = static_cast<double>(mimic.item());
    r.aux = aux.defined() ? static_cast<double>(aux.item()) : 0.0;
    r.weights = weights;
    return r;
  }
};

namespace detail {

template <typename T>
Tensor<T> col(const Tensor<T>& m, Eigen::Index c) {
  return ag::slice_cols(m, c, 1);
}

// Sum over rows of (1 - GIoU) between predicted cxcywh rows and constant targets.
template <typename T>
Tensor<T> giou_loss_sum(const Tensor<T>& pred, const Matrix<T>& target) {
  const T half(0.5);
  Tensor<T> cx = col(pred, 0), cy = col(pred, 1), w = col(pred, 2), h = col(pred, 3);
  Tensor<T> px1 = cx - w * half, py1 = cy - h * half, px2 = cx + w * half, py2 = cy + h * half;
  Matrix<T> tx1 = target.col(0) - half * target.col(2), ty1 = target.col(1) - half * target.col(3);
  Matrix<T> tx2 = target.col(0) + half * target.col(2), ty2 = target.col(1) + half * target.col(3);
  Tensor<T> gx1(tx1), gy1(ty1), gx2(tx2), gy2(ty2);
  Tensor<T> iw = ag::clamp_min(ag::minimum(px2, gx2) - ag::maximum(px1, gx1), T(0));
  Tensor<T> ih = ag::clamp_min(ag::minimum(py2, gy2) - ag::maximum(py1, gy1), T(0));
  Tensor<T> inter = iw * ih;
  Tensor<T> target_area(Matrix<T>(target.col(2).cwiseProduct(target.col(3))));
  Tensor<T> uni = (w * h + target_area) - inter;
  Tensor<T> ew = ag::maximum(px2, gx2) - ag::minimum(px1, gx1);
  Tensor<T> eh = ag::maximum(py2, gy2) - ag::minimum(py1, gy1);
  Tensor<T> encl = ew * eh;
  Tensor<T> g = inter / uni - (encl - uni) / encl;
  return ag::add_scalar(ag::sum(g) * T(-1), static_cast<T>(g.rows()));
}

template <typename T>
Matrix<T> box_matrix(const std::vector<BoxCxcywh>& boxes) {
  Matrix<T> m(static_cast<Eigen::Index>(boxes.size()), 4);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    for (int k = 0; k < 4; ++k) m(static_cast<Eigen::Index>(i), k) = static_cast<T>(boxes[i][static_cast<std::size_t>(k)]);
  }
  return m;
}

}  // namespace detail

// Set-prediction terms for one decoder depth, batched over images.
template <typename T>
struct SetLossTerms {
  Tensor<T> box_l1, giou, obj_class, verb_class;
  int num_matched = 0;
};

template <typename T>
SetLossTerms<T> set_prediction_loss(const std::vector<const InstancePredictions<T>*>& instances,
                                    const std::vector<const Tensor<T>*>& verb_logits,
                                    const std::vector<std::vector<PairTarget>>& targets,
                                    const std::vector<MatchAssignment>& assignments, const LossOptions& opts = {}) {
  const std::size_t batch = instances.size();
  if (verb_logits.size() != batch || targets.size() != batch || assignments.size() != batch) {
    throw ShapeError("loss inputs disagree on batch size");
  }
  SetLossTerms<T> out;
  std::vector<Tensor<T>> h_pred, o_pred;
  std::vector<BoxCxcywh> h_gt, o_gt;
  std::vector<Tensor<T>> logits_rows, verb_rows;
  std::vector<Eigen::Index> obj_targets;
  std::vector<T> obj_weights;
  std::vector<Matrix<T>> verb_targets;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& inst = *instances[b];
    const Eigen::Index nq = inst.human_boxes.rows();
    const Eigen::Index no_object = inst.object_logits.cols() - 1;
    std::vector<Eigen::Index> hq, oq;
    Matrix<T> vt = Matrix<T>::Zero(nq, verb_logits[b]->cols());
    std::vector<Eigen::Index> cls(static_cast<std::size_t>(nq), no_object);
    std::vector<T> wts(static_cast<std::size_t>(nq), static_cast<T>(opts.no_object_weight));
    std::set<int> seen_q;
    for (const auto& [q, g] : assignments[b].pairs) {
      if (q < 0 || q >= nq || g < 0 || g >= static_cast<int>(targets[b].size()) || !seen_q.insert(q).second) {
        throw InvalidInput("invalid assignment for image " + std::to_string(b));
      }
      const PairTarget& t = targets[b][static_cast<std::size_t>(g)];
      hq.push_back(q);
      h_gt.push_back(t.human_box);
      if (!t.occluded) {
        oq.push_back(q);
        o_gt.push_back(t.object_box);
      }
      cls[static_cast<std::size_t>(q)] = t.object_class;
      wts[static_cast<std::size_t>(q)] = T(1);
      for (int v : t.verbs) vt(q, v) = T(1);
      ++out.num_matched;
    }
    if (!hq.empty()) h_pred.push_back(ag::gather_rows(inst.human_boxes, hq));
    if (!oq.empty()) o_pred.push_back(ag::gather_rows(inst.object_boxes, oq));
    logits_rows.push_back(inst.object_logits);
    verb_rows.push_back(*verb_logits[b]);
    obj_targets.insert(obj_targets.end(), cls.begin(), cls.end());
    obj_weights.insert(obj_weights.end(), wts.begin(), wts.end());
    verb_targets.push_back(std::move(vt));
  }
  const T norm = static_cast<T>(std::max(out.num_matched, 1));
  if (out.num_matched == 0) {
    out.box_l1 = Tensor<T>::zeros(1, 1);
    out.giou = Tensor<T>::zeros(1, 1);
  } else {
    Tensor<T> hp = ag::concat_rows(h_pred);
    Tensor<T> l1 = ag::sum(ag::abs(hp - Tensor<T>(detail::box_matrix<T>(h_gt))));
    Tensor<T> gi = detail::giou_loss_sum(hp, detail::box_matrix<T>(h_gt));
    if (!o_pred.empty()) {
      Tensor<T> op = ag::concat_rows(o_pred);
      l1 = l1 + ag::sum(ag::abs(op - Tensor<T>(detail::box_matrix<T>(o_gt))));
      gi = gi + detail::giou_loss_sum(op, detail::box_matrix<T>(o_gt));
    }
    out.box_l1 = l1 * (T(1) / norm);
    out.giou = gi * (T(1) / norm);
  }
  T wsum = 0;
  for (T w : obj_weights) wsum += w;
  out.obj_class = ag::weighted_nll_sum(ag::concat_rows(logits_rows), obj_targets, obj_weights) * (T(1) / wsum);
  Matrix<T> vt_all(static_cast<Eigen::Index>(obj_targets.size()), verb_rows.front().cols());
  Eigen::Index off = 0;
  for (const auto& m : verb_targets) {
    vt_all.middleRows(off, m.rows()) = m;
    off += m.rows();
  }
  out.verb_class = ag::sigmoid_focal_sum(ag::concat_rows(verb_rows), vt_all, static_cast<T>(opts.focal_alpha),
                                         static_cast<T>(opts.focal_gamma)) *
                   (T(1) / norm);
  return out;
}

// Mean over images with at least one match of mean |FC(mean matched fused) - global|.
template <typename T>
Tensor<T> mimic_loss(const std::vector<const Tensor<T>*>& fused, const std::vector<MatchAssignment>& assignments,
                     const std::vector<const FoundationTokens*>& foundation, const RelationProjection<T>& fc) {
  std::vector<Tensor<T>> per_image;
  for (std::size_t b = 0; b < fused.size(); ++b) {
    if (assignments[b].pairs.empty()) continue;
    if (foundation[b]->global.size() != fc.text_dim()) {
      throw ShapeError("mimic target width " + std::to_string(foundation[b]->global.size()) +
                       " differs from the relation projection width " + std::to_string(fc.text_dim()));
    }
    std::vector<Eigen::Index> rows;
    for (const auto& [q, g] : assignments[b].pairs) rows.push_back(q);
    Tensor<T> pooled = fc(ag::mean_rows(ag::gather_rows(*fused[b], rows)));
    Tensor<T> target(Matrix<T>(foundation[b]->global.template cast<T>()));
    per_image.push_back(ag::mean(ag::abs(pooled - target)));
  }
  if (per_image.empty()) return Tensor<T>::zeros(1, 1);
  Tensor<T> acc = per_image.front();
  for (std::size_t i = 1; i < per_image.size(); ++i) acc = acc + per_image[i];
  return acc * (T(1) / static_cast<T>(per_image.size()));
}

template <typename T>
Tensor<T> weighted_total(const LossWeights& w, const Tensor<T>& box, const Tensor<T>& gi, const Tensor<T>& obj,
                         const Tensor<T>& verb, const Tensor<T>& mimic) {
  return box * static_cast<T>(w.box) + gi * static_cast<T>(w.giou) + (obj + verb) * static_cast<T>(w.cls) +
         mimic * static_cast<T>(w.mimic);
}

// Full loss over a batch. aux_assignments[l][b] matches the l-th auxiliary
// layer of image b; pass an empty vector when auxiliary losses are off.
template <typename T>
LossTerms<T> compute_loss(const std::vector<DetectorOutputs<T>>& outputs,
                          const std::vector<std::vector<PairTarget>>& targets,
                          const std::vector<MatchAssignment>& assignments,
                          const std::vector<const FoundationTokens*>& foundation, const RelationProjection<T>& fc,
                          const LossWeights& weights = {}, const LossOptions& opts = {},
                          const std::vector<std::vector<MatchAssignment>>& aux_assignments = {}) {
  if (outputs.size() != foundation.size()) throw ShapeError("one foundation entry per image is required");
  std::vector<const InstancePredictions<T>*> inst;
  std::vector<const Tensor<T>*> verbs, fused;
  for (const auto& o : outputs) {
    inst.push_back(&o.instances);
    verbs.push_back(&o.verb_logits);
    fused.push_back(&o.fused);
  }
  SetLossTerms<T> set = set_prediction_loss(inst, verbs, targets, assignments, opts);
  LossTerms<T> terms;
  terms.weights = weights;
  terms.box_l1 = set.box_l1;
  terms.giou = set.giou;
  terms.obj_class = set.obj_class;
  terms.verb_class = set.verb_class;
  terms.mimic = mimic_loss(fused, assignments, foundation, fc);
  terms.total = weighted_total(weights, terms.box_l1, terms.giou, terms.obj_class, terms.verb_class, terms.mimic);
  if (!aux_assignments.empty()) {
    Tensor<T> aux = Tensor<T>::zeros(1, 1);
    for (std::size_t l = 0; l < aux_assignments.size(); ++l) {
      std::vector<const InstancePredictions<T>*> ai;
      std::vector<const Tensor<T>*> av;
      for (const auto& o : outputs) {
        ai.push_back(&o.aux_instances.at(l));
        av.push_back(&o.aux_verb_logits.at(l));
      }
      SetLossTerms<T> s = set_prediction_loss(ai, av, targets, aux_assignments[l], opts);
      aux = aux + weighted_total(weights, s.box_l1, s.giou, s.obj_class, s.verb_class, Tensor<T>::zeros(1, 1));
    }
    terms.aux = aux;
    terms.total = terms.total + aux;
  }
  return terms;
}

}  // namespace unihoi
