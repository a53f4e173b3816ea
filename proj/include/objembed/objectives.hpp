#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "objembed/error.hpp"
#include "objembed/geometry.hpp"
#include "objembed/layout.hpp"

namespace objembed {

struct LossConfig {
  double gamma = 2.0;
  double alpha = 0.25;
  double lambda_region = 1.0;
  double lambda_image = 1.0;
  double lambda_iou = 0.25;
  double iou_pos_threshold = 0.5;

  void validate() const {
    if (!(gamma >= 0)) throw ConfigError("loss.gamma must be >= 0");
    if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("loss.alpha must lie in [0,1]");
    if (!(lambda_region >= 0 && lambda_image >= 0 && lambda_iou >= 0))
      throw ConfigError("loss weights must be >= 0");
    if (!(iou_pos_threshold > 0 && iou_pos_threshold < 1))
      throw ConfigError("loss.iou_pos_threshold must lie in (0,1)");
  }
};

/// Loss value and its derivative with respect to the logit.
struct FocalValue {
  double value = 0;
  double dlogit = 0;
};

namespace detail {
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
// |x|^e with the convention 0^0 = 1 and a zero derivative factor at x = 0 for e < 1.
inline double abs_pow(double x, double e) { return e == 0 ? 1.0 : std::pow(std::abs(x), e); }
}  // namespace detail

/// Quality-focal form |t - p|^gamma * CE(p, t) for real-valued targets; no alpha.
inline FocalValue quality_focal_term(double logit, double target, double gamma) {
  const double p = detail::sigmoid(logit);
  const double log_p = -detail::softplus(-logit);
  const double log_1mp = -detail::softplus(logit);
  const double ce = -target * log_p - (1 - target) * log_1mp;
  const double diff = p - target;
  const double mod = detail::abs_pow(diff, gamma);
  double dmod = 0;
  if (gamma != 0 && diff != 0) {
    dmod = gamma * detail::abs_pow(diff, gamma - 1) * (diff > 0 ? 1.0 : -1.0) * p * (1 - p);
  }
  return {mod * ce, dmod * ce + mod * diff};
}

/// Sigmoid focal loss of a logit against t in [0,1]: the alpha-balanced binary
/// form for t in {0,1}, the quality-focal form otherwise. Logs are evaluated as
/// log-sigmoids so they never underflow.
inline FocalValue focal_term(double logit, double target, double gamma, double alpha) {
  if (target != 0.0 && target != 1.0) return quality_focal_term(logit, target, gamma);
  const double p = detail::sigmoid(logit);
  if (target == 1.0) {
    const double log_p = -detail::softplus(-logit);
    const double w = detail::abs_pow(1 - p, gamma);
    return {-alpha * w * log_p, alpha * w * (gamma * p * log_p - (1 - p))};
  }
  const double log_1mp = -detail::softplus(logit);
  const double w = detail::abs_pow(p, gamma);
  return {-(1 - alpha) * w * log_1mp, (1 - alpha) * w * (p - gamma * (1 - p) * log_1mp)};
}

/// Proposal/annotation label assignment. Rows of y are annotations (or
/// annotation groups), columns are proposals.
struct LabelAssignment {
  std::size_t rows = 0, cols = 0;
  std::vector<unsigned char> y;     // rows x cols
  std::vector<double> u_star;       // best ground-truth IoU per proposal
  std::vector<std::size_t> positives;
  std::vector<int> match;           // per proposal: argmax ground truth, or -1 when not positive

  bool label(std::size_t i, std::size_t j) const { return y[i * cols + j] != 0; }
};

inline LabelAssignment assign_labels(std::span<const Box> proposals, std::span<const Box> gts, double threshold) {
  LabelAssignment a;
  a.rows = gts.size();
  a.cols = proposals.size();
  a.y.assign(a.rows * a.cols, 0);
  a.u_star.assign(a.cols, 0.0);
  a.match.assign(a.cols, -1);
  for (std::size_t j = 0; j < proposals.size(); ++j) {
    int best = -1;
    double best_iou = 0;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      const double v = iou(proposals[j], gts[i]);
      if (v > threshold) a.y[i * a.cols + j] = 1;
      if (best < 0 || v > best_iou) {
        best = static_cast<int>(i);
        best_iou = v;
      }
    }
    a.u_star[j] = best_iou;
    if (best >= 0 && best_iou > threshold) {
      a.positives.push_back(j);
      a.match[j] = best;
    }
  }
  return a;
}

/// Same as assign_labels, but each row is a set of ground truths that share one
/// description: y[r][j] = 1 iff proposal j overlaps any member above threshold.
inline LabelAssignment assign_grouped_labels(std::span<const Box> proposals, std::span<const Box> gts,
                                             std::span<const std::vector<int>> groups, double threshold) {
  LabelAssignment base = assign_labels(proposals, gts, threshold);
  LabelAssignment a = base;
  a.rows = groups.size();
  a.y.assign(a.rows * a.cols, 0);
  for (std::size_t r = 0; r < groups.size(); ++r)
    for (int g : groups[r])
      for (std::size_t j = 0; j < a.cols; ++j)
        if (base.label(std::size_t(g), j)) a.y[r * a.cols + j] = 1;
  return a;
}

/// Binary labels or IoU-valued labels (y * u*) for the region objective.
enum class RegionTarget { binary, iou_valued };

struct LossGrad {
  double value = 0;
  std::vector<double> dlogits;
};

/// Region objective: double sum of focal terms over annotations x proposals.
inline LossGrad region_loss(std::span<const double> logits, const LabelAssignment& assign, const LossConfig& cfg,
                            RegionTarget target = RegionTarget::binary) {
  if (logits.size() != assign.rows * assign.cols) throw Error("region_loss: logits shape does not match labels");
  LossGrad out;
  out.dlogits.assign(logits.size(), 0.0);
  for (std::size_t i = 0; i < assign.rows; ++i) {
    for (std::size_t j = 0; j < assign.cols; ++j) {
      const std::size_t k = i * assign.cols + j;
      const double y = assign.label(i, j) ? 1.0 : 0.0;
      FocalValue f = target == RegionTarget::binary ? focal_term(logits[k], y, cfg.gamma, cfg.alpha)
                                                    : quality_focal_term(logits[k], y * assign.u_star[j], cfg.gamma);
      out.value += f.value;
      out.dlogits[k] = f.dlogit;
    }
  }
  return out;
}

/// IoU regression over positive proposals only; soft targets u*. Returns a
/// gradient entry for every proposal (zero outside the positive set).
inline LossGrad iou_loss(std::span<const double> iou_logits, const LabelAssignment& assign, const LossConfig& cfg) {
  if (iou_logits.size() != assign.cols) throw Error("iou_loss: one logit per proposal expected");
  LossGrad out;
  out.dlogits.assign(iou_logits.size(), 0.0);
  for (std::size_t j : assign.positives) {
    FocalValue f = quality_focal_term(iou_logits[j], assign.u_star[j], cfg.gamma);
    out.value += f.value;
    out.dlogits[j] = f.dlogit;
  }
  return out;
}

inline double total_loss(double region, double image, double iou_term, const LossConfig& cfg) {
  if (!std::isfinite(region) || !std::isfinite(image) || !std::isfinite(iou_term)) throw DivergenceError("diverged");
  return cfg.lambda_region * region + cfg.lambda_image * image + cfg.lambda_iou * iou_term;
}

/// Scaled cosine logits a * cos(u_i, v_j) + b between two embedding sets, with
/// the backward pass from dL/dlogits.
struct SimilarityLogits {
  Eigen::MatrixXd cos;     // rows(U) x rows(V)
  Eigen::MatrixXd logits;
  Eigen::VectorXd u_norm, v_norm;
};

inline SimilarityLogits similarity_logits(const Eigen::MatrixXd& U, const Eigen::MatrixXd& V, double a, double b) {
  SimilarityLogits s;
  s.u_norm = U.rowwise().norm();
  s.v_norm = V.rowwise().norm();
  for (Eigen::Index i = 0; i < s.u_norm.size(); ++i)
    if (!(s.u_norm(i) > 0)) throw Error("degenerate embedding");
  for (Eigen::Index i = 0; i < s.v_norm.size(); ++i)
    if (!(s.v_norm(i) > 0)) throw Error("degenerate embedding");
  s.cos = s.u_norm.cwiseInverse().asDiagonal() * (U * V.transpose()) * s.v_norm.cwiseInverse().asDiagonal();
  s.logits = (a * s.cos).array() + b;
  return s;
}

struct SimilarityGrads {
  Eigen::MatrixXd dU, dV;
  double da = 0, db = 0;
};

inline SimilarityGrads similarity_logits_backward(const Eigen::MatrixXd& U, const Eigen::MatrixXd& V,
                                                  const SimilarityLogits& s, const Eigen::MatrixXd& dlogits, double a) {
  SimilarityGrads g;
  g.db = dlogits.sum();
  g.da = dlogits.cwiseProduct(s.cos).sum();
  const Eigen::MatrixXd dcos = a * dlogits;
  const Eigen::MatrixXd Un = s.u_norm.cwiseInverse().asDiagonal() * U;
  const Eigen::MatrixXd Vn = s.v_norm.cwiseInverse().asDiagonal() * V;
  // d cos_ij / d u_i = (vn_j - cos_ij * un_i) / |u_i|
  g.dU = s.u_norm.cwiseInverse().asDiagonal() *
         (dcos * Vn - (dcos.cwiseProduct(s.cos)).rowwise().sum().asDiagonal() * Un);
  g.dV = s.v_norm.cwiseInverse().asDiagonal() *
         (dcos.transpose() * Un - (dcos.cwiseProduct(s.cos)).colwise().sum().transpose().asDiagonal() * Vn);
  return g;
}

/// One image-text contrastive matrix: focal terms of a*cos+b against targets.
struct ContrastiveResult {
  double value = 0;
  Eigen::MatrixXd dU, dV;
  double da = 0, db = 0;
};

inline ContrastiveResult contrastive_focal_loss(const Eigen::MatrixXd& images, const Eigen::MatrixXd& texts,
                                                const Eigen::MatrixXd& targets, double a, double b,
                                                const LossConfig& cfg) {
  if (images.rows() != texts.rows() || targets.rows() != images.rows() || targets.cols() != texts.rows())
    throw Error("image_loss: batch length mismatch");
  const auto s = similarity_logits(images, texts, a, b);
  Eigen::MatrixXd dlogits(s.logits.rows(), s.logits.cols());
  ContrastiveResult r;
  for (Eigen::Index i = 0; i < s.logits.rows(); ++i)
    for (Eigen::Index j = 0; j < s.logits.cols(); ++j) {
      const auto f = focal_term(s.logits(i, j), targets(i, j), cfg.gamma, cfg.alpha);
      r.value += f.value;
      dlogits(i, j) = f.dlogit;
    }
  auto g = similarity_logits_backward(images, texts, s, dlogits, a);
  r.dU = std::move(g.dU);
  r.dV = std::move(g.dV);
  r.da = g.da;
  r.db = g.db;
  return r;
}

/// Target matrix for batch-wide image-text matching: 1 where image i's caption
/// is identical to caption j (the identity matrix when captions are distinct).
inline Eigen::MatrixXd caption_targets(std::span<const int> caption_ids) {
  const auto n = Eigen::Index(caption_ids.size());
  Eigen::MatrixXd t(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) t(i, j) = caption_ids[std::size_t(i)] == caption_ids[std::size_t(j)] ? 1.0 : 0.0;
  return t;
}

enum class CaptionType { short_only, long_only, mix, both };

inline const char* to_string(CaptionType c) {
  switch (c) {
    case CaptionType::short_only: return "short";
    case CaptionType::long_only: return "long";
    case CaptionType::mix: return "mix";
    case CaptionType::both: return "both";
  }
  return "?";
}

inline CaptionType caption_type_from_string(std::string_view s) {
  if (s == "short") return CaptionType::short_only;
  if (s == "long") return CaptionType::long_only;
  if (s == "mix") return CaptionType::mix;
  if (s == "both") return CaptionType::both;
  throw ConfigError("unknown caption type '" + std::string(s) + "'");
}

/// Image-level objective. With two global tokens the coarse embedding is paired
/// with short captions and the detailed one with long captions. With a single
/// token, `caption_type` selects its supervision; for `mix`, use_long[i] picks
/// the caption of image i.
struct ImageLossInput {
  Eigen::MatrixXd coarse, detailed;        // B x d
  Eigen::MatrixXd short_texts, long_texts;  // B x d
  std::vector<int> short_ids, long_ids;     // caption identity, for targets
  std::vector<bool> use_long;               // mix only
};

struct ImageLossResult {
  double value = 0;
  Eigen::MatrixXd d_coarse, d_detailed, d_short, d_long;
  double da = 0, db = 0;
};

inline ImageLossResult image_loss(const ImageLossInput& in, double a, double b, const LossConfig& cfg,
                                  int global_tokens = 2, CaptionType type = CaptionType::both) {
  const auto B = in.coarse.rows();
  if (in.detailed.rows() != B || in.short_texts.rows() != B || in.long_texts.rows() != B ||
      Eigen::Index(in.short_ids.size()) != B || Eigen::Index(in.long_ids.size()) != B)
    throw Error("image_loss: batch length mismatch");
  ImageLossResult r;
  r.d_coarse = Eigen::MatrixXd::Zero(B, in.coarse.cols());
  r.d_detailed = Eigen::MatrixXd::Zero(B, in.detailed.cols());
  r.d_short = Eigen::MatrixXd::Zero(B, in.short_texts.cols());
  r.d_long = Eigen::MatrixXd::Zero(B, in.long_texts.cols());
  if (B == 0) return r;
  auto accumulate = [&](const ContrastiveResult& c, Eigen::MatrixXd& dimg, Eigen::MatrixXd& dtxt) {
    r.value += c.value;
    dimg += c.dU;
    dtxt += c.dV;
    r.da += c.da;
    r.db += c.db;
  };
  const bool two = global_tokens == 2;
  if (two || type == CaptionType::both || type == CaptionType::short_only) {
    accumulate(contrastive_focal_loss(in.coarse, in.short_texts, caption_targets(in.short_ids), a, b, cfg), r.d_coarse,
               r.d_short);
  }
  if (two || type == CaptionType::both || type == CaptionType::long_only) {
    accumulate(contrastive_focal_loss(in.detailed, in.long_texts, caption_targets(in.long_ids), a, b, cfg),
               r.d_detailed, r.d_long);
  }
  if (!two && type == CaptionType::mix) {
    if (Eigen::Index(in.use_long.size()) != B) throw Error("image_loss: mix needs one caption choice per image");
    Eigen::MatrixXd texts(B, in.short_texts.cols());
    std::vector<int> ids(static_cast<std::size_t>(B));
    for (Eigen::Index i = 0; i < B; ++i) {
      const bool lg = in.use_long[std::size_t(i)];
      texts.row(i) = lg ? in.long_texts.row(i) : in.short_texts.row(i);
      // long and short caption ids live in disjoint ranges
      ids[std::size_t(i)] = lg ? -1 - in.long_ids[std::size_t(i)] : in.short_ids[std::size_t(i)];
    }
    auto c = contrastive_focal_loss(in.detailed, texts, caption_targets(ids), a, b, cfg);
    r.value += c.value;
    r.d_detailed += c.dU;
    r.da += c.da;
    r.db += c.db;
    for (Eigen::Index i = 0; i < B; ++i) {
      if (in.use_long[std::size_t(i)])
        r.d_long.row(i) += c.dV.row(i);
      else
        r.d_short.row(i) += c.dV.row(i);
    }
  }
  return r;
}

}  // namespace objembed
