#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <type_traits>
#include <vector>

#include "objembed/encoder.hpp"
#include "objembed/objectives.hpp"
#include "objembed/parallel.hpp"

namespace objembed {

/// One image of a training batch with its label rows already resolved.
struct TrainImage {
  TokenSequence seq;
  LabelAssignment labels;        // rows align with local_texts
  std::vector<int> local_texts;  // indices into TrainBatch::texts
  int short_text = -1;           // index into TrainBatch::texts
  int long_text = -1;
  bool use_long = false;         // caption choice for single-token "mix"
};

/// Images plus the deduplicated text sequences they reference.
struct TrainBatch {
  std::vector<TrainImage> images;
  std::vector<TokenSequence> texts;
};

struct ObjectiveOptions {
  TokenMode token_mode = TokenMode::dual_cls_iou;
  int global_tokens = 2;
  CaptionType caption_type = CaptionType::both;
};

struct LossBreakdown {
  double region = 0, image = 0, iou = 0, total = 0;
};

namespace detail {
template <typename T>
Eigen::MatrixXd gather_rows(const Mat<T>& hidden, const std::vector<int>& rows) {
  Eigen::MatrixXd out(Eigen::Index(rows.size()), hidden.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(Eigen::Index(i)) = hidden.row(rows[i]).template cast<double>();
  return out;
}

template <typename T>
void scatter_rows(Mat<T>& target, const std::vector<int>& rows, const Eigen::MatrixXd& grad, double scale) {
  for (std::size_t i = 0; i < rows.size(); ++i)
    target.row(rows[i]) += (grad.row(Eigen::Index(i)) * scale).template cast<T>();
}
}  // namespace detail

/// Total objective of a batch (region and IoU terms summed per image, all
/// terms averaged over images) and, when grads != nullptr, its exact gradient
/// accumulated into grads.
template <typename T>
LossBreakdown compute_gradients(const Encoder<T>& enc, const ParamStore<T>& p, const TrainBatch& batch,
                                const LossConfig& cfg, const ObjectiveOptions& opt, std::type_identity_t<ParamStore<T>>* grads,
                                int threads = worker_count()) {
  const std::size_t B = batch.images.size(), K = batch.texts.size();
  if (B == 0) throw Error("empty batch");
  const std::size_t nseq = B + K;
  auto seq_at = [&](std::size_t i) -> const TokenSequence& {
    return i < B ? batch.images[i].seq : batch.texts[i - B];
  };
  std::vector<ForwardState<T>> states(nseq);
  parallel_for(nseq, [&](std::size_t i) { states[i] = enc.forward(p, seq_at(i)); }, threads);

  const double a = double(p.scalar(enc.sim_scale_index()));
  const double b = double(p.scalar(enc.sim_bias_index()));
  const int d = enc.config().d_model;
  std::vector<Mat<T>> dhidden(nseq);
  for (std::size_t i = 0; i < nseq; ++i) dhidden[i] = Mat<T>::Zero(states[i].hidden.rows(), d);

  Eigen::MatrixXd text_emb(Eigen::Index(K), d);
  for (std::size_t k = 0; k < K; ++k) {
    const auto& s = batch.texts[k];
    if (!s.text) throw Error("batch text lacks a text slot");
    text_emb.row(Eigen::Index(k)) = states[B + k].hidden.row(s.text->position).template cast<double>();
  }
  Eigen::MatrixXd d_text = Eigen::MatrixXd::Zero(Eigen::Index(K), d);

  LossBreakdown out;
  double da = 0, db = 0;
  const Vec<double> iou_w = p.vec(enc.iou_w_index()).template cast<double>();
  const double iou_c = double(p.scalar(enc.iou_b_index()));
  Vec<double> d_iou_w = Vec<double>::Zero(d);
  double d_iou_c = 0;
  const double inv_b = 1.0 / double(B);
  const bool dual = is_dual(opt.token_mode);
  const RegionTarget target =
      opt.token_mode == TokenMode::single_label_iou ? RegionTarget::iou_valued : RegionTarget::binary;

  for (std::size_t i = 0; i < B; ++i) {
    const TrainImage& img = batch.images[i];
    const auto& slots = *img.seq.image;
    std::vector<int> obj_rows, iou_rows;
    for (const auto& s : slots.objects) {
      obj_rows.push_back(s.object_pos);
      iou_rows.push_back(s.iou_pos);
    }
    if (img.labels.cols != obj_rows.size() || img.labels.rows != img.local_texts.size())
      throw Error("label assignment does not match the image sequence");
    const Mat<T>& hidden = states[i].hidden;

    if (!img.local_texts.empty() && !obj_rows.empty()) {
      const Eigen::MatrixXd E = detail::gather_rows(hidden, obj_rows);
      Eigen::MatrixXd Tm(Eigen::Index(img.local_texts.size()), d);
      for (std::size_t r = 0; r < img.local_texts.size(); ++r)
        Tm.row(Eigen::Index(r)) = text_emb.row(img.local_texts[r]);
      // logits are texts x proposals, matching the label layout
      const auto sim = similarity_logits(Tm, E, a, b);
      std::vector<double> flat(std::size_t(sim.logits.size()));
      for (Eigen::Index r = 0; r < sim.logits.rows(); ++r)
        for (Eigen::Index c = 0; c < sim.logits.cols(); ++c) flat[std::size_t(r * sim.logits.cols() + c)] = sim.logits(r, c);
      const auto reg = region_loss(flat, img.labels, cfg, target);
      out.region += reg.value;
      Eigen::MatrixXd dlog(sim.logits.rows(), sim.logits.cols());
      for (Eigen::Index r = 0; r < dlog.rows(); ++r)
        for (Eigen::Index c = 0; c < dlog.cols(); ++c) dlog(r, c) = reg.dlogits[std::size_t(r * dlog.cols() + c)];
      dlog *= cfg.lambda_region * inv_b;
      const auto g = similarity_logits_backward(Tm, E, sim, dlog, a);
      da += g.da;
      db += g.db;
      detail::scatter_rows(dhidden[i], obj_rows, g.dV, 1.0);
      for (std::size_t r = 0; r < img.local_texts.size(); ++r) d_text.row(img.local_texts[r]) += g.dU.row(Eigen::Index(r));
    }

    if (dual && !obj_rows.empty()) {
      const Eigen::MatrixXd Hi = detail::gather_rows(hidden, iou_rows);
      const Eigen::VectorXd logits = (Hi * iou_w).array() + iou_c;
      const auto il = iou_loss(std::span<const double>(logits.data(), std::size_t(logits.size())), img.labels, cfg);
      out.iou += il.value;
      const Eigen::VectorXd dl = Eigen::Map<const Eigen::VectorXd>(il.dlogits.data(), Eigen::Index(il.dlogits.size())) *
                                 (cfg.lambda_iou * inv_b);
      d_iou_w += Hi.transpose() * dl;
      d_iou_c += dl.sum();
      const Eigen::MatrixXd dh = dl * iou_w.transpose();
      detail::scatter_rows(dhidden[i], iou_rows, dh, 1.0);
    }
  }

  {
    ImageLossInput in;
    in.coarse.resize(Eigen::Index(B), d);
    in.detailed.resize(Eigen::Index(B), d);
    in.short_texts.resize(Eigen::Index(B), d);
    in.long_texts.resize(Eigen::Index(B), d);
    for (std::size_t i = 0; i < B; ++i) {
      const auto& img = batch.images[i];
      const auto& slots = *img.seq.image;
      if (img.short_text < 0 || img.long_text < 0) throw Error("image lacks caption texts");
      in.coarse.row(Eigen::Index(i)) = states[i].hidden.row(slots.global_coarse).template cast<double>();
      in.detailed.row(Eigen::Index(i)) = states[i].hidden.row(slots.global_detailed).template cast<double>();
      in.short_texts.row(Eigen::Index(i)) = text_emb.row(img.short_text);
      in.long_texts.row(Eigen::Index(i)) = text_emb.row(img.long_text);
      in.short_ids.push_back(img.short_text);
      in.long_ids.push_back(img.long_text);
      in.use_long.push_back(img.use_long);
    }
    const auto il = image_loss(in, a, b, cfg, opt.global_tokens, opt.caption_type);
    out.image = il.value;
    const double s = cfg.lambda_image * inv_b;
    da += il.da * s;
    db += il.db * s;
    for (std::size_t i = 0; i < B; ++i) {
      const auto& img = batch.images[i];
      const auto& slots = *img.seq.image;
      dhidden[i].row(slots.global_coarse) += (il.d_coarse.row(Eigen::Index(i)) * s).template cast<T>();
      dhidden[i].row(slots.global_detailed) += (il.d_detailed.row(Eigen::Index(i)) * s).template cast<T>();
      d_text.row(img.short_text) += il.d_short.row(Eigen::Index(i)) * s;
      d_text.row(img.long_text) += il.d_long.row(Eigen::Index(i)) * s;
    }
  }

  const double weighted = total_loss(out.region, out.image, out.iou, cfg);
  out.region *= inv_b;
  out.image *= inv_b;
  out.iou *= inv_b;
  out.total = weighted * inv_b;
  if (!std::isfinite(out.total)) {
    std::ostringstream msg;
    msg << "diverged: region=" << out.region << " image=" << out.image << " iou=" << out.iou;
    throw DivergenceError(msg.str());
  }
  if (grads == nullptr) return out;

  for (std::size_t k = 0; k < K; ++k)
    dhidden[B + k].row(batch.texts[k].text->position) += d_text.row(Eigen::Index(k)).template cast<T>();

  std::vector<ParamStore<T>> partial(nseq);
  parallel_for(
      nseq,
      [&](std::size_t i) {
        partial[i] = grads->zeros_like();
        enc.backward(p, states[i], dhidden[i], partial[i]);
      },
      threads);
  for (auto& part : partial) grads->add_scaled(part);
  grads->scalar(enc.sim_scale_index()) += T(da);
  grads->scalar(enc.sim_bias_index()) += T(db);
  grads->vec(enc.iou_w_index()) += d_iou_w.template cast<T>();
  grads->scalar(enc.iou_b_index()) += T(d_iou_c);
  return out;
}

}  // namespace objembed
