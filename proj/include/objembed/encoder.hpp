#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "objembed/error.hpp"
#include "objembed/layout.hpp"
#include "objembed/params.hpp"
#include "objembed/rng.hpp"

namespace objembed {

/// Extra inputs appended to every pooled RoI vector: the box corners
/// normalised by the canvas size.
inline constexpr std::size_t kRoiGeometryDims = 4;

struct EncoderConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 832;
  int vocab_size = 0;
  int roi_resolution = 4;  // S
  int grid_channels = 8;   // C
  int patch_size = 16;
  bool distance_bias = true;  // per-head linear penalty on query-key distance

  std::size_t patch_dim() const { return std::size_t(patch_size) * patch_size * grid_channels; }
  std::size_t roi_dim() const {
    return std::size_t(roi_resolution) * roi_resolution * grid_channels + kRoiGeometryDims;
  }

  void validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0)
      throw ConfigError("encoder dimensions must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (roi_resolution < 1 || grid_channels < 1 || patch_size < 1)
      throw ConfigError("roi_resolution, grid_channels and patch_size must be >= 1");
    if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

/// Registers every encoder tensor. The registration order is the checkpoint order.
template <typename T>
ParamStore<T> make_param_layout(const EncoderConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model, ff = cfg.d_ff;
  ParamStore<T> p;
  p.add("tok_emb", {std::size_t(cfg.vocab_size), d});
  p.add("pos_emb", {std::size_t(cfg.max_seq_len), d});
  p.add("patch_proj.w", {cfg.patch_dim(), d});
  p.add("patch_proj.b", {d});
  p.add("obj_proj.w", {cfg.roi_dim(), d});
  p.add("obj_proj.b", {d});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    p.add(pre + "norm1", {d});
    p.add(pre + "wq", {d, d});
    p.add(pre + "wk", {d, d});
    p.add(pre + "wv", {d, d});
    p.add(pre + "wo", {d, d});
    p.add(pre + "norm2", {d});
    p.add(pre + "w1", {d, ff});
    p.add(pre + "b1", {ff});
    p.add(pre + "w2", {ff, d});
    p.add(pre + "b2", {d});
  }
  p.add("final_norm", {d});
  p.add("iou_head.w", {d});
  p.add("iou_head.b", {1});
  p.add("sim.scale", {1});
  p.add("sim.bias", {1});
  return p;
}

/// Seeded init: weight matrices ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), token and
/// position tables ~ U(-0.05, 0.05), biases 0, norm gains 1, iou bias -2,
/// similarity (10, -2).
template <typename T>
ParamStore<T> init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  ParamStore<T> p = make_param_layout<T>(cfg);
  Rng rng(seed);
  for (std::size_t i = 0; i < p.tensors().size(); ++i) {
    const auto& t = p.info(i);
    const auto& n = t.name;
    auto ends_with = [&](std::string_view suf) {
      return n.size() >= suf.size() && n.compare(n.size() - suf.size(), suf.size(), suf) == 0;
    };
    auto fill = [&](T v) { p.vec(i).setConstant(v); };
    if (n == "iou_head.b") {
      fill(T(-2));
    } else if (n == "sim.scale") {
      fill(T(10));
    } else if (n == "sim.bias") {
      fill(T(-2));
    } else if (ends_with("norm1") || ends_with("norm2") || n == "final_norm") {
      fill(T(1));
    } else if (t.shape.size() == 1) {
      fill(T(0));
      if (n == "iou_head.w") {
        const double bound = 1.0 / std::sqrt(double(t.rows()));
        for (std::size_t k = 0; k < t.size; ++k) p.data()[t.offset + k] = static_cast<T>(uniform(rng, -bound, bound));
      }
    } else {
      const double bound = (n == "tok_emb" || n == "pos_emb") ? 0.05 : 1.0 / std::sqrt(double(t.rows()));
      for (std::size_t k = 0; k < t.size; ++k) p.data()[t.offset + k] = static_cast<T>(uniform(rng, -bound, bound));
    }
  }
  return p;
}

namespace detail {

template <typename T>
T gelu(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + T(3 * 0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

inline constexpr double kRmsEps = 1e-6;

/// Row-wise RMS normalisation without gain; returns per-row rms.
template <typename T>
Vec<T> rms_normalize(const Mat<T>& x, Mat<T>& out) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Vec<T> r(n);
  out.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    r(i) = std::sqrt(x.row(i).squaredNorm() / T(d) + T(kRmsEps));
    out.row(i) = x.row(i) / r(i);
  }
  return r;
}

/// Gradient through xhat = x / rms(x) given dL/dxhat.
template <typename T>
Mat<T> rms_backward(const Mat<T>& x, const Vec<T>& r, const Mat<T>& dxhat) {
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<T> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T dot = dxhat.row(i).dot(x.row(i));
    dx.row(i) = dxhat.row(i) / r(i) - x.row(i) * (dot / (T(d) * r(i) * r(i) * r(i)));
  }
  return dx;
}

}  // namespace detail

template <typename T>
struct LayerCache {
  Mat<T> in, xhat1, xn1, q, k, v, ctx, h, xhat2, xn2, pre, act;
  Vec<T> r1, r2;
  std::vector<Mat<T>> probs;  // per head, L x L, zero above the diagonal
};

/// Everything the backward pass needs from one forward pass.
template <typename T>
struct ForwardState {
  const TokenSequence* seq = nullptr;
  std::vector<LayerCache<T>> layers;
  Mat<T> last;    // residual stream after the last layer
  Vec<T> r_final;
  Mat<T> hidden_hat;  // before the final gain
  Mat<T> hidden;  // final normalised hidden states, L x d
};

/// Causal pre-norm transformer plus the object/IoU/similarity heads.
template <typename T>
class Encoder {
 public:
  explicit Encoder(EncoderConfig cfg) : cfg_(cfg) {
    auto layout = make_param_layout<T>(cfg_);
    tok_ = layout.index("tok_emb");
    pos_ = layout.index("pos_emb");
    patch_w_ = layout.index("patch_proj.w");
    patch_b_ = layout.index("patch_proj.b");
    obj_w_ = layout.index("obj_proj.w");
    obj_b_ = layout.index("obj_proj.b");
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string pre = "layers." + std::to_string(l) + ".";
      LayerIdx li;
      li.norm1 = layout.index(pre + "norm1");
      li.wq = layout.index(pre + "wq");
      li.wk = layout.index(pre + "wk");
      li.wv = layout.index(pre + "wv");
      li.wo = layout.index(pre + "wo");
      li.norm2 = layout.index(pre + "norm2");
      li.w1 = layout.index(pre + "w1");
      li.b1 = layout.index(pre + "b1");
      li.w2 = layout.index(pre + "w2");
      li.b2 = layout.index(pre + "b2");
      layers_.push_back(li);
    }
    final_norm_ = layout.index("final_norm");
    iou_w_ = layout.index("iou_head.w");
    iou_b_ = layout.index("iou_head.b");
    sim_scale_ = layout.index("sim.scale");
    sim_bias_ = layout.index("sim.bias");
  }

  const EncoderConfig& config() const { return cfg_; }

  std::size_t iou_w_index() const { return iou_w_; }
  std::size_t iou_b_index() const { return iou_b_; }
  std::size_t sim_scale_index() const { return sim_scale_; }
  std::size_t sim_bias_index() const { return sim_bias_; }

  /// Affine object projector applied to one pooled RoI descriptor.
  Vec<T> project_roi(const ParamStore<T>& p, std::span<const float> pooled) const {
    if (pooled.size() != cfg_.roi_dim()) throw Error("projector width mismatch");
    Vec<T> x(Eigen::Index(pooled.size()));
    for (std::size_t i = 0; i < pooled.size(); ++i) x(Eigen::Index(i)) = T(pooled[i]);
    return p.mat(obj_w_).transpose() * x + p.vec(obj_b_);
  }

  T iou_logit(const ParamStore<T>& p, const Eigen::Ref<const Vec<T>>& hidden) const {
    return p.vec(iou_w_).dot(hidden) + p.scalar(iou_b_);
  }

  ForwardState<T> forward(const ParamStore<T>& p, const TokenSequence& seq) const {
    const Eigen::Index L = Eigen::Index(seq.size());
    const Eigen::Index d = cfg_.d_model;
    if (L > cfg_.max_seq_len) throw Error("sequence exceeds max_seq_len");
    ForwardState<T> st;
    st.seq = &seq;

    Mat<T> x(L, d);
    auto tok = p.mat(tok_);
    for (Eigen::Index t = 0; t < L; ++t) {
      const int id = seq.ids[std::size_t(t)];
      if (id < 0 || id >= cfg_.vocab_size) throw Error("token id out of range");
      x.row(t) = tok.row(id);
    }
    apply_overrides(p, seq, x);
    x += p.mat(pos_).topRows(L);

    const int H = cfg_.n_heads;
    const Eigen::Index dh = d / H;
    const T scale = T(1) / std::sqrt(T(dh));
    st.layers.resize(std::size_t(cfg_.n_layers));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const auto& li = layers_[std::size_t(l)];
      auto& c = st.layers[std::size_t(l)];
      c.in = x;
      c.r1 = detail::rms_normalize(c.in, c.xhat1);
      c.xn1 = c.xhat1 * p.vec(li.norm1).asDiagonal();
      c.q = c.xn1 * p.mat(li.wq);
      c.k = c.xn1 * p.mat(li.wk);
      c.v = c.xn1 * p.mat(li.wv);
      c.ctx.resize(L, d);
      c.probs.resize(std::size_t(H));
      for (int hd = 0; hd < H; ++hd) {
        Mat<T>& P = c.probs[std::size_t(hd)];
        P.noalias() = (c.q.middleCols(hd * dh, dh) * c.k.middleCols(hd * dh, dh).transpose()) * scale;
        const T slope = cfg_.distance_bias ? distance_slope(hd) : T(0);
        for (Eigen::Index i = 0; i < L; ++i) {
          auto row = P.row(i);
          if (cfg_.distance_bias)
            for (Eigen::Index j = 0; j < i; ++j) row(j) -= slope * T(i - j);
          const T mx = row.head(i + 1).maxCoeff();
          T sum = 0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            row(j) = std::exp(row(j) - mx);
            sum += row(j);
          }
          row.head(i + 1) /= sum;
          row.tail(L - i - 1).setZero();
        }
        c.ctx.middleCols(hd * dh, dh).noalias() = P * c.v.middleCols(hd * dh, dh);
      }
      c.h = c.in;
      c.h.noalias() += c.ctx * p.mat(li.wo);
      c.r2 = detail::rms_normalize(c.h, c.xhat2);
      c.xn2 = c.xhat2 * p.vec(li.norm2).asDiagonal();
      c.pre = c.xn2 * p.mat(li.w1);
      c.pre.rowwise() += p.vec(li.b1).transpose();
      c.act = c.pre.unaryExpr([](T v) { return detail::gelu(v); });
      x = c.h;
      x.noalias() += c.act * p.mat(li.w2);
      x.rowwise() += p.vec(li.b2).transpose();
    }
    st.last = x;
    st.r_final = detail::rms_normalize(st.last, st.hidden_hat);
    st.hidden = st.hidden_hat * p.vec(final_norm_).asDiagonal();
    return st;
  }

  /// Accumulates dL/dparams into grads given dL/dhidden (L x d, mostly zero rows).
  void backward(const ParamStore<T>& p, const ForwardState<T>& st, const Mat<T>& dhidden, ParamStore<T>& g) const {
    const TokenSequence& seq = *st.seq;
    const Eigen::Index L = Eigen::Index(seq.size());
    const Eigen::Index d = cfg_.d_model;
    const int H = cfg_.n_heads;
    const Eigen::Index dh = d / H;
    const T scale = T(1) / std::sqrt(T(dh));

    g.vec(final_norm_) += dhidden.cwiseProduct(st.hidden_hat).colwise().sum().transpose();
    Mat<T> dx = detail::rms_backward<T>(st.last, st.r_final, dhidden * p.vec(final_norm_).asDiagonal());

    for (int l = cfg_.n_layers - 1; l >= 0; --l) {
      const auto& li = layers_[std::size_t(l)];
      const auto& c = st.layers[std::size_t(l)];
      // feed-forward
      g.vec(li.b2) += dx.colwise().sum().transpose();
      g.mat(li.w2).noalias() += c.act.transpose() * dx;
      Mat<T> dpre = dx * p.mat(li.w2).transpose();
      for (Eigen::Index i = 0; i < dpre.size(); ++i) dpre.data()[i] *= detail::gelu_grad(c.pre.data()[i]);
      g.vec(li.b1) += dpre.colwise().sum().transpose();
      g.mat(li.w1).noalias() += c.xn2.transpose() * dpre;
      Mat<T> dxn2 = dpre * p.mat(li.w1).transpose();
      g.vec(li.norm2) += dxn2.cwiseProduct(c.xhat2).colwise().sum().transpose();
      Mat<T> dh_res = dx + detail::rms_backward<T>(c.h, c.r2, dxn2 * p.vec(li.norm2).asDiagonal());

      // attention
      g.mat(li.wo).noalias() += c.ctx.transpose() * dh_res;
      Mat<T> dctx = dh_res * p.mat(li.wo).transpose();
      Mat<T> dq(L, d), dk(L, d), dv(L, d);
      for (int hd = 0; hd < H; ++hd) {
        const Mat<T>& P = c.probs[std::size_t(hd)];
        auto dctx_h = dctx.middleCols(hd * dh, dh);
        Mat<T> dP = dctx_h * c.v.middleCols(hd * dh, dh).transpose();
        dv.middleCols(hd * dh, dh).noalias() = P.transpose() * dctx_h;
        Mat<T> dS = P.cwiseProduct(dP);
        const Vec<T> rows = dS.rowwise().sum();
        dS -= P.cwiseProduct(rows.replicate(1, L));
        dS *= scale;
        dq.middleCols(hd * dh, dh).noalias() = dS * c.k.middleCols(hd * dh, dh);
        dk.middleCols(hd * dh, dh).noalias() = dS.transpose() * c.q.middleCols(hd * dh, dh);
      }
      g.mat(li.wq).noalias() += c.xn1.transpose() * dq;
      g.mat(li.wk).noalias() += c.xn1.transpose() * dk;
      g.mat(li.wv).noalias() += c.xn1.transpose() * dv;
      Mat<T> dxn1 = dq * p.mat(li.wq).transpose();
      dxn1.noalias() += dk * p.mat(li.wk).transpose();
      dxn1.noalias() += dv * p.mat(li.wv).transpose();
      g.vec(li.norm1) += dxn1.cwiseProduct(c.xhat1).colwise().sum().transpose();
      dx = dh_res + detail::rms_backward<T>(c.in, c.r1, dxn1 * p.vec(li.norm1).asDiagonal());
    }

    g.mat(pos_).topRows(L) += dx;
    std::vector<char> overridden(std::size_t(L), 0);
    for (const auto& ov : seq.overrides) {
      overridden[std::size_t(ov.position)] = 1;
      const bool patch = ov.kind == OverrideKind::patch;
      auto gw = g.mat(patch ? patch_w_ : obj_w_);
      auto gb = g.vec(patch ? patch_b_ : obj_b_);
      const auto grow = dx.row(ov.position);
      for (std::size_t f = 0; f < ov.features.size(); ++f) {
        const T fv = T(ov.features[f]);
        if (fv != T(0)) gw.row(Eigen::Index(f)) += fv * grow;
      }
      gb += grow.transpose();
    }
    auto gtok = g.mat(tok_);
    for (Eigen::Index t = 0; t < L; ++t)
      if (!overridden[std::size_t(t)]) gtok.row(seq.ids[std::size_t(t)]) += dx.row(t);
  }

 private:
  struct LayerIdx {
    std::size_t norm1, wq, wk, wv, wo, norm2, w1, b1, w2, b2;
  };

  // Geometric slopes 2^(-8(h+1)/H); the first head looks mostly at its neighbours.
  T distance_slope(int head) const {
    return T(std::exp2(-8.0 * double(head + 1) / double(cfg_.n_heads)));
  }

  void apply_overrides(const ParamStore<T>& p, const TokenSequence& seq, Mat<T>& x) const {
    for (OverrideKind kind : {OverrideKind::patch, OverrideKind::roi}) {
      const bool patch = kind == OverrideKind::patch;
      const std::size_t width = patch ? cfg_.patch_dim() : cfg_.roi_dim();
      std::vector<const Override*> list;
      for (const auto& ov : seq.overrides)
        if (ov.kind == kind) list.push_back(&ov);
      if (list.empty()) continue;
      Mat<T> feats(Eigen::Index(list.size()), Eigen::Index(width));
      for (std::size_t r = 0; r < list.size(); ++r) {
        if (list[r]->features.size() != width) throw Error("projector width mismatch");
        for (std::size_t f = 0; f < width; ++f) feats(Eigen::Index(r), Eigen::Index(f)) = T(list[r]->features[f]);
      }
      Mat<T> proj = feats * p.mat(patch ? patch_w_ : obj_w_);
      proj.rowwise() += p.vec(patch ? patch_b_ : obj_b_).transpose();
      for (std::size_t r = 0; r < list.size(); ++r) x.row(list[r]->position) = proj.row(Eigen::Index(r));
    }
  }

  EncoderConfig cfg_;
  std::size_t tok_, pos_, patch_w_, patch_b_, obj_w_, obj_b_, final_norm_, iou_w_, iou_b_, sim_scale_, sim_bias_;
  std::vector<LayerIdx> layers_;
};

/// Last-layer hidden states at every embedding slot of an image sequence.
template <typename T>
struct EmbeddingBundle {
  std::vector<Vec<T>> object_embs;
  std::vector<Vec<T>> iou_hiddens;  // empty in single-token modes
  Vec<T> global_coarse;
  Vec<T> global_detailed;
};

template <typename T>
struct TextEmbedding {
  Vec<T> vector;
  TextKind kind = TextKind::local;
};

template <typename T>
EmbeddingBundle<T> extract_bundle(const Mat<T>& hidden, const ImageSlots& slots) {
  EmbeddingBundle<T> b;
  for (const auto& s : slots.objects) {
    b.object_embs.push_back(hidden.row(s.object_pos).transpose());
    if (s.iou_pos >= 0) b.iou_hiddens.push_back(hidden.row(s.iou_pos).transpose());
  }
  b.global_coarse = hidden.row(slots.global_coarse).transpose();
  b.global_detailed = hidden.row(slots.global_detailed).transpose();
  return b;
}

template <typename T>
EmbeddingBundle<T> encode_image(const Encoder<T>& enc, const ParamStore<T>& p, const TokenSequence& seq) {
  if (!seq.image) throw Error("encode_image requires an image sequence");
  auto st = enc.forward(p, seq);
  return extract_bundle(st.hidden, *seq.image);
}

template <typename T>
TextEmbedding<T> encode_text(const Encoder<T>& enc, const ParamStore<T>& p, const TokenSequence& seq) {
  if (!seq.text) throw Error("encode_text requires a text sequence");
  auto st = enc.forward(p, seq);
  return {st.hidden.row(seq.text->position).transpose(), seq.text->kind};
}

template <typename T>
T sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
T cosine_similarity(const Eigen::Ref<const Vec<T>>& a, const Eigen::Ref<const Vec<T>>& b) {
  const T na = a.norm(), nb = b.norm();
  if (!(na > T(0)) || !(nb > T(0))) throw Error("degenerate embedding");
  return a.dot(b) / (na * nb);
}

template <typename T>
T predict_iou(const Encoder<T>& enc, const ParamStore<T>& p, const Vec<T>& iou_hidden) {
  return sigmoid(enc.iou_logit(p, iou_hidden));
}

struct MatchScore {
  double p_cls = 0;
  double p_iou = 1;
  double score = 0;
};

inline MatchScore combine_scores(double p_cls, double p_iou) { return {p_cls, p_iou, p_cls * p_iou}; }

/// p_cls = sigmoid(a * cos + b); dual-token modes multiply by the predicted IoU.
/// Pass iou_hidden == nullptr for single-token modes.
template <typename T>
MatchScore match_score(const Encoder<T>& enc, const ParamStore<T>& p, const Vec<T>& e_p, const Vec<T>* iou_hidden,
                       const Vec<T>& e_t) {
  const T s = cosine_similarity<T>(e_p, e_t);
  const double p_cls = double(sigmoid(p.scalar(enc.sim_scale_index()) * s + p.scalar(enc.sim_bias_index())));
  if (iou_hidden == nullptr) return combine_scores(p_cls, 1.0);
  return combine_scores(p_cls, double(predict_iou(enc, p, *iou_hidden)));
}

}  // namespace objembed
