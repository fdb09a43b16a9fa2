// SPDX-License-Identifier: Apache-2.0
#include "decap/decoder.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <unordered_map>

#include "binary_io.hpp"
#include "decap/error.hpp"
#include "decap/rng.hpp"

namespace decap {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<RowVec>;
using CVecMap = Eigen::Map<const RowVec>;

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr char kMagic[4] = {'D', 'C', 'P', 'M'};

// ---------------------------------------------------------------------------
// Parameter layout

struct LayerSlots {
  std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc_w, fc_b, proj_w, proj_b;
};

struct Slots {
  std::size_t prefix_w, prefix_b, tok_emb, pos_emb;
  std::vector<LayerSlots> layers;
  std::size_t lnf_g, lnf_b, head_w, head_b;
};

std::vector<TensorInfo> build_layout(const DecoderShape& s, std::size_t vocab) {
  std::vector<TensorInfo> t;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto x : shape) n *= x;
    t.push_back({std::move(name), std::move(shape), offset, n});
    offset += n;
  };
  const std::size_t w = s.width;
  add("prefix.w", {s.prefix_dim, w});
  add("prefix.b", {w});
  add("tok_emb", {vocab, w});
  add("pos_emb", {s.max_len + 2, w});
  for (std::size_t l = 0; l < s.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1.g", {w});
    add(p + "ln1.b", {w});
    add(p + "attn.qkv.w", {w, 3 * w});
    add(p + "attn.qkv.b", {3 * w});
    add(p + "attn.out.w", {w, w});
    add(p + "attn.out.b", {w});
    add(p + "ln2.g", {w});
    add(p + "ln2.b", {w});
    add(p + "mlp.fc.w", {w, s.ffn});
    add(p + "mlp.fc.b", {s.ffn});
    add(p + "mlp.proj.w", {s.ffn, w});
    add(p + "mlp.proj.b", {w});
  }
  add("lnf.g", {w});
  add("lnf.b", {w});
  add("head.w", {w, vocab});
  add("head.b", {vocab});
  return t;
}

// Offsets follow build_layout's order: 4 leading tensors, 12 per layer, 4 trailing.
Slots slots_of(const std::vector<TensorInfo>& t, std::size_t layers) {
  Slots s;
  s.prefix_w = t[0].offset;
  s.prefix_b = t[1].offset;
  s.tok_emb = t[2].offset;
  s.pos_emb = t[3].offset;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t b = 4 + 12 * l;
    s.layers.push_back({t[b].offset, t[b + 1].offset, t[b + 2].offset, t[b + 3].offset, t[b + 4].offset,
                        t[b + 5].offset, t[b + 6].offset, t[b + 7].offset, t[b + 8].offset,
                        t[b + 9].offset, t[b + 10].offset, t[b + 11].offset});
  }
  const std::size_t e = 4 + 12 * layers;
  s.lnf_g = t[e].offset;
  s.lnf_b = t[e + 1].offset;
  s.head_w = t[e + 2].offset;
  s.head_b = t[e + 3].offset;
  return s;
}

// ---------------------------------------------------------------------------
// Kernels

void layer_norm(const RowMat& x, const double* g, const double* b, RowMat& y, RowMat& xhat,
                Eigen::VectorXd& rstd) {
  const Eigen::Index n = x.cols();
  xhat.resize(x.rows(), n);
  rstd.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    rstd(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  const CVecMap gv(g, n), bv(b, n);
  y = (xhat.array().rowwise() * gv.array()).rowwise() + bv.array();
}

// dx = d/dx of layer_norm given dy; accumulates dg, db.
RowMat layer_norm_backward(const RowMat& dy, const double* g, const RowMat& xhat,
                           const Eigen::VectorXd& rstd, double* dg, double* db) {
  const Eigen::Index n = dy.cols();
  VecMap(dg, n) += dy.cwiseProduct(xhat).colwise().sum();
  VecMap(db, n) += dy.colwise().sum();
  const RowMat dxhat = dy.array().rowwise() * CVecMap(g, n).array();
  RowMat dx(dy.rows(), n);
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = dxhat.row(i).dot(xhat.row(i)) / static_cast<double>(n);
    dx.row(i) = rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

constexpr double kGeluC = 0.044715;
const double kGeluK = std::sqrt(2.0 / std::numbers::pi);

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluK * (x + kGeluC * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluK * (x + kGeluC * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * x * x);
}

// ---------------------------------------------------------------------------
// Forward / backward over a stacked batch of sequences

struct Sequence {
  const double* prefix = nullptr;
  std::vector<int> input;  // <bos> w_1 ... w_n
  std::size_t offset = 0;  // first row in the stacked batch
  std::size_t rows() const { return input.size() + 1; }
};

struct LayerCache {
  RowMat in, a, qkv, o, h1, c, u, g;
  RowMat ln1_xhat, ln2_xhat;
  Eigen::VectorXd ln1_rstd, ln2_rstd;
  std::vector<RowMat> probs;  // per (sequence, head)
};

struct Pass {
  std::vector<LayerCache> layers;
  RowMat lnf_xhat, z;
  Eigen::VectorXd lnf_rstd;
};

class Network {
 public:
  Network(const DecoderShape& shape, std::size_t vocab, const std::vector<TensorInfo>& tensors,
          const double* params)
      : s_(shape), v_(vocab), slot_(slots_of(tensors, shape.layers)), p_(params) {}

  void forward(std::vector<Sequence>& seqs, Pass& pass) const;
  // Accumulates parameter gradients given dL/dz.
  void backward(const std::vector<Sequence>& seqs, const Pass& pass, const RowMat& dz, double* grad) const;

  RowMat logits(const RowMat& z) const {
    RowMat out = z * cmat(slot_.head_w, s_.width, v_);
    out.rowwise() += cvec(slot_.head_b, v_);
    return out;
  }
  CMatMap head_w() const { return cmat(slot_.head_w, s_.width, v_); }
  std::size_t head_w_slot() const { return slot_.head_w; }
  std::size_t head_b_slot() const { return slot_.head_b; }

 private:
  CMatMap cmat(std::size_t off, std::size_t r, std::size_t c) const {
    return CMatMap(p_ + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  }
  CVecMap cvec(std::size_t off, std::size_t n) const { return CVecMap(p_ + off, static_cast<Eigen::Index>(n)); }

  const DecoderShape& s_;
  std::size_t v_;
  Slots slot_;
  const double* p_;
};

void Network::forward(std::vector<Sequence>& seqs, Pass& pass) const {
  const auto w = static_cast<Eigen::Index>(s_.width);
  const auto d = static_cast<Eigen::Index>(s_.prefix_dim);
  std::size_t total = 0;
  for (auto& q : seqs) {
    q.offset = total;
    total += q.rows();
  }
  const auto rows = static_cast<Eigen::Index>(total);

  RowMat x(rows, w);
  const CMatMap prefix_w = cmat(slot_.prefix_w, s_.prefix_dim, s_.width);
  const CMatMap tok = cmat(slot_.tok_emb, v_, s_.width);
  const CMatMap pos = cmat(slot_.pos_emb, s_.max_len + 2, s_.width);
  for (const auto& q : seqs) {
    const auto off = static_cast<Eigen::Index>(q.offset);
    x.row(off) = CVecMap(q.prefix, d) * prefix_w + cvec(slot_.prefix_b, s_.width);
    for (std::size_t t = 0; t < q.input.size(); ++t) x.row(off + 1 + static_cast<Eigen::Index>(t)) = tok.row(q.input[t]);
    x.middleRows(off, static_cast<Eigen::Index>(q.rows())) += pos.topRows(static_cast<Eigen::Index>(q.rows()));
  }

  const std::size_t heads = s_.heads;
  const auto dh = static_cast<Eigen::Index>(s_.width / heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  pass.layers.resize(s_.layers);
  for (std::size_t l = 0; l < s_.layers; ++l) {
    const LayerSlots& ls = slot_.layers[l];
    LayerCache& lc = pass.layers[l];
    lc.in = x;
    layer_norm(x, p_ + ls.ln1_g, p_ + ls.ln1_b, lc.a, lc.ln1_xhat, lc.ln1_rstd);
    lc.qkv = lc.a * cmat(ls.qkv_w, s_.width, 3 * s_.width);
    lc.qkv.rowwise() += cvec(ls.qkv_b, 3 * s_.width);

    lc.o.setZero(rows, w);
    lc.probs.clear();
    for (const auto& q : seqs) {
      const auto off = static_cast<Eigen::Index>(q.offset);
      const auto t = static_cast<Eigen::Index>(q.rows());
      for (std::size_t h = 0; h < heads; ++h) {
        const auto col = static_cast<Eigen::Index>(h) * dh;
        const auto qm = lc.qkv.block(off, col, t, dh);
        const auto km = lc.qkv.block(off, w + col, t, dh);
        const auto vm = lc.qkv.block(off, 2 * w + col, t, dh);
        RowMat p = (qm * km.transpose()) * scale;
        for (Eigen::Index i = 0; i < t; ++i) {
          const double m = p.row(i).head(i + 1).maxCoeff();
          double sum = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            p(i, j) = std::exp(p(i, j) - m);
            sum += p(i, j);
          }
          for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= sum;
          for (Eigen::Index j = i + 1; j < t; ++j) p(i, j) = 0.0;
        }
        lc.o.block(off, col, t, dh).noalias() = p * vm;
        lc.probs.push_back(std::move(p));
      }
    }
    lc.h1 = x + lc.o * cmat(ls.out_w, s_.width, s_.width);
    lc.h1.rowwise() += cvec(ls.out_b, s_.width);
    layer_norm(lc.h1, p_ + ls.ln2_g, p_ + ls.ln2_b, lc.c, lc.ln2_xhat, lc.ln2_rstd);
    lc.u = lc.c * cmat(ls.fc_w, s_.width, s_.ffn);
    lc.u.rowwise() += cvec(ls.fc_b, s_.ffn);
    lc.g = lc.u.unaryExpr([](double v) { return gelu(v); });
    x = lc.h1 + lc.g * cmat(ls.proj_w, s_.ffn, s_.width);
    x.rowwise() += cvec(ls.proj_b, s_.width);
  }
  layer_norm(x, p_ + slot_.lnf_g, p_ + slot_.lnf_b, pass.z, pass.lnf_xhat, pass.lnf_rstd);
}

void Network::backward(const std::vector<Sequence>& seqs, const Pass& pass, const RowMat& dz,
                       double* grad) const {
  const auto w = static_cast<Eigen::Index>(s_.width);
  auto gmat = [&](std::size_t off, std::size_t r, std::size_t c) {
    return MatMap(grad + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  };
  auto gvec = [&](std::size_t off, std::size_t n) { return VecMap(grad + off, static_cast<Eigen::Index>(n)); };

  RowMat dx = layer_norm_backward(dz, p_ + slot_.lnf_g, pass.lnf_xhat, pass.lnf_rstd, grad + slot_.lnf_g,
                                  grad + slot_.lnf_b);

  const std::size_t heads = s_.heads;
  const auto dh = static_cast<Eigen::Index>(s_.width / heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = s_.layers; l-- > 0;) {
    const LayerSlots& ls = slot_.layers[l];
    const LayerCache& lc = pass.layers[l];

    // x_out = h1 + gelu(u) W_proj + b_proj
    gmat(ls.proj_w, s_.ffn, s_.width).noalias() += lc.g.transpose() * dx;
    gvec(ls.proj_b, s_.width) += dx.colwise().sum();
    RowMat du = dx * cmat(ls.proj_w, s_.ffn, s_.width).transpose();
    du = du.cwiseProduct(lc.u.unaryExpr([](double v) { return gelu_grad(v); }));
    gmat(ls.fc_w, s_.width, s_.ffn).noalias() += lc.c.transpose() * du;
    gvec(ls.fc_b, s_.ffn) += du.colwise().sum();
    const RowMat dc = du * cmat(ls.fc_w, s_.width, s_.ffn).transpose();
    RowMat dh1 = dx + layer_norm_backward(dc, p_ + ls.ln2_g, lc.ln2_xhat, lc.ln2_rstd, grad + ls.ln2_g,
                                          grad + ls.ln2_b);

    // h1 = in + o W_out + b_out
    gmat(ls.out_w, s_.width, s_.width).noalias() += lc.o.transpose() * dh1;
    gvec(ls.out_b, s_.width) += dh1.colwise().sum();
    const RowMat d_o = dh1 * cmat(ls.out_w, s_.width, s_.width).transpose();

    RowMat dqkv = RowMat::Zero(lc.qkv.rows(), lc.qkv.cols());
    std::size_t k = 0;
    for (const auto& q : seqs) {
      const auto off = static_cast<Eigen::Index>(q.offset);
      const auto t = static_cast<Eigen::Index>(q.rows());
      for (std::size_t h = 0; h < heads; ++h, ++k) {
        const auto col = static_cast<Eigen::Index>(h) * dh;
        const RowMat& p = lc.probs[k];
        const auto qm = lc.qkv.block(off, col, t, dh);
        const auto km = lc.qkv.block(off, w + col, t, dh);
        const auto vm = lc.qkv.block(off, 2 * w + col, t, dh);
        const auto dob = d_o.block(off, col, t, dh);
        const RowMat dp = dob * vm.transpose();
        const Eigen::VectorXd rs = dp.cwiseProduct(p).rowwise().sum();
        const RowMat ds = p.cwiseProduct(dp.colwise() - rs);
        dqkv.block(off, col, t, dh).noalias() = (ds * km) * scale;
        dqkv.block(off, w + col, t, dh).noalias() = (ds.transpose() * qm) * scale;
        dqkv.block(off, 2 * w + col, t, dh).noalias() = p.transpose() * dob;
      }
    }
    gmat(ls.qkv_w, s_.width, 3 * s_.width).noalias() += lc.a.transpose() * dqkv;
    gvec(ls.qkv_b, 3 * s_.width) += dqkv.colwise().sum();
    const RowMat da = dqkv * cmat(ls.qkv_w, s_.width, 3 * s_.width).transpose();
    dx = dh1 + layer_norm_backward(da, p_ + ls.ln1_g, lc.ln1_xhat, lc.ln1_rstd, grad + ls.ln1_g,
                                   grad + ls.ln1_b);
  }

  const auto d = static_cast<Eigen::Index>(s_.prefix_dim);
  auto dprefix_w = gmat(slot_.prefix_w, s_.prefix_dim, s_.width);
  auto dprefix_b = gvec(slot_.prefix_b, s_.width);
  auto dtok = gmat(slot_.tok_emb, v_, s_.width);
  auto dpos = gmat(slot_.pos_emb, s_.max_len + 2, s_.width);
  for (const auto& q : seqs) {
    const auto off = static_cast<Eigen::Index>(q.offset);
    const auto t = static_cast<Eigen::Index>(q.rows());
    dprefix_w.noalias() += CVecMap(q.prefix, d).transpose() * dx.row(off);
    dprefix_b += dx.row(off);
    for (std::size_t i = 0; i < q.input.size(); ++i) {
      dtok.row(q.input[i]) += dx.row(off + 1 + static_cast<Eigen::Index>(i));
    }
    dpos.topRows(t) += dx.middleRows(off, t);
  }
}

bool is_decayed(const std::string& name) { return name.size() > 2 && name.ends_with(".w"); }

}  // namespace

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab(std::vector<std::string> words) {
  tokens_ = {kPadToken, kBosToken, kEosToken};
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  for (auto& w : words) {
    if (w == kPadToken || w == kBosToken || w == kEosToken) continue;
    if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos) {
      throw Error(ErrorCode::kInvalidArgument, "vocabulary word '" + w + "' is empty or has whitespace");
    }
    tokens_.push_back(std::move(w));
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<int>(i));
}

Vocab Vocab::from_pairs(const std::map<std::string, int>& pairs) {
  std::vector<std::string> tokens(pairs.size());
  std::vector<bool> seen(pairs.size(), false);
  for (const auto& [tok, id] : pairs) {
    if (id < 0 || static_cast<std::size_t>(id) >= pairs.size() || seen[static_cast<std::size_t>(id)]) {
      throw Error(ErrorCode::kInvalidArgument, "vocabulary ids are not a permutation of 0..n-1");
    }
    seen[static_cast<std::size_t>(id)] = true;
    tokens[static_cast<std::size_t>(id)] = tok;
  }
  if (tokens.size() < 3 || tokens[kPad] != kPadToken || tokens[kBos] != kBosToken || tokens[kEos] != kEosToken) {
    throw Error(ErrorCode::kInvalidArgument, "vocabulary lacks special tokens at ids 0..2");
  }
  Vocab v;
  v.tokens_ = std::move(tokens);
  v.ids_.clear();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.ids_.emplace(v.tokens_[i], static_cast<int>(i));
  return v;
}

std::optional<int> Vocab::find(std::string_view token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocab::id(std::string_view token) const {
  if (auto i = find(token)) return *i;
  throw Error(ErrorCode::kUnknownToken, "'" + std::string(token) + "'");
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    if (i == kPad || i == kBos || i == kEos) continue;
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

std::map<std::string, int> Vocab::pairs() const {
  std::map<std::string, int> out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) out.emplace(tokens_[i], static_cast<int>(i));
  return out;
}

// ---------------------------------------------------------------------------
// Shapes and configs

void DecoderShape::validate() const {
  if (prefix_dim == 0 || width == 0 || layers == 0 || heads == 0 || ffn == 0 || max_len == 0) {
    throw Error(ErrorCode::kInvalidArgument, "decoder shape fields must be positive");
  }
  if (width % heads != 0) throw Error(ErrorCode::kInvalidArgument, "width must be divisible by heads");
}

DecoderShape DecoderShape::toy(std::size_t prefix_dim) {
  return {prefix_dim, 64, 2, 2, 256, 32};
}

DecoderShape DecoderShape::reference(std::size_t prefix_dim) {
  return {prefix_dim, 768, 4, 4, 3072, 32};
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw Error(ErrorCode::kInvalidArgument, "batch_size must be positive");
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::kInvalidArgument, "learning_rate must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "label_smoothing must be in [0, 1)");
  }
}

TrainConfig TrainConfig::toy() {
  TrainConfig c;
  c.steps = 3000;
  c.batch_size = 32;
  c.learning_rate = 2e-3;
  c.label_smoothing = 0.1;
  c.warmup_steps = 100;
  c.cosine_decay = true;
  return c;
}

// ---------------------------------------------------------------------------
// Model

DecoderModel::DecoderModel(Vocab vocab, DecoderShape shape, std::uint64_t seed)
    : vocab_(std::move(vocab)), shape_(shape) {
  shape_.validate();
  layout();
  Rng rng(mix_seed(seed, 0x6d6f64656c));
  const double proj_std = kInitStd / std::sqrt(2.0 * static_cast<double>(shape_.layers));
  for (const auto& t : tensors_) {
    double* p = params_.data() + t.offset;
    if (t.name.ends_with(".g")) {
      std::fill(p, p + t.size, 1.0);
    } else if (t.name.ends_with(".b")) {
      std::fill(p, p + t.size, 0.0);
    } else {
      const bool residual_out = t.name.ends_with("attn.out.w") || t.name.ends_with("mlp.proj.w");
      const double std = residual_out ? proj_std : kInitStd;
      for (std::size_t i = 0; i < t.size; ++i) p[i] = std * rng.normal();
    }
  }
  round_to_f32();
}

void DecoderModel::layout() {
  tensors_ = build_layout(shape_, vocab_.size());
  params_.assign(tensors_.back().offset + tensors_.back().size, 0.0);
}

std::span<double> DecoderModel::tensor(std::string_view name) {
  for (const auto& t : tensors_) {
    if (t.name == name) return {params_.data() + t.offset, t.size};
  }
  throw Error(ErrorCode::kInvalidArgument, "no tensor named '" + std::string(name) + "'");
}

std::span<const double> DecoderModel::tensor(std::string_view name) const {
  return const_cast<DecoderModel*>(this)->tensor(name);
}

void DecoderModel::round_to_f32() {
  for (double& p : params_) p = static_cast<double>(static_cast<float>(p));
}

bool operator==(const DecoderModel& a, const DecoderModel& b) {
  if (!(a.vocab_ == b.vocab_)) return false;
  const auto& x = a.shape_;
  const auto& y = b.shape_;
  if (x.prefix_dim != y.prefix_dim || x.width != y.width || x.layers != y.layers || x.heads != y.heads ||
      x.ffn != y.ffn || x.max_len != y.max_len) {
    return false;
  }
  return a.params_.size() == b.params_.size() &&
         std::memcmp(a.params_.data(), b.params_.data(), a.params_.size() * sizeof(double)) == 0;
}

void DecoderModel::check_example(const Example& e) const {
  if (e.prefix.size() != shape_.prefix_dim) {
    throw Error(ErrorCode::kDimensionMismatch, "prefix dim " + std::to_string(e.prefix.size()) +
                                                   ", model expects " + std::to_string(shape_.prefix_dim));
  }
  if (e.tokens.empty()) throw Error(ErrorCode::kEmptyInput, "target sequence is empty");
  if (e.tokens.size() > shape_.max_len) {
    throw Error(ErrorCode::kSequenceTooLong, std::to_string(e.tokens.size()) + " tokens > max_len " +
                                                 std::to_string(shape_.max_len));
  }
  for (int t : e.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_.size()) {
      throw Error(ErrorCode::kUnknownToken, "token id " + std::to_string(t));
    }
  }
}

double DecoderModel::loss_and_gradient(std::span<const Example> batch, double label_smoothing,
                                       std::vector<double>* gradient) const {
  if (batch.empty()) throw Error(ErrorCode::kEmptyInput, "empty batch");
  for (const auto& e : batch) check_example(e);

  std::vector<Sequence> seqs(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    seqs[b].prefix = batch[b].prefix.data();
    seqs[b].input.push_back(Vocab::kBos);
    seqs[b].input.insert(seqs[b].input.end(), batch[b].tokens.begin(), batch[b].tokens.end());
  }
  Network net(shape_, vocab_.size(), tensors_, params_.data());
  Pass pass;
  net.forward(seqs, pass);
  const RowMat logits = net.logits(pass.z);

  const auto v = static_cast<Eigen::Index>(vocab_.size());
  const double eps = label_smoothing;
  const double off_mass = eps / static_cast<double>(v);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  RowMat dlogits;
  if (gradient) dlogits = RowMat::Zero(logits.rows(), v);

  double total = 0.0;
  RowVec logp(v);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& tokens = batch[b].tokens;
    const std::size_t positions = tokens.size() + 1;
    const double inv_pos = 1.0 / static_cast<double>(positions);
    double seq_loss = 0.0;
    for (std::size_t t = 0; t < positions; ++t) {
      const int target = t < tokens.size() ? tokens[t] : Vocab::kEos;
      const auto row = static_cast<Eigen::Index>(seqs[b].offset + 1 + t);
      const double m = logits.row(row).maxCoeff();
      const double lse = m + std::log((logits.row(row).array() - m).exp().sum());
      logp = logits.row(row).array() - lse;
      seq_loss -= (1.0 - eps) * logp(target) + off_mass * logp.sum();
      if (gradient) {
        auto dr = dlogits.row(row);
        dr = logp.array().exp() - off_mass;
        dr(target) -= 1.0 - eps;
        dr *= inv_pos * inv_batch;
      }
    }
    total += seq_loss * inv_pos;
  }

  if (gradient) {
    gradient->assign(params_.size(), 0.0);
    double* g = gradient->data();
    MatMap(g + net.head_w_slot(), static_cast<Eigen::Index>(shape_.width), v).noalias() +=
        pass.z.transpose() * dlogits;
    VecMap(g + net.head_b_slot(), v) += dlogits.colwise().sum();
    const RowMat dz = dlogits * net.head_w().transpose();
    net.backward(seqs, pass, dz, g);
  }
  return total * inv_batch;
}

std::vector<double> DecoderModel::next_token_distribution(std::span<const double> prefix,
                                                          std::span<const int> context) const {
  if (prefix.size() != shape_.prefix_dim) throw Error(ErrorCode::kDimensionMismatch, "prefix dim");
  if (context.size() > shape_.max_len) throw Error(ErrorCode::kSequenceTooLong, "context too long");
  std::vector<Sequence> seqs(1);
  seqs[0].prefix = prefix.data();
  seqs[0].input.push_back(Vocab::kBos);
  seqs[0].input.insert(seqs[0].input.end(), context.begin(), context.end());
  Network net(shape_, vocab_.size(), tensors_, params_.data());
  Pass pass;
  net.forward(seqs, pass);
  const RowMat last = pass.z.bottomRows(1);
  const RowMat logits = net.logits(last);
  const double m = logits.maxCoeff();
  std::vector<double> p(vocab_.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    p[k] = std::exp(logits(0, static_cast<Eigen::Index>(k)) - m);
    sum += p[k];
  }
  for (double& x : p) x /= sum;
  return p;
}

// ---------------------------------------------------------------------------
// Loss, training, decoding

double recons_loss(const DecoderModel& model, const Embedding& prefix, std::span<const int> tokens,
                   double label_smoothing) {
  const Example e{prefix.values(), tokens};
  return model.loss_and_gradient(std::span(&e, 1), label_smoothing, nullptr);
}

DecoderModel train(DecoderModel model, std::span<const CorpusEntry> corpus, const TextEncoder& encoder,
                   const TrainConfig& config, TrainLog* log) {
  config.validate();
  if (corpus.empty()) throw Error(ErrorCode::kEmptyCorpus, "cannot train on an empty corpus");
  const std::size_t d = model.shape().prefix_dim;
  if (encoder.dim() != d) {
    throw Error(ErrorCode::kDimensionMismatch, "encoder dim " + std::to_string(encoder.dim()) +
                                                   " vs decoder prefix dim " + std::to_string(d));
  }

  // The encoder is frozen: embed everything once up front.
  std::vector<std::vector<int>> tokens(corpus.size());
  std::vector<std::vector<double>> prefixes(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    tokens[i] = model.vocab().encode(corpus[i].text);
    if (tokens[i].empty()) throw Error(ErrorCode::kEmptyInput, "corpus entry without tokens");
    if (tokens[i].size() > model.shape().max_len) {
      throw Error(ErrorCode::kSequenceTooLong, "'" + corpus[i].text + "'");
    }
    const auto e = normalize(encoder.encode(corpus[i].text).values, d).embedding;
    prefixes[i].assign(e.values().begin(), e.values().end());
  }
  if (config.steps == 0) return model;

  const std::size_t n = corpus.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  std::vector<bool> decayed(model.parameters().size(), false);
  for (const auto& t : model.tensors()) {
    if (is_decayed(t.name)) std::fill_n(decayed.begin() + static_cast<std::ptrdiff_t>(t.offset), t.size, true);
  }

  Rng rng(mix_seed(config.seed, 0x747261696e));
  std::vector<std::size_t> order = rng.permutation(n);
  std::size_t cursor = 0;
  std::vector<double> m1(model.parameters().size(), 0.0), m2(model.parameters().size(), 0.0), grad;
  std::vector<Example> batch(config.batch_size);
  double epoch_sum = 0.0;
  std::size_t epoch_steps = 0;

  for (std::size_t step = 1; step <= config.steps; ++step) {
    for (auto& ex : batch) {
      if (cursor == n) {
        order = rng.permutation(n);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      ex = {prefixes[i], tokens[i]};
    }
    const double loss = model.loss_and_gradient(batch, config.label_smoothing, &grad);
    if (!std::isfinite(loss)) {
      throw Error(ErrorCode::kNonFinite, "training loss is not finite at step " + std::to_string(step));
    }

    if (config.grad_clip > 0.0) {
      double sq = 0.0;
      for (double g : grad) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > config.grad_clip) {
        const double s = config.grad_clip / norm;
        for (double& g : grad) g *= s;
      }
    }

    double lr = config.learning_rate;
    if (config.warmup_steps > 0 && step <= config.warmup_steps) {
      lr *= static_cast<double>(step) / static_cast<double>(config.warmup_steps);
    } else if (config.cosine_decay && config.steps > config.warmup_steps) {
      const double progress = static_cast<double>(step - config.warmup_steps) /
                              static_cast<double>(config.steps - config.warmup_steps);
      lr *= config.min_lr_ratio +
            (1.0 - config.min_lr_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }

    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
    auto params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      m1[k] = config.beta1 * m1[k] + (1.0 - config.beta1) * grad[k];
      m2[k] = config.beta2 * m2[k] + (1.0 - config.beta2) * grad[k] * grad[k];
      double update = (m1[k] / bc1) / (std::sqrt(m2[k] / bc2) + config.epsilon);
      if (decayed[k]) update += config.weight_decay * params[k];
      params[k] -= lr * update;
    }

    if (log) {
      log->step_loss.push_back(loss);
      epoch_sum += loss;
      if (++epoch_steps == steps_per_epoch || step == config.steps) {
        log->epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_steps));
        epoch_sum = 0.0;
        epoch_steps = 0;
      }
    }
  }
  model.round_to_f32();
  return model;
}

std::vector<int> decode_greedy(const DecoderModel& model, const Embedding& prefix,
                               std::span<const int> prompt, std::size_t max_len) {
  if (prefix.dim() != model.shape().prefix_dim) {
    throw Error(ErrorCode::kDimensionMismatch, "prefix dim " + std::to_string(prefix.dim()));
  }
  const std::size_t cap = std::min(max_len, model.shape().max_len);
  std::vector<int> out(prompt.begin(), prompt.begin() + static_cast<std::ptrdiff_t>(std::min(cap, prompt.size())));
  for (int t : out) {
    if (t < 0 || static_cast<std::size_t>(t) >= model.vocab().size()) {
      throw Error(ErrorCode::kUnknownToken, "prompt token id " + std::to_string(t));
    }
  }
  while (out.size() < cap) {
    const auto p = model.next_token_distribution(prefix.values(), out);
    int best = Vocab::kEos;
    double best_p = -1.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const int id = static_cast<int>(k);
      if (id == Vocab::kPad || id == Vocab::kBos) continue;
      if (p[k] > best_p) {
        best_p = p[k];
        best = id;
      }
    }
    if (best == Vocab::kEos) break;
    out.push_back(best);
  }
  return out;
}

std::vector<int> decode_greedy(const DecoderModel& model, const Embedding& prefix, std::span<const int> prompt) {
  return decode_greedy(model, prefix, prompt, model.shape().max_len);
}

std::vector<CorpusEntry> reconstruct_corpus(const DecoderModel& model, const SupportMemory& memory,
                                            std::span<const int> prompt) {
  std::vector<CorpusEntry> out;
  out.reserve(memory.size());
  for (std::size_t i = 0; i < memory.size(); ++i) {
    CorpusEntry e;
    e.tokens = decode_greedy(model, memory.embedding(i), prompt);
    e.text = model.vocab().decode(e.tokens);
    e.length = e.tokens.size();
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> encode_model(const DecoderModel& model) {
  detail::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kModelFormatVersion);
  w.u16(0);
  const auto& s = model.shape();
  const std::pair<const char*, std::size_t> config[] = {
      {"prefix_dim", s.prefix_dim}, {"width", s.width}, {"layers", s.layers},
      {"heads", s.heads},           {"ffn", s.ffn},     {"max_len", s.max_len},
  };
  w.u32(static_cast<std::uint32_t>(std::size(config)));
  for (const auto& [name, value] : config) {
    w.str(name);
    w.i64(static_cast<std::int64_t>(value));
  }
  w.u32(static_cast<std::uint32_t>(model.tensors().size()));
  const auto params = model.parameters();
  for (const auto& t : model.tensors()) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto dim : t.shape) w.u32(static_cast<std::uint32_t>(dim));
    for (std::size_t i = 0; i < t.size; ++i) w.f32(static_cast<float>(params[t.offset + i]));
  }
  const auto pairs = model.vocab().pairs();
  w.u32(static_cast<std::uint32_t>(pairs.size()));
  for (const auto& [tok, id] : pairs) {
    w.str(tok);
    w.u32(static_cast<std::uint32_t>(id));
  }
  return std::move(w.buffer());
}

DecoderModel decode_model(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw Error(ErrorCode::kBadMagic, "not a DCPM file");
  const std::uint16_t version = r.u16();
  if (version != kModelFormatVersion) {
    throw Error(ErrorCode::kVersionUnsupported, "DCPM version " + std::to_string(version));
  }
  r.u16();

  std::unordered_map<std::string, std::int64_t> config;
  const std::uint32_t n_config = r.u32();
  for (std::uint32_t i = 0; i < n_config; ++i) {
    std::string name = r.str();
    config[name] = r.i64();
  }
  auto get = [&](const char* key) -> std::size_t {
    auto it = config.find(key);
    if (it == config.end() || it->second <= 0) {
      throw Error(ErrorCode::kCorruptData, std::string("checkpoint lacks config '") + key + "'");
    }
    return static_cast<std::size_t>(it->second);
  };
  DecoderShape shape{get("prefix_dim"), get("width"), get("layers"), get("heads"), get("ffn"), get("max_len")};
  shape.validate();

  struct Raw {
    std::vector<std::size_t> shape;
    std::vector<float> data;
  };
  std::unordered_map<std::string, Raw> raw;
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    Raw t;
    const std::uint32_t rank = r.u32();
    r.need(static_cast<std::size_t>(rank) * 4);
    std::size_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.shape.push_back(r.u32());
      count *= t.shape.back();
    }
    r.need(count * 4);
    t.data.resize(count);
    for (float& x : t.data) x = r.f32();
    raw.emplace(std::move(name), std::move(t));
  }

  std::map<std::string, int> pairs;
  const std::uint32_t n_vocab = r.u32();
  for (std::uint32_t i = 0; i < n_vocab; ++i) {
    std::string tok = r.str();
    pairs.emplace(std::move(tok), static_cast<int>(r.u32()));
  }
  if (!r.done()) throw Error(ErrorCode::kCorruptData, "trailing bytes after DCPM payload");

  DecoderModel model(Vocab::from_pairs(pairs), shape);
  auto params = model.parameters();
  for (const auto& t : model.tensors()) {
    auto it = raw.find(t.name);
    if (it == raw.end()) throw Error(ErrorCode::kCorruptData, "checkpoint lacks tensor '" + t.name + "'");
    if (it->second.shape != t.shape) {
      throw Error(ErrorCode::kDimensionMismatch, "tensor '" + t.name + "' has unexpected shape");
    }
    for (std::size_t i = 0; i < t.size; ++i) params[t.offset + i] = it->second.data[i];
  }
  return model;
}

void save_model(const DecoderModel& model, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_model(model));
}

DecoderModel load_model(const std::filesystem::path& path) { return decode_model(detail::read_file(path)); }

}  // namespace decap
