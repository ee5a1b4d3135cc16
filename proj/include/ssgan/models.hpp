#pragma once

#include <Eigen/Dense>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssgan/image.hpp"
#include "ssgan/linalg.hpp"
#include "ssgan/rng.hpp"
#include "ssgan/tape.hpp"

namespace ssgan {

// Named parameter store. Spectral-norm u vectors live here too (so they ride
// along in checkpoints) but are flagged non-trainable.
template <class T>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Tensor<T>> values;
  std::vector<bool> trainable;
  std::unordered_map<std::string, int> index;

  int add(const std::string& name, Tensor<T> t, bool train = true) {
    require(!index.count(name), ErrorCode::invalid_argument,
            "duplicate parameter name: " + name);
    index[name] = static_cast<int>(names.size());
    names.push_back(name);
    values.push_back(std::move(t));
    trainable.push_back(train);
    return static_cast<int>(names.size()) - 1;
  }
  Tensor<T>& at(int id) { return values[static_cast<size_t>(id)]; }
  const Tensor<T>& at(int id) const { return values[static_cast<size_t>(id)]; }
  int id_of(const std::string& name) const {
    auto it = index.find(name);
    require(it != index.end(), ErrorCode::invalid_argument,
            "unknown parameter: " + name);
    return it->second;
  }
  int count() const { return static_cast<int>(names.size()); }
  bool all_finite() const {
    for (const auto& v : values)
      if (!v.all_finite()) return false;
    return true;
  }
};

// Parameters of one model pushed onto a tape as leaves.
template <class T>
struct ParamVars {
  std::vector<typename Tape<T>::Var> vars;
  typename Tape<T>::Var of(int id) const { return vars[static_cast<size_t>(id)]; }
};

template <class T>
ParamVars<T> push_params(Tape<T>& tape, const ParamSet<T>& ps, bool requires_grad) {
  ParamVars<T> pv;
  pv.vars.reserve(ps.values.size());
  for (size_t i = 0; i < ps.values.size(); ++i)
    pv.vars.push_back(tape.leaf(ps.values[i], requires_grad && ps.trainable[i]));
  return pv;
}

// Orthogonal init (QR of a random normal matrix), zeros for biases.
template <class T>
Tensor<T> orthogonal_init(int rows, int cols, DetRng& rng) {
  bool flip = rows > cols;
  int r = flip ? cols : rows, c = flip ? rows : cols;
  Eigen::MatrixXd A(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) A(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(A.transpose());
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(c, r);
  Eigen::MatrixXd R = qr.matrixQR().topRows(r).template triangularView<Eigen::Upper>();
  for (int i = 0; i < r; ++i)
    if (R(i, i) < 0) Q.col(i) = -Q.col(i);
  Eigen::MatrixXd M = flip ? Q : Eigen::MatrixXd(Q.transpose());
  Tensor<T> out({rows, cols});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out(i, j) = static_cast<T>(M(i, j));
  return out;
}

// ---- layer descriptors (indices into a ParamSet) ----

struct ConvLayer {
  int w = -1, b = -1, u = -1;  // u: persistent spectral-norm vector
  int cin = 0, cout = 0, k = 3;
};

struct LinearLayer {
  int w = -1, b = -1, u = -1;
  int din = 0, dout = 0;
};

enum class GenMode { plain, conditional_bn, self_modulated_bn };

// One batch-norm site; which fields are used depends on the mode.
struct BNSite {
  int channels = 0;
  int gamma = -1, beta = -1;               // plain
  int emb_g = -1, emb_b = -1;              // conditional
  int w1 = -1, b1 = -1;                    // self-modulated: shared hidden
  int wg = -1, bg = -1, wb = -1, bb = -1;  // self-modulated: heads
};

struct GenBlock {
  ConvLayer c1, c2, sc;
  BNSite bn1, bn2;
};

struct DiscBlock {
  ConvLayer c1, c2, sc;
  bool down = false;
  bool first = false;  // first block feeds raw pixels, no pre-activation
};

inline constexpr int kSbnHidden = 32;

// ---- generator ----

template <class T>
struct Generator {
  GenMode mode = GenMode::plain;
  int dz = 128, size = 32, channels = 3, base_width = 64, num_classes = 0;
  ParamSet<T> params;
  LinearLayer stem;
  std::vector<GenBlock> blocks;
  BNSite final_bn;
  ConvLayer final_conv;
  int stem_ch = 0;
};

template <class T>
ConvLayer add_conv(ParamSet<T>& ps, const std::string& name, int cin, int cout,
                   int k, DetRng& rng, bool with_u) {
  ConvLayer l;
  l.cin = cin;
  l.cout = cout;
  l.k = k;
  Tensor<T> w = orthogonal_init<T>(cout, cin * k * k, rng);
  l.w = ps.add(name + ".w", w.reshaped({cout, cin, k, k}));
  l.b = ps.add(name + ".b", Tensor<T>::zeros({cout}));
  if (with_u) {
    Tensor<T> u({cout});
    rng.fill_normal(std::span<T>(u.v));
    double n = frobenius_norm(u);
    for (auto& x : u.v) x = static_cast<T>(x / n);
    l.u = ps.add(name + ".sn_u", std::move(u), false);
  }
  return l;
}

template <class T>
LinearLayer add_linear(ParamSet<T>& ps, const std::string& name, int din,
                       int dout, DetRng& rng, bool with_u) {
  LinearLayer l;
  l.din = din;
  l.dout = dout;
  l.w = ps.add(name + ".w", orthogonal_init<T>(dout, din, rng));
  l.b = ps.add(name + ".b", Tensor<T>::zeros({dout}));
  if (with_u) {
    Tensor<T> u({dout});
    rng.fill_normal(std::span<T>(u.v));
    double n = frobenius_norm(u);
    for (auto& x : u.v) x = static_cast<T>(x / n);
    l.u = ps.add(name + ".sn_u", std::move(u), false);
  }
  return l;
}

template <class T>
BNSite add_bn(ParamSet<T>& ps, const std::string& name, int channels,
              GenMode mode, int num_classes, int dz, DetRng& rng) {
  BNSite s;
  s.channels = channels;
  switch (mode) {
    case GenMode::plain:
      s.gamma = ps.add(name + ".gamma", Tensor<T>::full({channels}, T(1)));
      s.beta = ps.add(name + ".beta", Tensor<T>::zeros({channels}));
      break;
    case GenMode::conditional_bn:
      // gamma = 1 + emb_g[y], beta = emb_b[y]; zero init starts as plain BN.
      s.emb_g = ps.add(name + ".emb_g", Tensor<T>::zeros({num_classes, channels}));
      s.emb_b = ps.add(name + ".emb_b", Tensor<T>::zeros({num_classes, channels}));
      break;
    case GenMode::self_modulated_bn:
      s.w1 = ps.add(name + ".sbn_w1", orthogonal_init<T>(kSbnHidden, dz, rng));
      s.b1 = ps.add(name + ".sbn_b1", Tensor<T>::zeros({kSbnHidden}));
      s.wg = ps.add(name + ".sbn_wg", Tensor<T>::zeros({channels, kSbnHidden}));
      s.bg = ps.add(name + ".sbn_bg", Tensor<T>::zeros({channels}));
      s.wb = ps.add(name + ".sbn_wb", Tensor<T>::zeros({channels, kSbnHidden}));
      s.bb = ps.add(name + ".sbn_bb", Tensor<T>::zeros({channels}));
      break;
  }
  return s;
}

// Number of up/down blocks between the 4x4 stem and the image resolution.
inline int resolution_blocks(int size) {
  require(size == 16 || size == 32, ErrorCode::invalid_argument,
          "supported image sizes: 16, 32");
  return size == 32 ? 3 : 2;
}

template <class T>
Generator<T> make_generator(int size, int base_width, int dz, GenMode mode,
                            int num_classes, uint64_t seed) {
  require(mode != GenMode::conditional_bn || num_classes > 0,
          ErrorCode::invalid_argument, "conditional_bn requires num_classes > 0");
  Generator<T> g;
  g.mode = mode;
  g.dz = dz;
  g.size = size;
  g.base_width = base_width;
  g.num_classes = num_classes;
  DetRng rng(seed, Stream::param_init, 1);
  int nb = resolution_blocks(size);
  // Channel plan mirrors the discriminator: widest at the stem.
  std::vector<int> ch(static_cast<size_t>(nb) + 1);
  ch[0] = 4 * base_width;
  for (int i = 1; i <= nb; ++i)
    ch[static_cast<size_t>(i)] = (i == nb) ? base_width : 2 * base_width;
  g.stem_ch = ch[0];
  g.stem = add_linear(g.params, "g.stem", dz, 16 * ch[0], rng, false);
  for (int i = 0; i < nb; ++i) {
    GenBlock b;
    std::string nm = "g.block" + std::to_string(i);
    int ci = ch[static_cast<size_t>(i)], co = ch[static_cast<size_t>(i) + 1];
    b.bn1 = add_bn(g.params, nm + ".bn1", ci, mode, num_classes, dz, rng);
    b.c1 = add_conv(g.params, nm + ".c1", ci, co, 3, rng, false);
    b.bn2 = add_bn(g.params, nm + ".bn2", co, mode, num_classes, dz, rng);
    b.c2 = add_conv(g.params, nm + ".c2", co, co, 3, rng, false);
    b.sc = add_conv(g.params, nm + ".sc", ci, co, 1, rng, false);
    g.blocks.push_back(b);
  }
  g.final_bn = add_bn(g.params, "g.final_bn", ch[static_cast<size_t>(nb)], mode,
                      num_classes, dz, rng);
  g.final_conv =
      add_conv(g.params, "g.final_conv", ch[static_cast<size_t>(nb)], g.channels,
               3, rng, false);
  return g;
}

// ---- discriminator ----

template <class T>
struct Discriminator {
  int size = 32, channels = 3, base_width = 64, num_classes = 0;
  bool spectral_norm = true;
  ParamSet<T> params;
  std::vector<DiscBlock> blocks;
  std::vector<int> block_channels;
  LinearLayer gan_head, rot_head;
  int proj_emb = -1;  // class-projection embedding, optional
  int feat_dim = 0;
};

template <class T>
Discriminator<T> make_discriminator(int size, int base_width, int num_classes,
                                    bool spectral_norm, bool projection,
                                    uint64_t seed) {
  Discriminator<T> d;
  d.size = size;
  d.base_width = base_width;
  d.num_classes = num_classes;
  d.spectral_norm = spectral_norm;
  DetRng rng(seed, Stream::param_init, 2);
  // Four probe blocks at any supported size; the first two downsample.
  std::vector<int> ch = {base_width, 2 * base_width, 2 * base_width,
                         4 * base_width};
  int cin = d.channels;
  for (int i = 0; i < 4; ++i) {
    DiscBlock b;
    std::string nm = "d.block" + std::to_string(i);
    int co = ch[static_cast<size_t>(i)];
    b.first = i == 0;
    b.down = i < 2;
    b.c1 = add_conv(d.params, nm + ".c1", cin, co, 3, rng, spectral_norm);
    b.c2 = add_conv(d.params, nm + ".c2", co, co, 3, rng, spectral_norm);
    b.sc = add_conv(d.params, nm + ".sc", cin, co, 1, rng, spectral_norm);
    d.blocks.push_back(b);
    d.block_channels.push_back(co);
    cin = co;
  }
  d.feat_dim = cin;
  d.gan_head = add_linear(d.params, "d.gan_head", cin, 1, rng, spectral_norm);
  d.rot_head = add_linear(d.params, "d.rot_head", cin, 4, rng, spectral_norm);
  if (projection) {
    require(num_classes > 0, ErrorCode::invalid_argument,
            "projection conditioning requires labels");
    d.proj_emb = d.params.add("d.proj_emb", Tensor<T>::zeros({num_classes, cin}));
  }
  return d;
}

// ---- forward passes ----

// One power-iteration step. Returns sigma on the tape (so gradients flow via
// d sigma / dW = u v^T with u, v treated as constants) and the effective
// weight W / sigma. Advances the persistent u only when update_u is set.
template <class T>
typename Tape<T>::Var spectral_scale(Tape<T>& tape, typename Tape<T>::Var w2d,
                                     ParamSet<T>& ps, int u_id, bool update_u) {
  const Tensor<T>& wv = tape.value(w2d);
  int m = wv.dim(0), n = wv.dim(1);
  Tensor<T>& u_store = ps.at(u_id);
  std::vector<T> u(u_store.v.begin(), u_store.v.end());

  // v = normalize(W^T u), u2 = normalize(W v)
  std::vector<double> v(static_cast<size_t>(n), 0.0), u2(static_cast<size_t>(m), 0.0);
  for (int i = 0; i < m; ++i) {
    double ui = static_cast<double>(u[static_cast<size_t>(i)]);
    const T* row = wv.data() + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) v[static_cast<size_t>(j)] += ui * row[j];
  }
  double vn = 0;
  for (double x : v) vn += x * x;
  vn = std::sqrt(vn);
  if (vn < 1e-30) return w2d;  // zero matrix: leave weights untouched
  for (double& x : v) x /= vn;
  for (int i = 0; i < m; ++i) {
    const T* row = wv.data() + static_cast<int64_t>(i) * n;
    double s = 0;
    for (int j = 0; j < n; ++j) s += static_cast<double>(row[j]) * v[static_cast<size_t>(j)];
    u2[static_cast<size_t>(i)] = s;
  }
  double un = 0;
  for (double x : u2) un += x * x;
  un = std::sqrt(un);
  if (un < 1e-30) return w2d;
  for (double& x : u2) x /= un;

  if (update_u)
    for (int i = 0; i < m; ++i) u_store.v[static_cast<size_t>(i)] = static_cast<T>(u2[static_cast<size_t>(i)]);

  Tensor<T> urow({1, m}), vcol({n, 1});
  for (int i = 0; i < m; ++i) urow.v[static_cast<size_t>(i)] = static_cast<T>(u2[static_cast<size_t>(i)]);
  for (int j = 0; j < n; ++j) vcol.v[static_cast<size_t>(j)] = static_cast<T>(v[static_cast<size_t>(j)]);
  auto sigma = tape.reshape(
      tape.matmul(tape.matmul(tape.constant(std::move(urow)), w2d),
                  tape.constant(std::move(vcol))),
      {1});
  return tape.mul_scalarvar(w2d, tape.reciprocal(sigma));
}

// Effective-weight overrides, keyed by weight parameter id. Populated by
// prepare_discriminator when spectral normalization is active.
template <class T>
using EffWeights = std::unordered_map<int, typename Tape<T>::Var>;

template <class T>
typename Tape<T>::Var conv_forward(Tape<T>& tape, typename Tape<T>::Var x,
                                   const ConvLayer& l, const ParamVars<T>& pv,
                                   const EffWeights<T>* eff = nullptr) {
  auto w = pv.of(l.w);
  if (eff) {
    auto it = eff->find(l.w);
    if (it != eff->end()) w = it->second;
  }
  return tape.conv2d_bias(x, w, pv.of(l.b));
}

template <class T>
typename Tape<T>::Var linear_forward(Tape<T>& tape, typename Tape<T>::Var x,
                                     const LinearLayer& l, const ParamVars<T>& pv,
                                     const EffWeights<T>* eff = nullptr) {
  auto w = pv.of(l.w);
  if (eff) {
    auto it = eff->find(l.w);
    if (it != eff->end()) w = it->second;
  }
  return tape.add_chan_bias(tape.matmul(x, tape.transpose2(w)), pv.of(l.b));
}

// Modulated batch norm: normalize with batch statistics, then scale/shift
// from the mode-dependent source.
template <class T>
typename Tape<T>::Var bn_forward(Tape<T>& tape, typename Tape<T>::Var x,
                                 const BNSite& s, GenMode mode,
                                 const ParamVars<T>& pv,
                                 const std::vector<int>* labels,
                                 typename Tape<T>::Var z) {
  auto xn = tape.bn_norm(x);
  switch (mode) {
    case GenMode::plain:
      return tape.chan_affine(xn, pv.of(s.gamma), pv.of(s.beta));
    case GenMode::conditional_bn: {
      require(labels != nullptr, ErrorCode::invalid_argument,
              "conditional_bn requires labels");
      auto g = tape.add_scalar(tape.gather_rows(pv.of(s.emb_g), *labels), T(1));
      auto b = tape.gather_rows(pv.of(s.emb_b), *labels);
      return tape.add_nc(tape.scale_nc(xn, g), b);
    }
    case GenMode::self_modulated_bn: {
      auto h = tape.relu(tape.add_chan_bias(
          tape.matmul(z, tape.transpose2(pv.of(s.w1))), pv.of(s.b1)));
      auto g = tape.add_scalar(
          tape.add_chan_bias(tape.matmul(h, tape.transpose2(pv.of(s.wg))),
                             pv.of(s.bg)),
          T(1));
      auto b = tape.add_chan_bias(tape.matmul(h, tape.transpose2(pv.of(s.wb))),
                                  pv.of(s.bb));
      return tape.add_nc(tape.scale_nc(xn, g), b);
    }
  }
  fail(ErrorCode::invalid_argument, "unknown generator mode");
}

// Upright image synthesis; tanh output in (-1, 1). `labels` only with
// conditional BN; the latent var doubles as the modulation input for sBN.
template <class T>
typename Tape<T>::Var generator_forward(Tape<T>& tape, typename Tape<T>::Var z,
                                        Generator<T>& gen,
                                        const ParamVars<T>& pv,
                                        const std::vector<int>* labels = nullptr) {
  bool want_labels = gen.mode == GenMode::conditional_bn;
  require(want_labels == (labels != nullptr), ErrorCode::invalid_argument,
          "generator mode/condition mismatch");
  if (labels)
    for (int y : *labels)
      require(y >= 0 && y < gen.num_classes, ErrorCode::invalid_argument,
              "generator label out of range");
  int n = tape.value(z).dim(0);
  auto h = linear_forward(tape, z, gen.stem, pv);
  h = tape.reshape(h, {n, gen.stem_ch, 4, 4});
  for (auto& b : gen.blocks) {
    auto r = bn_forward(tape, h, b.bn1, gen.mode, pv, labels, z);
    r = tape.relu(r);
    r = tape.upsample2(r);
    r = conv_forward(tape, r, b.c1, pv);
    r = bn_forward(tape, r, b.bn2, gen.mode, pv, labels, z);
    r = tape.relu(r);
    r = conv_forward(tape, r, b.c2, pv);
    auto s = conv_forward(tape, tape.upsample2(h), b.sc, pv);
    h = tape.add(r, s);
  }
  h = bn_forward(tape, h, gen.final_bn, gen.mode, pv, labels, z);
  h = tape.relu(h);
  h = conv_forward(tape, h, gen.final_conv, pv);
  return tape.tanh_op(h);
}

template <class T>
struct DiscOutput {
  typename Tape<T>::Var gan_logit;              // (N)
  typename Tape<T>::Var rot_logits;             // (N, 4)
  std::vector<typename Tape<T>::Var> block_feats;  // (N, C_b) spatial means
  typename Tape<T>::Var trunk_feat;             // (N, F) global sum pool
};

// Discriminator pass context: parameter leaves plus, under spectral
// normalization, the per-matrix effective weights (computed once so the u
// vectors advance exactly once per discriminator update however many
// forwards share the context).
template <class T>
struct DiscCtx {
  ParamVars<T> pv;
  EffWeights<T> eff;
};

template <class T>
DiscCtx<T> prepare_discriminator(Tape<T>& tape, Discriminator<T>& disc,
                                 bool requires_grad, bool update_u) {
  DiscCtx<T> ctx;
  ctx.pv = push_params(tape, disc.params, requires_grad);
  if (!disc.spectral_norm) return ctx;
  auto norm_conv = [&](const ConvLayer& l) {
    auto w2d = tape.reshape(ctx.pv.of(l.w), {l.cout, l.cin * l.k * l.k});
    auto weff = spectral_scale(tape, w2d, disc.params, l.u, update_u);
    ctx.eff[l.w] = tape.reshape(weff, {l.cout, l.cin, l.k, l.k});
  };
  for (auto& b : disc.blocks) {
    norm_conv(b.c1);
    norm_conv(b.c2);
    norm_conv(b.sc);
  }
  auto norm_lin = [&](const LinearLayer& l) {
    ctx.eff[l.w] = spectral_scale(tape, ctx.pv.of(l.w), disc.params, l.u, update_u);
  };
  norm_lin(disc.gan_head);
  norm_lin(disc.rot_head);
  return ctx;
}

// Shared trunk, two heads, per-block pooled features for probing.
template <class T>
DiscOutput<T> discriminator_forward(Tape<T>& tape, typename Tape<T>::Var x,
                                    Discriminator<T>& disc,
                                    const DiscCtx<T>& ctx) {
  const Tensor<T>& xv = tape.value(x);
  require(xv.rank() == 4 && xv.dim(1) == disc.channels &&
              xv.dim(2) == disc.size && xv.dim(3) == disc.size,
          ErrorCode::shape_mismatch,
          "discriminator input shape " + shape_str(xv.shape));
  const EffWeights<T>* eff = disc.spectral_norm ? &ctx.eff : nullptr;
  DiscOutput<T> out;
  auto h = x;
  for (auto& b : disc.blocks) {
    auto r = b.first ? h : tape.relu(h);
    r = conv_forward(tape, r, b.c1, ctx.pv, eff);
    r = tape.relu(r);
    r = conv_forward(tape, r, b.c2, ctx.pv, eff);
    auto s = conv_forward(tape, h, b.sc, ctx.pv, eff);
    if (b.down) {
      r = tape.avgpool2(r);
      s = tape.avgpool2(s);
    }
    h = tape.add(r, s);
    int hw = tape.value(h).dim(2) * tape.value(h).dim(3);
    out.block_feats.push_back(
        tape.mul_scalar(tape.reduce_hw(h), T(1) / static_cast<T>(hw)));
  }
  auto f = tape.reduce_hw(tape.relu(h));  // global sum pool
  out.trunk_feat = f;
  auto gan = linear_forward(tape, f, disc.gan_head, ctx.pv, eff);
  out.gan_logit = tape.reshape(gan, {tape.value(gan).dim(0)});
  out.rot_logits = linear_forward(tape, f, disc.rot_head, ctx.pv, eff);
  return out;
}

// Convenience single-shot form.
template <class T>
DiscOutput<T> discriminator_forward(Tape<T>& tape, typename Tape<T>::Var x,
                                    Discriminator<T>& disc,
                                    const ParamVars<T>& pv, bool update_u) {
  DiscCtx<T> ctx;
  ctx.pv = pv;
  if (disc.spectral_norm) {
    Tape<T>& t = tape;
    auto norm_conv = [&](const ConvLayer& l) {
      auto w2d = t.reshape(ctx.pv.of(l.w), {l.cout, l.cin * l.k * l.k});
      auto weff = spectral_scale(t, w2d, disc.params, l.u, update_u);
      ctx.eff[l.w] = t.reshape(weff, {l.cout, l.cin, l.k, l.k});
    };
    for (auto& b : disc.blocks) {
      norm_conv(b.c1);
      norm_conv(b.c2);
      norm_conv(b.sc);
    }
    auto norm_lin = [&](const LinearLayer& l) {
      ctx.eff[l.w] = spectral_scale(t, ctx.pv.of(l.w), disc.params, l.u, update_u);
    };
    norm_lin(disc.gan_head);
    norm_lin(disc.rot_head);
  }
  return discriminator_forward(tape, x, disc, ctx);
}

// Projection-conditional logit: gan_logit + <emb[label], trunk feature>.
template <class T>
typename Tape<T>::Var projection_logit(Tape<T>& tape,
                                       typename Tape<T>::Var gan_logit,
                                       typename Tape<T>::Var trunk_feat,
                                       typename Tape<T>::Var embedding,
                                       const std::vector<int>& labels) {
  int k = tape.value(embedding).dim(0);
  for (int y : labels)
    require(y >= 0 && y < k, ErrorCode::invalid_argument,
            "projection label out of range");
  auto rows = tape.gather_rows(embedding, labels);
  auto dot = tape.reduce_sample(tape.mul(rows, trunk_feat));
  return tape.add(gan_logit, dot);
}

}  // namespace ssgan
