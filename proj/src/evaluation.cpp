#include "ssgan/evaluation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "ssgan/losses.hpp"
#include "ssgan/optim.hpp"

namespace ssgan {

GaussianMoments gaussian_fit(const Tensor<double>& embeddings) {
  require(embeddings.rank() == 2, ErrorCode::shape_mismatch,
          "gaussian_fit expects (n, d)");
  int64_t n = embeddings.dim(0);
  int d = embeddings.dim(1);
  require(n >= 2, ErrorCode::invalid_argument, "gaussian_fit needs n >= 2");
  GaussianMoments gm;
  gm.n = n;
  gm.mu = Tensor<double>({d});
  for (int64_t i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) gm.mu.v[j] += embeddings(static_cast<int>(i), j);
  for (auto& x : gm.mu.v) x /= static_cast<double>(n);

  Eigen::Map<const MatRM<double>> X(embeddings.data(), n, d);
  Eigen::Map<const Eigen::VectorXd> mu(gm.mu.data(), d);
  Eigen::MatrixXd centered = X.rowwise() - mu.transpose();
  Eigen::MatrixXd cov =
      (centered.transpose() * centered) / static_cast<double>(n - 1);
  cov = 0.5 * (cov + cov.transpose()).eval();
  gm.sigma = Tensor<double>({d, d});
  Eigen::Map<MatRM<double>>(gm.sigma.data(), d, d) = cov;
  return gm;
}

namespace {

bool is_singular(const Tensor<double>& sigma) {
  int d = sigma.dim(0);
  Eigen::Map<const Eigen::MatrixXd> S(sigma.data(), d, d);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  double mx = es.eigenvalues().cwiseAbs().maxCoeff();
  return es.eigenvalues().minCoeff() < 1e-12 * std::max(1.0, mx);
}

double trace(const Tensor<double>& m) {
  double t = 0;
  for (int i = 0; i < m.dim(0); ++i) t += m(i, i);
  return t;
}

}  // namespace

FidResult fid_from_moments(const GaussianMoments& a, const GaussianMoments& b) {
  require(a.dim() == b.dim(), ErrorCode::dimension_mismatch,
          "fid: moment dimensions differ");
  require(a.embedder_tag == 0 || b.embedder_tag == 0 ||
              a.embedder_tag == b.embedder_tag,
          ErrorCode::invalid_argument, "fid: moments from different embedders");
  int d = a.dim();
  FidResult res;
  Tensor<double> sa = a.sigma, sb = b.sigma;
  if (is_singular(sa) || is_singular(sb)) {
    res.regularized = true;
    for (int i = 0; i < d; ++i) {
      sa(i, i) += 1e-6;
      sb(i, i) += 1e-6;
    }
  }
  Tensor<double> ra = sqrtm_psd(sa);
  // (Sa^1/2 Sb Sa^1/2) is PSD and shares eigenvalues with Sa Sb.
  Eigen::Map<const Eigen::MatrixXd> Ra(ra.data(), d, d);
  Eigen::Map<const Eigen::MatrixXd> Sb(sb.data(), d, d);
  Eigen::MatrixXd M = Ra * Sb * Ra;
  M = 0.5 * (M + M.transpose()).eval();
  Tensor<double> mt({d, d});
  Eigen::Map<Eigen::MatrixXd>(mt.data(), d, d) = M;
  Tensor<double> root = sqrtm_psd(mt);

  double mean_term = 0;
  for (int i = 0; i < d; ++i) {
    double diff = a.mu.v[i] - b.mu.v[i];
    mean_term += diff * diff;
  }
  double value = mean_term + trace(sa) + trace(sb) - 2.0 * trace(root);
  res.value = value < 0 ? 0.0 : value;
  return res;
}

// ---- classifier ----

ConvClassifier make_conv_classifier(int image_size, int width, int num_classes,
                                    bool with_rot_head, uint64_t seed) {
  require(image_size == 16 || image_size == 32, ErrorCode::invalid_argument,
          "classifier image size must be 16 or 32");
  ConvClassifier c;
  c.image_size = image_size;
  c.width = width;
  c.num_classes = num_classes;
  c.feat_dim = 4 * width;
  c.with_rot_head = with_rot_head;
  DetRng rng(seed, Stream::embedder, 0);
  c.c1 = add_conv(c.params, "cls.c1", 3, width, 3, rng, false);
  c.c2 = add_conv(c.params, "cls.c2", width, 2 * width, 3, rng, false);
  c.c3 = add_conv(c.params, "cls.c3", 2 * width, 4 * width, 3, rng, false);
  c.head = add_linear(c.params, "cls.head", c.feat_dim, num_classes, rng, false);
  if (with_rot_head)
    c.rot_head = add_linear(c.params, "cls.rot", c.feat_dim, 4, rng, false);
  return c;
}

ClassifierOut classifier_forward(Tape<float>& tape, Tape<float>::Var x,
                                 ConvClassifier& cls,
                                 const ParamVars<float>& pv) {
    auto h = tape.relu(conv_forward(tape, x, cls.c1, pv));
  h = tape.avgpool2(h);
  h = tape.relu(conv_forward(tape, h, cls.c2, pv));
  h = tape.avgpool2(h);
  h = tape.relu(conv_forward(tape, h, cls.c3, pv));
  int hw = tape.value(h).dim(2) * tape.value(h).dim(3);
  auto feat = tape.mul_scalar(tape.reduce_hw(h), 1.0f / static_cast<float>(hw));
  ClassifierOut out;
  out.feat = feat;
  out.logits = linear_forward(tape, feat, cls.head, pv);
  if (cls.with_rot_head)
    out.rot_logits = linear_forward(tape, feat, cls.rot_head, pv);
  return out;
}

// ---- embedder ----

Tensor<double> Embedder::embed(const Tensor<float>& images) const {
  require(images.rank() == 4, ErrorCode::shape_mismatch, "embed: (N,C,H,W)");
  int n = images.dim(0);
  Tensor<double> out({n, dim});
  if (kind == Kind::pca_pixels) {
    int64_t D = images.numel() / n;
    require(pca_basis.dim(1) == static_cast<int>(D), ErrorCode::dimension_mismatch,
            "pca embedder dimensionality does not match images");
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < dim; ++k) {
        double s = 0;
        const double* row = pca_basis.data() + static_cast<int64_t>(k) * D;
        const float* img = images.data() + static_cast<int64_t>(i) * D;
        for (int64_t j = 0; j < D; ++j)
          s += row[j] * (static_cast<double>(img[j]) - pca_mean.v[static_cast<size_t>(j)]);
        out(i, k) = s;
      }
    return out;
  }
  require(cls != nullptr, ErrorCode::invalid_argument, "embedder has no model");
  require(images.dim(2) == cls->image_size, ErrorCode::dimension_mismatch,
          "embedder image size mismatch");
  const int chunk = 256;
  for (int beg = 0; beg < n; beg += chunk) {
    int end = std::min(n, beg + chunk);
    int64_t row = images.numel() / n;
    Tensor<float> part({end - beg, images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.v.begin() + beg * row, images.v.begin() + end * row,
              part.v.begin());
    Tape<float> tape;
    auto pv = push_params(tape, cls->params, false);
    auto xv = tape.leaf(std::move(part), false);
    auto co = classifier_forward(tape, xv, *cls, pv);
    const Tensor<float>& f = tape.value(co.feat);
    for (int i = 0; i < end - beg; ++i)
      for (int k = 0; k < dim; ++k)
        out(beg + i, k) = static_cast<double>(f(i, k));
  }
  return out;
}

void Embedder::save(const std::string& path) const {
  TensorStore st;
  st.put_scalar("meta.kind", kind == Kind::frozen_classifier ? 0 : 1);
  st.put_scalar("meta.dim", dim);
  st.put_scalar("meta.version", version);
  st.put_scalar("meta.tag_lo", static_cast<double>(tag & 0xffffffffu));
  st.put_scalar("meta.tag_hi", static_cast<double>(tag >> 32));
  st.put_scalar("meta.ds_lo", static_cast<double>(dataset_hash & 0xffffffffu));
  st.put_scalar("meta.ds_hi", static_cast<double>(dataset_hash >> 32));
  if (kind == Kind::frozen_classifier) {
    st.put_scalar("meta.image_size", cls->image_size);
    st.put_scalar("meta.width", cls->width);
    st.put_scalar("meta.num_classes", cls->num_classes);
    for (int i = 0; i < cls->params.count(); ++i)
      st.put(cls->params.names[static_cast<size_t>(i)], cls->params.at(i));
  } else {
    st.put("pca.mean", pca_mean);
    st.put("pca.basis", pca_basis);
  }
  save_store(st, path);
}

Embedder Embedder::load(const std::string& path) {
  TensorStore st = load_store(path);
  Embedder e;
  e.kind = st.get_scalar("meta.kind") == 0 ? Kind::frozen_classifier
                                           : Kind::pca_pixels;
  e.dim = static_cast<int>(st.get_scalar("meta.dim"));
  e.version = static_cast<int>(st.get_scalar("meta.version"));
  e.tag = static_cast<uint64_t>(st.get_scalar("meta.tag_lo")) |
          (static_cast<uint64_t>(st.get_scalar("meta.tag_hi")) << 32);
  e.dataset_hash = static_cast<uint64_t>(st.get_scalar("meta.ds_lo")) |
                   (static_cast<uint64_t>(st.get_scalar("meta.ds_hi")) << 32);
  if (e.kind == Kind::frozen_classifier) {
    auto cls = std::make_shared<ConvClassifier>(make_conv_classifier(
        static_cast<int>(st.get_scalar("meta.image_size")),
        static_cast<int>(st.get_scalar("meta.width")),
        static_cast<int>(st.get_scalar("meta.num_classes")), false, 0));
    for (int i = 0; i < cls->params.count(); ++i)
      cls->params.at(i) = st.get<float>(cls->params.names[static_cast<size_t>(i)]);
    e.cls = std::move(cls);
  } else {
    e.pca_mean = st.get<double>("pca.mean");
    e.pca_basis = st.get<double>("pca.basis");
  }
  return e;
}

namespace {

double classifier_accuracy(ConvClassifier& cls, const ImageDataset& ds,
                           const std::vector<int>& indices) {
  int correct = 0;
  const int chunk = 256;
  for (size_t beg = 0; beg < indices.size(); beg += chunk) {
    size_t end = std::min(indices.size(), beg + chunk);
    std::vector<int> part(indices.begin() + static_cast<int64_t>(beg),
                          indices.begin() + static_cast<int64_t>(end));
    auto batch = ds.batch(part);
    Tape<float> tape;
    auto pv = push_params(tape, cls.params, false);
    auto out = classifier_forward(tape, tape.leaf(std::move(batch.images), false),
                                  cls, pv);
    const Tensor<float>& lg = tape.value(out.logits);
    for (int i = 0; i < static_cast<int>(part.size()); ++i) {
      int arg = 0;
      for (int j = 1; j < lg.dim(1); ++j)
        if (lg(i, j) > lg(i, arg)) arg = j;
      if (arg == ds.labels[static_cast<size_t>(part[static_cast<size_t>(i)])])
        ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

}  // namespace

Embedder train_frozen_classifier_embedder(const ImageDataset& ds,
                                          const SplitView& split, int width,
                                          uint64_t seed, int max_epochs,
                                          double target_acc) {
  require(ds.num_classes > 0, ErrorCode::invalid_argument,
          "frozen classifier embedder needs labels");
  ConvClassifier cls = make_conv_classifier(ds.image_size(), width,
                                            ds.num_classes, false, seed);
  AdamState<float> opt = AdamState<float>::init(cls.params);
  const int bs = 128;
  std::vector<int> order = split.train;
  double acc = 0;
  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    DetRng shuffle(seed, Stream::embedder, 1, static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = shuffle.randint(i);
      std::swap(order[i - 1], order[j]);
    }
    for (size_t beg = 0; beg + 1 < order.size(); beg += bs) {
      size_t end = std::min(order.size(), beg + bs);
      std::vector<int> idx(order.begin() + static_cast<int64_t>(beg),
                           order.begin() + static_cast<int64_t>(end));
      auto batch = ds.batch(idx);
      Tape<float> tape;
      auto pv = push_params(tape, cls.params, true);
      auto out = classifier_forward(
          tape, tape.leaf(std::move(batch.images), false), cls, pv);
      auto loss = tape.softmax_xent_mean(out.logits, *batch.labels);
      auto grads = tape.grad_values(loss, std::span<const Tape<float>::Var>(pv.vars));
      adam_step(cls.params, grads, opt, 1e-3, 0.9, 0.999);
    }
    acc = classifier_accuracy(cls, ds, split.test);
    if (acc >= target_acc) break;
  }
  require(acc >= target_acc, ErrorCode::invalid_argument,
          "frozen classifier did not reach target accuracy; got " +
              std::to_string(acc));
  Embedder e;
  e.kind = Embedder::Kind::frozen_classifier;
  e.dim = cls.feat_dim;
  e.dataset_hash = ds.content_hash();
  e.tag = mix64(e.dataset_hash ^ mix64(seed ^ 0xe3bde1f0u));
  e.cls = std::make_shared<ConvClassifier>(std::move(cls));
  return e;
}

Embedder fit_pca_embedder(const ImageDataset& ds, const std::vector<int>& ref,
                          int dim) {
  int64_t D = ds.images.numel() / ds.size();
  require(dim >= 1 && dim <= static_cast<int>(D), ErrorCode::invalid_argument,
          "pca dim out of range");
  int n = static_cast<int>(ref.size());
  require(n >= 2, ErrorCode::invalid_argument, "pca needs >= 2 samples");
  Tensor<double> X({n, static_cast<int>(D)});
  for (int i = 0; i < n; ++i) {
    const float* img = ds.images.data() + static_cast<int64_t>(ref[static_cast<size_t>(i)]) * D;
    for (int64_t j = 0; j < D; ++j)
      X(i, static_cast<int>(j)) = static_cast<double>(img[j]);
  }
  GaussianMoments gm = gaussian_fit(X);
  int d = static_cast<int>(D);
  Eigen::Map<const Eigen::MatrixXd> S(gm.sigma.data(), d, d);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  Embedder e;
  e.kind = Embedder::Kind::pca_pixels;
  e.dim = dim;
  e.dataset_hash = ds.content_hash();
  e.tag = mix64(e.dataset_hash ^ 0x9ca3u);
  e.pca_mean = gm.mu;
  e.pca_basis = Tensor<double>({dim, d});
  // Largest-variance components first (Eigen sorts ascending).
  for (int k = 0; k < dim; ++k)
    for (int j = 0; j < d; ++j)
      e.pca_basis(k, j) = es.eigenvectors()(j, d - 1 - k);
  return e;
}

GaussianMoments moments_of_images(const Tensor<float>& images,
                                  const Embedder& emb) {
  GaussianMoments gm = gaussian_fit(emb.embed(images));
  gm.embedder_tag = emb.tag;
  return gm;
}

// ---- probes ----

namespace {

struct Standardizer {
  std::vector<double> mean, inv_std;
};

Standardizer fit_standardizer(const Tensor<float>& x) {
  int64_t n = x.dim(0);
  int d = x.dim(1);
  Standardizer s;
  s.mean.assign(static_cast<size_t>(d), 0.0);
  s.inv_std.assign(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) s.mean[static_cast<size_t>(j)] += x(static_cast<int>(i), j);
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      double diff = x(static_cast<int>(i), j) - s.mean[static_cast<size_t>(j)];
      s.inv_std[static_cast<size_t>(j)] += diff * diff;
    }
  for (auto& v : s.inv_std) v = 1.0 / std::sqrt(v / static_cast<double>(n) + 1e-8);
  return s;
}

}  // namespace

double logistic_probe_accuracy(const Tensor<float>& train_x,
                               const std::vector<int>& train_y,
                               const Tensor<float>& test_x,
                               const std::vector<int>& test_y, int num_classes,
                               const ProbeProtocol& protocol) {
  require(train_x.rank() == 2 && test_x.rank() == 2, ErrorCode::shape_mismatch,
          "probe features must be (n, d)");
  require(train_x.dim(0) == static_cast<int>(train_y.size()) &&
              test_x.dim(0) == static_cast<int>(test_y.size()),
          ErrorCode::shape_mismatch, "probe label/feature count mismatch");
  require(train_x.dim(1) == test_x.dim(1), ErrorCode::shape_mismatch,
          "probe train/test dims differ");
  int n = train_x.dim(0), d = train_x.dim(1), k = num_classes;
  for (int y : train_y)
    require(y >= 0 && y < k, ErrorCode::invalid_argument, "probe label range");

  Standardizer st;
  if (protocol.standardize) st = fit_standardizer(train_x);
  auto feat = [&](const Tensor<float>& x, int i, int j) -> double {
    double v = x(i, j);
    if (protocol.standardize)
      v = (v - st.mean[static_cast<size_t>(j)]) * st.inv_std[static_cast<size_t>(j)];
    return v;
  };

  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(k, d);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd mW = Eigen::MatrixXd::Zero(k, d);
  Eigen::VectorXd mb = Eigen::VectorXd::Zero(k);

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  int decay1 = static_cast<int>(protocol.epochs * protocol.decay1_frac);
  int decay2 = static_cast<int>(protocol.epochs * protocol.decay2_frac);

  Eigen::VectorXd xi(d), logits(k), p(k);
  Eigen::MatrixXd gW(k, d);
  Eigen::VectorXd gb(k);
  for (int epoch = 0; epoch < protocol.epochs; ++epoch) {
    double lr = protocol.lr();
    if (epoch >= decay1) lr *= 0.1;
    if (epoch >= decay2) lr *= 0.1;
    DetRng shuffle(protocol.seed, Stream::probe, static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = shuffle.randint(i);
      std::swap(order[i - 1], order[j]);
    }
    for (int beg = 0; beg < n; beg += protocol.batch_size) {
      int end = std::min(n, beg + protocol.batch_size);
      int bs = end - beg;
      gW.setZero();
      gb.setZero();
      for (int r = beg; r < end; ++r) {
        int i = order[static_cast<size_t>(r)];
        for (int j = 0; j < d; ++j) xi(j) = feat(train_x, i, j);
        logits.noalias() = W * xi + b;
        double mx = logits.maxCoeff();
        p = (logits.array() - mx).exp();
        p /= p.sum();
        p(train_y[static_cast<size_t>(i)]) -= 1.0;
        gW.noalias() += p * xi.transpose();
        gb += p;
      }
      gW /= bs;
      gb /= bs;
      gW += protocol.weight_decay * W;
      mW = protocol.momentum * mW + gW;
      mb = protocol.momentum * mb + gb;
      W -= lr * mW;
      b -= lr * mb;
    }
  }

  int correct = 0;
  for (int i = 0; i < test_x.dim(0); ++i) {
    for (int j = 0; j < d; ++j) xi(j) = feat(test_x, i, j);
    logits.noalias() = W * xi + b;
    int arg = 0;
    logits.maxCoeff(&arg);
    if (arg == test_y[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test_x.dim(0));
}

ProbeResult linear_probe(const std::vector<Tensor<float>>& train_feats,
                         const std::vector<int>& train_y,
                         const std::vector<Tensor<float>>& test_feats,
                         const std::vector<int>& test_y, int num_classes,
                         const ProbeProtocol& protocol) {
  require(train_feats.size() == test_feats.size(), ErrorCode::shape_mismatch,
          "linear_probe: block count mismatch");
  ProbeResult res;
  for (size_t bidx = 0; bidx < train_feats.size(); ++bidx) {
    double acc = logistic_probe_accuracy(train_feats[bidx], train_y,
                                         test_feats[bidx], test_y, num_classes,
                                         protocol);
    res.block_acc.push_back(acc);
    if (acc > res.best_acc) {
      res.best_acc = acc;
      res.best_block = static_cast<int>(bidx);
    }
  }
  return res;
}

std::vector<Tensor<float>> extract_block_features(Discriminator<float>& disc,
                                                  const Tensor<float>& images,
                                                  int batch) {
  int n = images.dim(0);
  int64_t row = images.numel() / n;
  std::vector<Tensor<float>> feats;
  for (size_t b = 0; b < disc.blocks.size(); ++b)
    feats.push_back(Tensor<float>({n, disc.block_channels[b]}));
  for (int beg = 0; beg < n; beg += batch) {
    int end = std::min(n, beg + batch);
    Tensor<float> part({end - beg, images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.v.begin() + beg * row, images.v.begin() + end * row,
              part.v.begin());
    Tape<float> tape;
    auto pv = push_params(tape, disc.params, false);
    auto out = discriminator_forward(tape, tape.leaf(std::move(part), false),
                                     disc, pv, false);
    for (size_t bidx = 0; bidx < feats.size(); ++bidx) {
      const Tensor<float>& f = tape.value(out.block_feats[bidx]);
      std::copy(f.v.begin(), f.v.end(),
                feats[bidx].v.begin() +
                    static_cast<int64_t>(beg) * disc.block_channels[bidx]);
    }
  }
  return feats;
}

// ---- forgetting ----

ForgettingResult forgetting_experiment(const ImageDataset& ds,
                                       const ForgettingConfig& cfg) {
  require(ds.num_classes >= cfg.n_tasks, ErrorCode::invalid_argument,
          "forgetting experiment needs >= n_tasks classes");
  require(ds.image_size() == cfg.image_size, ErrorCode::invalid_argument,
          "forgetting config image size mismatch");

  ConvClassifier cls =
      make_conv_classifier(cfg.image_size, cfg.width, 1, true, cfg.seed);
  AdamState<float> opt = AdamState<float>::init(cls.params);

  SplitView split = split_dataset(ds, 0.2, ds.content_hash());
  TaskStream stream(ds, cfg.period, cfg.n_tasks, cfg.batch_size, cfg.seed);

  // Balanced held-out eval set per task: eval_per_class positives, same
  // number of negatives drawn round-robin from the other classes.
  std::vector<std::vector<int>> eval_sets(static_cast<size_t>(cfg.n_tasks));
  for (int task = 0; task < cfg.n_tasks; ++task) {
    std::vector<int> pos, neg;
    for (int i : split.test) {
      if (ds.labels[static_cast<size_t>(i)] == task) {
        if (static_cast<int>(pos.size()) < cfg.eval_per_class) pos.push_back(i);
      } else if (static_cast<int>(neg.size()) < cfg.eval_per_class) {
        neg.push_back(i);
      }
    }
    require(static_cast<int>(pos.size()) == cfg.eval_per_class,
            ErrorCode::invalid_argument,
            "not enough held-out positives for task eval");
    auto& set = eval_sets[static_cast<size_t>(task)];
    set = pos;
    set.insert(set.end(), neg.begin(), neg.end());
  }

  int64_t total = static_cast<int64_t>(cfg.period) * cfg.n_tasks * cfg.cycles;
  ForgettingResult res;
  res.task_ids.reserve(static_cast<size_t>(total));
  res.accuracy.reserve(static_cast<size_t>(total));

  for (int64_t step = 0; step < total; ++step) {
    auto item = stream.next(step);
    // one training step
    {
      Tape<float> tape;
      auto pv = push_params(tape, cls.params, true);
      auto x = tape.leaf(item.batch.images, false);
      auto out = classifier_forward(tape, x, cls, pv);
      auto flat = tape.reshape(out.logits, {item.batch.size()});
      auto loss = tape.bce_logits_mean(flat, *item.batch.labels);
      if (cfg.self_supervised) {
        auto [rot, rlabels] = make_rotation_batch(item.batch, cfg.n_rot_base);
        auto rx = tape.leaf(std::move(rot.images), false);
        auto rout = classifier_forward(tape, rx, cls, pv);
        auto rloss = rotation_nll(tape, rout.rot_logits, rlabels);
        loss = tape.add(loss, tape.mul_scalar(
                                  rloss, static_cast<float>(cfg.rot_weight)));
      }
      auto grads =
          tape.grad_values(loss, std::span<const Tape<float>::Var>(pv.vars));
      adam_step(cls.params, grads, opt, cfg.lr, 0.9, 0.999);
    }
    // current-task accuracy on the balanced held-out set
    {
      const auto& idx = eval_sets[static_cast<size_t>(item.task_id)];
      auto batch = ds.batch(idx);
      Tape<float> tape;
      auto pv = push_params(tape, cls.params, false);
      auto out = classifier_forward(tape, tape.leaf(std::move(batch.images), false),
                                    cls, pv);
      const Tensor<float>& lg = tape.value(out.logits);
      int correct = 0;
      for (int i = 0; i < static_cast<int>(idx.size()); ++i) {
        bool positive = ds.labels[static_cast<size_t>(idx[static_cast<size_t>(i)])] == item.task_id;
        bool pred = lg.v[static_cast<size_t>(i)] > 0;
        if (pred == positive) ++correct;
      }
      res.accuracy.push_back(static_cast<double>(correct) /
                             static_cast<double>(idx.size()));
      res.task_ids.push_back(item.task_id);
    }
  }

  // Cycle means and per-switch before/after windows.
  int64_t cycle_len = static_cast<int64_t>(cfg.period) * cfg.n_tasks;
  for (int c = 0; c < std::min(cfg.cycles, 2); ++c) {
    double s = 0;
    for (int64_t t = c * cycle_len; t < (c + 1) * cycle_len; ++t)
      s += res.accuracy[static_cast<size_t>(t)];
    res.cycle_mean[c] = s / static_cast<double>(cycle_len);
  }
  int64_t window = std::max<int64_t>(1, cfg.period / 50);
  for (int64_t sw = cfg.period; sw < total; sw += cfg.period) {
    double before = 0, after = 0;
    for (int64_t t = sw - window; t < sw; ++t) before += res.accuracy[static_cast<size_t>(t)];
    for (int64_t t = sw; t < sw + window && t < total; ++t)
      after += res.accuracy[static_cast<size_t>(t)];
    res.switch_before_after.push_back(
        {before / static_cast<double>(window), after / static_cast<double>(window)});
  }
  return res;
}

}  // namespace ssgan
