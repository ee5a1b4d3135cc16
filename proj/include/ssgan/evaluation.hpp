#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssgan/checkpoint.hpp"
#include "ssgan/dataset.hpp"
#include "ssgan/linalg.hpp"
#include "ssgan/models.hpp"
#include "ssgan/tensor.hpp"

namespace ssgan {

// ---- Frechet distance between Gaussians ----

struct GaussianMoments {
  Tensor<double> mu;     // (d)
  Tensor<double> sigma;  // (d, d), symmetric
  int64_t n = 0;
  uint64_t embedder_tag = 0;  // provenance; 0 means untagged

  int dim() const { return mu.dim(0); }
};

// Column mean and unbiased covariance (divisor n-1), symmetrized.
GaussianMoments gaussian_fit(const Tensor<double>& embeddings);

struct FidResult {
  double value = 0;
  bool regularized = false;  // epsilon*I was added to singular covariances
};

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), computed on the
// symmetrized product so the argument of the square root stays PSD.
FidResult fid_from_moments(const GaussianMoments& a, const GaussianMoments& b);

// ---- embedders ----

// Small convnet used as the frozen feature extractor; also the classifier of
// the forgetting experiments (binary head plus rotation head).
struct ConvClassifier {
  int image_size = 32, width = 16, num_classes = 10, feat_dim = 64;
  bool with_rot_head = false;
  ParamSet<float> params;
  ConvLayer c1, c2, c3;
  LinearLayer head, rot_head;
};

ConvClassifier make_conv_classifier(int image_size, int width, int num_classes,
                                    bool with_rot_head, uint64_t seed);

struct ClassifierOut {
  Tape<float>::Var logits;
  Tape<float>::Var feat;        // penultimate, globally averaged
  Tape<float>::Var rot_logits;  // valid only with a rotation head
};

ClassifierOut classifier_forward(Tape<float>& tape, Tape<float>::Var x,
                                 ConvClassifier& cls,
                                 const ParamVars<float>& pv);

// Deterministic feature map for FID. Both moment sets of a comparison must
// come from the same embedder (checked via the tag).
struct Embedder {
  enum class Kind { frozen_classifier, pca_pixels };
  Kind kind = Kind::frozen_classifier;
  int dim = 0;
  uint64_t tag = 0;  // identity of this embedder instance
  int version = 1;
  uint64_t dataset_hash = 0;

  std::shared_ptr<ConvClassifier> cls;  // frozen_classifier
  Tensor<double> pca_mean;              // (D)
  Tensor<double> pca_basis;             // (dim, D) rows are components

  // (n, dim) embeddings, deterministic.
  Tensor<double> embed(const Tensor<float>& images) const;

  void save(const std::string& path) const;
  static Embedder load(const std::string& path);
};

// Trains the frozen classifier once per dataset (Adam, cross-entropy) until
// test accuracy >= 0.90; errors if the cap is hit first.
Embedder train_frozen_classifier_embedder(const ImageDataset& ds,
                                          const SplitView& split, int width,
                                          uint64_t seed, int max_epochs = 40,
                                          double target_acc = 0.90);

// PCA of flattened pixels over a reference sample.
Embedder fit_pca_embedder(const ImageDataset& ds, const std::vector<int>& ref,
                          int dim);

GaussianMoments moments_of_images(const Tensor<float>& images,
                                  const Embedder& emb);

// ---- linear probes ----

struct ProbeProtocol {
  int epochs = 50;
  int batch_size = 128;
  double base_lr = 0.1;  // scaled by batch_size / 256
  double momentum = 0.9;
  bool standardize = true;
  // Learning rate decays by 10x at these fractions of the epoch budget
  // (30/50 and 40/50 at the reference 50-epoch schedule).
  double decay1_frac = 0.6, decay2_frac = 0.8;
  // L2 penalty; keeps the objective strictly convex so probe accuracy is
  // invariant to feature duplication and permutation.
  double weight_decay = 1e-4;
  // Image resize augmentation is meaningless at <= 32 px and stays off.
  bool resize_augmentation = false;
  uint64_t seed = 1;

  double lr() const { return base_lr * batch_size / 256.0; }
};

// Multinomial logistic regression on frozen features; top-1 test accuracy.
double logistic_probe_accuracy(const Tensor<float>& train_x,
                               const std::vector<int>& train_y,
                               const Tensor<float>& test_x,
                               const std::vector<int>& test_y, int num_classes,
                               const ProbeProtocol& protocol);

struct ProbeResult {
  std::vector<double> block_acc;
  double best_acc = 0;
  int best_block = -1;
};

// One probe per block; "Best" is the argmax block.
ProbeResult linear_probe(const std::vector<Tensor<float>>& train_feats,
                         const std::vector<int>& train_y,
                         const std::vector<Tensor<float>>& test_feats,
                         const std::vector<int>& test_y, int num_classes,
                         const ProbeProtocol& protocol);

// Per-block spatially averaged discriminator features for a set of images.
std::vector<Tensor<float>> extract_block_features(Discriminator<float>& disc,
                                                  const Tensor<float>& images,
                                                  int batch = 128);

// ---- forgetting experiments ----

struct ForgettingConfig {
  int n_tasks = 10;
  int period = 1000;
  int cycles = 2;
  int batch_size = 32;
  int n_rot_base = 8;       // rotated batch is 4 * n_rot_base
  int image_size = 16;
  int width = 8;
  double lr = 1e-3;
  double rot_weight = 1.0;  // weight of the auxiliary rotation loss
  int eval_per_class = 64;  // balanced eval: this many positives and negatives
  bool self_supervised = false;
  uint64_t seed = 1;
};

struct ForgettingResult {
  std::vector<int> task_ids;       // per step
  std::vector<double> accuracy;    // current-task accuracy per step
  double cycle_mean[2] = {0, 0};   // mean accuracy per cycle
  // accuracy immediately before vs after each task switch (first cycle start
  // excluded); a drop is before > after.
  std::vector<std::pair<double, double>> switch_before_after;
  int total_steps() const { return static_cast<int>(accuracy.size()); }
};

// Trains a classifier on the cycling 1-vs-all stream; the self-supervised
// variant adds the rotation loss on the same images.
ForgettingResult forgetting_experiment(const ImageDataset& ds,
                                       const ForgettingConfig& cfg);

}  // namespace ssgan
