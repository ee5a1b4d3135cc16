#pragma once

#include <optional>
#include <vector>

#include "ssgan/rng.hpp"
#include "ssgan/tape.hpp"
#include "ssgan/tensor.hpp"

namespace ssgan {

// k * 90 degrees counter-clockwise.
struct RotationLabel {
  int k = 0;
};

inline void validate_rotation(RotationLabel r) {
  require(r.k >= 0 && r.k <= 3, ErrorCode::invalid_argument,
          "rotation label must be in {0,1,2,3}");
}

// Square image minibatch in [-1, 1], optionally labeled.
template <class T>
struct ImageBatch {
  Tensor<T> images;  // (N, C, H, W)
  std::optional<std::vector<int>> labels;

  int size() const { return images.dim(0); }

  void validate() const {
    require(images.rank() == 4, ErrorCode::shape_mismatch,
            "image batch must be (N,C,H,W)");
    require(images.dim(2) == images.dim(3), ErrorCode::invalid_argument,
            "image batch must be square");
    if (labels)
      require(static_cast<int>(labels->size()) == images.dim(0),
              ErrorCode::shape_mismatch, "label count mismatch");
  }
};

// Exact pixel permutation, no interpolation. Labels pass through.
template <class T>
ImageBatch<T> rotate90(const ImageBatch<T>& batch, RotationLabel r) {
  validate_rotation(r);
  batch.validate();
  return {Tape<T>::rot90_tensor(batch.images, r.k), batch.labels};
}

// Takes the first n_base images and emits all four rotations of each,
// image-major then k = 0..3; no other images enter the result.
template <class T>
std::pair<ImageBatch<T>, std::vector<RotationLabel>> make_rotation_batch(
    const ImageBatch<T>& batch, int n_base) {
  batch.validate();
  require(n_base >= 1 && n_base <= batch.size(), ErrorCode::invalid_argument,
          "make_rotation_batch: n_base exceeds batch size");
  int C = batch.images.dim(1), H = batch.images.dim(2), W = batch.images.dim(3);
  int64_t img = static_cast<int64_t>(C) * H * W;
  Tensor<T> out({4 * n_base, C, H, W});
  std::vector<RotationLabel> labels(static_cast<size_t>(4 * n_base));
  Tensor<T> one({1, C, H, W});
  for (int i = 0; i < n_base; ++i) {
    std::copy(batch.images.v.begin() + i * img,
              batch.images.v.begin() + (i + 1) * img, one.v.begin());
    for (int k = 0; k < 4; ++k) {
      Tensor<T> rot = Tape<T>::rot90_tensor(one, k);
      std::copy(rot.v.begin(), rot.v.end(),
                out.v.begin() + (static_cast<int64_t>(4 * i + k)) * img);
      labels[static_cast<size_t>(4 * i + k)] = RotationLabel{k};
    }
  }
  return {ImageBatch<T>{std::move(out), std::nullopt}, std::move(labels)};
}

// Tape version for generated images, so the rotation loss reaches generator
// parameters through the permutation.
template <class T>
std::pair<typename Tape<T>::Var, std::vector<RotationLabel>>
make_rotation_batch_var(Tape<T>& tape, typename Tape<T>::Var images, int n_base) {
  int n = tape.value(images).dim(0);
  require(n_base >= 1 && n_base <= n, ErrorCode::invalid_argument,
          "make_rotation_batch: n_base exceeds batch size");
  std::vector<RotationLabel> labels;
  labels.reserve(static_cast<size_t>(4 * n_base));
  for (int i = 0; i < n_base; ++i)
    for (int k = 0; k < 4; ++k) labels.push_back(RotationLabel{k});
  return {tape.rotation_stack(images, n_base), std::move(labels)};
}

// z ~ N(0, I), shape (N, dz).
template <class T>
Tensor<T> sample_latent(int n, int dz, DetRng& rng) {
  Tensor<T> z({n, dz});
  rng.fill_normal(std::span<T>(z.v));
  return z;
}

}  // namespace ssgan
