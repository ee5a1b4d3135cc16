#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssgan/image.hpp"
#include "ssgan/tensor.hpp"

namespace ssgan {

// In-memory image dataset. Labels are empty when num_classes == 0.
struct ImageDataset {
  Tensor<float> images;  // (N, C, H, W), values in [-1, 1]
  std::vector<int> labels;
  int num_classes = 0;

  int size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  int image_size() const { return images.dim(2); }
  int channels() const { return images.dim(1); }

  ImageBatch<float> batch(const std::vector<int>& indices) const;
  uint64_t content_hash() const;
};

// Deterministic procedural dataset: oriented geometric shapes on a vertical
// background gradient, class = shape type. Orientation jitter is bounded so
// the 90-degree rotation label stays identifiable, and the gradient gives a
// global "up" cue. Bit-identical across runs and platforms for a given seed.
ImageDataset synthetic_shapes_dataset(int n, int size, int num_classes,
                                      uint64_t seed);

// "SSDS" binary format: magic, version u32, N,C,H,W,num_classes u32, then
// N*C*H*W little-endian f32, then N little-endian u32 labels when
// num_classes > 0.
void save_dataset(const ImageDataset& ds, const std::string& path);
ImageDataset load_dataset(const std::string& path);

// Disjoint index ranges for train/test style splits.
struct SplitView {
  std::vector<int> train;
  std::vector<int> test;
};
SplitView split_dataset(const ImageDataset& ds, double test_fraction,
                        uint64_t seed);

// task id at a global step for the cycling 1-vs-all task sequence.
inline int task_at(int64_t step, int period, int n_tasks) {
  require(period >= 1 && n_tasks >= 1, ErrorCode::invalid_argument,
          "task stream: period and n_tasks must be >= 1");
  return static_cast<int>((step / period) % n_tasks);
}

// Non-stationary stream of 1-vs-all tasks over a labeled dataset: at step t
// the batch is sampled uniformly and labeled 1 for class == task id, else 0.
class TaskStream {
 public:
  TaskStream(const ImageDataset& ds, int period, int n_tasks, int batch_size,
             uint64_t seed);

  struct Item {
    int task_id;
    ImageBatch<float> batch;  // labels are binary
  };
  Item next(int64_t step) const;
  int cycle_length() const { return period_ * n_tasks_; }

 private:
  const ImageDataset& ds_;
  int period_, n_tasks_, batch_size_;
  uint64_t seed_;
};

}  // namespace ssgan
