#include "ssgan/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "ssgan/rng.hpp"

namespace ssgan {

ImageBatch<float> ImageDataset::batch(const std::vector<int>& indices) const {
  int C = images.dim(1), H = images.dim(2), W = images.dim(3);
  int64_t img = static_cast<int64_t>(C) * H * W;
  Tensor<float> out({static_cast<int>(indices.size()), C, H, W});
  std::vector<int> lab;
  for (size_t i = 0; i < indices.size(); ++i) {
    int idx = indices[i];
    require(idx >= 0 && idx < size(), ErrorCode::invalid_argument,
            "dataset index out of range");
    std::copy(images.v.begin() + idx * img, images.v.begin() + (idx + 1) * img,
              out.v.begin() + static_cast<int64_t>(i) * img);
    if (!labels.empty()) lab.push_back(labels[static_cast<size_t>(idx)]);
  }
  ImageBatch<float> b{std::move(out), std::nullopt};
  if (!lab.empty()) b.labels = std::move(lab);
  return b;
}

uint64_t ImageDataset::content_hash() const {
  // FNV-1a over the raw image bytes and labels.
  uint64_t h = 0xcbf29ce484222325ull;
  auto eat = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  for (int d : images.shape) eat(&d, sizeof(d));
  eat(images.data(), images.v.size() * sizeof(float));
  for (int l : labels) eat(&l, sizeof(l));
  eat(&num_classes, sizeof(num_classes));
  return h;
}

namespace {

struct Vec2 {
  double x, y;
};

double sd_box(Vec2 p, double hx, double hy) {
  double dx = std::abs(p.x) - hx, dy = std::abs(p.y) - hy;
  double ax = std::max(dx, 0.0), ay = std::max(dy, 0.0);
  return std::sqrt(ax * ax + ay * ay) + std::min(std::max(dx, dy), 0.0);
}

double sd_ellipse(Vec2 p, double a, double b) {
  // Scaled-distance approximation; adequate for rasterization.
  double k = std::sqrt(p.x * p.x / (a * a) + p.y * p.y / (b * b));
  return (k - 1.0) * std::min(a, b);
}

double sd_triangle(Vec2 p) {
  // Isoceles triangle pointing up: apex (0, 0.5), base y = -0.4, half 0.45.
  Vec2 a{0.0, 0.5}, b{0.45, -0.4}, c{-0.45, -0.4};
  auto edge = [](Vec2 p0, Vec2 p1, Vec2 q) {
    // signed line distance, positive on the interior side of this CW polygon
    double ex = p1.x - p0.x, ey = p1.y - p0.y;
    double len = std::sqrt(ex * ex + ey * ey);
    return ((q.x - p0.x) * ey - (q.y - p0.y) * ex) / len;
  };
  double d0 = edge(a, b, p);
  double d1 = edge(b, c, p);
  double d2 = edge(c, a, p);
  return -std::min(std::min(d0, d1), d2);
}

double sd_trapezoid(Vec2 p) {
  // Wider at the bottom; breaks 180-degree symmetry.
  double t = (p.y + 0.45) / 0.9;  // 0 at bottom, 1 at top
  t = std::clamp(t, 0.0, 1.0);
  double half = 0.45 - 0.25 * t;
  double dx = std::abs(p.x) - half;
  double dy = std::abs(p.y) - 0.45;
  return std::max(dx, dy);
}

double shape_sdf(int cls, Vec2 p) {
  switch (cls) {
    case 0:
      return sd_triangle(p);
    case 1:
      return sd_trapezoid(p);
    case 2:
      // 2:1 rectangle
      return sd_box(p, 0.22, 0.48);
    case 3: {
      // ellipse with an offset dot, breaks its symmetry
      double e = sd_ellipse(p, 0.48, 0.26);
      double dot = sd_ellipse({p.x, p.y - 0.33}, 0.10, 0.10);
      return std::min(e, dot);
    }
    case 4: {
      // plus with one long arm
      double v = sd_box({p.x, p.y - 0.08}, 0.12, 0.52);
      double h = sd_box(p, 0.38, 0.12);
      return std::min(v, h);
    }
    case 5: {
      // L
      double v = sd_box({p.x + 0.22, p.y}, 0.13, 0.48);
      double h = sd_box({p.x + 0.05, p.y + 0.36}, 0.40, 0.12);
      return std::min(v, h);
    }
    case 6: {
      // T
      double top = sd_box({p.x, p.y - 0.36}, 0.45, 0.12);
      double stem = sd_box({p.x, p.y + 0.05}, 0.13, 0.42);
      return std::min(top, stem);
    }
    case 7: {
      // arrow: triangle head on a stem
      double head = sd_triangle({p.x * 1.4, (p.y - 0.22) * 1.4}) / 1.4;
      double stem = sd_box({p.x, p.y + 0.28}, 0.10, 0.26);
      return std::min(head, stem);
    }
    case 8: {
      // C: ring with a right-side cutout
      double r = std::sqrt(p.x * p.x + p.y * p.y);
      double ring = std::abs(r - 0.38) - 0.12;
      double cut = sd_box({p.x - 0.44, p.y}, 0.26, 0.16);
      return std::max(ring, -cut);
    }
    default: {
      // flag: pole plus triangle to the right
      double pole = sd_box({p.x + 0.28, p.y}, 0.09, 0.50);
      Vec2 q{p.x - 0.05, p.y - 0.25};
      double tri = sd_triangle({q.y * 2.2, q.x * 2.2}) / 2.2;
      return std::min(pole, tri);
    }
  }
}

}  // namespace

ImageDataset synthetic_shapes_dataset(int n, int size, int num_classes,
                                      uint64_t seed) {
  require(n > 0, ErrorCode::invalid_argument, "dataset size must be positive");
  require(size == 16 || size == 32, ErrorCode::invalid_argument,
          "dataset image size must be 16 or 32");
  require(num_classes >= 1 && num_classes <= 10, ErrorCode::invalid_argument,
          "dataset supports up to 10 classes");

  ImageDataset ds;
  ds.num_classes = num_classes;
  ds.images = Tensor<float>({n, 3, size, size});
  ds.labels.resize(static_cast<size_t>(n));

  // Stratified class assignment: exactly balanced up to remainder, then a
  // deterministic shuffle.
  for (int i = 0; i < n; ++i) ds.labels[static_cast<size_t>(i)] = i % num_classes;
  DetRng shuffle_rng(seed, Stream::dataset, 0);
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(shuffle_rng.randint(static_cast<uint64_t>(i + 1)));
    std::swap(ds.labels[static_cast<size_t>(i)], ds.labels[static_cast<size_t>(j)]);
  }

  const double half = size / 2.0;
  for (int idx = 0; idx < n; ++idx) {
    DetRng rng(seed, Stream::dataset, 1, static_cast<uint64_t>(idx));
    int cls = ds.labels[static_cast<size_t>(idx)];
    double cx = half + rng.uniform(-0.15, 0.15) * size;
    double cy = half + rng.uniform(-0.15, 0.15) * size;
    double scale = rng.uniform(0.30, 0.42) * size;  // canonical radius ~0.5
    double theta = rng.uniform(-0.6, 0.6);          // +-34 degrees of jitter
    double s, c;
    det_sincos(theta, s, c);
    double col[3];
    for (double& ch : col) ch = rng.uniform(-0.1, 0.9);
    float* img = ds.images.data() + static_cast<int64_t>(idx) * 3 * size * size;
    for (int y = 0; y < size; ++y) {
      // Vertical gradient, brighter at the top: the global orientation cue.
      double bg = -0.55 - 0.40 * (static_cast<double>(y) / (size - 1));
      for (int x = 0; x < size; ++x) {
        double px = (x + 0.5 - cx) / scale;
        double py = (cy - (y + 0.5)) / scale;  // +y up in shape coords
        Vec2 p{c * px + s * py, -s * px + c * py};
        double d = shape_sdf(cls, p) * scale;
        double cov = std::clamp(0.5 - d, 0.0, 1.0);
        // Faint deterministic dither so no pixel is exactly constant.
        for (int ch = 0; ch < 3; ++ch) {
          uint64_t hbits = mix64(seed ^ mix64((static_cast<uint64_t>(idx) << 22) ^
                                              (static_cast<uint64_t>(y * size + x) << 2) ^
                                              static_cast<uint64_t>(ch)));
          double dither =
              (static_cast<double>(hbits >> 11) * 0x1.0p-53 - 0.5) * 0.04;
          double v = bg + cov * (col[ch] - bg) + dither;
          img[(ch * size + y) * size + x] =
              static_cast<float>(std::clamp(v, -1.0, 1.0));
        }
      }
    }
  }
  return ds;
}

namespace {

void put_u32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32(std::ifstream& f, uint32_t& v) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
      (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  return true;
}

}  // namespace

void save_dataset(const ImageDataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io_error, "cannot open for write: " + path);
  f.write("SSDS", 4);
  put_u32(f, 1);  // format version
  put_u32(f, static_cast<uint32_t>(ds.size()));
  put_u32(f, static_cast<uint32_t>(ds.images.dim(1)));
  put_u32(f, static_cast<uint32_t>(ds.images.dim(2)));
  put_u32(f, static_cast<uint32_t>(ds.images.dim(3)));
  put_u32(f, static_cast<uint32_t>(ds.num_classes));
  static_assert(sizeof(float) == 4);
  // Little-endian floats; this writes raw IEEE bits on LE hosts.
  for (float x : ds.images.v) {
    uint32_t bits;
    std::memcpy(&bits, &x, 4);
    put_u32(f, bits);
  }
  if (ds.num_classes > 0)
    for (int l : ds.labels) put_u32(f, static_cast<uint32_t>(l));
  require(f.good(), ErrorCode::io_error, "write failed: " + path);
}

ImageDataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io_error, "cannot open: " + path);
  char magic[4];
  require(static_cast<bool>(f.read(magic, 4)), ErrorCode::truncated_payload,
          "dataset file too short for header");
  require(std::memcmp(magic, "SSDS", 4) == 0, ErrorCode::bad_magic,
          "bad magic: not an SSDS dataset file");
  uint32_t version, n, c, h, w, k;
  require(get_u32(f, version) && get_u32(f, n) && get_u32(f, c) &&
              get_u32(f, h) && get_u32(f, w) && get_u32(f, k),
          ErrorCode::truncated_payload, "dataset header truncated");
  require(version == 1, ErrorCode::bad_magic, "unsupported SSDS version");
  require(n > 0 && c > 0 && h > 0 && w > 0 && h == w && h <= 4096 &&
              c <= 16 && k <= 1000,
          ErrorCode::dimension_mismatch, "dataset header dimensions invalid");

  ImageDataset ds;
  ds.num_classes = static_cast<int>(k);
  ds.images = Tensor<float>({static_cast<int>(n), static_cast<int>(c),
                             static_cast<int>(h), static_cast<int>(w)});
  for (auto& x : ds.images.v) {
    uint32_t bits;
    require(get_u32(f, bits), ErrorCode::truncated_payload,
            "dataset payload truncated");
    std::memcpy(&x, &bits, 4);
  }
  if (k > 0) {
    ds.labels.resize(n);
    for (auto& l : ds.labels) {
      uint32_t bits;
      require(get_u32(f, bits), ErrorCode::truncated_payload,
              "dataset labels truncated");
      require(bits < k, ErrorCode::dimension_mismatch,
              "dataset label out of range");
      l = static_cast<int>(bits);
    }
  }
  return ds;
}

SplitView split_dataset(const ImageDataset& ds, double test_fraction,
                        uint64_t seed) {
  int n = ds.size();
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  DetRng rng(seed, Stream::dataset, 2);
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(rng.randint(static_cast<uint64_t>(i + 1)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  int n_test = static_cast<int>(n * test_fraction);
  SplitView sv;
  sv.test.assign(idx.begin(), idx.begin() + n_test);
  sv.train.assign(idx.begin() + n_test, idx.end());
  return sv;
}

TaskStream::TaskStream(const ImageDataset& ds, int period, int n_tasks,
                       int batch_size, uint64_t seed)
    : ds_(ds), period_(period), n_tasks_(n_tasks), batch_size_(batch_size),
      seed_(seed) {
  require(period >= 1, ErrorCode::invalid_argument, "task stream period >= 1");
  require(n_tasks >= 1 && n_tasks <= ds.num_classes, ErrorCode::invalid_argument,
          "task stream needs n_tasks <= num_classes");
}

TaskStream::Item TaskStream::next(int64_t step) const {
  int task = task_at(step, period_, n_tasks_);
  DetRng rng(seed_, Stream::data, static_cast<uint64_t>(step));
  std::vector<int> idx(static_cast<size_t>(batch_size_));
  for (auto& i : idx)
    i = static_cast<int>(rng.randint(static_cast<uint64_t>(ds_.size())));
  ImageBatch<float> b = ds_.batch(idx);
  std::vector<int> bin(idx.size());
  for (size_t i = 0; i < idx.size(); ++i)
    bin[i] = ds_.labels[static_cast<size_t>(idx[i])] == task ? 1 : 0;
  b.labels = std::move(bin);
  return {task, std::move(b)};
}

}  // namespace ssgan
