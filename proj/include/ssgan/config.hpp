#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace ssgan {

enum class Variant { uncond, ssgan, ssgan_sbn, cond, rot_only };
enum class Regularizer { spectral_norm, gradient_penalty };
enum class AlphaSchedule { constant, linear_to_zero };
enum class Precision { f32, f64 };

std::string to_string(Variant v);
std::string to_string(Regularizer r);
std::string to_string(AlphaSchedule s);
std::string to_string(Precision p);

// Every scalar knob of a training run. Serialized as a flat UTF-8
// `key = value` file with exactly these field names; unknown keys are errors.
struct TrainConfig {
  double alpha = 0.2;
  double beta = 1.0;
  double lr = 2e-4;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.9;
  int d_steps = 1;
  Regularizer regularizer = Regularizer::spectral_norm;
  double lambda = 10.0;
  int batch_size = 64;
  int n_rot_base = 16;
  int64_t total_steps = 1000;
  AlphaSchedule alpha_schedule = AlphaSchedule::constant;
  int64_t alpha_anneal_steps = 0;  // T for linear_to_zero
  uint64_t seed = 1;
  Variant variant = Variant::ssgan;

  // Desk-scale shape of the model and evaluation cadence.
  int image_size = 32;
  int base_width = 64;
  int dz = 128;
  int64_t eval_every = 0;  // 0: every 5% of total_steps
  int64_t log_every = 10;
  int fid_samples = 10000;
  Precision precision = Precision::f32;

  void validate() const;
  int64_t eval_cadence() const;
  // Effective loss weights after applying the variant.
  double effective_alpha() const;
  double effective_beta() const;
  bool needs_labels() const { return variant == Variant::cond; }
  bool spectral_norm_on() const {
    return regularizer == Regularizer::spectral_norm;
  }

  std::string serialize() const;
  uint64_t config_hash() const;
  std::map<std::string, std::string> to_map() const;

  static TrainConfig parse_file(const std::string& path);
  static TrainConfig parse_text(const std::string& text);
  // Apply one `key=value` override (CLI flags win over file keys).
  void set_key(const std::string& key, const std::string& value);
};

// alpha weight at a step: constant, or linear decay to zero at T.
double anneal_alpha(AlphaSchedule schedule, double alpha, int64_t step,
                    int64_t anneal_steps);

}  // namespace ssgan
