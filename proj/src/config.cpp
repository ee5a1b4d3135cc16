#include "ssgan/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "ssgan/common.hpp"
#include "ssgan/rng.hpp"

namespace ssgan {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::uncond: return "uncond";
    case Variant::ssgan: return "ssgan";
    case Variant::ssgan_sbn: return "ssgan_sbn";
    case Variant::cond: return "cond";
    case Variant::rot_only: return "rot_only";
  }
  return "?";
}
std::string to_string(Regularizer r) {
  return r == Regularizer::spectral_norm ? "spectral_norm" : "gradient_penalty";
}
std::string to_string(AlphaSchedule s) {
  return s == AlphaSchedule::constant ? "constant" : "linear_to_zero";
}
std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

namespace {

std::string canon(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  return s;
}

Variant parse_variant(const std::string& raw) {
  std::string s = canon(raw);
  if (s == "uncond") return Variant::uncond;
  if (s == "ssgan") return Variant::ssgan;
  if (s == "ssgan_sbn") return Variant::ssgan_sbn;
  if (s == "cond") return Variant::cond;
  if (s == "rot_only") return Variant::rot_only;
  fail(ErrorCode::config_error, "unknown variant: " + raw);
}

Regularizer parse_regularizer(const std::string& raw) {
  std::string s = canon(raw);
  if (s == "spectral_norm") return Regularizer::spectral_norm;
  if (s == "gradient_penalty") return Regularizer::gradient_penalty;
  fail(ErrorCode::config_error, "unknown regularizer: " + raw);
}

AlphaSchedule parse_schedule(const std::string& raw) {
  std::string s = canon(raw);
  if (s == "constant") return AlphaSchedule::constant;
  if (s == "linear_to_zero") return AlphaSchedule::linear_to_zero;
  fail(ErrorCode::config_error, "unknown alpha_schedule: " + raw);
}

Precision parse_precision(const std::string& raw) {
  std::string s = canon(raw);
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  fail(ErrorCode::config_error, "unknown precision: " + raw);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    double x = std::stod(v, &pos);
    require(pos == v.size(), ErrorCode::config_error, "");
    return x;
  } catch (...) {
    fail(ErrorCode::config_error, "invalid number for " + key + ": " + v);
  }
}

int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    int64_t x = std::stoll(v, &pos);
    require(pos == v.size(), ErrorCode::config_error, "");
    return x;
  } catch (...) {
    fail(ErrorCode::config_error, "invalid integer for " + key + ": " + v);
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    uint64_t x = std::stoull(v, &pos);
    require(pos == v.size(), ErrorCode::config_error, "");
    return x;
  } catch (...) {
    fail(ErrorCode::config_error, "invalid unsigned integer for " + key + ": " + v);
  }
}

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

void TrainConfig::set_key(const std::string& rawkey, const std::string& value) {
  std::string key = canon(rawkey);
  if (key == "alpha") alpha = parse_double(key, value);
  else if (key == "beta") beta = parse_double(key, value);
  else if (key == "lr") lr = parse_double(key, value);
  else if (key == "adam_beta1") adam_beta1 = parse_double(key, value);
  else if (key == "adam_beta2") adam_beta2 = parse_double(key, value);
  else if (key == "d_steps") d_steps = static_cast<int>(parse_int(key, value));
  else if (key == "regularizer") regularizer = parse_regularizer(value);
  else if (key == "lambda") lambda = parse_double(key, value);
  else if (key == "batch_size") batch_size = static_cast<int>(parse_int(key, value));
  else if (key == "n_rot_base") n_rot_base = static_cast<int>(parse_int(key, value));
  else if (key == "total_steps") total_steps = parse_int(key, value);
  else if (key == "alpha_schedule") alpha_schedule = parse_schedule(value);
  else if (key == "alpha_anneal_steps") alpha_anneal_steps = parse_int(key, value);
  else if (key == "seed") seed = parse_u64(key, value);
  else if (key == "variant") variant = parse_variant(value);
  else if (key == "image_size") image_size = static_cast<int>(parse_int(key, value));
  else if (key == "base_width") base_width = static_cast<int>(parse_int(key, value));
  else if (key == "dz") dz = static_cast<int>(parse_int(key, value));
  else if (key == "eval_every") eval_every = parse_int(key, value);
  else if (key == "log_every") log_every = parse_int(key, value);
  else if (key == "fid_samples") fid_samples = static_cast<int>(parse_int(key, value));
  else if (key == "precision") precision = parse_precision(value);
  else fail(ErrorCode::config_error, "unknown config key: " + rawkey);
}

TrainConfig TrainConfig::parse_text(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto notspace = [](unsigned char ch) { return !std::isspace(ch); };
    line.erase(line.begin(), std::find_if(line.begin(), line.end(), notspace));
    line.erase(std::find_if(line.rbegin(), line.rend(), notspace).base(), line.end());
    if (line.empty()) continue;
    auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::config_error,
            "config line " + std::to_string(lineno) + " is not key = value");
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    key.erase(std::find_if(key.rbegin(), key.rend(), notspace).base(), key.end());
    value.erase(value.begin(), std::find_if(value.begin(), value.end(), notspace));
    c.set_key(key, value);
  }
  return c;
}

TrainConfig TrainConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), ErrorCode::io_error, "cannot open config: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_text(ss.str());
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  std::map<std::string, std::string> m;
  m["alpha"] = fmt_double(alpha);
  m["beta"] = fmt_double(beta);
  m["lr"] = fmt_double(lr);
  m["adam_beta1"] = fmt_double(adam_beta1);
  m["adam_beta2"] = fmt_double(adam_beta2);
  m["d_steps"] = std::to_string(d_steps);
  m["regularizer"] = to_string(regularizer);
  m["lambda"] = fmt_double(lambda);
  m["batch_size"] = std::to_string(batch_size);
  m["n_rot_base"] = std::to_string(n_rot_base);
  m["total_steps"] = std::to_string(total_steps);
  m["alpha_schedule"] = to_string(alpha_schedule);
  m["alpha_anneal_steps"] = std::to_string(alpha_anneal_steps);
  m["seed"] = std::to_string(seed);
  m["variant"] = to_string(variant);
  m["image_size"] = std::to_string(image_size);
  m["base_width"] = std::to_string(base_width);
  m["dz"] = std::to_string(dz);
  m["eval_every"] = std::to_string(eval_every);
  m["log_every"] = std::to_string(log_every);
  m["fid_samples"] = std::to_string(fid_samples);
  m["precision"] = to_string(precision);
  return m;
}

std::string TrainConfig::serialize() const {
  std::ostringstream out;
  for (const auto& [k, v] : to_map()) out << k << " = " << v << "\n";
  return out.str();
}

uint64_t TrainConfig::config_hash() const {
  // Seed excluded: the hash identifies the hyperparameter cell, and sweep
  // aggregation groups seeds by it.
  auto m = to_map();
  m.erase("seed");
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [k, v] : m) {
    for (char c : k + "=" + v + ";") {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

void TrainConfig::validate() const {
  require(alpha >= 0 && beta >= 0, ErrorCode::config_error,
          "alpha and beta must be non-negative");
  require(lr > 0, ErrorCode::config_error, "lr must be positive");
  require(d_steps >= 1 && d_steps <= 2, ErrorCode::config_error,
          "d_steps must be 1 or 2");
  require(lambda >= 0, ErrorCode::config_error, "lambda must be >= 0");
  require(batch_size >= 4, ErrorCode::config_error, "batch_size too small");
  require(n_rot_base >= 1 && n_rot_base <= batch_size, ErrorCode::config_error,
          "n_rot_base must be in [1, batch_size]");
  require(total_steps >= 0, ErrorCode::config_error, "total_steps must be >= 0");
  require(alpha_schedule == AlphaSchedule::constant || alpha_anneal_steps > 0,
          ErrorCode::config_error,
          "linear_to_zero schedule needs alpha_anneal_steps > 0");
  require(image_size == 16 || image_size == 32, ErrorCode::config_error,
          "image_size must be 16 or 32");
  require(base_width >= 4, ErrorCode::config_error, "base_width too small");
  require(dz >= 8, ErrorCode::config_error, "dz too small");
  require(fid_samples >= 64, ErrorCode::config_error, "fid_samples too small");
  require(log_every >= 1, ErrorCode::config_error, "log_every must be >= 1");
}

int64_t TrainConfig::eval_cadence() const {
  if (eval_every > 0) return eval_every;
  return std::max<int64_t>(1, total_steps / 20);
}

double TrainConfig::effective_alpha() const {
  switch (variant) {
    case Variant::ssgan:
    case Variant::ssgan_sbn: return alpha;
    case Variant::rot_only: return 0.0;  // generator untouched
    default: return 0.0;
  }
}

double TrainConfig::effective_beta() const {
  switch (variant) {
    case Variant::ssgan:
    case Variant::ssgan_sbn:
    case Variant::rot_only: return beta;
    default: return 0.0;
  }
}

double anneal_alpha(AlphaSchedule schedule, double alpha, int64_t step,
                    int64_t anneal_steps) {
  require(step >= 0, ErrorCode::invalid_argument, "anneal_alpha: step >= 0");
  if (schedule == AlphaSchedule::constant) return alpha;
  require(anneal_steps > 0, ErrorCode::invalid_argument,
          "anneal_alpha: anneal_steps > 0");
  double f = 1.0 - static_cast<double>(step) / static_cast<double>(anneal_steps);
  return alpha * std::max(0.0, f);
}

}  // namespace ssgan
