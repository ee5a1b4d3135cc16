#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssgan/checkpoint.hpp"
#include "ssgan/config.hpp"
#include "ssgan/csvio.hpp"
#include "ssgan/dataset.hpp"
#include "ssgan/evaluation.hpp"
#include "ssgan/losses.hpp"
#include "ssgan/models.hpp"
#include "ssgan/optim.hpp"

namespace ssgan {

template <class T>
struct TrainerState {
  Generator<T> gen;
  Discriminator<T> disc;
  AdamState<T> opt_g, opt_d;
  int64_t step = 0;  // number of completed steps
};

template <class T>
TrainerState<T> init_trainer(const TrainConfig& cfg, int num_classes) {
  cfg.validate();
  GenMode mode = GenMode::plain;
  if (cfg.variant == Variant::ssgan_sbn) mode = GenMode::self_modulated_bn;
  if (cfg.variant == Variant::cond) mode = GenMode::conditional_bn;
  bool projection = cfg.variant == Variant::cond;
  require(!cfg.needs_labels() || num_classes > 0, ErrorCode::config_error,
          "variant=cond requires a labeled dataset");
  TrainerState<T> st;
  st.gen = make_generator<T>(cfg.image_size, cfg.base_width, cfg.dz, mode,
                             num_classes, cfg.seed);
  st.disc = make_discriminator<T>(cfg.image_size, cfg.base_width, num_classes,
                                  cfg.spectral_norm_on(), projection, cfg.seed);
  st.opt_g = AdamState<T>::init(st.gen.params);
  st.opt_d = AdamState<T>::init(st.disc.params);
  return st;
}

struct StepMetrics {
  double g_total = 0, d_total = 0;
  double g_gan = 0, g_rot = 0, d_gan = 0, d_rot = 0, penalty = 0;
};

// Testing hook: run only one side of the alternating scheme.
enum class StepPhase { both, d_only, g_only };

namespace detail {

inline std::vector<int> sample_indices(uint64_t seed, Stream s, int64_t step,
                                       uint64_t sub, int count, size_t pool) {
  DetRng rng(seed, s, static_cast<uint64_t>(step), sub);
  std::vector<int> idx(static_cast<size_t>(count));
  for (auto& i : idx) i = static_cast<int>(rng.randint(pool));
  return idx;
}

template <class T>
void check_finite_loss(Tape<T>& tape, typename Tape<T>::Var v,
                       const char* component, int64_t step) {
  double x = static_cast<double>(tape.value(v).v[0]);
  require(std::isfinite(x), ErrorCode::non_finite,
          std::string("non-finite loss component '") + component +
              "' at step " + std::to_string(step));
}

}  // namespace detail

// Upright fake images as plain values, detached from generator parameters.
template <class T>
Tensor<T> generate_images(Generator<T>& gen, const Tensor<T>& z,
                          const std::vector<int>* labels) {
  Tape<T> tape;
  auto pv = push_params(tape, gen.params, false);
  auto img = generator_forward(tape, tape.leaf(z, false), gen,
                               pv, labels);
  return tape.value(img);
}

// One alternating optimization step: d_steps discriminator updates on fresh
// real batches and fresh latents, then one generator update. Deterministic
// given (config, seed, step); every random draw is keyed by (seed, stream,
// step, substep).
template <class T>
StepMetrics train_step(TrainerState<T>& st, const ImageDataset& data,
                       const std::vector<int>& train_pool,
                       const TrainConfig& cfg, int64_t step,
                       StepPhase phase = StepPhase::both) {
  require(!train_pool.empty(), ErrorCode::invalid_argument,
          "train_step: empty training pool");
  StepMetrics out;
  const double alpha_t =
      anneal_alpha(cfg.alpha_schedule, cfg.effective_alpha(), step,
                   cfg.alpha_anneal_steps);
  const double beta = cfg.effective_beta();
  const bool rot_only = cfg.variant == Variant::rot_only;
  const bool cond = cfg.variant == Variant::cond;
  int d_updates = rot_only ? 1 : cfg.d_steps;
  if (phase == StepPhase::g_only) d_updates = 0;

  for (int s = 0; s < d_updates; ++s) {
    auto pick = detail::sample_indices(cfg.seed, Stream::data, step,
                                       static_cast<uint64_t>(s),
                                       cfg.batch_size, train_pool.size());
    for (auto& i : pick) i = train_pool[static_cast<size_t>(i)];
    ImageBatch<float> realf = data.batch(pick);
    Tensor<T> real = realf.images.template cast<T>();

    Tensor<T> fake;
    std::vector<int> fake_labels;
    if (!rot_only) {
      DetRng zrng(cfg.seed, Stream::latent, static_cast<uint64_t>(step),
                  static_cast<uint64_t>(s));
      Tensor<T> z = sample_latent<T>(cfg.batch_size, cfg.dz, zrng);
      if (cond) {
        DetRng lrng(cfg.seed, Stream::data, static_cast<uint64_t>(step),
                    1000 + static_cast<uint64_t>(s));
        fake_labels.resize(static_cast<size_t>(cfg.batch_size));
        for (auto& y : fake_labels)
          y = static_cast<int>(lrng.randint(static_cast<uint64_t>(data.num_classes)));
      }
      fake = generate_images(st.gen, z, cond ? &fake_labels : nullptr);
      require(fake.all_finite(), ErrorCode::non_finite,
              "non-finite loss component 'generator_output' at step " +
                  std::to_string(step));
    }

    Tape<T> tape;
    auto ctx = prepare_discriminator(tape, st.disc, true, true);
    ComposeInputs<T> in;
    typename Tape<T>::Var d_loss{};
    if (rot_only) {
      auto [rot, rlabels] = make_rotation_batch(
          ImageBatch<T>{real, std::nullopt}, cfg.n_rot_base);
      auto rout = discriminator_forward(tape, tape.leaf(std::move(rot.images), false),
                                        st.disc, ctx);
      auto rnll = rotation_nll(tape, rout.rot_logits, rlabels);
      out.d_rot = tape.value(rnll).v[0];
      d_loss = tape.mul_scalar(rnll, static_cast<T>(beta));
    } else {
      auto real_out = discriminator_forward(tape, tape.leaf(real, false), st.disc, ctx);
      auto fake_out = discriminator_forward(tape, tape.leaf(fake, false), st.disc, ctx);
      auto real_gan = real_out.gan_logit;
      auto fake_gan = fake_out.gan_logit;
      if (cond) {
        require(realf.labels.has_value(), ErrorCode::invalid_argument,
                "variant=cond requires a labeled dataset");
        real_gan = projection_logit(tape, real_gan, real_out.trunk_feat,
                                    ctx.pv.of(st.disc.proj_emb), *realf.labels);
        fake_gan = projection_logit(tape, fake_gan, fake_out.trunk_feat,
                                    ctx.pv.of(st.disc.proj_emb), fake_labels);
      }
      in.real_up_gan = real_gan;
      in.fake_up_gan = fake_gan;
      if (beta > 0) {
        auto [rot, rlabels] = make_rotation_batch(
            ImageBatch<T>{real, std::nullopt}, cfg.n_rot_base);
        auto rout = discriminator_forward(
            tape, tape.leaf(std::move(rot.images), false), st.disc, ctx);
        in.real_rot_logits = rout.rot_logits;
        in.real_rot_labels = rlabels;
      }
      if (cfg.regularizer == Regularizer::gradient_penalty && cfg.lambda > 0) {
        DetRng prng(cfg.seed, Stream::penalty, static_cast<uint64_t>(step),
                    static_cast<uint64_t>(s));
        auto logit_fn = [&](Tape<T>& t, typename Tape<T>::Var x) {
          return discriminator_forward(t, x, st.disc, ctx).gan_logit;
        };
        in.penalty = gradient_penalty(tape, logit_fn, real, fake,
                                      static_cast<T>(cfg.lambda), prng);
      }
      LossBundle<T> bundle = compose_losses(tape, in, 0.0, beta);
      out.d_gan = bundle.d_gan;
      out.d_rot = bundle.d_rot;
      out.penalty = bundle.penalty;
      d_loss = bundle.d_total_var;
    }
    detail::check_finite_loss(tape, d_loss, "d_total", step);
    out.d_total = tape.value(d_loss).v[0];
    auto grads = tape.grad_values(
        d_loss, std::span<const typename Tape<T>::Var>(ctx.pv.vars));
    adam_step(st.disc.params, grads, st.opt_d, cfg.lr, cfg.adam_beta1,
              cfg.adam_beta2);
  }

  if (!rot_only && phase != StepPhase::d_only) {
    DetRng zrng(cfg.seed, Stream::latent, static_cast<uint64_t>(step),
                static_cast<uint64_t>(cfg.d_steps));
    Tensor<T> z = sample_latent<T>(cfg.batch_size, cfg.dz, zrng);
    std::vector<int> fake_labels;
    if (cond) {
      DetRng lrng(cfg.seed, Stream::data, static_cast<uint64_t>(step),
                  1000 + static_cast<uint64_t>(cfg.d_steps));
      fake_labels.resize(static_cast<size_t>(cfg.batch_size));
      for (auto& y : fake_labels)
        y = static_cast<int>(lrng.randint(static_cast<uint64_t>(data.num_classes)));
    }
    Tape<T> tape;
    auto gpv = push_params(tape, st.gen.params, true);
    auto ctx = prepare_discriminator(tape, st.disc, false, false);
    auto zvar = tape.leaf(z, false);
    auto fake = generator_forward(tape, zvar, st.gen, gpv,
                                  cond ? &fake_labels : nullptr);
    auto fout = discriminator_forward(tape, fake, st.disc, ctx);
    auto fake_gan = fout.gan_logit;
    if (cond)
      fake_gan = projection_logit(tape, fake_gan, fout.trunk_feat,
                                  ctx.pv.of(st.disc.proj_emb), fake_labels);
    ComposeInputs<T> in;
    in.fake_up_gan = fake_gan;
    if (alpha_t > 0) {
      auto [rotv, rlabels] = make_rotation_batch_var(tape, fake, cfg.n_rot_base);
      auto rout = discriminator_forward(tape, rotv, st.disc, ctx);
      in.fake_rot_logits = rout.rot_logits;
      in.fake_rot_labels = rlabels;
    }
    LossBundle<T> bundle = compose_losses(tape, in, alpha_t, 0.0);
    detail::check_finite_loss(tape, bundle.g_total_var, "g_total", step);
    out.g_total = bundle.g_total;
    out.g_gan = bundle.g_gan;
    out.g_rot = bundle.g_rot;
    auto grads = tape.grad_values(
        bundle.g_total_var, std::span<const typename Tape<T>::Var>(gpv.vars));
    adam_step(st.gen.params, grads, st.opt_g, cfg.lr, cfg.adam_beta1,
              cfg.adam_beta2);
  }
  st.step = step + 1;
  return out;
}

// ---- checkpoints of full training state ----

template <class T>
TensorStore state_to_store(const TrainerState<T>& st) {
  TensorStore s;
  s.put_scalar("step", static_cast<double>(st.step));
  for (int i = 0; i < st.gen.params.count(); ++i)
    s.put(st.gen.params.names[static_cast<size_t>(i)], st.gen.params.at(i));
  for (int i = 0; i < st.disc.params.count(); ++i)
    s.put(st.disc.params.names[static_cast<size_t>(i)], st.disc.params.at(i));
  auto put_opt = [&s](const char* prefix, const auto& params, const auto& opt) {
    s.put_scalar(std::string(prefix) + ".t", static_cast<double>(opt.t));
    for (int i = 0; i < params.count(); ++i) {
      if (!params.trainable[static_cast<size_t>(i)]) continue;
      const std::string& n = params.names[static_cast<size_t>(i)];
      s.put(std::string(prefix) + ".m." + n, opt.m[static_cast<size_t>(i)]);
      s.put(std::string(prefix) + ".v." + n, opt.v[static_cast<size_t>(i)]);
    }
  };
  put_opt("opt_g", st.gen.params, st.opt_g);
  put_opt("opt_d", st.disc.params, st.opt_d);
  return s;
}

template <class T>
void state_from_store(TrainerState<T>& st, const TensorStore& s) {
  st.step = static_cast<int64_t>(s.get_scalar("step"));
  for (int i = 0; i < st.gen.params.count(); ++i)
    st.gen.params.at(i) = s.get<T>(st.gen.params.names[static_cast<size_t>(i)]);
  for (int i = 0; i < st.disc.params.count(); ++i)
    st.disc.params.at(i) = s.get<T>(st.disc.params.names[static_cast<size_t>(i)]);
  auto get_opt = [&s](const char* prefix, const auto& params, auto& opt) {
    opt.t = static_cast<int64_t>(s.get_scalar(std::string(prefix) + ".t"));
    for (int i = 0; i < params.count(); ++i) {
      if (!params.trainable[static_cast<size_t>(i)]) continue;
      const std::string& n = params.names[static_cast<size_t>(i)];
      opt.m[static_cast<size_t>(i)] = s.template get<T>(std::string(prefix) + ".m." + n);
      opt.v[static_cast<size_t>(i)] = s.template get<T>(std::string(prefix) + ".v." + n);
    }
  };
  get_opt("opt_g", st.gen.params, st.opt_g);
  get_opt("opt_d", st.disc.params, st.opt_d);
}

// ---- full runs ----

struct EvalPlan {
  std::shared_ptr<const Embedder> embedder;  // null: no FID columns
  std::shared_ptr<const GaussianMoments> real_moments;
  int fid_samples = 10000;
  bool run_probes = false;  // fill probe_block columns at eval points
  ProbeProtocol probe_protocol;
  int probe_train = 4000, probe_test = 1000;
};

struct RunOptions {
  bool resume = false;
  bool timing = false;        // fill wall_time cells (breaks bitwise determinism)
  int64_t stop_after = -1;    // testing hook: behave as if killed at this step
  std::string config_path = "inline";
};

struct RunSummary {
  std::string dir;
  int64_t final_step = 0;
  bool interrupted = false;
  std::optional<double> fid_best, fid_final;
  bool fid_collapsed = false;
  int fid_regularized_evals = 0;
  std::vector<double> fid_curve;
  std::vector<int64_t> fid_steps;
};

// Runs total_steps train steps in out_dir, writing manifest.json, config.cfg,
// metrics.csv, summary.json and checkpoints/. FID (and optionally probes) at
// the eval cadence. Resume continues bitwise from the last checkpoint.
template <class T>
RunSummary run_experiment(const TrainConfig& cfg, const ImageDataset& data,
                          const EvalPlan& plan, const std::string& out_dir,
                          const RunOptions& opt = {});

RunSummary run_experiment_dispatch(const TrainConfig& cfg,
                                   const ImageDataset& data,
                                   const EvalPlan& plan,
                                   const std::string& out_dir,
                                   const RunOptions& opt = {});

// ---- sweeps ----

struct SweepSpec {
  std::string name;
  std::vector<TrainConfig> configs;  // seed field ignored; seeds below apply
  std::vector<uint64_t> seeds;
};

// The robustness grid: {gradient penalty x lambda in {1,10}} x Adam settings
// x D steps (6 cells) plus spectral norm x Adam x D steps (3 cells).
SweepSpec table2_grid(const TrainConfig& base);
// The alpha sweep: alpha in {0.2, 0.5, 1}.
SweepSpec alpha_grid(const TrainConfig& base);

struct SweepResult {
  std::vector<RunSummary> runs;
  std::string summary_path;
};

SweepResult run_sweep(const SweepSpec& spec, const ImageDataset& data,
                      const EvalPlan& plan, const std::string& out_root,
                      int jobs, const RunOptions& opt = {});

// Mean/std/best aggregation of per-run summaries grouped by config hash;
// writes summary JSON and a plot-ready CSV.
void aggregate_runs(const std::vector<std::string>& run_dirs,
                    const std::string& out_json, const std::string& out_csv);

// ---- probe-over-training ----

// Applies the linear probe to every checkpoint of a run (step 0 is the
// random-init baseline row); joins FID values from metrics.csv when present.
CsvTable probe_over_training(const std::string& run_dir,
                             const ImageDataset& data,
                             const ProbeProtocol& protocol, int probe_train,
                             int probe_test);

// Rebuild models from a run checkpoint (float precision).
TrainerState<float> load_trainer(const TrainConfig& cfg, int num_classes,
                                 const std::string& ckpt_path);

std::string checkpoint_name(int64_t step);

}  // namespace ssgan
