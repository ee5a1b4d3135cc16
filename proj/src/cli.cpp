#include "ssgan/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ssgan/evaluation.hpp"
#include "ssgan/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ssgan {

namespace {

const char* code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::truncated_payload: return "truncated_payload";
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::io_error: return "io_error";
    case ErrorCode::config_error: return "config_error";
    case ErrorCode::usage_error: return "usage_error";
  }
  return "error";
}

std::string out_root() {
  const char* env = std::getenv("SSGAN_OUT");
  return env ? env : "runs";
}

std::vector<uint64_t> parse_seed_list(const std::string& s) {
  std::vector<uint64_t> seeds;
  size_t pos = 0;
  while (pos < s.size()) {
    size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    seeds.push_back(std::stoull(s.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  require(!seeds.empty(), ErrorCode::usage_error, "empty seed list");
  return seeds;
}

TrainConfig build_config(const std::string& config_path,
                         const std::vector<std::string>& overrides) {
  TrainConfig cfg;
  if (!config_path.empty()) cfg = TrainConfig::parse_file(config_path);
  for (const std::string& kv : overrides) {
    auto eq = kv.find('=');
    require(eq != std::string::npos, ErrorCode::usage_error,
            "--set expects key=value, got: " + kv);
    cfg.set_key(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

// Cached frozen-classifier embedder keyed by dataset content; "auto" trains
// it on first use. "pca" builds the deterministic pixel-PCA fallback.
std::shared_ptr<const Embedder> resolve_embedder(const std::string& spec,
                                                 const ImageDataset& data) {
  if (spec.empty()) return nullptr;
  if (spec == "pca") {
    SplitView split = split_dataset(data, 0.2, data.content_hash());
    int dim = std::min<int>(64, static_cast<int>(data.images.numel() / data.size()));
    return std::make_shared<Embedder>(fit_pca_embedder(data, split.test, dim));
  }
  if (spec == "auto") {
    fs::path dir = fs::path(out_root()) / "embedders";
    fs::create_directories(dir);
    char name[64];
    std::snprintf(name, sizeof(name), "cls_%016llx_v1.ckpt",
                  static_cast<unsigned long long>(data.content_hash()));
    fs::path path = dir / name;
    if (fs::exists(path))
      return std::make_shared<Embedder>(Embedder::load(path.string()));
    SplitView split = split_dataset(data, 0.2, data.content_hash());
    Embedder e = train_frozen_classifier_embedder(data, split, 16,
                                                  data.content_hash());
    e.save(path.string());
    return std::make_shared<Embedder>(std::move(e));
  }
  return std::make_shared<Embedder>(Embedder::load(spec));
}

// A sample source for `fid`: an SSDS dataset file or a run directory (its
// latest checkpoint generates the samples).
Tensor<float> load_source_images(const std::string& src, int samples) {
  if (fs::is_directory(src)) {
    TrainConfig cfg =
        TrainConfig::parse_file((fs::path(src) / "config.cfg").string());
    std::string ckpt_dir = (fs::path(src) / "checkpoints").string();
    int64_t best = -1;
    for (const auto& e : fs::directory_iterator(ckpt_dir)) {
      std::string n = e.path().filename().string();
      if (n.rfind("step_", 0) == 0)
        best = std::max<int64_t>(best, std::stoll(n.substr(5, 8)));
    }
    require(best >= 0, ErrorCode::io_error, "no checkpoint in " + src);
    json m = json::parse(
        read_text_file((fs::path(src) / "manifest.json").string()));
    int num_classes = m["dataset"]["num_classes"].get<int>();
    TrainerState<float> st =
        load_trainer(cfg, num_classes,
                     (fs::path(ckpt_dir) / checkpoint_name(best)).string());
    const int chunk = 128;
    Tensor<float> out({samples, 3, cfg.image_size, cfg.image_size});
    int64_t row = out.numel() / samples;
    for (int beg = 0, part = 0; beg < samples; beg += chunk, ++part) {
      int mcount = std::min(chunk, samples - beg);
      DetRng zrng(cfg.seed, Stream::eval, static_cast<uint64_t>(best),
                  static_cast<uint64_t>(part));
      Tensor<float> z = sample_latent<float>(mcount, cfg.dz, zrng);
      std::vector<int> labels;
      const bool cond = cfg.variant == Variant::cond;
      if (cond) {
        labels.resize(static_cast<size_t>(mcount));
        for (auto& y : labels)
          y = static_cast<int>(zrng.randint(static_cast<uint64_t>(num_classes)));
      }
      Tensor<float> img =
          generate_images(st.gen, z, cond ? &labels : nullptr);
      std::copy(img.v.begin(), img.v.end(),
                out.v.begin() + static_cast<int64_t>(beg) * row);
    }
    return out;
  }
  ImageDataset ds = load_dataset(src);
  int n = std::min(samples, ds.size());
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  return ds.batch(idx).images;
}

int cmd_gen_data(int n, int size, int classes, uint64_t seed,
                 const std::string& out) {
  ImageDataset ds = synthetic_shapes_dataset(n, size, classes, seed);
  save_dataset(ds, out);
  std::cout << "wrote " << out << " n=" << n << " size=" << size
            << " classes=" << classes << " hash=" << std::hex
            << ds.content_hash() << std::dec << "\n";
  return 0;
}

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& overrides,
              const std::string& data_path, const std::string& out_dir,
              int64_t seed, const std::string& embedder_spec, bool resume,
              bool timing, bool probes) {
  TrainConfig cfg = build_config(config_path, overrides);
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  cfg.validate();
  ImageDataset data = load_dataset(data_path);
  EvalPlan plan;
  plan.embedder = resolve_embedder(embedder_spec, data);
  plan.fid_samples = std::min<int>(cfg.fid_samples, data.size());
  plan.run_probes = probes;
  RunOptions opt;
  opt.resume = resume;
  opt.timing = timing;
  opt.config_path = config_path.empty() ? "inline" : config_path;
  std::string dir = out_dir.empty()
                        ? (fs::path(out_root()) /
                           (to_string(cfg.variant) + "_s" + std::to_string(cfg.seed)))
                              .string()
                        : out_dir;
  RunSummary sum = run_experiment_dispatch(cfg, data, plan, dir, opt);
  std::cout << "run " << dir << " finished at step " << sum.final_step;
  if (sum.fid_best) std::cout << " fid_best=" << *sum.fid_best;
  std::cout << "\n";
  return 0;
}

int cmd_sweep(const std::string& grid, const std::string& config_path,
              const std::vector<std::string>& overrides,
              const std::string& data_path, const std::string& out_dir,
              const std::string& seeds_str, const std::string& embedder_spec,
              int jobs) {
  TrainConfig base = build_config(config_path, overrides);
  ImageDataset data = load_dataset(data_path);
  SweepSpec spec;
  if (grid == "table2")
    spec = table2_grid(base);
  else if (grid == "alpha")
    spec = alpha_grid(base);
  else
    fail(ErrorCode::usage_error, "unknown sweep grid: " + grid);
  if (!seeds_str.empty()) spec.seeds = parse_seed_list(seeds_str);
  EvalPlan plan;
  plan.embedder = resolve_embedder(embedder_spec, data);
  plan.fid_samples = std::min<int>(base.fid_samples, data.size());
  std::string root =
      out_dir.empty() ? (fs::path(out_root()) / spec.name).string() : out_dir;
  SweepResult res = run_sweep(spec, data, plan, root, jobs);
  std::cout << "sweep '" << spec.name << "': " << res.runs.size()
            << " runs, summary at " << res.summary_path << "\n";
  return 0;
}

int cmd_fid(const std::string& a, const std::string& b,
            const std::string& embedder_spec, int samples,
            const std::string& out) {
  Tensor<float> xa = load_source_images(a, samples);
  Tensor<float> xb = load_source_images(b, samples);
  std::shared_ptr<const Embedder> emb;
  if (embedder_spec.empty() || embedder_spec == "pca") {
    // Deterministic fallback: PCA fitted on source A.
    ImageDataset ref;
    ref.images = xa;
    ref.num_classes = 0;
    std::vector<int> idx(static_cast<size_t>(xa.dim(0)));
    for (int i = 0; i < xa.dim(0); ++i) idx[static_cast<size_t>(i)] = i;
    int dim = std::min<int>(64, static_cast<int>(xa.numel() / xa.dim(0)));
    emb = std::make_shared<Embedder>(fit_pca_embedder(ref, idx, dim));
  } else {
    ImageDataset dummy;
    emb = resolve_embedder(embedder_spec, dummy);
  }
  GaussianMoments ma = moments_of_images(xa, *emb);
  GaussianMoments mb = moments_of_images(xb, *emb);
  FidResult fr = fid_from_moments(ma, mb);
  json j;
  j["fid"] = fr.value;
  j["regularized"] = fr.regularized;
  j["n_a"] = ma.n;
  j["n_b"] = mb.n;
  j["embedder"] = emb->kind == Embedder::Kind::pca_pixels ? "pca_pixels"
                                                          : "frozen_classifier";
  j["dim"] = emb->dim;
  std::string text = j.dump(2) + "\n";
  if (!out.empty())
    write_text_file(out, text);
  else
    std::cout << text;
  return 0;
}

int cmd_probe(const std::string& run_dir, const std::string& data_path,
              int epochs, int train_n, int test_n, bool curve,
              const std::string& out) {
  ImageDataset data = load_dataset(data_path);
  ProbeProtocol protocol;
  protocol.epochs = epochs;
  if (curve) {
    CsvTable t = probe_over_training(run_dir, data, protocol, train_n, test_n);
    if (!out.empty())
      t.save(out);
    else
      std::cout << t.to_text();
    return 0;
  }
  TrainConfig cfg =
      TrainConfig::parse_file((fs::path(run_dir) / "config.cfg").string());
  std::string ckpt_dir = (fs::path(run_dir) / "checkpoints").string();
  int64_t best = -1;
  for (const auto& e : fs::directory_iterator(ckpt_dir)) {
    std::string n = e.path().filename().string();
    if (n.rfind("step_", 0) == 0)
      best = std::max<int64_t>(best, std::stoll(n.substr(5, 8)));
  }
  require(best >= 0, ErrorCode::io_error, "no checkpoint in " + run_dir);
  TrainerState<float> st = load_trainer(
      cfg, data.num_classes,
      (fs::path(ckpt_dir) / checkpoint_name(best)).string());
  SplitView split = split_dataset(data, 0.2, data.content_hash());
  int ntr = std::min<int>(train_n, static_cast<int>(split.train.size()));
  int nte = std::min<int>(test_n, static_cast<int>(split.test.size()));
  std::vector<int> tr(split.train.begin(), split.train.begin() + ntr);
  std::vector<int> te(split.test.begin(), split.test.begin() + nte);
  auto trb = data.batch(tr);
  auto teb = data.batch(te);
  auto ftr = extract_block_features(st.disc, trb.images);
  auto fte = extract_block_features(st.disc, teb.images);
  ProbeResult pr = linear_probe(ftr, *trb.labels, fte, *teb.labels,
                                data.num_classes, protocol);
  json j;
  for (size_t bidx = 0; bidx < pr.block_acc.size(); ++bidx)
    j["block" + std::to_string(bidx)] = pr.block_acc[bidx];
  j["best"] = pr.best_acc;
  j["best_block"] = pr.best_block;
  j["step"] = best;
  std::string text = j.dump(2) + "\n";
  if (!out.empty())
    write_text_file(out, text);
  else
    std::cout << text;
  return 0;
}

int cmd_forgetting(const std::string& data_path, int period, int tasks,
                   int cycles, int eval_per_class,
                   const std::string& seeds_str, const std::string& out_dir) {
  ImageDataset data = load_dataset(data_path);
  std::vector<uint64_t> seeds = parse_seed_list(seeds_str);
  std::string root = out_dir.empty()
                         ? (fs::path(out_root()) / "forgetting").string()
                         : out_dir;
  fs::create_directories(root);
  json summary;
  for (bool ss : {false, true}) {
    const char* vname = ss ? "self_supervised" : "vanilla";
    json per_variant;
    for (uint64_t seed : seeds) {
      ForgettingConfig fc;
      fc.period = period;
      fc.n_tasks = tasks;
      fc.cycles = cycles;
      fc.image_size = data.image_size();
      fc.eval_per_class = eval_per_class;
      fc.self_supervised = ss;
      fc.seed = seed;
      ForgettingResult res = forgetting_experiment(data, fc);
      CsvTable t;
      t.header = {"step", "task", "accuracy"};
      for (int i = 0; i < res.total_steps(); ++i)
        t.rows.push_back({static_cast<double>(i),
                          static_cast<double>(res.task_ids[static_cast<size_t>(i)]),
                          res.accuracy[static_cast<size_t>(i)]});
      std::string csv = (fs::path(root) / (std::string(vname) + "_s" +
                                           std::to_string(seed) + ".csv"))
                            .string();
      t.save(csv);
      int drops = 0;
      for (auto& [before, after] : res.switch_before_after)
        if (before > after) ++drops;
      per_variant["s" + std::to_string(seed)] = {
          {"cycle1_mean", res.cycle_mean[0]},
          {"cycle2_mean", res.cycle_mean[1]},
          {"switches", res.switch_before_after.size()},
          {"drops", drops},
          {"curve_csv", csv}};
    }
    summary[vname] = per_variant;
  }
  std::string spath = (fs::path(root) / "summary.json").string();
  write_text_file(spath, summary.dump(2) + "\n");
  std::cout << "forgetting summary at " << spath << "\n";
  return 0;
}

int cmd_report(const std::string& runs_str, const std::string& root,
               const std::string& out_prefix) {
  std::vector<std::string> dirs;
  if (!runs_str.empty()) {
    size_t pos = 0;
    while (pos < runs_str.size()) {
      size_t comma = runs_str.find(',', pos);
      if (comma == std::string::npos) comma = runs_str.size();
      dirs.push_back(runs_str.substr(pos, comma - pos));
      pos = comma + 1;
    }
  } else {
    require(!root.empty(), ErrorCode::usage_error,
            "report needs --runs or --root");
    for (const auto& e : fs::recursive_directory_iterator(root))
      if (e.is_regular_file() && e.path().filename() == "manifest.json")
        dirs.push_back(e.path().parent_path().string());
    std::sort(dirs.begin(), dirs.end());
  }
  require(!dirs.empty(), ErrorCode::usage_error, "report: no runs found");
  aggregate_runs(dirs, out_prefix + ".json", out_prefix + ".csv");
  std::cout << "report written to " << out_prefix << ".{json,csv} ("
            << dirs.size() << " runs)\n";
  return 0;
}

int cmd_embedder(const std::string& data_path, const std::string& kind,
                 int dim, int width, uint64_t seed, const std::string& out) {
  ImageDataset data = load_dataset(data_path);
  SplitView split = split_dataset(data, 0.2, data.content_hash());
  Embedder e;
  if (kind == "classifier") {
    e = train_frozen_classifier_embedder(data, split, width, seed);
  } else if (kind == "pca") {
    e = fit_pca_embedder(data, split.test, dim);
  } else {
    fail(ErrorCode::usage_error, "embedder kind must be classifier or pca");
  }
  e.save(out);
  std::cout << "wrote embedder " << out << " kind=" << kind << " dim=" << e.dim
            << "\n";
  return 0;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args) {
  CLI::App app{"Self-supervised GAN training and evaluation engine"};
  app.require_subcommand(1);

  // gen-data
  auto* gd = app.add_subcommand("gen-data", "emit a synthetic dataset file");
  int gd_n = 10000, gd_size = 32, gd_classes = 10;
  uint64_t gd_seed = 7;
  std::string gd_out = "data.ssds";
  gd->add_option("--n", gd_n);
  gd->add_option("--size", gd_size);
  gd->add_option("--classes", gd_classes);
  gd->add_option("--seed", gd_seed);
  gd->add_option("--out", gd_out);

  // train
  auto* tr = app.add_subcommand("train", "run one training experiment");
  std::string tr_config, tr_data, tr_out, tr_embedder;
  std::vector<std::string> tr_set;
  int64_t tr_seed = -1;
  bool tr_resume = false, tr_timing = false, tr_probes = false;
  tr->add_option("--config", tr_config);
  tr->add_option("--data", tr_data)->required();
  tr->add_option("--out", tr_out);
  tr->add_option("--seed", tr_seed);
  tr->add_option("--set", tr_set, "key=value config overrides");
  tr->add_option("--embedder", tr_embedder,
                 "embedder checkpoint, 'auto', or 'pca'");
  tr->add_flag("--resume", tr_resume);
  tr->add_flag("--timing", tr_timing, "fill wall_time cells (not bit-stable)");
  tr->add_flag("--probes", tr_probes, "linear probes at eval points");

  // sweep
  auto* sw = app.add_subcommand("sweep", "run a hyperparameter grid");
  std::string sw_grid, sw_config, sw_data, sw_out, sw_seeds, sw_embedder;
  std::vector<std::string> sw_set;
  int sw_jobs = 1;
  sw->add_option("--grid", sw_grid, "table2 or alpha")->required();
  sw->add_option("--config", sw_config);
  sw->add_option("--data", sw_data)->required();
  sw->add_option("--out", sw_out);
  sw->add_option("--seeds", sw_seeds, "comma-separated seed list");
  sw->add_option("--set", sw_set);
  sw->add_option("--embedder", sw_embedder);
  sw->add_option("--jobs", sw_jobs);

  // fid
  auto* fd = app.add_subcommand("fid", "FID between two sample sources");
  std::string fd_a, fd_b, fd_embedder, fd_out;
  int fd_samples = 10000;
  fd->add_option("--a", fd_a)->required();
  fd->add_option("--b", fd_b)->required();
  fd->add_option("--embedder", fd_embedder);
  fd->add_option("--samples", fd_samples);
  fd->add_option("--out", fd_out);

  // probe
  auto* pb = app.add_subcommand("probe", "linear probe of a run checkpoint");
  std::string pb_run, pb_data, pb_out;
  int pb_epochs = 50, pb_train = 4000, pb_test = 1000;
  bool pb_curve = false;
  pb->add_option("--run", pb_run)->required();
  pb->add_option("--data", pb_data)->required();
  pb->add_option("--epochs", pb_epochs);
  pb->add_option("--train-samples", pb_train);
  pb->add_option("--test-samples", pb_test);
  pb->add_flag("--curve", pb_curve, "probe every checkpoint of the run");
  pb->add_option("--out", pb_out);

  // forgetting
  auto* fg = app.add_subcommand("forgetting", "cycling 1-vs-all experiments");
  std::string fg_data, fg_out, fg_seeds = "1,2,3";
  int fg_period = 1000, fg_tasks = 10, fg_cycles = 2, fg_epc = 64;
  fg->add_option("--data", fg_data)->required();
  fg->add_option("--period", fg_period);
  fg->add_option("--tasks", fg_tasks);
  fg->add_option("--cycles", fg_cycles);
  fg->add_option("--eval-per-class", fg_epc);
  fg->add_option("--seeds", fg_seeds);
  fg->add_option("--out", fg_out);

  // report
  auto* rp = app.add_subcommand("report", "aggregate runs into tables");
  std::string rp_runs, rp_root, rp_out = "report";
  rp->add_option("--runs", rp_runs, "comma-separated run directories");
  rp->add_option("--root", rp_root, "scan this directory tree for runs");
  rp->add_option("--out", rp_out, "output prefix");

  // embedder
  auto* em = app.add_subcommand("embedder", "prepare a FID embedder");
  std::string em_data, em_kind = "classifier", em_out = "embedder.ckpt";
  int em_dim = 64, em_width = 16;
  uint64_t em_seed = 1;
  em->add_option("--data", em_data)->required();
  em->add_option("--kind", em_kind, "classifier or pca");
  em->add_option("--dim", em_dim, "pca output dimension");
  em->add_option("--width", em_width, "classifier base width");
  em->add_option("--seed", em_seed);
  em->add_option("--out", em_out);

  std::vector<const char*> argv;
  argv.push_back("ssgan");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      std::cout << app.help();
      return 0;
    }
    std::cerr << "error: usage_error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*gd) return cmd_gen_data(gd_n, gd_size, gd_classes, gd_seed, gd_out);
    if (*tr)
      return cmd_train(tr_config, tr_set, tr_data, tr_out, tr_seed, tr_embedder,
                       tr_resume, tr_timing, tr_probes);
    if (*sw)
      return cmd_sweep(sw_grid, sw_config, sw_set, sw_data, sw_out, sw_seeds,
                       sw_embedder, sw_jobs);
    if (*fd) return cmd_fid(fd_a, fd_b, fd_embedder, fd_samples, fd_out);
    if (*pb)
      return cmd_probe(pb_run, pb_data, pb_epochs, pb_train, pb_test, pb_curve,
                       pb_out);
    if (*fg)
      return cmd_forgetting(fg_data, fg_period, fg_tasks, fg_cycles, fg_epc,
                            fg_seeds, fg_out);
    if (*rp) return cmd_report(rp_runs, rp_root, rp_out);
    if (*em)
      return cmd_embedder(em_data, em_kind, em_dim, em_width, em_seed, em_out);
  } catch (const Error& e) {
    std::cerr << "error: " << code_name(e.code()) << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: usage_error: no subcommand\n";
  return 2;
}

}  // namespace ssgan
