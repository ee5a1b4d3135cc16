#include "ssgan/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <thread>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ssgan {

std::string checkpoint_name(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%08lld.ckpt",
                static_cast<long long>(step));
  return buf;
}

namespace {

constexpr const char* kVersion = "ssgan 0.1.0";

std::string hex64(uint64_t x) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

std::vector<std::string> metric_header() {
  return {"step",         "g_total",      "d_total",      "d_rot_nll",
          "g_rot_nll",    "fid",          "probe_block0", "probe_block1",
          "probe_block2", "probe_block3", "wall_time"};
}

json manifest_json(const TrainConfig& cfg, const ImageDataset& data,
                   const std::string& dataset_id, const std::string& config_path) {
  json m;
  m["artifact"] = "ssgan";
  m["version"] = kVersion;
  m["config_path"] = config_path;
  m["config"] = cfg.to_map();
  m["config_hash"] = hex64(cfg.config_hash());
  m["dataset"] = {{"id", dataset_id},
                  {"content_hash", hex64(data.content_hash())},
                  {"n", data.size()},
                  {"image_size", data.image_size()},
                  {"num_classes", data.num_classes}};
  m["seeds"] = {cfg.seed};
  m["output_layout"] = {{"config_snapshot", "config.cfg"},
                        {"metrics", "metrics.csv"},
                        {"summary", "summary.json"},
                        {"checkpoints", "checkpoints/"}};
  return m;
}

struct Stats {
  double mean = 0, stddev = 0, best = 0;
};

Stats stats_of(const std::vector<double>& xs, bool best_is_min) {
  Stats s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  double var = 0;
  for (double x : xs) var += (x - s.mean) * (x - s.mean);
  s.stddev = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
  s.best = best_is_min ? *std::min_element(xs.begin(), xs.end())
                       : *std::max_element(xs.begin(), xs.end());
  return s;
}

template <class T>
Tensor<float> sample_fakes(TrainerState<T>& st, const TrainConfig& cfg,
                           const ImageDataset& data, int n, int64_t step) {
  const int chunk = 128;
  const bool cond = cfg.variant == Variant::cond;
  Tensor<float> out({n, 3, cfg.image_size, cfg.image_size});
  int64_t row = out.numel() / n;
  for (int beg = 0, part = 0; beg < n; beg += chunk, ++part) {
    int m = std::min(chunk, n - beg);
    DetRng zrng(cfg.seed, Stream::eval, static_cast<uint64_t>(step),
                static_cast<uint64_t>(part));
    Tensor<T> z = sample_latent<T>(m, cfg.dz, zrng);
    std::vector<int> labels;
    if (cond) {
      labels.resize(static_cast<size_t>(m));
      for (auto& y : labels)
        y = static_cast<int>(zrng.randint(static_cast<uint64_t>(data.num_classes)));
    }
    Tensor<T> img = generate_images(st.gen, z, cond ? &labels : nullptr);
    for (int64_t i = 0; i < m * row; ++i)
      out.v[static_cast<size_t>(beg) * row + i] = static_cast<float>(img.v[static_cast<size_t>(i)]);
  }
  return out;
}

int64_t latest_checkpoint_step(const std::string& dir) {
  int64_t best = -1;
  if (!fs::exists(dir)) return best;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string n = e.path().filename().string();
    if (n.size() == 18 && n.rfind("step_", 0) == 0 &&
        n.substr(13) == ".ckpt")
      best = std::max(best, static_cast<int64_t>(std::stoll(n.substr(5, 8))));
  }
  return best;
}

}  // namespace

template <class T>
RunSummary run_experiment(const TrainConfig& cfg, const ImageDataset& data,
                          const EvalPlan& plan, const std::string& out_dir,
                          const RunOptions& opt) {
  cfg.validate();
  auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(fs::path(out_dir) / "checkpoints");
  const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
  const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  const std::string ckpt_dir = (fs::path(out_dir) / "checkpoints").string();

  SplitView split = split_dataset(data, 0.2, data.content_hash());
  TrainerState<T> st = init_trainer<T>(cfg, data.num_classes);

  CsvTable metrics;
  metrics.header = metric_header();
  int64_t start = 0;

  if (opt.resume) {
    require(fs::exists(manifest_path), ErrorCode::io_error,
            "resume: no manifest in " + out_dir);
    json m = json::parse(read_text_file(manifest_path));
    require(m["dataset"]["content_hash"] == hex64(data.content_hash()),
            ErrorCode::invalid_argument,
            "resume: dataset content hash does not match the manifest");
    require(m["config_hash"] == hex64(cfg.config_hash()),
            ErrorCode::invalid_argument,
            "resume: config does not match the manifest");
    int64_t last = latest_checkpoint_step(ckpt_dir);
    require(last >= 0, ErrorCode::io_error, "resume: no checkpoint found");
    state_from_store(st, load_store((fs::path(ckpt_dir) / checkpoint_name(last)).string()));
    start = st.step;
    if (fs::exists(metrics_path)) {
      CsvTable old = CsvTable::load(metrics_path);
      for (auto& row : old.rows)
        if (row[0] && static_cast<int64_t>(*row[0]) <= start)
          metrics.rows.push_back(row);
    }
  } else {
    // Manifest is written before any training starts.
    write_text_file(manifest_path,
                    manifest_json(cfg, data, "dataset", opt.config_path).dump(2) + "\n");
    write_text_file((fs::path(out_dir) / "config.cfg").string(), cfg.serialize());
    metrics.save(metrics_path);
    save_store(state_to_store(st), (fs::path(ckpt_dir) / checkpoint_name(0)).string());
  }

  // Real-side moments for FID, fitted once on the held-out split.
  std::shared_ptr<const GaussianMoments> real_m = plan.real_moments;
  if (plan.embedder && !real_m) {
    int n = std::min<int>(plan.fid_samples, static_cast<int>(split.test.size()));
    std::vector<int> idx(split.test.begin(), split.test.begin() + n);
    auto batch = data.batch(idx);
    real_m = std::make_shared<GaussianMoments>(
        moments_of_images(batch.images, *plan.embedder));
  }

  const int64_t cadence = cfg.eval_cadence();
  RunSummary sum;
  sum.dir = out_dir;
  double fid_min = 0;
  bool fid_any = false;

  // On resume, rebuild the FID trajectory from the retained rows so the final
  // summary matches an uninterrupted run.
  if (opt.resume) {
    int fc = metrics.column("fid");
    for (auto& row : metrics.rows) {
      if (!row[static_cast<size_t>(fc)]) continue;
      double f = *row[static_cast<size_t>(fc)];
      sum.fid_curve.push_back(f);
      sum.fid_steps.push_back(static_cast<int64_t>(*row[0]));
      if (!fid_any || f < fid_min) {
        fid_min = fid_any ? std::min(fid_min, f) : f;
        fid_any = true;
      }
      if (f > 3.0 * fid_min) sum.fid_collapsed = true;
      sum.fid_final = f;
      sum.fid_best = fid_min;
    }
  }

  auto eval_and_log = [&](int64_t done, StepMetrics sm, bool eval_point) {
    std::vector<std::optional<double>> row(metrics.header.size(), std::nullopt);
    row[0] = static_cast<double>(done);
    row[1] = sm.g_total;
    row[2] = sm.d_total;
    row[3] = sm.d_rot;
    row[4] = sm.g_rot;
    if (eval_point && plan.embedder) {
      Tensor<float> fakes = sample_fakes(st, cfg, data, plan.fid_samples, done);
      GaussianMoments fm = moments_of_images(fakes, *plan.embedder);
      FidResult fr = fid_from_moments(fm, *real_m);
      row[5] = fr.value;
      if (fr.regularized) sum.fid_regularized_evals++;
      sum.fid_curve.push_back(fr.value);
      sum.fid_steps.push_back(done);
      if (!fid_any || fr.value < fid_min) {
        fid_min = fid_any ? std::min(fid_min, fr.value) : fr.value;
        fid_any = true;
      }
      if (fr.value > 3.0 * fid_min) sum.fid_collapsed = true;
      sum.fid_final = fr.value;
      sum.fid_best = fid_min;
    }
    if (eval_point && plan.run_probes && data.num_classes > 0) {
      int ntr = std::min<int>(plan.probe_train, static_cast<int>(split.train.size()));
      int nte = std::min<int>(plan.probe_test, static_cast<int>(split.test.size()));
      std::vector<int> tr(split.train.begin(), split.train.begin() + ntr);
      std::vector<int> te(split.test.begin(), split.test.begin() + nte);
      auto trb = data.batch(tr);
      auto teb = data.batch(te);
      // probes run on a float snapshot of the discriminator
      TrainerState<float> snap = init_trainer<float>(cfg, data.num_classes);
      TensorStore store = state_to_store(st);
      state_from_store(snap, store);
      auto ftr = extract_block_features(snap.disc, trb.images);
      auto fte = extract_block_features(snap.disc, teb.images);
      ProbeResult pr = linear_probe(ftr, *trb.labels, fte, *teb.labels,
                                    data.num_classes, plan.probe_protocol);
      for (size_t b = 0; b < pr.block_acc.size() && b < 4; ++b)
        row[6 + b] = pr.block_acc[b];
    }
    if (opt.timing) {
      auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0);
      row[10] = dt.count();
    }
    metrics.rows.push_back(std::move(row));
  };

  for (int64_t step = start; step < cfg.total_steps; ++step) {
    if (opt.stop_after >= 0 && step >= opt.stop_after) {
      metrics.save(metrics_path);
      sum.interrupted = true;
      sum.final_step = step;
      return sum;
    }
    StepMetrics sm = train_step(st, data, split.train, cfg, step);
    int64_t done = step + 1;
    bool eval_point = (done % cadence == 0) || done == cfg.total_steps;
    bool log_point = (done % cfg.log_every == 0) || eval_point;
    if (log_point) eval_and_log(done, sm, eval_point);
    if (eval_point) {
      save_store(state_to_store(st),
                 (fs::path(ckpt_dir) / checkpoint_name(done)).string());
      metrics.save(metrics_path);
    }
  }
  metrics.save(metrics_path);
  sum.final_step = cfg.total_steps;

  json s;
  s["config_hash"] = hex64(cfg.config_hash());
  s["seeds"] = {cfg.seed};
  s["final_step"] = sum.final_step;
  s["variant"] = to_string(cfg.variant);
  if (!sum.fid_curve.empty()) {
    Stats fs_ = stats_of(sum.fid_curve, true);
    s["fid"] = {{"mean", fs_.mean},
                {"std", fs_.stddev},
                {"best", fs_.best},
                {"final", *sum.fid_final},
                {"collapsed", sum.fid_collapsed},
                {"regularized_evals", sum.fid_regularized_evals},
                {"samples", plan.fid_samples},
                {"curve_steps", sum.fid_steps},
                {"curve", sum.fid_curve}};
  }
  // Loss curves summarized over logged rows.
  for (const char* name : {"g_total", "d_total", "d_rot_nll", "g_rot_nll"}) {
    int col = metrics.column(name);
    std::vector<double> xs;
    for (auto& r : metrics.rows)
      if (r[static_cast<size_t>(col)]) xs.push_back(*r[static_cast<size_t>(col)]);
    if (xs.empty()) continue;
    Stats st_ = stats_of(xs, true);
    s["losses"][name] = {{"mean", st_.mean}, {"std", st_.stddev},
                         {"best", st_.best}, {"final", xs.back()}};
  }
  write_text_file((fs::path(out_dir) / "summary.json").string(), s.dump(2) + "\n");
  return sum;
}

template RunSummary run_experiment<float>(const TrainConfig&, const ImageDataset&,
                                          const EvalPlan&, const std::string&,
                                          const RunOptions&);
template RunSummary run_experiment<double>(const TrainConfig&, const ImageDataset&,
                                           const EvalPlan&, const std::string&,
                                           const RunOptions&);

RunSummary run_experiment_dispatch(const TrainConfig& cfg,
                                   const ImageDataset& data,
                                   const EvalPlan& plan,
                                   const std::string& out_dir,
                                   const RunOptions& opt) {
  if (cfg.precision == Precision::f64)
    return run_experiment<double>(cfg, data, plan, out_dir, opt);
  return run_experiment<float>(cfg, data, plan, out_dir, opt);
}

SweepSpec table2_grid(const TrainConfig& base) {
  SweepSpec spec;
  spec.name = "table2";
  struct Cell {
    Regularizer reg;
    double lambda, b1, b2;
    int d;
  };
  std::vector<Cell> cells = {
      {Regularizer::gradient_penalty, 1, 0.0, 0.900, 1},
      {Regularizer::gradient_penalty, 1, 0.0, 0.900, 2},
      {Regularizer::gradient_penalty, 1, 0.5, 0.999, 1},
      {Regularizer::gradient_penalty, 10, 0.0, 0.900, 1},
      {Regularizer::gradient_penalty, 10, 0.0, 0.900, 2},
      {Regularizer::gradient_penalty, 10, 0.5, 0.999, 1},
      {Regularizer::spectral_norm, 0, 0.0, 0.900, 1},
      {Regularizer::spectral_norm, 0, 0.0, 0.900, 2},
      {Regularizer::spectral_norm, 0, 0.5, 0.999, 1},
  };
  for (const Cell& c : cells) {
    TrainConfig cfg = base;
    cfg.regularizer = c.reg;
    cfg.lambda = c.lambda;
    cfg.adam_beta1 = c.b1;
    cfg.adam_beta2 = c.b2;
    cfg.d_steps = c.d;
    spec.configs.push_back(cfg);
  }
  spec.seeds = {1, 2, 3};
  return spec;
}

SweepSpec alpha_grid(const TrainConfig& base) {
  SweepSpec spec;
  spec.name = "alpha";
  for (double a : {0.2, 0.5, 1.0}) {
    TrainConfig cfg = base;
    cfg.alpha = a;
    spec.configs.push_back(cfg);
  }
  spec.seeds = {1, 2, 3};
  return spec;
}

namespace {

std::string config_label(const TrainConfig& c) {
  std::string s = to_string(c.variant) + "_";
  if (c.regularizer == Regularizer::gradient_penalty)
    s += "gp" + std::to_string(static_cast<int>(c.lambda));
  else
    s += "sn";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "_b%g_%g_d%d_a%g", c.adam_beta1, c.adam_beta2,
                c.d_steps, c.alpha);
  return s + buf;
}

}  // namespace

SweepResult run_sweep(const SweepSpec& spec, const ImageDataset& data,
                      const EvalPlan& plan, const std::string& out_root,
                      int jobs, const RunOptions& opt) {
  fs::create_directories(out_root);
  struct Job {
    TrainConfig cfg;
    std::string dir;
  };
  std::vector<Job> todo;
  for (const TrainConfig& c : spec.configs)
    for (uint64_t seed : spec.seeds) {
      TrainConfig cfg = c;
      cfg.seed = seed;
      todo.push_back({cfg, (fs::path(out_root) / (config_label(cfg) + "_s" +
                                                  std::to_string(seed)))
                              .string()});
    }
  SweepResult res;
  res.runs.resize(todo.size());
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= todo.size()) return;
      res.runs[i] = run_experiment_dispatch(todo[i].cfg, data, plan,
                                            todo[i].dir, opt);
    }
  };
  int nthreads = std::max(1, std::min<int>(jobs, static_cast<int>(todo.size())));
  std::vector<std::thread> pool;
  for (int i = 0; i < nthreads; ++i) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  std::vector<std::string> dirs;
  for (auto& j : todo) dirs.push_back(j.dir);
  std::string out_json = (fs::path(out_root) / "sweep_summary.json").string();
  std::string out_csv = (fs::path(out_root) / "sweep_summary.csv").string();
  aggregate_runs(dirs, out_json, out_csv);
  res.summary_path = out_json;
  return res;
}

void aggregate_runs(const std::vector<std::string>& run_dirs,
                    const std::string& out_json, const std::string& out_csv) {
  struct Group {
    std::string label;
    std::vector<double> fid_best, fid_final;
    int collapsed = 0, runs = 0;
    std::vector<uint64_t> seeds;
  };
  std::map<std::string, Group> groups;
  for (const std::string& dir : run_dirs) {
    json m = json::parse(read_text_file((fs::path(dir) / "manifest.json").string()));
    json s = json::parse(read_text_file((fs::path(dir) / "summary.json").string()));
    std::string hash = m["config_hash"];
    Group& g = groups[hash];
    std::map<std::string, std::string> cm = m["config"];
    TrainConfig cfg;
    for (auto& [k, v] : cm) cfg.set_key(k, v);
    g.label = config_label(cfg);
    g.runs++;
    g.seeds.push_back(m["seeds"][0].get<uint64_t>());
    if (s.contains("fid")) {
      g.fid_best.push_back(s["fid"]["best"].get<double>());
      g.fid_final.push_back(s["fid"]["final"].get<double>());
      if (s["fid"]["collapsed"].get<bool>()) g.collapsed++;
    }
  }
  json out;
  CsvTable csv;
  csv.header = {"config",      "runs",          "fid_best_mean", "fid_best_std",
                "fid_best_min", "fid_final_mean", "fid_final_std", "collapsed"};
  for (auto& [hash, g] : groups) {
    Stats best = stats_of(g.fid_best, true);
    Stats fin = stats_of(g.fid_final, true);
    out[hash] = {{"label", g.label},
                 {"runs", g.runs},
                 {"seeds", g.seeds},
                 {"collapsed_runs", g.collapsed}};
    if (!g.fid_best.empty()) {
      out[hash]["fid_best"] = {{"mean", best.mean}, {"std", best.stddev},
                               {"best", best.best}};
      out[hash]["fid_final"] = {{"mean", fin.mean}, {"std", fin.stddev},
                                {"best", fin.best}};
    }
    std::vector<std::optional<double>> row(csv.header.size(), std::nullopt);
    row[1] = g.runs;
    if (!g.fid_best.empty()) {
      row[2] = best.mean;
      row[3] = best.stddev;
      row[4] = best.best;
      row[5] = fin.mean;
      row[6] = fin.stddev;
    }
    row[7] = g.collapsed;
    csv.rows.push_back(row);
  }
  // config labels go into the csv as a side file-friendly first column; CSV
  // cells are numeric, so emit a parallel json mapping instead.
  json labels;
  int r = 0;
  for (auto& [hash, g] : groups) {
    labels[std::to_string(r)] = g.label;
    ++r;
  }
  out["_row_labels"] = labels;
  write_text_file(out_json, out.dump(2) + "\n");
  csv.save(out_csv);
}

TrainerState<float> load_trainer(const TrainConfig& cfg, int num_classes,
                                 const std::string& ckpt_path) {
  TrainerState<float> st = init_trainer<float>(cfg, num_classes);
  state_from_store(st, load_store(ckpt_path));
  return st;
}

CsvTable probe_over_training(const std::string& run_dir,
                             const ImageDataset& data,
                             const ProbeProtocol& protocol, int probe_train,
                             int probe_test) {
  require(data.num_classes > 0, ErrorCode::invalid_argument,
          "probe_over_training needs a labeled dataset");
  TrainConfig cfg = TrainConfig::parse_file(
      (fs::path(run_dir) / "config.cfg").string());
  SplitView split = split_dataset(data, 0.2, data.content_hash());
  int ntr = std::min<int>(probe_train, static_cast<int>(split.train.size()));
  int nte = std::min<int>(probe_test, static_cast<int>(split.test.size()));
  std::vector<int> tr(split.train.begin(), split.train.begin() + ntr);
  std::vector<int> te(split.test.begin(), split.test.begin() + nte);
  auto trb = data.batch(tr);
  auto teb = data.batch(te);

  // FID values to join, if the run logged them.
  std::map<int64_t, double> fid_at;
  std::string metrics_path = (fs::path(run_dir) / "metrics.csv").string();
  if (fs::exists(metrics_path)) {
    CsvTable m = CsvTable::load(metrics_path);
    int sc = m.column("step"), fc = m.column("fid");
    for (auto& row : m.rows)
      if (row[static_cast<size_t>(sc)] && row[static_cast<size_t>(fc)])
        fid_at[static_cast<int64_t>(*row[static_cast<size_t>(sc)])] =
            *row[static_cast<size_t>(fc)];
  }

  std::vector<int64_t> steps;
  std::string ckpt_dir = (fs::path(run_dir) / "checkpoints").string();
  require(fs::exists(ckpt_dir), ErrorCode::io_error,
          "no checkpoints directory in " + run_dir);
  for (const auto& e : fs::directory_iterator(ckpt_dir)) {
    std::string n = e.path().filename().string();
    if (n.rfind("step_", 0) == 0) steps.push_back(std::stoll(n.substr(5, 8)));
  }
  require(!steps.empty(), ErrorCode::io_error, "run has no checkpoints");
  std::sort(steps.begin(), steps.end());

  CsvTable out;
  out.header = {"step", "block0", "block1", "block2", "block3", "best", "fid"};
  for (int64_t s : steps) {
    TrainerState<float> st = load_trainer(
        cfg, data.num_classes,
        (fs::path(ckpt_dir) / checkpoint_name(s)).string());
    auto ftr = extract_block_features(st.disc, trb.images);
    auto fte = extract_block_features(st.disc, teb.images);
    ProbeResult pr = linear_probe(ftr, *trb.labels, fte, *teb.labels,
                                  data.num_classes, protocol);
    std::vector<std::optional<double>> row(out.header.size(), std::nullopt);
    row[0] = static_cast<double>(s);
    for (size_t b = 0; b < pr.block_acc.size() && b < 4; ++b)
      row[1 + b] = pr.block_acc[b];
    row[5] = pr.best_acc;
    auto it = fid_at.find(s);
    if (it != fid_at.end()) row[6] = it->second;
    out.rows.push_back(std::move(row));
  }
  return out;
}

}  // namespace ssgan
