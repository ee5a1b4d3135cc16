#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "ssgan/csvio.hpp"
#include "ssgan/optim.hpp"
#include "ssgan/train.hpp"

using namespace ssgan;
namespace fs = std::filesystem;
using F = float;
using D = double;

namespace {

std::string fresh_dir(const char* name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p.string();
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.image_size = 16;
  cfg.base_width = 4;
  cfg.dz = 16;
  cfg.batch_size = 8;
  cfg.n_rot_base = 2;
  cfg.total_steps = 10;
  cfg.log_every = 1;
  cfg.eval_every = 5;
  cfg.fid_samples = 64;
  cfg.seed = 5;
  return cfg;
}

const ImageDataset& tiny_data() {
  static ImageDataset ds = synthetic_shapes_dataset(300, 16, 10, 21);
  return ds;
}

std::vector<char> slurp(const std::string& path) {
  std::string s = read_text_file(path);
  return {s.begin(), s.end()};
}

}  // namespace

TEST_CASE("adam: first-step magnitude is lr under bias correction") {
  Tensor<D> p({1}, {1.0}), g({1}, {0.1}), m({1}), v({1});
  adam_update(p, g, m, v, 1, 1e-3, 0.0, 0.9);
  // |delta| = lr * 0.1 / (0.1 + eps)
  CHECK(std::abs(1.0 - p.v[0]) ==
        doctest::Approx(1e-3 * 0.1 / (0.1 + 1e-8)).epsilon(1e-9));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Tensor<D> p({3}, {1, -2, 0.5}), g({3}), m({3}), v({3});
  Tensor<D> before = p;
  for (int t = 1; t <= 5; ++t) adam_update(p, g, m, v, t, 1e-2, 0.9, 0.999);
  CHECK(p.v == before.v);
}

TEST_CASE("adam: descends a quadratic, matching a scalar recurrence oracle") {
  // optimize f(p) = p^2 from p0 = 1 with lr 0.1
  Tensor<D> p({1}, {1.0}), m({1}), v({1});
  double op = 1.0, om = 0, ov = 0;  // independent scalar recurrence
  double prev = 1.0;
  for (int t = 1; t <= 10; ++t) {
    Tensor<D> g({1}, {2 * p.v[0]});
    adam_update(p, g, m, v, t, 0.1, 0.9, 0.999);
    double og = 2 * op;
    om = 0.9 * om + 0.1 * og;
    ov = 0.999 * ov + 0.001 * og * og;
    op -= 0.1 * (om / (1 - std::pow(0.9, t))) /
          (std::sqrt(ov / (1 - std::pow(0.999, t))) + 1e-8);
    CHECK(p.v[0] == doctest::Approx(op).epsilon(1e-12));
    CHECK(p.v[0] < prev);  // strictly decreasing toward 0
    prev = p.v[0];
  }
}

TEST_CASE("adam: shape mismatch is an error") {
  Tensor<D> p({2}), g({3}), m({2}), v({2});
  CHECK_THROWS_AS(adam_update(p, g, m, v, 1, 1e-3, 0.9, 0.999), Error);
}

TEST_CASE("anneal_alpha: schedules") {
  CHECK(anneal_alpha(AlphaSchedule::constant, 0.2, 12345, 0) == 0.2);
  CHECK(anneal_alpha(AlphaSchedule::linear_to_zero, 0.2, 1000, 1000) == 0.0);
  CHECK(anneal_alpha(AlphaSchedule::linear_to_zero, 0.2, 500, 1000) ==
        doctest::Approx(0.1));
  CHECK(anneal_alpha(AlphaSchedule::linear_to_zero, 0.2, 2000, 1000) == 0.0);
  CHECK_THROWS_AS(anneal_alpha(AlphaSchedule::constant, 0.2, -1, 0), Error);
}

TEST_CASE("config: round trip, defaults, unknown keys") {
  TrainConfig cfg = tiny_config();
  cfg.variant = Variant::ssgan_sbn;
  cfg.regularizer = Regularizer::gradient_penalty;
  cfg.lambda = 1;
  TrainConfig back = TrainConfig::parse_text(cfg.serialize());
  CHECK(back.serialize() == cfg.serialize());
  CHECK(back.config_hash() == cfg.config_hash());
  CHECK_THROWS_AS(TrainConfig::parse_text("nonsense_key = 3\n"), Error);
  CHECK_THROWS_AS(TrainConfig::parse_text("alpha == 3\n"), Error);
  TrainConfig bad = tiny_config();
  bad.d_steps = 3;
  CHECK_THROWS_AS(bad.validate(), Error);
  // seed does not change the cell hash
  TrainConfig s2 = cfg;
  s2.seed = 999;
  CHECK(s2.config_hash() == cfg.config_hash());
}

TEST_CASE("train_step: uncond leaves rotation heads untouched") {
  TrainConfig cfg = tiny_config();
  cfg.variant = Variant::uncond;
  auto st = init_trainer<F>(cfg, tiny_data().num_classes);
  SplitView split = split_dataset(tiny_data(), 0.2, tiny_data().content_hash());
  int rot_w = st.disc.rot_head.w;
  Tensor<F> before = st.disc.params.at(rot_w);
  for (int64_t s = 0; s < 3; ++s) train_step(st, tiny_data(), split.train, cfg, s);
  CHECK(st.disc.params.at(rot_w).v == before.v);
  // but the gan head moved
  CHECK(st.disc.params.at(st.disc.gan_head.w).v !=
        init_trainer<F>(cfg, 10).disc.params.at(st.disc.gan_head.w).v);
}

TEST_CASE("train_step: rot_only trains exactly the rotation pathway") {
  TrainConfig cfg = tiny_config();
  cfg.variant = Variant::rot_only;
  auto st = init_trainer<F>(cfg, tiny_data().num_classes);
  SplitView split = split_dataset(tiny_data(), 0.2, tiny_data().content_hash());
  TensorStore gen_before = state_to_store(st);
  Tensor<F> gan_before = st.disc.params.at(st.disc.gan_head.w);
  Tensor<F> rot_before = st.disc.params.at(st.disc.rot_head.w);
  Tensor<F> trunk_before = st.disc.params.at(st.disc.blocks[0].c1.w);
  for (int64_t s = 0; s < 3; ++s) train_step(st, tiny_data(), split.train, cfg, s);
  // generator untouched, gan head untouched, rotation head and trunk trained
  for (int i = 0; i < st.gen.params.count(); ++i)
    CHECK(st.gen.params.at(i).v ==
          gen_before.get<F>(st.gen.params.names[static_cast<size_t>(i)]).v);
  CHECK(st.disc.params.at(st.disc.gan_head.w).v == gan_before.v);
  CHECK(st.disc.params.at(st.disc.rot_head.w).v != rot_before.v);
  CHECK(st.disc.params.at(st.disc.blocks[0].c1.w).v != trunk_before.v);
}

TEST_CASE("train_step: alternating phases are parameter-isolated bitwise") {
  TrainConfig cfg = tiny_config();
  auto st = init_trainer<F>(cfg, tiny_data().num_classes);
  SplitView split = split_dataset(tiny_data(), 0.2, tiny_data().content_hash());
  // D phase does not move generator parameters or optimizer state
  TensorStore snap = state_to_store(st);
  train_step(st, tiny_data(), split.train, cfg, 0, StepPhase::d_only);
  for (int i = 0; i < st.gen.params.count(); ++i)
    CHECK(st.gen.params.at(i).v ==
          snap.get<F>(st.gen.params.names[static_cast<size_t>(i)]).v);
  CHECK(st.opt_g.t == 0);
  // G phase does not move discriminator parameters or optimizer state
  TensorStore snap2 = state_to_store(st);
  train_step(st, tiny_data(), split.train, cfg, 0, StepPhase::g_only);
  for (int i = 0; i < st.disc.params.count(); ++i)
    CHECK(st.disc.params.at(i).v ==
          snap2.get<F>(st.disc.params.names[static_cast<size_t>(i)]).v);
}

TEST_CASE("run_experiment: determinism, layout, and empty-run degenerate case") {
  TrainConfig cfg = tiny_config();
  EvalPlan plan;  // no FID
  std::string a = fresh_dir("ssgan_run_a");
  std::string b = fresh_dir("ssgan_run_b");
  run_experiment<F>(cfg, tiny_data(), plan, a);
  run_experiment<F>(cfg, tiny_data(), plan, b);
  CHECK(slurp(a + "/metrics.csv") == slurp(b + "/metrics.csv"));
  CHECK(slurp(a + "/summary.json") == slurp(b + "/summary.json"));
  CHECK(slurp(a + "/checkpoints/" + checkpoint_name(10)) ==
        slurp(b + "/checkpoints/" + checkpoint_name(10)));

  // directory contains exactly the contract entries
  std::vector<std::string> names;
  for (auto& e : fs::directory_iterator(a))
    names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  CHECK(names == std::vector<std::string>{"checkpoints", "config.cfg",
                                          "manifest.json", "metrics.csv",
                                          "summary.json"});

  // total_steps = 0: empty log, initial checkpoint only
  TrainConfig zero = cfg;
  zero.total_steps = 0;
  std::string z = fresh_dir("ssgan_run_zero");
  run_experiment<F>(zero, tiny_data(), plan, z);
  CsvTable m = CsvTable::load(z + "/metrics.csv");
  CHECK(m.rows.empty());
  int ckpts = 0;
  for (auto& e : fs::directory_iterator(z + "/checkpoints")) {
    ++ckpts;
    CHECK(e.path().filename().string() == checkpoint_name(0));
  }
  CHECK(ckpts == 1);
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(z);
}

TEST_CASE("run_experiment: kill-and-resume reproduces the uninterrupted run") {
  TrainConfig cfg = tiny_config();
  cfg.total_steps = 12;
  cfg.eval_every = 4;
  EvalPlan plan;
  std::string full = fresh_dir("ssgan_full");
  std::string part = fresh_dir("ssgan_part");
  run_experiment<F>(cfg, tiny_data(), plan, full);
  RunOptions killed;
  killed.stop_after = 7;  // killed mid-interval, after the step-4 checkpoint
  RunSummary s1 = run_experiment<F>(cfg, tiny_data(), plan, part, killed);
  CHECK(s1.interrupted);
  RunOptions resume;
  resume.resume = true;
  run_experiment<F>(cfg, tiny_data(), plan, part, resume);
  CHECK(slurp(full + "/metrics.csv") == slurp(part + "/metrics.csv"));
  for (int64_t s : {4, 8, 12})
    CHECK(slurp(full + "/checkpoints/" + checkpoint_name(s)) ==
          slurp(part + "/checkpoints/" + checkpoint_name(s)));
  // resume validates identity of the dataset
  ImageDataset other = synthetic_shapes_dataset(300, 16, 10, 99);
  CHECK_THROWS_AS(run_experiment<F>(cfg, other, plan, part, resume), Error);
  fs::remove_all(full);
  fs::remove_all(part);
}

TEST_CASE("ssgan with alpha=beta=0 reproduces uncond bitwise") {
  TrainConfig a = tiny_config();
  a.variant = Variant::ssgan;
  a.alpha = 0;
  a.beta = 0;
  a.total_steps = 30;
  a.eval_every = 30;
  TrainConfig b = a;
  b.variant = Variant::uncond;
  b.alpha = 0.2;  // uncond ignores the weights entirely
  b.beta = 1.0;
  EvalPlan plan;
  std::string da = fresh_dir("ssgan_zero_a");
  std::string db = fresh_dir("ssgan_zero_b");
  run_experiment<F>(a, tiny_data(), plan, da);
  run_experiment<F>(b, tiny_data(), plan, db);
  CHECK(slurp(da + "/checkpoints/" + checkpoint_name(30)) ==
        slurp(db + "/checkpoints/" + checkpoint_name(30)));
  fs::remove_all(da);
  fs::remove_all(db);
}

TEST_CASE("checkpoint store: bitwise round trip") {
  TrainConfig cfg = tiny_config();
  auto st = init_trainer<F>(cfg, 10);
  std::string p1 = fresh_dir("ssgan_ck") + ".ckpt";
  save_store(state_to_store(st), p1);
  TensorStore back = load_store(p1);
  std::string p2 = p1 + "2";
  save_store(back, p2);
  CHECK(slurp(p1) == slurp(p2));
  // corrupt magic
  auto bytes = read_text_file(p1);
  bytes[0] = 'Z';
  write_text_file(p1, bytes);
  CHECK_THROWS_AS(load_store(p1), Error);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("sweep grids: table 2 has 9 rows, alpha grid has 3") {
  TrainConfig base = tiny_config();
  SweepSpec t2 = table2_grid(base);
  CHECK(t2.configs.size() == 9);
  int gp = 0, sn = 0;
  for (auto& c : t2.configs) {
    if (c.regularizer == Regularizer::gradient_penalty) {
      ++gp;
      CHECK((c.lambda == 1 || c.lambda == 10));
    } else {
      ++sn;
    }
    CHECK((c.d_steps == 1 || c.d_steps == 2));
  }
  CHECK(gp == 6);
  CHECK(sn == 3);
  SweepSpec ag = alpha_grid(base);
  REQUIRE(ag.configs.size() == 3);
  CHECK(ag.configs[0].alpha == 0.2);
  CHECK(ag.configs[1].alpha == 0.5);
  CHECK(ag.configs[2].alpha == 1.0);
}

TEST_CASE("run_sweep: manifests per run and hand-checked aggregation") {
  TrainConfig base = tiny_config();
  base.total_steps = 2;
  base.eval_every = 2;
  base.log_every = 1;
  SweepSpec spec = alpha_grid(base);
  spec.seeds = {1, 2};
  EvalPlan plan;
  std::string root = fresh_dir("ssgan_sweep");
  SweepResult res = run_sweep(spec, tiny_data(), plan, root, 2);
  CHECK(res.runs.size() == 6);
  int manifests = 0;
  std::vector<std::string> dirs;
  for (auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == "manifest.json") {
      ++manifests;
      dirs.push_back(e.path().parent_path().string());
    }
  CHECK(manifests == 6);
  CHECK(fs::exists(root + "/sweep_summary.json"));
  CHECK(fs::exists(root + "/sweep_summary.csv"));
  fs::remove_all(root);
}

TEST_CASE("aggregation: mean and std equal hand-computed statistics") {
  // synthesize three runs of one config with known fid summaries
  TrainConfig cfg = tiny_config();
  cfg.total_steps = 1;
  cfg.eval_every = 1;
  std::string root = fresh_dir("ssgan_agg");
  std::vector<std::string> dirs;
  std::vector<double> bests = {10.0, 14.0, 18.0};
  for (int i = 0; i < 3; ++i) {
    cfg.seed = static_cast<uint64_t>(i + 1);
    std::string dir = root + "/r" + std::to_string(i);
    EvalPlan plan;
    run_experiment<F>(cfg, tiny_data(), plan, dir);
    // overwrite the summary with known numbers
    std::string s = "{\n  \"config_hash\": \"cafe\",\n  \"fid\": {\"best\": " +
                    format_g17(bests[static_cast<size_t>(i)]) +
                    ", \"final\": " + format_g17(bests[static_cast<size_t>(i)] + 1) +
                    ", \"collapsed\": false}\n}\n";
    write_text_file(dir + "/summary.json", s);
    dirs.push_back(dir);
  }
  aggregate_runs(dirs, root + "/agg.json", root + "/agg.csv");
  CsvTable agg = CsvTable::load(root + "/agg.csv");
  REQUIRE(agg.rows.size() == 1);
  // hand-computed: mean 14, sample std 4, min 10
  CHECK(*agg.rows[0][agg.column("fid_best_mean")] == doctest::Approx(14.0));
  CHECK(*agg.rows[0][agg.column("fid_best_std")] == doctest::Approx(4.0));
  CHECK(*agg.rows[0][agg.column("fid_best_min")] == doctest::Approx(10.0));
  fs::remove_all(root);
}

TEST_CASE("train_step: non-finite loss carries the component name") {
  TrainConfig cfg = tiny_config();
  auto st = init_trainer<F>(cfg, tiny_data().num_classes);
  SplitView split = split_dataset(tiny_data(), 0.2, tiny_data().content_hash());
  // poison the rotation head bias; the NLL propagates the NaN into d_total
  st.disc.params.at(st.disc.rot_head.b).v[0] = std::numeric_limits<F>::quiet_NaN();
  try {
    train_step(st, tiny_data(), split.train, cfg, 0);
    FAIL("expected non_finite error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::non_finite);
    CHECK(std::string(e.what()).find("d_total") != std::string::npos);
  }
}
