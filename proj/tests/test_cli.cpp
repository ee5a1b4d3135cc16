#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>

#include "json.hpp"
#include "ssgan/cli.hpp"
#include "ssgan/csvio.hpp"
#include "ssgan/dataset.hpp"

using namespace ssgan;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Per-process scratch root; SSGAN_OUT points here for the whole binary.
const std::string& work_root() {
  static std::string root = [] {
    std::string r = (fs::temp_directory_path() / "ssgan_cli_test").string();
    fs::remove_all(r);
    fs::create_directories(r);
    setenv("SSGAN_OUT", r.c_str(), 1);
    return r;
  }();
  return root;
}

std::string wpath(const std::string& rel) { return work_root() + "/" + rel; }

int run(std::vector<std::string> args) { return cli_dispatch(args); }

const std::string& data_path() {
  static std::string p = [] {
    std::string path = wpath("d.ssds");
    REQUIRE(run({"gen-data", "--n", "600", "--size", "16", "--classes", "10",
                 "--seed", "3", "--out", path}) == 0);
    return path;
  }();
  return p;
}

std::vector<std::string> tiny_train_args(const std::string& out,
                                         const std::string& extra_variant =
                                             "ssgan") {
  return {"train",  "--data", data_path(), "--out",  out,
          "--seed", "4",      "--set",     "variant=" + extra_variant,
          "--set",  "image_size=16", "--set", "base_width=4",
          "--set",  "dz=16",  "--set",     "batch_size=8",
          "--set",  "n_rot_base=2",   "--set", "total_steps=6",
          "--set",  "eval_every=3",   "--set", "log_every=1",
          "--set",  "fid_samples=64"};
}

std::string slurp(const std::string& p) { return read_text_file(p); }

}  // namespace

TEST_CASE("gen-data emits a loadable deterministic dataset") {
  ImageDataset ds = load_dataset(data_path());
  CHECK(ds.size() == 600);
  CHECK(ds.image_size() == 16);
  CHECK(ds.num_classes == 10);
  std::string again = wpath("d2.ssds");
  CHECK(run({"gen-data", "--n", "600", "--size", "16", "--classes", "10",
             "--seed", "3", "--out", again}) == 0);
  CHECK(slurp(data_path()) == slurp(again));
}

TEST_CASE("train twice with one seed produces bitwise identical run content") {
  CHECK(run(tiny_train_args(wpath("runA"))) == 0);
  CHECK(run(tiny_train_args(wpath("runB"))) == 0);
  for (const char* f : {"manifest.json", "config.cfg", "metrics.csv",
                        "summary.json"})
    CHECK(slurp(wpath("runA/") + f) == slurp(wpath("runB/") + f));
  for (auto& e : fs::directory_iterator(wpath("runA/checkpoints"))) {
    std::string name = e.path().filename().string();
    CHECK(slurp(wpath("runA/checkpoints/") + name) ==
          slurp(wpath("runB/checkpoints/") + name));
  }
  // exact directory contract
  std::vector<std::string> names;
  for (auto& e : fs::directory_iterator(wpath("runA")))
    names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  CHECK(names == std::vector<std::string>{"checkpoints", "config.cfg",
                                          "manifest.json", "metrics.csv",
                                          "summary.json"});
  // manifest records the dataset hash and resolved config
  json m = json::parse(slurp(wpath("runA/manifest.json")));
  CHECK(m["dataset"]["content_hash"].get<std::string>().size() == 16);
  CHECK(m["config"]["variant"] == "ssgan");
}

TEST_CASE("fid of a dataset against itself is zero") {
  std::string out = wpath("fid.json");
  CHECK(run({"fid", "--a", data_path(), "--b", data_path(), "--samples", "256",
             "--out", out}) == 0);
  json j = json::parse(slurp(out));
  CHECK(std::abs(j["fid"].get<double>()) <= 1e-6);
  CHECK(j["n_a"] == 256);
}

TEST_CASE("fid of a trained run against the dataset is finite") {
  std::string out = wpath("fid_run.json");
  CHECK(run({"fid", "--a", wpath("runA"), "--b", data_path(), "--samples",
             "128", "--out", out}) == 0);
  json j = json::parse(slurp(out));
  CHECK(j["fid"].get<double>() >= 0);
}

TEST_CASE("probe on a run checkpoint emits per-block accuracies") {
  std::string out = wpath("probe.json");
  CHECK(run({"probe", "--run", wpath("runA"), "--data", data_path(),
             "--epochs", "3", "--train-samples", "200", "--test-samples",
             "100", "--out", out}) == 0);
  json j = json::parse(slurp(out));
  for (int b = 0; b < 4; ++b) {
    double a = j["block" + std::to_string(b)].get<double>();
    CHECK(a >= 0);
    CHECK(a <= 1);
  }
  CHECK(j["step"] == 6);
  // curve mode writes one row per checkpoint
  std::string curve = wpath("probe_curve.csv");
  CHECK(run({"probe", "--run", wpath("runA"), "--data", data_path(),
             "--epochs", "2", "--train-samples", "150", "--test-samples",
             "80", "--curve", "--out", curve}) == 0);
  CsvTable t = CsvTable::load(curve);
  CHECK(t.rows.size() == 3);  // checkpoints at 0, 3, 6
}

TEST_CASE("report aggregates runs found under a root") {
  CHECK(run({"report", "--runs", wpath("runA") + "," + wpath("runB"), "--out",
             wpath("rep")}) == 0);
  CHECK(fs::exists(wpath("rep.json")));
  CHECK(fs::exists(wpath("rep.csv")));
  json j = json::parse(slurp(wpath("rep.json")));
  // both runs share one config cell
  int cells = 0;
  for (auto& [k, v] : j.items())
    if (k != "_row_labels") ++cells;
  CHECK(cells == 1);
}

TEST_CASE("embedder subcommand prepares a reusable embedder") {
  std::string out = wpath("emb_pca.ckpt");
  CHECK(run({"embedder", "--data", data_path(), "--kind", "pca", "--dim", "12",
             "--out", out}) == 0);
  CHECK(fs::exists(out));
  // train with the prepared embedder fills fid cells
  auto args = tiny_train_args(wpath("runE"));
  args.push_back("--embedder");
  args.push_back(out);
  CHECK(run(args) == 0);
  CsvTable m = CsvTable::load(wpath("runE/metrics.csv"));
  int fid_col = m.column("fid");
  bool any = false;
  for (auto& row : m.rows)
    if (row[static_cast<size_t>(fid_col)]) any = true;
  CHECK(any);
}

TEST_CASE("forgetting subcommand writes curves and a summary") {
  CHECK(run({"forgetting", "--data", data_path(), "--period", "20", "--tasks",
             "2", "--cycles", "2", "--seeds", "1", "--eval-per-class", "8",
             "--out", wpath("forget")}) == 0);
  json j = json::parse(slurp(wpath("forget/summary.json")));
  CHECK(j.contains("vanilla"));
  CHECK(j.contains("self_supervised"));
  CsvTable t = CsvTable::load(
      j["vanilla"]["s1"]["curve_csv"].get<std::string>());
  CHECK(t.rows.size() == 80);
}

TEST_CASE("usage and config errors exit nonzero") {
  CHECK(run({"train", "--data", data_path(), "--bogus-flag"}) != 0);
  CHECK(run({"no-such-command"}) != 0);
  auto args = tiny_train_args(wpath("runBad"));
  args.push_back("--set");
  args.push_back("unknown_key=1");
  CHECK(run(args) != 0);
  CHECK(run({"fid", "--a", "missing.ssds", "--b", "missing.ssds"}) != 0);
  // sweep grid validation
  CHECK(run({"sweep", "--grid", "bogus", "--data", data_path()}) != 0);
}

TEST_CASE("cli resume continues a run in place") {
  auto args = tiny_train_args(wpath("runR"));
  CHECK(run(args) == 0);
  // rerunning with --resume is a no-op at the final step and exits cleanly
  args.push_back("--resume");
  CHECK(run(args) == 0);
  CsvTable m = CsvTable::load(wpath("runR/metrics.csv"));
  CHECK(m.rows.size() == 6);
}
