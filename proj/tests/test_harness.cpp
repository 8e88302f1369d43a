#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "aligndistill/config.hpp"
#include "aligndistill/errors.hpp"
#include "aligndistill/experiment.hpp"
#include "aligndistill/io.hpp"
#include "goldens.hpp"

using namespace aligndistill;
namespace fs = std::filesystem;

namespace {

ExperimentConfig quick_config() {
  ExperimentConfig cfg;
  cfg.train_count = 20;
  cfg.eval_count = 20;
  cfg.steps = 30;
  cfg.batch_size = 2;
  return cfg;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("aligndistill_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t text_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("defaults") {
    const ExperimentConfig cfg = parse_config(nlohmann::json::object());
    CHECK(cfg.alpha == 1.0);
    CHECK(cfg.beta == 0.03);
    CHECK(cfg.distill_layer == 3);
    CHECK(cfg.layers == 4);
    CHECK(cfg.train_count == 200);
    CHECK(cfg.learning_rate == 1e-3);
    CHECK(cfg.mode == Mode::full);
  }
  SUBCASE("round trip") {
    ExperimentConfig cfg;
    cfg.alpha = 0.5;
    cfg.extra_distill_layers = {1, 2};
    cfg.student_grid = {3, 5};
    cfg.mode = Mode::no_att;
    cfg.attention_scores = AttentionScores::probs;
    const ExperimentConfig back = parse_config(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));
    CHECK(config_hash(back) == config_hash(cfg));
  }
  SUBCASE("fail closed") {
    CHECK_THROWS_AS(parse_config({{"alpah", 1.0}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"alpha", "one"}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"student_grid", {4}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"mode", "fast"}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"distill_layer", 9}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"distill_layer", 0}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"alpha", -1.0}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"expert_channels", 64}, {"mode", "no_distill_direct"}}), ConfigError);
    CHECK_THROWS_AS(parse_config(nlohmann::json::array()), ConfigError);
  }
  SUBCASE("modes") {
    for (Mode m : kAllModes) CHECK(parse_mode(mode_name(m)) == m);
  }
  SUBCASE("hash follows the effective weights") {
    ExperimentConfig a, b;
    a.alpha = 0;
    a.beta = 0;
    b.mode = Mode::lora_only;
    CHECK(config_hash(a) == config_hash(b));
    b.output_dir = "/elsewhere";
    CHECK(config_hash(a) == config_hash(b));
    ExperimentConfig c;
    CHECK(config_hash(c) != config_hash(a));
    c.seed = 1;
    CHECK(config_hash(c) != config_hash(ExperimentConfig{}));
    CHECK(hash_hex(0xabcULL) == "0000000000000abc");
  }
}

TEST_CASE("tgrid round trip") {
  const fs::path dir = scratch_dir("tgrid");
  Tensor t({2, 3});
  const double values[] = {0.1, -1e-300, 1.0 / 3.0, 6.02214076e23, -0.0, 42};
  for (std::size_t i = 0; i < 6; ++i) t.data()[i] = values[i];
  write_tgrid(dir / "t.tgrid", t);
  const Tensor back = read_tgrid(dir / "t.tgrid");
  CHECK(back.dims() == t.dims());
  CHECK(back == t);
  CHECK(slurp(dir / "t.tgrid").rfind("TGRID1\n2 2 3\n", 0) == 0);
  CHECK_THROWS(parse_tgrid("TGRID2\n1 1\n0\n"));
  CHECK_THROWS(parse_tgrid("TGRID1\n1 3\n0\n1\n"));
  CHECK(format_double(0.1) == "0.10000000000000001");
}

TEST_CASE("heatmaps") {
  const fs::path dir = scratch_dir("heatmap");
  const std::vector<double> ramp{0.0, 1.0, 2.0, 3.0};
  CHECK(heatmap_pixels(ramp) == std::vector<int>{0, 85, 170, 255});
  CHECK(heatmap_pixels(std::vector<double>{0.7, 0.7, 0.7}) == std::vector<int>{0, 0, 0});
  emit_heatmap(ramp, {2, 2}, dir / "ramp.pgm");
  CHECK(slurp(dir / "ramp.pgm") == "P2\n2 2\n255\n0 85\n170 255\n");
  CHECK(read_heatmap_csv(heatmap_sidecar(dir / "ramp.pgm")) == ramp);
  const std::vector<double> odd{1.0 / 3.0, 1e-17};
  emit_heatmap(odd, {1, 2}, dir / "odd.pgm");
  CHECK(read_heatmap_csv(dir / "odd.csv") == odd);
  CHECK_THROWS_AS(emit_heatmap(ramp, {2, 2}, dir / "missing" / "deeper" / "x.pgm"), std::runtime_error);
  CHECK_THROWS(emit_heatmap(ramp, {3, 2}, dir / "bad.pgm"));
}

TEST_CASE("attention overlap") {
  SceneOptions opts;
  opts.min_side = 4;
  opts.max_side = 4;
  // 8×8 scene with one 4×4 entity; on a 4×4 student grid it covers a 2×2 block.
  const PlantedScene scene = make_planted_scene(0, {8, 8}, 1, opts);
  const GridShape student{4, 4};
  const auto region = project_region(scene, 1, student);
  CHECK(region.size() == 4);
  AttentionVector flat(std::vector<double>(16, 0.0));
  CHECK(attention_overlap(flat, scene, 1, student) == doctest::Approx(0.25).epsilon(1e-12));
  std::vector<double> sharp(16, 0.0);
  for (std::size_t c : region) sharp[c] = 0.25;
  AttentionVector probs(sharp);
  probs.normalized = true;
  CHECK(attention_overlap(probs, scene, 1, student) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(attention_overlap(flat, scene, 2, student), std::invalid_argument);
  CHECK_THROWS_AS(attention_overlap(AttentionVector(std::vector<double>(9, 0.0)), scene, 1, student),
                  std::invalid_argument);
}

TEST_CASE("metrics csv layout") {
  MetricsReport r;
  r.steps = {{1.5, 0.25, 0.125, 1.7625}};
  r.final = {2.0, 0.5, 0.1, 0.2, 0.3};
  r.config_hash = 0x1f;
  r.seed = 7;
  r.wall_seconds = 99;
  const std::string csv = format_metrics_csv(r);
  CHECK(csv ==
        "step,l_llm,l_vis,l_att,combined\n"
        "0,1.5,0.25,0.125,1.7625\n"
        "final,eval_lm_loss,2\n"
        "final,eval_accuracy,0.5\n"
        "final,attention_kl,0.10000000000000001\n"
        "final,similarity_mse,0.20000000000000001\n"
        "final,attention_overlap,0.29999999999999999\n"
        "final,config_hash,000000000000001f\n"
        "final,seed,7\n");
}

TEST_CASE("runs") {
  SUBCASE("deterministic, artifacts written, base untouched") {
    ExperimentConfig cfg = quick_config();
    const fs::path da = scratch_dir("run_a"), db = scratch_dir("run_b");
    cfg.output_dir = da.string();
    const MetricsReport a = run_experiment(cfg);
    cfg.output_dir = db.string();
    const MetricsReport b = run_experiment(cfg);
    CHECK(slurp(da / "metrics.csv") == slurp(db / "metrics.csv"));
    CHECK(slurp(da / "metrics.csv") == format_metrics_csv(a));
    CHECK(format_metrics_csv(a) == format_metrics_csv(b));
    CHECK(a.steps.size() == cfg.steps);
    CHECK(fs::exists(db / "summary.json"));
    CHECK(fs::exists(db / "heatmaps" / "eval0_student.pgm"));
    CHECK(fs::exists(db / "heatmaps" / "eval0_teacher.pgm"));
    CHECK(fs::exists(db / "heatmaps" / "eval0_expert.pgm"));
    std::size_t tgrids = 0;
    for (const auto& e : fs::directory_iterator(db / "checkpoint")) {
      CHECK(e.path().extension() == ".tgrid");
      ++tgrids;
    }
    CHECK(tgrids == 6 * cfg.layers * 2 + 1);
    CHECK(a.config_hash == config_hash(cfg));
  }
  SUBCASE("frozen metrics for the quick configuration") {
    const MetricsReport r = run_experiment(quick_config());
    CHECK(text_hash(format_metrics_csv(r)) == GOLDEN_QUICK_METRICS);
  }
  SUBCASE("full with zero weights is lora_only") {
    ExperimentConfig a = quick_config();
    a.alpha = 0;
    a.beta = 0;
    ExperimentConfig b = quick_config();
    b.mode = Mode::lora_only;
    CHECK(format_metrics_csv(run_experiment(a)) == format_metrics_csv(run_experiment(b)));
  }
  SUBCASE("single-loss modes zero out the other term") {
    ExperimentConfig a = quick_config();
    a.beta = 0;
    ExperimentConfig b = quick_config();
    b.mode = Mode::no_att;
    CHECK(format_metrics_csv(run_experiment(a)) == format_metrics_csv(run_experiment(b)));
    ExperimentConfig c = quick_config();
    c.mode = Mode::no_vis;
    for (const auto& s : run_experiment(c).steps) CHECK(s.combined == doctest::Approx(s.l_llm + 0.03 * s.l_att).epsilon(1e-12));
  }
  SUBCASE("seeds matter") {
    ExperimentConfig a = quick_config(), b = quick_config();
    b.seed = 1;
    CHECK(format_metrics_csv(run_experiment(a)) != format_metrics_csv(run_experiment(b)));
  }
}

TEST_CASE("run seeds are distinct streams") {
  const RunSeeds s = RunSeeds::from(0);
  const std::uint64_t all[] = {s.model, s.adapters, s.world, s.train, s.eval, s.batches};
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = i + 1; j < 6; ++j) CHECK(all[i] != all[j]);
  CHECK(RunSeeds::from(1).model != s.model);
}

TEST_CASE("grad-check command") {
  SUBCASE("passes on the small default") {
    const FiniteDiffReport r = grad_check_command(small_grad_check_config());
    CHECK(r.pass);
    CHECK(r.max_rel_error <= 1e-4);
    CHECK(r.find("rotation.layer2") != nullptr);
  }
  SUBCASE("detects a corrupted gradient") {
    GradCheckOptions opts;
    opts.corrupt_param = grad_check_command(small_grad_check_config()).params.front().name;
    const FiniteDiffReport r = grad_check_command(small_grad_check_config(), opts);
    CHECK_FALSE(r.pass);
    CHECK(r.failure == opts.corrupt_param);
  }
  SUBCASE("without alignment losses there is no rotation") {
    ExperimentConfig cfg = small_grad_check_config();
    cfg.alpha = 0;
    cfg.beta = 0;
    const FiniteDiffReport r = grad_check_command(cfg);
    CHECK(r.pass);
    CHECK(r.find("rotation.layer2") == nullptr);
  }
  SUBCASE("refuses large instances") {
    CHECK_THROWS_AS(grad_check_command(ExperimentConfig{}), ConfigError);
    ExperimentConfig cfg = small_grad_check_config();
    cfg.layers = 3;
    CHECK_THROWS_AS(grad_check_command(cfg), ConfigError);
  }
  SUBCASE("writes its report") {
    ExperimentConfig cfg = small_grad_check_config();
    cfg.output_dir = scratch_dir("grad").string();
    grad_check_command(cfg);
    const auto j = nlohmann::json::parse(slurp(fs::path(cfg.output_dir) / "grad_check.json"));
    CHECK(j.at("pass").get<bool>());
  }
}

TEST_CASE("layer sweep") {
  ExperimentConfig cfg = quick_config();
  cfg.steps = 5;
  SUBCASE("single layer") {
    cfg.output_dir = scratch_dir("sweep1").string();
    const auto results = layer_sweep(cfg, {2});
    REQUIRE(results.size() == 1);
    CHECK(results[0].layer == 2);
    const std::string csv = slurp(fs::path(cfg.output_dir) / "layer_sweep.csv");
    CHECK(csv == format_sweep_csv(results));
    CHECK(csv.rfind("layer,eval_lm_loss,eval_accuracy,attention_kl,similarity_mse,attention_overlap,config_hash,seed\n", 0) == 0);
    std::size_t lines = 0;
    for (char c : csv) lines += c == '\n';
    CHECK(lines == 2);
  }
  SUBCASE("duplicates run twice with equal results") {
    const auto results = layer_sweep(cfg, {1, 1});
    REQUIRE(results.size() == 2);
    CHECK(format_metrics_csv(results[0].report) == format_metrics_csv(results[1].report));
  }
  SUBCASE("bad layer lists") {
    CHECK_THROWS_AS(layer_sweep(cfg, {}), ConfigError);
    CHECK_THROWS_AS(layer_sweep(cfg, {0}), ConfigError);
    CHECK_THROWS_AS(layer_sweep(cfg, {5}), ConfigError);
  }
}
