// Command-line front end: training runs, ablations, sweeps and small
// utilities over TGRID files.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aligndistill/config.hpp"
#include "aligndistill/errors.hpp"
#include "aligndistill/experiment.hpp"
#include "aligndistill/io.hpp"
#include "aligndistill/losses.hpp"

namespace ad = aligndistill;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "output directory");
}

ad::ExperimentConfig resolve(const Common& c, ad::ExperimentConfig base = {}) {
  ad::ExperimentConfig cfg = c.config.empty() ? base : ad::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.validate();
  return cfg;
}

void print_final(const ad::MetricsReport& r) {
  const auto& f = r.final;
  std::printf("%-18s lm_loss %.6f  acc %.4f  att_kl %.6f  sim_mse %.6f  overlap %.4f  (%.1fs, hash %s)\n",
              ad::mode_name(r.mode), f.eval_lm_loss, f.eval_accuracy, f.attention_kl, f.similarity_mse,
              f.attention_overlap, r.wall_seconds, ad::hash_hex(r.config_hash).c_str());
}

// Rank-3 (h, w, k) tensors carry their grid; rank-2 (h, w) fields are single-channel grids.
ad::FeatureGrid as_grid(const ad::Tensor& t, const std::string& what) {
  if (t.rank() == 3) return ad::FeatureGrid({t.dims()[0], t.dims()[1]}, t);
  if (t.rank() == 2) return ad::FeatureGrid({t.dims()[0], t.dims()[1]}, t.reshaped({t.dims()[0], t.dims()[1], 1}));
  throw ad::ConfigError(what + " must be a rank-2 (h, w) or rank-3 (h, w, k) grid");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aligndistill: alignment distillation on a toy vision-language transformer"};
  app.require_subcommand(1);

  Common run_opts;
  std::string mode;
  auto* run = app.add_subcommand("run", "train and evaluate one configuration");
  add_common(run, run_opts);
  run->add_option("--mode", mode, "full, no_vis, no_att, lora_only or no_distill_direct");

  Common abl_opts;
  auto* abl = app.add_subcommand("ablation", "run all five modes with one seed");
  add_common(abl, abl_opts);

  Common gc_opts;
  std::string corrupt;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of the training gradients");
  add_common(gc, gc_opts);
  gc->add_option("--corrupt", corrupt, "perturb the analytic gradient of this parameter")->group("");

  Common sweep_opts;
  std::vector<std::size_t> layers;
  auto* sweep = app.add_subcommand("layer-sweep", "one run per distillation layer");
  add_common(sweep, sweep_opts);
  sweep->add_option("--layers", layers, "layers to sweep (default: every layer)")->delimiter(',');

  std::string interp_in, interp_out;
  std::vector<std::size_t> size;
  bool normalize = false;
  auto* interp = app.add_subcommand("interp", "bilinear resize of a TGRID grid");
  interp->add_option("input", interp_in, "TGRID file, (h, w) or (h, w, k)")->required()->check(CLI::ExistingFile);
  interp->add_option("--size", size, "target rows and cols")->expected(2)->required();
  interp->add_option("--out", interp_out, "output TGRID file (default: stdout)");
  interp->add_flag("--normalize", normalize, "l2-normalize each resized token");

  std::string student_feat, expert_feat, student_att, expert_att, rotation_path;
  double alpha = 1.0, beta = 0.03;
  auto* losses = app.add_subcommand("losses", "alignment losses from TGRID inputs");
  losses->add_option("--student-features", student_feat, "(h, w, d) student visual states")->check(CLI::ExistingFile);
  losses->add_option("--expert-features", expert_feat, "(H, W, b) expert features")->check(CLI::ExistingFile);
  losses->add_option("--rotation", rotation_path, "d×d rotation W")->check(CLI::ExistingFile);
  losses->add_option("--student-attention", student_att, "heads × N raw scores, or N")->check(CLI::ExistingFile);
  losses->add_option("--expert-attention", expert_att, "(H, W) raw expert scores")->check(CLI::ExistingFile);
  losses->add_option("--alpha", alpha);
  losses->add_option("--beta", beta);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      ad::ExperimentConfig cfg = resolve(run_opts);
      if (!mode.empty()) cfg.mode = ad::parse_mode(mode);
      print_final(ad::run_experiment(cfg));
    } else if (abl->parsed()) {
      for (const auto& r : ad::ablation(resolve(abl_opts))) print_final(r.report);
    } else if (gc->parsed()) {
      ad::GradCheckOptions opts;
      opts.corrupt_param = corrupt;
      const auto report = ad::grad_check_command(resolve(gc_opts, ad::small_grad_check_config()), opts);
      for (const auto& e : report.params)
        std::printf("%-22s max_rel_error %.3e  %s\n", e.name.c_str(), e.max_rel_error, e.pass ? "ok" : "FAIL");
      std::printf("%s (max_rel_error %.3e, tolerance %.0e)\n", report.pass ? "PASS" : ("FAIL: " + report.failure).c_str(),
                  report.max_rel_error, report.tolerance);
      return report.pass ? 0 : 1;
    } else if (sweep->parsed()) {
      const ad::ExperimentConfig cfg = resolve(sweep_opts);
      if (layers.empty())
        for (std::size_t l = 1; l <= cfg.layers; ++l) layers.push_back(l);
      std::cout << ad::format_sweep_csv(ad::layer_sweep(cfg, layers));
    } else if (interp->parsed()) {
      const ad::Tensor in = ad::read_tgrid(interp_in);
      const ad::GridShape target{size[0], size[1]};
      ad::Tensor out;
      if (in.rank() == 2 && !normalize) {
        out = ad::bilinear_resize(in, target);
      } else {
        const ad::FeatureGrid grid = as_grid(in, "input");
        ad::FeatureGrid resized(target, grid.channels());
        if (normalize) {
          resized = ad::interpolate_features(grid, target);
        } else {
          for (std::size_t ch = 0; ch < grid.channels(); ++ch) {
            const ad::Tensor plane = ad::bilinear_resize(grid.channel(ch), target);
            for (std::size_t t = 0; t < target.tokens(); ++t) resized.token(t)[ch] = plane[t];
          }
        }
        out = resized.values();
      }
      if (interp_out.empty()) std::cout << ad::format_tgrid(out);
      else ad::write_tgrid(interp_out, out);
    } else if (losses->parsed()) {
      nlohmann::json result;
      std::optional<ad::GridShape> student_grid;
      if (!student_feat.empty() || !expert_feat.empty()) {
        if (student_feat.empty() || expert_feat.empty())
          throw ad::ConfigError("L_vis needs both --student-features and --expert-features");
        const ad::FeatureGrid student = as_grid(ad::read_tgrid(student_feat), "student features");
        const ad::FeatureGrid expert = as_grid(ad::read_tgrid(expert_feat), "expert features");
        student_grid = student.shape();
        ad::Tensor x = student.token_matrix();
        if (!rotation_path.empty()) x = ad::rotate_rows(x, ad::read_tgrid(rotation_path));
        const auto se = ad::similarity_matrix(ad::interpolate_features(expert, student.shape()));
        result["l_vis"] = ad::visual_alignment_loss(se, ad::similarity_matrix(x));
      }
      if (!student_att.empty() || !expert_att.empty()) {
        if (student_att.empty() || expert_att.empty())
          throw ad::ConfigError("L_att needs both --student-attention and --expert-attention");
        const ad::Tensor s = ad::read_tgrid(student_att);
        const ad::AttentionVector student =
            s.rank() == 2 ? ad::average_heads(s) : ad::AttentionVector{s.values(), false};
        const ad::Tensor e = ad::read_tgrid(expert_att);
        if (e.rank() != 2) throw ad::ConfigError("expert attention must be an (H, W) grid");
        ad::GridShape target = student_grid.value_or(ad::GridShape{0, 0});
        if (!student_grid) {
          // Without student features, assume a square student grid.
          std::size_t side = 0;
          while ((side + 1) * (side + 1) <= student.size()) ++side;
          if (side * side != student.size())
            throw ad::ConfigError("student attention length is not square; pass --student-features for the grid");
          target = {side, side};
        }
        const ad::AttentionVector teacher{
            ad::interpolate_attention(e.values(), {e.dims()[0], e.dims()[1]}, target), false};
        result["l_att"] = ad::attention_alignment_loss(teacher, student);
      }
      if (result.empty()) throw ad::ConfigError("losses: give feature and/or attention inputs");
      const double l_vis = result.value("l_vis", 0.0);
      const double l_att = result.value("l_att", 0.0);
      result["weighted"] = alpha * l_vis + beta * l_att;
      std::cout << result.dump(2) << "\n";
    }
  } catch (const ad::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
