// satslab: dataset generation, protocol runs, ablation sweeps and plot data.
// Exit codes: 0 success, 1 usage or configuration, 2 data, 3 numerical abort.

#include <CLI11.hpp>

#include <iostream>

#include "satslab/cli/commands.hpp"

using namespace satslab;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_file;
  std::string preset;
  std::string data;
  std::string seeds = "1";
  std::string out;
  bool force = false;
  bool quiet = false;

  std::optional<fs::path> opt_path(const std::string& s) const {
    return s.empty() ? std::nullopt : std::optional<fs::path>(s);
  }
  std::optional<std::string> opt_preset() const { return preset.empty() ? std::nullopt : std::optional(preset); }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "Run configuration JSON")->check(CLI::ExistingFile);
  cmd->add_option("--preset", c.preset, "Built-in configuration (see `satslab presets`)");
  cmd->add_option("--data", c.data, "Dataset directory written by `satslab generate`");
  cmd->add_option("--seeds", c.seeds, "Comma-separated seeds")->capture_default_str();
  cmd->add_option("--out", c.out, "Output root")->required();
  cmd->add_flag("--force", c.force, "Overwrite existing run directories");
  cmd->add_flag("--quiet", c.quiet, "Only print final results");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"satslab: continual semantic segmentation with self-attention transfer on synthetic scenes"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset");
  std::string spec_file, gen_preset, gen_out;
  std::optional<std::uint64_t> gen_seed;
  bool gen_force = false;
  gen->add_option("--spec", spec_file, "Scene spec JSON (defaults apply to missing fields)")->check(CLI::ExistingFile);
  gen->add_option("--preset", gen_preset, "Use the scene matching a preset's class count");
  gen->add_option("--seed", gen_seed, "Override the spec's seed");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_flag("--force", gen_force, "Overwrite a non-empty output directory");

  Common run_opts;
  bool run_no_snapshots = false;
  auto* run = app.add_subcommand("run", "Run a continual-learning protocol for each seed");
  add_common(run, run_opts);
  run->add_flag("--no-snapshots", run_no_snapshots, "Skip per-stage model snapshots");

  Common abl_opts;
  std::string axis;
  bool abl_snapshots = false;
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid and write a comparison table");
  add_common(ablate, abl_opts);
  ablate->add_option("--axis", axis, "components | blocks | pooling | distill-source | baselines")->required();
  ablate->add_flag("--snapshots", abl_snapshots, "Keep per-stage model snapshots");

  std::vector<std::string> plot_runs;
  std::string plot_out;
  auto* plot = app.add_subcommand("plot-data", "Aggregate per-stage mIoU across runs into CSV");
  plot->add_option("--runs", plot_runs, "Run directories, or roots searched for runs");
  plot->add_option("--out", plot_out, "Output CSV (stdout when omitted)");

  std::string preset_name;
  auto* presets = app.add_subcommand("presets", "List presets, or print one as JSON");
  presets->add_option("name", preset_name, "Preset to print");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) {
      cli::Logger log;
      cli::GenerateOptions o;
      if (!spec_file.empty()) o.spec_file = spec_file;
      if (!gen_preset.empty()) o.preset = gen_preset;
      o.seed = gen_seed;
      o.out = gen_out;
      o.force = gen_force;
      cli::cmd_generate(o, log);
    } else if (*run) {
      cli::Logger log(&std::cerr);
      cli::Logger quiet_log(nullptr);
      cli::RunOptions o;
      o.config_file = run_opts.opt_path(run_opts.config_file);
      o.preset = run_opts.opt_preset();
      o.data = run_opts.opt_path(run_opts.data);
      o.seeds = cli::parse_seeds(run_opts.seeds);
      o.out = run_opts.out;
      o.force = run_opts.force;
      o.save_snapshots = !run_no_snapshots;
      const auto results = cli::cmd_run(o, run_opts.quiet ? quiet_log : log);
      for (const auto& r : results) std::cout << r.run_dir->string() << '\n';
    } else if (*ablate) {
      cli::Logger log(&std::cerr);
      cli::Logger quiet_log(nullptr);
      cli::AblateOptions o;
      o.config_file = abl_opts.opt_path(abl_opts.config_file);
      o.preset = abl_opts.opt_preset();
      o.data = abl_opts.opt_path(abl_opts.data);
      o.axis = axis;
      o.seeds = cli::parse_seeds(abl_opts.seeds);
      o.out = abl_opts.out;
      o.force = abl_opts.force;
      o.save_snapshots = abl_snapshots;
      cli::cmd_ablate(o, abl_opts.quiet ? quiet_log : log);
    } else if (*plot) {
      std::vector<fs::path> paths(plot_runs.begin(), plot_runs.end());
      const auto csv = cli::series_csv(cli::plot_series(paths));
      if (plot_out.empty()) std::cout << csv;
      else io::write_text(plot_out, csv);
    } else if (*presets) {
      std::cout << cli::cmd_presets(preset_name.empty() ? std::nullopt : std::optional(preset_name));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  }
  return 0;
}
