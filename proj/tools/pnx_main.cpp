#include <CLI11.hpp>

#include "pnx/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"sparse pillar 3D detection pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed = 0;
  int precision = 0;
  app.add_option("--config", config_path, "JSON config file");
  auto* seed_opt = app.add_option("--seed", seed, "master random seed");
  auto* prec_opt = app.add_option("--precision", precision, "32 or 64")
                       ->check(CLI::IsMember({32, 64}));

  auto* synth = app.add_subcommand("synth", "write synthetic scene files");
  int synth_scenes = 1;
  std::string synth_out;
  synth->add_option("--scenes", synth_scenes, "number of scenes");
  synth->add_option("--out", synth_out, "output directory");

  auto* forward = app.add_subcommand("forward", "run one cloud end to end");
  std::string fw_weights, fw_input, fw_out;
  forward->add_option("--weights", fw_weights, "checkpoint file");
  forward->add_option("--input", fw_input, "point cloud .bin")->required();
  forward->add_option("--out", fw_out, "detections JSON path");

  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient suite");
  double gc_tol = 1e-5;
  std::string gc_out, gc_only;
  gradcheck->add_option("--tol", gc_tol, "relative error tolerance");
  gradcheck->add_option("--out", gc_out, "CSV report path (default stdout)");
  gradcheck->add_option("--only", gc_only, "run a single named check");

  auto* bench = app.add_subcommand("bench", "rulebook and conv timings");
  std::vector<double> bench_densities{0.005, 0.02, 0.1};
  std::string bench_out;
  bench->add_option("--density", bench_densities, "active-site densities");
  bench->add_option("--out", bench_out, "CSV output path");

  auto* train = app.add_subcommand("train-toy", "overfit synthetic scenes");
  int tr_steps = 500, tr_scenes = 3;
  double tr_lr = 1e-3;
  std::string tr_out;
  train->add_option("--steps", tr_steps, "optimizer steps");
  train->add_option("--lr", tr_lr, "learning rate");
  train->add_option("--scenes", tr_scenes, "number of training scenes");
  train->add_option("--out", tr_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    pnx::RunConfig cfg = config_path.empty()
                             ? pnx::RunConfig{}
                             : pnx::load_run_config(config_path);
    if (seed_opt->count() > 0) cfg.run.seed = seed;
    if (prec_opt->count() > 0) cfg.run.precision = precision;
    cfg.validate();
    const std::string& base = cfg.run.out_dir;

    if (synth->parsed())
      return pnx::cmd_synth(cfg, synth_scenes,
                            synth_out.empty() ? base : synth_out);
    if (forward->parsed())
      return pnx::cmd_forward(cfg, fw_weights, fw_input,
                              fw_out.empty() ? base + "/det.json" : fw_out);
    if (gradcheck->parsed())
      return pnx::cmd_gradcheck(cfg.run.seed, gc_tol, gc_out, gc_only);
    if (bench->parsed())
      return pnx::cmd_bench(cfg, bench_densities,
                            bench_out.empty() ? base + "/bench.csv" : bench_out);
    if (train->parsed())
      return pnx::cmd_train_toy(cfg, tr_steps, tr_lr, tr_scenes,
                                tr_out.empty() ? base : tr_out);
  } catch (const pnx::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
