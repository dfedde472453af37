// Command-line harness: dataset generation, training, probing, sweeps,
// interpretability reports and head comparison.

#include "derc/experiment.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace derc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 1;
constexpr int kExitNumerical = 2;

struct Options {
  std::string config;
  std::string out = "runs";
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  std::string data;
  std::vector<std::string> checkpoints;
  std::vector<double> alphas;
  std::vector<std::size_t> layers;
};

CommandContext make_context(const Options& o) {
  CommandContext ctx;
  if (!o.config.empty()) ctx.config = load_config(o.config);
  if (o.seed) ctx.config.seed = *o.seed;
  if (!o.data.empty()) ctx.config.data_dir = o.data;
  if (!o.alphas.empty()) ctx.config.alphas = o.alphas;
  if (!o.layers.empty()) ctx.config.sweep_layers = o.layers;
  ctx.config.resolve();
  ctx.config.validate();
  ctx.out = o.out;
  if (!o.quiet) {
    ctx.log = &std::cout;
    auto start = std::make_shared<std::chrono::steady_clock::time_point>(std::chrono::steady_clock::now());
    ctx.on_step = [start](const TrainProgress& p) {
      if (p.step % 100 != 0) return;
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - *start).count();
      std::cout << "  epoch " << p.epoch + 1 << " step " << p.step << " loss " << p.loss << " (" << secs << " s)\n";
    };
  }
  return ctx;
}

std::vector<fs::path> as_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual-connection debiasing experiments on a synthetic paraphrase task"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "Flat JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--out", o.out, "Output directory")->capture_default_str();
  app.add_option("--seed", o.seed, "Master seed (overrides the config)");
  app.add_flag("--quiet", o.quiet, "Suppress progress output");
  app.add_option("--data", o.data, "Dataset directory (default <out>/data)");
  app.fallthrough();

  auto* gen = app.add_subcommand("gen-data", "Generate train/val/ood JSONL, vocab.json and summary.json");
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint, history and eval summary");
  auto* probe = app.add_subcommand("probe", "Probe every layer of a Baseline checkpoint");
  auto* sweep_lb = app.add_subcommand("sweep-lb", "Train DeRC once per low layer");
  auto* sweep_alpha = app.add_subcommand("sweep-alpha", "Evaluate a DeRC checkpoint over an alpha grid");
  auto* interp = app.add_subcommand("interpret", "Rationale metrics for one or more checkpoints");
  auto* compare = app.add_subcommand("compare-heads", "OOD accuracy of low and top heads");

  probe->add_option("checkpoint", o.checkpoints, "Baseline checkpoint")->required()->expected(1);
  sweep_alpha->add_option("checkpoint", o.checkpoints, "DeRC checkpoint")->required()->expected(1);
  sweep_alpha->add_option("--alphas", o.alphas, "Alpha grid (default 0, 0.1, ..., 1)");
  sweep_lb->add_option("--layers", o.layers, "Low layers to sweep (default 1..L-1)");
  interp->add_option("checkpoints", o.checkpoints, "Checkpoints to score")->required();
  compare->add_option("checkpoints", o.checkpoints, "Checkpoints (probed Baseline, DeRC)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    const CommandContext ctx = make_context(o);
    const auto paths = as_paths(o.checkpoints);
    if (gen->parsed()) cmd_gen_data(ctx);
    if (train_cmd->parsed()) cmd_train(ctx);
    if (probe->parsed()) cmd_probe(ctx, paths.front());
    if (sweep_lb->parsed()) cmd_sweep_lb(ctx);
    if (sweep_alpha->parsed()) cmd_sweep_alpha(ctx, paths.front());
    if (interp->parsed()) cmd_interpret(ctx, paths);
    if (compare->parsed()) cmd_compare_heads(ctx, paths);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitOk;
}
