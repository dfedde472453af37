#include "derc/experiment.hpp"

#include "derc/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <limits>
#include <ostream>
#include <sstream>

namespace derc {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void say(const CommandContext& ctx, const std::string& message) {
  if (ctx.log) *ctx.log << message << '\n';
}

std::string percent(double v) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(2);
  o << 100.0 * v << '%';
  return o.str();
}

template <typename F>
void write_csv(const fs::path& path, const ExperimentConfig& cfg, F&& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out.precision(17);
  body(out);
  write_csv_trailer(out, cfg.hash_hex(), cfg.seed);
}

json split_json(const SplitAccuracy& s) {
  return {{"accuracy", s.all}, {"biased_accuracy", s.biased}, {"antibiased_accuracy", s.antibiased}};
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create directory " + dir.string() + ": " + ec.message());
}

LoadedCheckpoint open_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("checkpoint " + path.string() + " does not exist");
  return load_checkpoint(path);
}

double plain_accuracy(std::span<const std::size_t> predicted, std::span<const Instance> instances) {
  return split_accuracy(predicted, instances).all;
}

Chart history_chart(const TrainingHistory& history, const std::string& title) {
  Chart chart{title, "step", "mean loss", {}};
  for (const HistoryRow& r : history.rows()) {
    const std::string label = r.head + " " + r.split;
    auto it = std::find_if(chart.series.begin(), chart.series.end(), [&](const Series& s) { return s.label == label; });
    if (it == chart.series.end()) {
      chart.series.push_back({label, {}, {}});
      it = chart.series.end() - 1;
    }
    it->x.push_back(static_cast<double>(r.step));
    it->y.push_back(r.mean_loss);
  }
  return chart;
}

/// File stems, prefixed with the parent directory name where stems repeat.
std::vector<std::string> model_tags(std::span<const fs::path> paths) {
  std::map<std::string, std::size_t> seen;
  for (const fs::path& p : paths) ++seen[p.stem().string()];
  std::vector<std::string> tags;
  for (const fs::path& p : paths) {
    const std::string stem = p.stem().string();
    const std::string parent = p.parent_path().filename().string();
    tags.push_back(seen[stem] > 1 && !parent.empty() ? parent + "_" + stem : stem);
  }
  return tags;
}

void check_same_encoder(const EncoderConfig& a, const EncoderConfig& b, const std::string& what) {
  if (!(a == b)) throw ConfigError(what + ": encoder configuration does not match");
}

}  // namespace

SplitAccuracy split_accuracy(std::span<const std::size_t> predicted, std::span<const Instance> instances) {
  if (predicted.size() != instances.size()) throw DimensionError("split_accuracy: prediction count mismatch");
  std::size_t hits[3] = {0, 0, 0}, counts[3] = {0, 0, 0};
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const bool ok = predicted[i] == instances[i].label;
    hits[0] += ok;
    ++counts[0];
    const BiasTag tag = tag_instance(overlap_ratio(instances[i].tokens_a, instances[i].tokens_b), instances[i].label);
    const int k = tag == BiasTag::Biased ? 1 : tag == BiasTag::AntiBiased ? 2 : -1;
    if (k > 0) {
      hits[k] += ok;
      ++counts[k];
    }
  }
  auto rate = [&](int k) { return counts[k] ? static_cast<double>(hits[k]) / static_cast<double>(counts[k]) : kNaN; };
  return {rate(0), rate(1), rate(2)};
}

json EvalSummary::to_json() const {
  json j = {{"val", split_json(val)}, {"ood", split_json(ood)}};
  if (val_low) j["val_low"] = split_json(*val_low);
  if (ood_low) j["ood_low"] = split_json(*ood_low);
  return j;
}

EvalSummary evaluate(const DercModel& model, std::span<const Instance> val, std::span<const Instance> ood,
                     double alpha) {
  const std::size_t max_len = model.encoder_config().max_len;
  EvalSummary summary;
  auto run = [&](std::span<const Instance> split, SplitAccuracy& top, std::optional<SplitAccuracy>& low) {
    const std::vector<EncodedInput> inputs = encode_instances(split, max_len);
    const Predictions p = predict(model, inputs, alpha);
    top = split_accuracy(p.labels, split);
    if (model.has_low()) {
      std::vector<std::size_t> guess(split.size());
      for (std::size_t i = 0; i < split.size(); ++i) {
        const auto row = std::span(p.low).subspan(i * p.num_labels, p.num_labels);
        guess[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      }
      low = split_accuracy(guess, split);
    }
  };
  run(val, summary.val, summary.val_low);
  run(ood, summary.ood, summary.ood_low);
  return summary;
}

std::vector<std::size_t> head_predictions(const DercModel& model, const Classifier& head, std::size_t layer,
                                          std::span<const EncodedInput> inputs) {
  const std::size_t d = model.encoder_config().d_model;
  const auto features = cls_features(model, inputs);
  if (layer >= features.size()) throw IndexError("head_predictions: layer out of range");
  const std::vector<Tensor> w = model.params().constants();
  const Tensor p = head.probabilities(w, Tensor({inputs.size(), d}, features[layer]));
  const std::size_t K = p.dim(1);
  std::vector<std::size_t> out(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto row = p.values().subspan(i * K, K);
    out[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

fs::path CommandContext::data_dir() const {
  return config.data_dir.empty() ? out / "data" : fs::path(config.data_dir);
}

Dataset load_dataset(const fs::path& dir, std::ostream* warnings) {
  Dataset d;
  for (auto [name, split] : {std::pair{"train", &d.train}, std::pair{"val", &d.val}, std::pair{"ood", &d.ood}}) {
    const fs::path file = dir / (std::string(name) + ".jsonl");
    if (!fs::exists(file)) throw InputError("missing dataset file " + file.string() + " (run gen-data first)");
    *split = read_jsonl(file, warnings);
  }
  if (d.train.empty() || d.val.empty() || d.ood.empty()) throw InputError("dataset in " + dir.string() + " has an empty split");
  return d;
}

json cmd_gen_data(const CommandContext& ctx) {
  const ExperimentConfig& cfg = ctx.config;
  const Dataset d = generate(cfg.dataset);
  const fs::path dir = ctx.data_dir();
  ensure_dir(dir);
  write_jsonl(d.train, dir / "train.jsonl");
  write_jsonl(d.val, dir / "val.jsonl");
  write_jsonl(d.ood, dir / "ood.jsonl");
  write_vocab_json(Vocabulary(cfg.dataset), dir / "vocab.json");

  nlohmann::ordered_json summary;
  summary["config_hash"] = cfg.hash_hex();
  summary["seed"] = cfg.seed;
  for (auto [name, split] : {std::pair{"train", &d.train}, std::pair{"val", &d.val}, std::pair{"ood", &d.ood}}) {
    const SplitSummary s = summarize(*split);
    summary["counts"][name] = s.count;
    summary["duplicates"][name] = s.duplicates;
    summary["empirical_bias_rate"][name] = s.agreement();
    summary["tag_histogram"][name] = {{"biased", s.biased}, {"anti_biased", s.anti_biased}, {"neutral", s.neutral}};
  }
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  say(ctx, "wrote dataset to " + dir.string());
  say(ctx, summary.dump(2));
  return json::parse(summary.dump());
}

TrainResult train_model(const ExperimentConfig& config, const Dataset& data,
                        const std::function<void(const TrainProgress&)>& on_step) {
  DercModel model(config.encoder, config.derc);
  const std::vector<TrainExample> examples = make_examples(data.train, config.encoder.max_len);
  TrainingHistory history = train(model, examples, config.train, on_step);
  const EvalSummary eval = evaluate(model, data.val, data.ood, config.derc.alpha);
  return {std::move(model), std::move(history), eval};
}

EvalSummary cmd_train(const CommandContext& ctx) {
  const ExperimentConfig& cfg = ctx.config;
  const Dataset data = load_dataset(ctx.data_dir(), ctx.log);
  ensure_dir(ctx.out);
  save_config(cfg, ctx.out / "config.json");
  say(ctx, "training " + std::string(to_string(cfg.derc.mode)) + " for " + std::to_string(cfg.train.epochs) +
               " epochs on " + std::to_string(data.train.size()) + " instances");
  const TrainResult r = train_model(cfg, data, ctx.on_step);
  const json eval = r.eval.to_json();
  save_checkpoint(r.model, ctx.out / "model.ckpt",
                  json{{"eval", eval}, {"config_hash", cfg.hash_hex()}, {"seed", cfg.seed}});
  write_csv(ctx.out / "history.csv", cfg, [&](std::ostream& o) { r.history.write_csv(o); });
  write_file(ctx.out / "eval.json", eval.dump(2) + "\n");
  write_file(ctx.out / "history.svg", render_svg(history_chart(r.history, "training loss")));
  say(ctx, "val accuracy " + percent(r.eval.val.all) + " (biased " + percent(r.eval.val.biased) +
               ", anti-biased " + percent(r.eval.val.antibiased) + "), OOD accuracy " + percent(r.eval.ood.all));
  return r.eval;
}

ProbeReport cmd_probe(const CommandContext& ctx, const fs::path& checkpoint) {
  const ExperimentConfig& cfg = ctx.config;
  LoadedCheckpoint ck = open_checkpoint(checkpoint);
  if (ck.model.config().mode != Mode::Baseline) throw ConfigError("probe expects a Baseline checkpoint");
  check_same_encoder(ck.model.encoder_config(), cfg.encoder, "probe");
  const Dataset data = load_dataset(ctx.data_dir(), ctx.log);
  ensure_dir(ctx.out);
  const std::uint64_t before = ck.model.params().checksum("encoder.");
  ProbeReport report = probe_layers(ck.model, data.train, data.val, cfg.probe);
  if (ck.model.params().checksum("encoder.") != before) throw NumericalError("probing modified the encoder");

  write_csv(ctx.out / "probe_accuracy.csv", cfg, [&](std::ostream& o) { write_probe_csv(report, o); });
  write_csv(ctx.out / "probe_curves.csv", cfg, [&](std::ostream& o) { report.curves.write_csv(o); });
  write_csv(ctx.out / "probe_curves_raw.csv", cfg, [&](std::ostream& o) { report.raw_curves.write_csv(o); });
  Chart chart{"probe accuracy by layer", "layer", "accuracy", {}};
  for (const char* split : {"biased", "val", "antibiased"}) {
    Series s{split, {}, {}};
    for (const ProbeAccuracy& a : report.accuracies) {
      if (a.split != split) continue;
      s.x.push_back(static_cast<double>(a.layer));
      s.y.push_back(a.accuracy);
    }
    chart.series.push_back(std::move(s));
  }
  write_file(ctx.out / "probe.svg", render_svg(chart));

  ParameterSet& params = ck.model.params();
  for (std::size_t i = 0; i < report.heads.size(); ++i) {
    if (const auto idx = params.find(report.heads.name(i))) {
      params.value(*idx) = report.heads.value(i);
    } else {
      params.add(report.heads.name(i), report.heads.value(i));
    }
  }
  json meta = ck.metadata;
  json acc = json::array();
  for (const ProbeAccuracy& a : report.accuracies) acc.push_back({{"layer", a.layer}, {"split", a.split}, {"accuracy", a.accuracy}});
  meta["probe"] = acc;
  save_checkpoint(ck.model, ctx.out / "probed.ckpt", meta);
  for (std::size_t l = 1; l <= ck.model.encoder_config().num_layers; ++l) {
    say(ctx, "layer " + std::to_string(l) + ": biased " + percent(report.accuracy(l, "biased")) + ", val " +
                 percent(report.accuracy(l, "val")) + ", anti-biased " + percent(report.accuracy(l, "antibiased")));
  }
  return report;
}

std::vector<LayerSweepRow> cmd_sweep_lb(const CommandContext& ctx) {
  const Dataset data = load_dataset(ctx.data_dir(), ctx.log);
  ensure_dir(ctx.out);
  std::vector<LayerSweepRow> rows;
  for (std::size_t l : ctx.config.resolved_sweep_layers()) {
    ExperimentConfig cfg = ctx.config;
    cfg.derc.mode = Mode::DeRC;
    cfg.derc.l_b = l;
    cfg.validate();
    say(ctx, "training DeRC with l_b = " + std::to_string(l));
    const TrainResult r = train_model(cfg, data, ctx.on_step);
    const fs::path sub = ctx.out / ("lb_" + std::to_string(l));
    ensure_dir(sub);
    save_checkpoint(r.model, sub / "model.ckpt",
                    json{{"eval", r.eval.to_json()}, {"config_hash", cfg.hash_hex()}, {"seed", cfg.seed}});
    write_csv(sub / "history.csv", cfg, [&](std::ostream& o) { r.history.write_csv(o); });
    rows.push_back({l, r.eval.val.all, r.eval.ood.all});
    say(ctx, "  val " + percent(r.eval.val.all) + ", OOD " + percent(r.eval.ood.all));
  }
  write_csv(ctx.out / "sweep_lb.csv", ctx.config, [&](std::ostream& o) {
    o << "l_b,val_accuracy,ood_accuracy\n";
    for (const LayerSweepRow& r : rows) o << r.l_b << ',' << r.val_accuracy << ',' << r.ood_accuracy << '\n';
  });
  Chart chart{"accuracy by low layer", "l_b", "accuracy", {{"val", {}, {}}, {"ood", {}, {}}}};
  for (const LayerSweepRow& r : rows) {
    chart.series[0].x.push_back(static_cast<double>(r.l_b));
    chart.series[0].y.push_back(r.val_accuracy);
    chart.series[1].x.push_back(static_cast<double>(r.l_b));
    chart.series[1].y.push_back(r.ood_accuracy);
  }
  write_file(ctx.out / "sweep_lb.svg", render_svg(chart));
  return rows;
}

std::vector<AlphaSweepRow> cmd_sweep_alpha(const CommandContext& ctx, const fs::path& checkpoint) {
  const LoadedCheckpoint ck = open_checkpoint(checkpoint);
  if (ck.model.config().mode != Mode::DeRC) throw ConfigError("sweep-alpha expects a DeRC checkpoint");
  const Dataset data = load_dataset(ctx.data_dir(), ctx.log);
  ensure_dir(ctx.out);
  const std::vector<EncodedInput> inputs = encode_instances(data.val, ck.model.encoder_config().max_len);
  std::vector<AlphaSweepRow> rows;
  for (double alpha : ctx.config.resolved_alphas()) {
    const SplitAccuracy acc = split_accuracy(predict(ck.model, inputs, alpha).labels, data.val);
    rows.push_back({alpha, acc.all, acc.antibiased});
    say(ctx, "alpha " + std::to_string(alpha) + ": val " + percent(acc.all) + ", anti-biased " + percent(acc.antibiased));
  }
  write_csv(ctx.out / "sweep_alpha.csv", ctx.config, [&](std::ostream& o) {
    o << "alpha,val_accuracy,antibiased_accuracy\n";
    for (const AlphaSweepRow& r : rows) o << r.alpha << ',' << r.val_accuracy << ',' << r.antibiased_accuracy << '\n';
  });
  Chart chart{"accuracy by alpha", "alpha", "accuracy", {{"val", {}, {}}, {"antibiased", {}, {}}}};
  for (const AlphaSweepRow& r : rows) {
    chart.series[0].x.push_back(r.alpha);
    chart.series[0].y.push_back(r.val_accuracy);
    chart.series[1].x.push_back(r.alpha);
    chart.series[1].y.push_back(r.antibiased_accuracy);
  }
  write_file(ctx.out / "sweep_alpha.svg", render_svg(chart));
  return rows;
}

std::vector<InterpReport> cmd_interpret(const CommandContext& ctx, std::span<const fs::path> checkpoints) {
  if (checkpoints.empty()) throw InputError("interpret needs at least one checkpoint");
  const ExperimentConfig& cfg = ctx.config;
  const Dataset data = load_dataset(ctx.data_dir(), ctx.log);
  const std::vector<Instance>& split = cfg.interp_split == "ood" ? data.ood : data.val;
  const Vocabulary vocab(cfg.dataset);
  ensure_dir(ctx.out);
  std::vector<InterpReport> reports;
  const std::vector<std::string> tags = model_tags(checkpoints);
  for (std::size_t c = 0; c < checkpoints.size(); ++c) {
    const fs::path& path = checkpoints[c];
    const LoadedCheckpoint ck = open_checkpoint(path);
    if (ck.model.encoder_config().vocab_size != vocab.size()) {
      throw ConfigError("checkpoint " + path.string() + " was trained on a different vocabulary");
    }
    InterpOptions opt;
    opt.n_perturbations = cfg.n_perturbations;
    opt.seed = cfg.seed;
    opt.alpha = ck.model.config().alpha;
    InterpResult r = interpret(ck.model, split, vocab, opt, ctx.log);
    r.report.model_tag = tags[c];
    std::ofstream jsonl(ctx.out / ("rationales_" + r.report.model_tag + ".jsonl"), std::ios::binary);
    write_rationales_jsonl(r.rationales, jsonl);
    say(ctx, r.report.model_tag + ": token_f1 " + std::to_string(r.report.token_f1) + ", map " +
                 std::to_string(r.report.map) + ", suff " + std::to_string(r.report.suff) + ", comp " +
                 std::to_string(r.report.comp));
    reports.push_back(r.report);
  }
  write_csv(ctx.out / "interp.csv", cfg, [&](std::ostream& o) { write_interp_csv(reports, o); });
  return reports;
}

std::vector<HeadGapRow> cmd_compare_heads(const CommandContext& ctx, std::span<const fs::path> checkpoints) {
  if (checkpoints.empty()) throw InputError("compare-heads needs at least one checkpoint");
  const Dataset data = load_dataset(ctx.data_dir(), ctx.log);
  ensure_dir(ctx.out);
  std::vector<HeadGapRow> rows;
  std::optional<EncoderConfig> reference;
  const std::vector<std::string> tags = model_tags(checkpoints);
  for (std::size_t c = 0; c < checkpoints.size(); ++c) {
    const fs::path& path = checkpoints[c];
    const LoadedCheckpoint ck = open_checkpoint(path);
    const DercModel& m = ck.model;
    if (reference) check_same_encoder(m.encoder_config(), *reference, "compare-heads");
    reference = m.encoder_config();
    const std::size_t layer = m.config().l_b;
    Classifier low;
    if (m.has_low()) {
      low = m.low();
    } else if (const auto probe = Classifier::find(m.params(), probe_prefix(layer))) {
      low = *probe;
    } else {
      throw InputError("checkpoint " + path.string() + " has no probe head for layer " + std::to_string(layer) +
                       " (run probe on it first)");
    }
    const std::vector<EncodedInput> inputs = encode_instances(data.ood, m.encoder_config().max_len);
    HeadGapRow row;
    row.model_tag = tags[c];
    row.mode = m.config().mode;
    row.low_layer = layer;
    row.low_ood_accuracy = plain_accuracy(head_predictions(m, low, layer, inputs), data.ood);
    row.top_ood_accuracy = plain_accuracy(predict(m, inputs, 0.0).labels, data.ood);
    say(ctx, row.model_tag + ": low head OOD " + percent(row.low_ood_accuracy) + ", top head OOD " +
                 percent(row.top_ood_accuracy) + ", gap " + percent(row.gap()));
    rows.push_back(row);
  }
  write_csv(ctx.out / "compare_heads.csv", ctx.config, [&](std::ostream& o) {
    o << "model_tag,mode,low_layer,low_ood_accuracy,top_ood_accuracy,gap\n";
    for (const HeadGapRow& r : rows) {
      o << r.model_tag << ',' << to_string(r.mode) << ',' << r.low_layer << ',' << r.low_ood_accuracy << ','
        << r.top_ood_accuracy << ',' << r.gap() << '\n';
    }
  });
  if (rows.size() >= 2) say(ctx, "gap difference " + percent(rows[1].gap() - rows[0].gap()));
  return rows;
}

}  // namespace derc
