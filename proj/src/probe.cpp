#include "derc/probe.hpp"

#include "derc/bias.hpp"
#include "derc/random.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <ostream>

namespace derc {

namespace {

constexpr const char* kAccuracySplits[] = {"biased", "val", "antibiased"};

std::vector<BiasTag> fresh_tags(std::span<const Instance> instances) {
  std::vector<BiasTag> tags;
  tags.reserve(instances.size());
  for (const Instance& inst : instances) {
    tags.push_back(tag_instance(overlap_ratio(inst.tokens_a, inst.tokens_b), inst.label));
  }
  return tags;
}

std::size_t argmax_row(std::span<const double> p, std::size_t row, std::size_t k) {
  const auto r = p.subspan(row * k, k);
  return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

}  // namespace

void ProbeConfig::validate() const {
  if (batch_size == 0) throw ContractError("probe batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ContractError("probe learning_rate must be positive");
  if (smoothing_window == 0) throw ContractError("smoothing_window must be positive");
}

std::string probe_prefix(std::size_t layer) { return "probe." + std::to_string(layer); }

double ProbeReport::accuracy(std::size_t layer, std::string_view split) const {
  for (const ProbeAccuracy& a : accuracies) {
    if (a.layer == layer && a.split == split) return a.accuracy;
  }
  throw ContractError("no probe accuracy for layer " + std::to_string(layer) + " split " + std::string(split));
}

ProbeReport probe_layers(const DercModel& model, std::span<const Instance> train_set,
                         std::span<const Instance> val_set, const ProbeConfig& cfg) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw ContractError("probe_layers: empty train or validation set");
  const std::size_t L = model.encoder_config().num_layers;
  const std::size_t d = model.encoder_config().d_model;
  const std::size_t K = model.config().num_labels;
  const std::size_t max_len = model.encoder_config().max_len;

  const std::vector<EncodedInput> train_inputs = encode_instances(train_set, max_len);
  const std::vector<EncodedInput> val_inputs = encode_instances(val_set, max_len);
  const auto train_features = cls_features(model, train_inputs);
  const auto val_features = cls_features(model, val_inputs);
  const std::vector<BiasTag> train_tags = fresh_tags(train_set), val_tags = fresh_tags(val_set);

  std::vector<std::string> heads;
  for (std::size_t l = 1; l <= L; ++l) heads.push_back(std::to_string(l));
  HistoryWindow smooth(heads), raw(heads);
  ProbeReport report;

  std::vector<std::size_t> labels;
  std::vector<double> rows;
  for (std::size_t l = 1; l <= L; ++l) {
    ParameterSet params;
    std::mt19937_64 init_rng(cfg.seed + l);
    const Classifier clf = Classifier::create(params, probe_prefix(l), K, d, cfg.init_std, init_rng);
    const std::size_t indices[] = {clf.weight, clf.bias};
    Adam adam(cfg.learning_rate);
    std::mt19937_64 shuffle_rng(cfg.seed);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::vector<double>& features = train_features[l];
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      shuffle_in_place(order, shuffle_rng);
      for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
        labels.clear();
        rows.clear();
        for (std::size_t i = begin; i < end; ++i) {
          labels.push_back(train_set[order[i]].label);
          const auto f = features.begin() + static_cast<std::ptrdiff_t>(order[i] * d);
          rows.insert(rows.end(), f, f + static_cast<std::ptrdiff_t>(d));
        }
        Gradients grads;
        NodeId nodes[2];
        {
          Tape tape;
          const std::vector<Tensor> bound = params.bind(tape);
          const Tensor p = clf.probabilities(bound, Tensor({end - begin, d}, rows));
          const Tensor loss = cross_entropy(p, labels);
          grads = tape.backward(loss);
          nodes[0] = *bound[clf.weight].node_id();
          nodes[1] = *bound[clf.bias].node_id();
          const std::vector<double> losses = cross_entropy_rows(p, labels);
          for (std::size_t i = 0; i < labels.size(); ++i) {
            const bool correct = argmax_row(p.values(), i, K) == labels[i];
            smooth.record(l - 1, train_tags[order[begin + i]], losses[i], correct);
            raw.record(l - 1, train_tags[order[begin + i]], losses[i], correct);
          }
        }
        adam.step(params, indices, grads, nodes);
        ++step;
        raw.flush(step, report.raw_curves);
        if (step % cfg.smoothing_window == 0) smooth.flush(step, report.curves);
      }
    }
    if (!smooth.empty()) smooth.flush(step, report.curves);

    const std::vector<Tensor> w = params.constants();
    const Tensor p = clf.probabilities(w, Tensor({val_set.size(), d}, val_features[l]));
    std::size_t hits[3] = {0, 0, 0}, counts[3] = {0, 0, 0};
    for (std::size_t i = 0; i < val_set.size(); ++i) {
      const bool correct = argmax_row(p.values(), i, K) == val_set[i].label;
      hits[1] += correct;
      ++counts[1];
      if (val_tags[i] == BiasTag::Biased) {
        hits[0] += correct;
        ++counts[0];
      } else if (val_tags[i] == BiasTag::AntiBiased) {
        hits[2] += correct;
        ++counts[2];
      }
    }
    for (std::size_t s = 0; s < 3; ++s) {
      const double acc = counts[s] ? static_cast<double>(hits[s]) / static_cast<double>(counts[s])
                                 : std::numeric_limits<double>::quiet_NaN();
      report.accuracies.push_back({l, kAccuracySplits[s], acc});
    }
    report.heads.add(params.name(clf.weight), params.value(clf.weight));
    report.heads.add(params.name(clf.bias), params.value(clf.bias));
  }
  return report;
}

void write_probe_csv(const ProbeReport& report, std::ostream& out) {
  const auto old = out.precision(17);
  out << "layer,split,accuracy\n";
  for (const ProbeAccuracy& a : report.accuracies) out << a.layer << ',' << a.split << ',' << a.accuracy << '\n';
  out.precision(old);
}

}  // namespace derc
