#include "derc/model.hpp"

#include "derc/random.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <ostream>

namespace derc {

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::Baseline: return "baseline";
    case Mode::DeRC: return "derc";
    case Mode::DePoE: return "depoe";
  }
  return "baseline";
}

Mode parse_mode(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "baseline") return Mode::Baseline;
  if (lower == "derc") return Mode::DeRC;
  if (lower == "depoe") return Mode::DePoE;
  throw ContractError("unknown mode '" + std::string(text) + "'; expected baseline, derc or depoe");
}

void DercConfig::validate(std::size_t num_layers) const {
  if (l_b < 1 || l_b >= num_layers) {
    throw ContractError("l_b = " + std::to_string(l_b) + " must lie in [1, " + std::to_string(num_layers - 1) + "]");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("alpha must lie in [0, 1]");
  if (num_labels < 2) throw ContractError("num_labels must be at least 2");
}

Classifier Classifier::create(ParameterSet& params, const std::string& prefix, std::size_t num_labels,
                              std::size_t d_model, double init_std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, init_std);
  std::vector<double> w(num_labels * d_model);
  for (double& x : w) x = dist(rng);
  Classifier c;
  c.weight = params.add(prefix + ".weight", Tensor({num_labels, d_model}, std::move(w)));
  c.bias = params.add(prefix + ".bias", Tensor::zeros({num_labels}));
  return c;
}

std::optional<Classifier> Classifier::find(const ParameterSet& params, const std::string& prefix) {
  const auto w = params.find(prefix + ".weight");
  const auto b = params.find(prefix + ".bias");
  if (!w || !b) return std::nullopt;
  return Classifier{*w, *b};
}

Tensor Classifier::probabilities(std::span<const Tensor> weights, const Tensor& h) const {
  const Tensor& W = weights[weight];
  if (h.rank() == 1) {
    if (h.dim(0) != W.dim(1)) {
      throw DimensionError("classifier input " + shape_to_string(h.shape()) + " does not match weight " +
                           shape_to_string(W.shape()));
    }
    return softmax(linear(h.reshape({1, h.dim(0)}), W, weights[bias]), 1).reshape({W.dim(0)});
  }
  return softmax(linear(h, W, weights[bias]), 1);
}

Tensor poe_combine(const Tensor& p_b, const Tensor& p_L) {
  if (p_b.shape() != p_L.shape()) {
    throw DimensionError("poe_combine shapes " + shape_to_string(p_b.shape()) + " and " +
                         shape_to_string(p_L.shape()) + " differ");
  }
  return normalize_rows(clamp_min(mul(p_b, p_L), kProbabilityFloor));
}

Tensor loss_total(const Tensor& p_b, const Tensor& p_L, std::size_t label) {
  return add(cross_entropy(p_b, label), cross_entropy(p_L, label));
}

Tensor loss_total(const Tensor& p_b, const Tensor& p_L, std::span<const std::size_t> labels) {
  return add(cross_entropy(p_b, labels), cross_entropy(p_L, labels));
}

DercModel::DercModel(const EncoderConfig& encoder, const DercConfig& config)
    : config_(config), rng_(encoder.seed), encoder_(encoder, params_, rng_) {
  config_.validate(encoder.num_layers);
  top_ = Classifier::create(params_, "head.top", config_.num_labels, encoder.d_model, encoder.init_std, rng_);
  if (config_.mode != Mode::Baseline) {
    low_ = Classifier::create(params_, "head.low", config_.num_labels, encoder.d_model, encoder.init_std, rng_);
  }
}

void DercModel::set_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("alpha must lie in [0, 1]");
  config_.alpha = alpha;
}

const Classifier& DercModel::low() const {
  if (!low_) throw ContractError("baseline models have no low-layer classifier");
  return *low_;
}

Tensor DercModel::forward_low(std::span<const Tensor> weights, const Tensor& h_lb) const {
  return low().probabilities(weights, h_lb);
}

Tensor DercModel::forward_top_train(std::span<const Tensor> weights, const Tensor& h_lb, const Tensor& h_L) const {
  if (h_lb.shape() != h_L.shape()) {
    throw DimensionError("residual addend " + shape_to_string(h_lb.shape()) + " does not match " +
                         shape_to_string(h_L.shape()));
  }
  return top_.probabilities(weights, add(detach(h_lb), h_L));
}

Tensor DercModel::infer(std::span<const Tensor> weights, const Tensor& h_lb, const Tensor& h_L, double alpha) const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("alpha must lie in [0, 1], got " + std::to_string(alpha));
  if (h_lb.shape() != h_L.shape()) throw DimensionError("infer: representation shapes differ");
  std::vector<Tensor> frozen;
  frozen.reserve(weights.size());
  for (const Tensor& w : weights) frozen.push_back(w.constant());
  const Tensor mixed = add(scale(h_lb.constant(), alpha), scale(h_L.constant(), 1.0 - alpha));
  return top_.probabilities(frozen, mixed);
}

DercModel::StepOutput DercModel::training_step(std::span<const Tensor> weights, const PackedBatch& batch,
                                               std::span<const std::size_t> labels) const {
  const std::size_t L = encoder_.config().num_layers;
  const BatchStates states = encoder_.forward(weights, batch);
  const Tensor h_L = cls_rows(states, L);
  StepOutput out;
  switch (config_.mode) {
    case Mode::Baseline:
      out.p_top = top_.probabilities(weights, h_L);
      out.loss = cross_entropy(out.p_top, labels);
      break;
    case Mode::DeRC: {
      const Tensor h_lb = cls_rows(states, config_.l_b);
      out.p_low = forward_low(weights, h_lb);
      out.p_top = forward_top_train(weights, h_lb, h_L);
      out.loss = loss_total(*out.p_low, out.p_top, labels);
      break;
    }
    case Mode::DePoE: {
      const Tensor h_lb = cls_rows(states, config_.l_b);
      out.p_low = forward_low(weights, h_lb);
      out.p_top = poe_combine(detach(*out.p_low), top_.probabilities(weights, h_L));
      out.loss = loss_total(*out.p_low, out.p_top, labels);
      break;
    }
  }
  return out;
}

std::vector<EncodedInput> encode_instances(std::span<const Instance> instances, std::size_t max_len) {
  std::vector<EncodedInput> out;
  out.reserve(instances.size());
  for (const Instance& inst : instances) out.push_back(build_input(inst.tokens_a, inst.tokens_b, max_len));
  return out;
}

Predictions predict(const DercModel& model, std::span<const EncodedInput> inputs, double alpha,
                    std::size_t batch_size) {
  const std::size_t K = model.config().num_labels;
  const std::size_t L = model.encoder_config().num_layers;
  const std::vector<Tensor> w = model.params().constants();
  Predictions p;
  p.num_labels = K;
  p.labels.reserve(inputs.size());
  for (std::size_t begin = 0; begin < inputs.size(); begin += batch_size) {
    const std::size_t end = std::min(inputs.size(), begin + batch_size);
    const PackedBatch batch = pack_inputs(inputs.subspan(begin, end - begin));
    const BatchStates s = model.encoder().forward(w, batch);
    const Tensor h_lb = cls_rows(s, model.config().l_b);
    const Tensor top = model.infer(w, h_lb, cls_rows(s, L), alpha);
    p.top.insert(p.top.end(), top.values().begin(), top.values().end());
    if (model.has_low()) {
      const Tensor low = model.forward_low(w, h_lb);
      p.low.insert(p.low.end(), low.values().begin(), low.values().end());
    }
    for (std::size_t i = 0; i < end - begin; ++i) {
      const auto row = top.values().subspan(i * K, K);
      p.labels.push_back(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return p;
}

std::vector<std::vector<double>> cls_features(const DercModel& model, std::span<const EncodedInput> inputs,
                                              std::size_t batch_size) {
  const std::size_t L = model.encoder_config().num_layers;
  const std::vector<Tensor> w = model.params().constants();
  std::vector<std::vector<double>> out(L + 1);
  for (auto& layer : out) layer.reserve(inputs.size() * model.encoder_config().d_model);
  for (std::size_t begin = 0; begin < inputs.size(); begin += batch_size) {
    const std::size_t end = std::min(inputs.size(), begin + batch_size);
    const PackedBatch batch = pack_inputs(inputs.subspan(begin, end - begin));
    const BatchStates s = model.encoder().forward(w, batch);
    for (std::size_t l = 0; l <= L; ++l) {
      const Tensor rows = cls_rows(s, l);
      out[l].insert(out[l].end(), rows.values().begin(), rows.values().end());
    }
  }
  return out;
}

void Adam::step(ParameterSet& params, std::span<const std::size_t> indices, const Gradients& grads,
                std::span<const NodeId> nodes) {
  if (indices.size() != nodes.size()) throw ContractError("Adam::step: index and node lists differ in length");
  if (m_.size() < params.size()) {
    m_.resize(params.size());
    v_.resize(params.size());
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    const auto g = grads.of(nodes[k]).values();
    auto theta = params.value(i).mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    if (m.empty()) {
      m.assign(theta.size(), 0.0);
      v.assign(theta.size(), 0.0);
    }
    for (std::size_t e = 0; e < theta.size(); ++e) {
      m[e] = beta1_ * m[e] + (1.0 - beta1_) * g[e];
      v[e] = beta2_ * v[e] + (1.0 - beta2_) * g[e] * g[e];
      theta[e] -= learning_rate_ * (m[e] / c1) / (std::sqrt(v[e] / c2) + eps_);
    }
  }
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ContractError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ContractError("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ContractError("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ContractError("adam_eps must be positive");
  if (history_interval == 0) throw ContractError("history_interval must be positive");
}

std::vector<TrainExample> make_examples(std::span<const Instance> instances, std::size_t max_len) {
  std::vector<TrainExample> out;
  out.reserve(instances.size());
  for (const Instance& inst : instances) {
    out.push_back({build_input(inst.tokens_a, inst.tokens_b, max_len), inst.label, inst.bias_tag});
  }
  return out;
}

std::optional<HistoryRow> TrainingHistory::last(std::string_view split, std::string_view head) const {
  for (auto it = rows_.rbegin(); it != rows_.rend(); ++it) {
    if (it->split == split && it->head == head) return *it;
  }
  return std::nullopt;
}

void TrainingHistory::write_csv(std::ostream& out) const {
  out << "step,split,head,mean_loss,accuracy\n";
  const auto old = out.precision(17);
  for (const HistoryRow& r : rows_) {
    out << r.step << ',' << r.split << ',' << r.head << ',' << r.mean_loss << ',' << r.accuracy << '\n';
  }
  out.precision(old);
}

HistoryWindow::HistoryWindow(std::vector<std::string> heads) : heads_(std::move(heads)), acc_(heads_.size()) {}

void HistoryWindow::record(std::size_t h, BiasTag tag, double loss, bool correct) {
  auto add = [&](Acc& a) {
    a.loss += loss;
    a.correct += correct;
    ++a.count;
  };
  if (tag == BiasTag::Biased) add(acc_[h][0]);
  if (tag == BiasTag::AntiBiased) add(acc_[h][1]);
  add(acc_[h][2]);
}

bool HistoryWindow::empty() const {
  for (const auto& a : acc_) {
    if (a[2].count) return false;
  }
  return true;
}

void HistoryWindow::flush(std::size_t step, TrainingHistory& history) {
  static const char* const kSplits[] = {"biased", "antibiased", "all"};
  for (std::size_t h = 0; h < heads_.size(); ++h) {
    for (std::size_t s = 0; s < 3; ++s) {
      Acc& a = acc_[h][s];
      if (a.count) {
        history.add({step, kSplits[s], heads_[h], a.loss / static_cast<double>(a.count),
                     static_cast<double>(a.correct) / static_cast<double>(a.count)});
      }
      a = Acc{};
    }
  }
}

namespace {

void record_head(HistoryWindow& window, std::size_t head, const Tensor& p, std::span<const std::size_t> labels,
                 std::span<const BiasTag> tags) {
  const std::vector<double> losses = cross_entropy_rows(p, labels);
  const std::size_t K = p.dim(1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = p.values().subspan(i * K, K);
    const auto guess = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    window.record(head, tags[i], losses[i], guess == labels[i]);
  }
}

}  // namespace

TrainingHistory train(DercModel& model, std::span<const TrainExample> data, const TrainConfig& cfg,
                      const std::function<void(const TrainProgress&)>& on_step) {
  cfg.validate();
  TrainingHistory history;
  if (cfg.epochs == 0) return history;
  if (data.empty()) throw ContractError("train: empty training set");

  Adam adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
  ParameterSet& params = model.params();
  std::vector<std::size_t> indices(params.size());
  std::iota(indices.begin(), indices.end(), 0);

  std::vector<std::string> heads;
  if (model.has_low()) heads.push_back("f_b");
  heads.push_back("f_L");
  HistoryWindow window(heads);

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  std::vector<EncodedInput> inputs;
  std::vector<std::size_t> labels;
  std::vector<BiasTag> tags;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_in_place(order, rng);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      inputs.clear();
      labels.clear();
      tags.clear();
      for (std::size_t i = begin; i < end; ++i) {
        const TrainExample& ex = data[order[i]];
        inputs.push_back(ex.input);
        labels.push_back(ex.label);
        tags.push_back(ex.tag);
      }
      const PackedBatch batch = pack_inputs(inputs);
      Gradients grads;
      std::vector<NodeId> nodes;
      double loss = 0.0;
      {
        Tape tape;
        const std::vector<Tensor> bound = params.bind(tape);
        const DercModel::StepOutput out = model.training_step(bound, batch, labels);
        loss = out.loss.item();
        if (!std::isfinite(loss)) {
          throw DivergenceError("training loss became non-finite at step " + std::to_string(step + 1) +
                                " (epoch " + std::to_string(epoch + 1) + ")");
        }
        grads = tape.backward(out.loss);
        nodes.reserve(bound.size());
        for (const Tensor& b : bound) nodes.push_back(*b.node_id());
        if (out.p_low) record_head(window, 0, *out.p_low, labels, tags);
        record_head(window, heads.size() - 1, out.p_top, labels, tags);
      }
      adam.step(params, indices, grads, nodes);
      ++step;
      if (on_step) on_step({step, epoch, loss});
      if (step % cfg.history_interval == 0) window.flush(step, history);
    }
  }
  if (!window.empty()) window.flush(step, history);
  return history;
}

}  // namespace derc
