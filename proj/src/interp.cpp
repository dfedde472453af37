#include "derc/interp.hpp"

#include "derc/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>

namespace derc {

namespace {

bool is_special(std::size_t token) { return token < tokens::kNumSpecial; }

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

double sum_range(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return sum_range(v.first(half)) + sum_range(v.subspan(half));
}

EncodedInput filter_positions(const EncodedInput& input, std::span<const std::size_t> positions, bool keep) {
  std::vector<bool> listed(input.size(), false);
  for (std::size_t p : positions) {
    if (p >= input.size()) throw IndexError("rationale position " + std::to_string(p) + " out of range");
    listed[p] = true;
  }
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (is_special(input.tokens[i]) || listed[i] != keep) continue;
    (input.segments[i] == 0 ? a : b).push_back(input.tokens[i]);
  }
  return wrap_pair(a, b);
}

std::vector<double> contrast_terms(const ProbabilityFn& f, std::span<const EncodedInput> inputs,
                                   std::span<const std::vector<std::size_t>> rationales, bool keep) {
  if (inputs.size() != rationales.size()) {
    throw DimensionError("faithfulness: " + std::to_string(inputs.size()) + " inputs but " +
                         std::to_string(rationales.size()) + " rationales");
  }
  if (inputs.empty()) return {};
  std::vector<EncodedInput> reduced;
  reduced.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) reduced.push_back(filter_positions(inputs[i], rationales[i], keep));
  const std::vector<double> full = f(inputs);
  const std::vector<double> part = f(reduced);
  if (full.size() != part.size() || full.size() % inputs.size() != 0) {
    throw DimensionError("faithfulness: probability function returned a malformed batch");
  }
  const std::size_t K = full.size() / inputs.size();
  std::vector<double> terms(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t j = argmax(std::span(full).subspan(i * K, K));
    terms[i] = full[i * K + j] - part[i * K + j];
  }
  return terms;
}

}  // namespace

double pairwise_mean(std::span<const double> values) {
  if (values.empty()) throw ContractError("mean of an empty list");
  return sum_range(values) / static_cast<double>(values.size());
}

std::vector<TokenScores> attention_importance(const DercModel& model, std::span<const EncodedInput> inputs,
                                              std::size_t batch_size) {
  const std::size_t L = model.encoder_config().num_layers;
  const std::size_t H = model.encoder_config().num_heads;
  const std::vector<Tensor> w = model.params().constants();
  std::vector<TokenScores> out;
  out.reserve(inputs.size());
  for (std::size_t begin = 0; begin < inputs.size(); begin += batch_size) {
    const std::size_t end = std::min(inputs.size(), begin + batch_size);
    const PackedBatch batch = pack_inputs(inputs.subspan(begin, end - begin));
    const BatchStates s = model.encoder().forward(w, batch);
    const Buffer& attn = s.attentions[L - 1];
    std::size_t offset = 0;
    for (std::size_t q = 0; q < end - begin; ++q) {
      const EncodedInput& in = inputs[begin + q];
      const std::size_t n = in.size();
      TokenScores ts;
      double mass = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        if (is_special(in.tokens[c])) continue;
        double v = 0.0;
        for (std::size_t h = 0; h < H; ++h) v += attn[offset + h * n * n + c];
        v /= static_cast<double>(H);
        ts.positions.push_back(c);
        ts.scores.push_back(v);
        mass += v;
      }
      for (double& v : ts.scores) v /= mass;
      out.push_back(std::move(ts));
      offset += H * n * n;
    }
  }
  return out;
}

TokenScores attention_importance(const DercModel& model, const EncodedInput& input) {
  return attention_importance(model, std::span(&input, 1)).front();
}

std::vector<std::size_t> Rationale::selected() const {
  return {ranked_tokens.begin(), ranked_tokens.begin() + static_cast<std::ptrdiff_t>(k)};
}

Rationale extract_rationale(const TokenScores& scores, std::size_t k, std::string instance_id) {
  if (scores.positions.size() != scores.scores.size()) throw DimensionError("extract_rationale: ragged scores");
  if (k == 0 || k > scores.positions.size()) {
    throw ContractError("extract_rationale: k=" + std::to_string(k) + " with " +
                        std::to_string(scores.positions.size()) + " scored tokens");
  }
  std::vector<std::size_t> order(scores.positions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (scores.scores[x] != scores.scores[y]) return scores.scores[x] > scores.scores[y];
    return scores.positions[x] < scores.positions[y];
  });
  Rationale r;
  r.instance_id = std::move(instance_id);
  r.k = k;
  for (std::size_t i : order) {
    r.ranked_tokens.push_back(scores.positions[i]);
    r.scores.push_back(scores.scores[i]);
  }
  return r;
}

double token_f1(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& gold) {
  if (pred.empty() || gold.empty()) throw ContractError("token_f1: empty rationale set");
  std::vector<std::size_t> p = pred, g = gold;
  std::sort(p.begin(), p.end());
  p.erase(std::unique(p.begin(), p.end()), p.end());
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  std::vector<std::size_t> both;
  std::set_intersection(p.begin(), p.end(), g.begin(), g.end(), std::back_inserter(both));
  if (both.empty()) return 0.0;
  const double precision = static_cast<double>(both.size()) / static_cast<double>(p.size());
  const double recall = static_cast<double>(both.size()) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

double token_f1(std::span<const std::vector<std::size_t>> pred, std::span<const std::vector<std::size_t>> gold) {
  if (pred.size() != gold.size()) throw DimensionError("token_f1: prediction and gold counts differ");
  std::vector<double> f(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) f[i] = token_f1(pred[i], gold[i]);
  return pairwise_mean(f);
}

double map_score(std::span<const std::size_t> original, std::span<const std::size_t> perturbed) {
  if (original.empty() || perturbed.empty()) throw ContractError("map_score: empty ranking");
  double total = 0.0;
  for (std::size_t i = 1; i <= perturbed.size(); ++i) {
    const auto prefix = original.first(std::min(i, original.size()));
    std::size_t hits = 0;
    for (std::size_t j = 0; j < i; ++j) hits += std::find(prefix.begin(), prefix.end(), perturbed[j]) != prefix.end();
    total += static_cast<double>(hits) / static_cast<double>(i);
  }
  return total / static_cast<double>(perturbed.size());
}

ProbabilityFn model_probabilities(const DercModel& model, double alpha) {
  return [&model, alpha](std::span<const EncodedInput> inputs) { return predict(model, inputs, alpha).top; };
}

EncodedInput rationale_only(const EncodedInput& input, std::span<const std::size_t> keep) {
  return filter_positions(input, keep, true);
}

EncodedInput rationale_removed(const EncodedInput& input, std::span<const std::size_t> drop) {
  return filter_positions(input, drop, false);
}

std::vector<double> sufficiency_terms(const ProbabilityFn& f, std::span<const EncodedInput> inputs,
                                      std::span<const std::vector<std::size_t>> rationales) {
  return contrast_terms(f, inputs, rationales, true);
}

std::vector<double> comprehensiveness_terms(const ProbabilityFn& f, std::span<const EncodedInput> inputs,
                                            std::span<const std::vector<std::size_t>> rationales) {
  return contrast_terms(f, inputs, rationales, false);
}

double suff(const ProbabilityFn& f, std::span<const EncodedInput> inputs,
            std::span<const std::vector<std::size_t>> rationales) {
  return pairwise_mean(sufficiency_terms(f, inputs, rationales));
}

double comp(const ProbabilityFn& f, std::span<const EncodedInput> inputs,
            std::span<const std::vector<std::size_t>> rationales) {
  return pairwise_mean(comprehensiveness_terms(f, inputs, rationales));
}

std::vector<Instance> perturb(const Instance& inst, const Vocabulary& vocab, std::size_t n_perturbations,
                              std::uint64_t seed, std::ostream* warnings) {
  std::vector<std::pair<int, std::size_t>> slots;
  for (std::size_t i = 0; i < inst.tokens_a.size(); ++i)
    if (vocab.is_filler(inst.tokens_a[i])) slots.emplace_back(0, i);
  for (std::size_t i = 0; i < inst.tokens_b.size(); ++i)
    if (vocab.is_filler(inst.tokens_b[i])) slots.emplace_back(1, i);
  if (slots.empty() || vocab.num_fillers() < 2) {
    if (warnings) *warnings << "warning: instance " << inst.id << " has no replaceable filler; skipped\n";
    return {};
  }
  std::mt19937_64 rng(seed);
  std::vector<Instance> out;
  out.reserve(n_perturbations);
  for (std::size_t p = 0; p < n_perturbations; ++p) {
    Instance copy = inst;
    copy.id = inst.id + "-p" + std::to_string(p);
    const auto [side, index] = slots[uniform_index(rng, slots.size())];
    std::size_t& token = side == 0 ? copy.tokens_a[index] : copy.tokens_b[index];
    const std::size_t current = token - vocab.filler(0);
    std::size_t pick = uniform_index(rng, vocab.num_fillers() - 1);
    if (pick >= current) ++pick;
    token = vocab.filler(pick);
    copy.overlap_ratio = overlap_ratio(copy.tokens_a, copy.tokens_b);
    copy.bias_tag = tag_instance(copy.overlap_ratio, copy.label);
    out.push_back(std::move(copy));
  }
  return out;
}

InterpResult interpret(const DercModel& model, std::span<const Instance> instances, const Vocabulary& vocab,
                       const InterpOptions& options, std::ostream* warnings) {
  if (instances.empty()) throw ContractError("interpret: no instances");
  const std::size_t max_len = model.encoder_config().max_len;
  const std::vector<EncodedInput> inputs = encode_instances(instances, max_len);
  const std::vector<TokenScores> scores = attention_importance(model, inputs);

  InterpResult result;
  std::vector<std::vector<std::size_t>> selected, gold;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (instances[i].gold_rationale.empty()) {
      throw ContractError("interpret: instance " + instances[i].id + " has no gold rationale");
    }
    result.rationales.push_back(extract_rationale(scores[i], instances[i].gold_rationale.size(), instances[i].id));
    selected.push_back(result.rationales.back().selected());
    gold.push_back(instances[i].gold_rationale);
  }

  // Perturbed copies keep every position, so positions compare directly.
  std::vector<Instance> perturbed;
  std::vector<std::size_t> source;
  const std::uint64_t base = derive_seed(options.seed, SeedStream::Perturb);
  for (std::size_t i = 0; i < instances.size(); ++i) {
    for (Instance& p : perturb(instances[i], vocab, options.n_perturbations, base + i, warnings)) {
      perturbed.push_back(std::move(p));
      source.push_back(i);
    }
  }
  std::vector<double> maps;
  if (!perturbed.empty()) {
    const std::vector<EncodedInput> p_inputs = encode_instances(perturbed, max_len);
    const std::vector<TokenScores> p_scores = attention_importance(model, p_inputs);
    for (std::size_t j = 0; j < perturbed.size(); ++j) {
      const Rationale r = extract_rationale(p_scores[j], result.rationales[source[j]].k);
      maps.push_back(map_score(selected[source[j]], r.selected()));
    }
  }

  const ProbabilityFn f = model_probabilities(model, options.alpha);
  result.report.token_f1 = token_f1(selected, gold);
  result.report.map = maps.empty() ? 0.0 : pairwise_mean(maps);
  result.report.suff = suff(f, inputs, selected);
  result.report.comp = comp(f, inputs, selected);
  result.report.n = instances.size();
  return result;
}

void write_interp_csv(std::span<const InterpReport> reports, std::ostream& out) {
  const auto old = out.precision(17);
  out << "model_tag,token_f1,map,suff,comp,n\n";
  for (const InterpReport& r : reports) {
    out << r.model_tag << ',' << r.token_f1 << ',' << r.map << ',' << r.suff << ',' << r.comp << ',' << r.n << '\n';
  }
  out.precision(old);
}

void write_rationales_jsonl(std::span<const Rationale> rationales, std::ostream& out) {
  for (const Rationale& r : rationales) {
    nlohmann::ordered_json j;
    j["instance_id"] = r.instance_id;
    j["ranked_tokens"] = r.ranked_tokens;
    j["scores"] = r.scores;
    j["k"] = r.k;
    out << j.dump() << '\n';
  }
}

}  // namespace derc
