#include "derc/encoder.hpp"

namespace derc {

namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Buffer v(shape_size(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

void EncoderConfig::validate() const {
  if (num_layers < 2) throw ContractError("encoder needs at least 2 layers");
  if (d_model == 0 || num_heads == 0 || d_model % num_heads != 0) {
    throw ContractError("d_model " + std::to_string(d_model) + " must be a positive multiple of num_heads " +
                        std::to_string(num_heads));
  }
  if (d_ff == 0) throw ContractError("d_ff must be positive");
  if (vocab_size <= tokens::kNumSpecial) throw ContractError("vocab_size must exceed the special tokens");
  if (max_len < 5) throw ContractError("max_len too small for a pair input");
  if (!(init_std > 0.0)) throw ContractError("init_std must be positive");
}

EncodedInput build_input(std::span<const std::size_t> tokens_a, std::span<const std::size_t> tokens_b,
                         std::size_t max_len) {
  if (tokens_a.empty() || tokens_b.empty()) {
    throw ContractError("build_input: both sentences must be nonempty");
  }
  const std::size_t total = tokens_a.size() + tokens_b.size() + 3;
  if (total > max_len) {
    throw InputTooLongError("build_input: input of " + std::to_string(total) + " tokens exceeds max_len " +
                            std::to_string(max_len));
  }
  return wrap_pair(tokens_a, tokens_b);
}

EncodedInput wrap_pair(std::span<const std::size_t> tokens_a, std::span<const std::size_t> tokens_b) {
  EncodedInput in;
  in.tokens.reserve(tokens_a.size() + tokens_b.size() + 3);
  in.tokens.push_back(tokens::kCls);
  in.tokens.insert(in.tokens.end(), tokens_a.begin(), tokens_a.end());
  in.tokens.push_back(tokens::kSep);
  in.segments.assign(in.tokens.size(), 0);
  in.tokens.insert(in.tokens.end(), tokens_b.begin(), tokens_b.end());
  in.tokens.push_back(tokens::kSep);
  in.segments.resize(in.tokens.size(), 1);
  return in;
}

PackedBatch pack_inputs(std::span<const EncodedInput> inputs) {
  PackedBatch batch;
  for (const EncodedInput& in : inputs) {
    if (in.tokens.size() != in.segments.size() || in.tokens.empty()) {
      throw DimensionError("pack_inputs: token/segment length mismatch");
    }
    const std::size_t offset = batch.tokens.size();
    batch.spans.push_back({offset, in.tokens.size()});
    batch.cls_rows.push_back(offset);
    batch.tokens.insert(batch.tokens.end(), in.tokens.begin(), in.tokens.end());
    batch.segments.insert(batch.segments.end(), in.segments.begin(), in.segments.end());
    for (std::size_t p = 0; p < in.tokens.size(); ++p) batch.positions.push_back(p);
  }
  return batch;
}

double BatchStates::attention(std::size_t layer, std::size_t sequence, std::size_t head, std::size_t row,
                              std::size_t col) const {
  if (layer == 0 || layer > attentions.size()) throw IndexError("attention: layer out of range");
  std::size_t offset = 0;
  for (std::size_t s = 0; s < sequence; ++s) offset += num_heads * spans[s].length * spans[s].length;
  const std::size_t n = spans.at(sequence).length;
  return attentions[layer - 1][offset + head * n * n + row * n + col];
}

Encoder::Encoder(const EncoderConfig& config, ParameterSet& params, std::mt19937_64& rng,
                 const std::string& prefix)
    : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model, ff = config_.d_ff;
  const double sd = config_.init_std;
  first_ = params.size();
  params.add(prefix + "embed.token", normal_tensor({config_.vocab_size, d}, sd, rng));
  params.add(prefix + "embed.position", normal_tensor({config_.max_len, d}, sd, rng));
  params.add(prefix + "embed.segment", normal_tensor({2, d}, sd, rng));
  params.add(prefix + "embed.ln.gamma", Tensor::filled({d}, 1.0));
  params.add(prefix + "embed.ln.beta", Tensor::zeros({d}));
  for (std::size_t l = 1; l <= config_.num_layers; ++l) {
    const std::string p = prefix + "layer." + std::to_string(l) + ".";
    params.add(p + "attn.q.weight", normal_tensor({d, d}, sd, rng));
    params.add(p + "attn.q.bias", Tensor::zeros({d}));
    params.add(p + "attn.k.weight", normal_tensor({d, d}, sd, rng));
    params.add(p + "attn.k.bias", Tensor::zeros({d}));
    params.add(p + "attn.v.weight", normal_tensor({d, d}, sd, rng));
    params.add(p + "attn.v.bias", Tensor::zeros({d}));
    params.add(p + "attn.out.weight", normal_tensor({d, d}, sd, rng));
    params.add(p + "attn.out.bias", Tensor::zeros({d}));
    params.add(p + "ln1.gamma", Tensor::filled({d}, 1.0));
    params.add(p + "ln1.beta", Tensor::zeros({d}));
    params.add(p + "mlp.in.weight", normal_tensor({ff, d}, sd, rng));
    params.add(p + "mlp.in.bias", Tensor::zeros({ff}));
    params.add(p + "mlp.out.weight", normal_tensor({d, ff}, sd, rng));
    params.add(p + "mlp.out.bias", Tensor::zeros({d}));
    params.add(p + "ln2.gamma", Tensor::filled({d}, 1.0));
    params.add(p + "ln2.beta", Tensor::zeros({d}));
  }
  count_ = params.size() - first_;
}

Tensor Encoder::embed(std::span<const Tensor> w, const PackedBatch& batch) const {
  for (std::size_t s : batch.segments) {
    if (s > 1) throw IndexError("embed: segment id " + std::to_string(s) + " out of range");
  }
  for (const SequenceSpan& span : batch.spans) {
    if (span.length > config_.max_len) {
      throw InputTooLongError("embed: sequence of " + std::to_string(span.length) + " tokens exceeds max_len " +
                              std::to_string(config_.max_len));
    }
  }
  const Tensor tok = gather_rows(w[first_], batch.tokens);
  const Tensor pos = gather_rows(w[first_ + 1], batch.positions);
  const Tensor seg = gather_rows(w[first_ + 2], batch.segments);
  return layer_norm(add(add(tok, pos), seg), w[first_ + 3], w[first_ + 4]);
}

Encoder::LayerOutput Encoder::layer(std::span<const Tensor> w, const Tensor& h, const PackedBatch& batch,
                                    std::size_t l) const {
  if (l == 0 || l > config_.num_layers) throw IndexError("encoder layer " + std::to_string(l) + " out of range");
  auto P = [&](LayerParam p) -> const Tensor& { return w[layer_param(l, p)]; };
  const Tensor q = linear(h, P(kWq), P(kBq));
  const Tensor k = linear(h, P(kWk), P(kBk));
  const Tensor v = linear(h, P(kWv), P(kBv));
  AttentionResult attn = multi_head_attention(q, k, v, batch.spans, config_.num_heads);
  const Tensor h1 = layer_norm(add(h, linear(attn.context, P(kWo), P(kBo))), P(kLn1Gamma), P(kLn1Beta));
  const Tensor ff = linear(gelu(linear(h1, P(kW1), P(kB1))), P(kW2), P(kB2));
  return {layer_norm(add(h1, ff), P(kLn2Gamma), P(kLn2Beta)), std::move(attn.probabilities)};
}

BatchStates Encoder::forward(std::span<const Tensor> w, const PackedBatch& batch) const {
  return forward(w, batch, config_.num_layers);
}

BatchStates Encoder::forward(std::span<const Tensor> w, const PackedBatch& batch, std::size_t up_to) const {
  if (up_to > config_.num_layers) throw IndexError("forward: layer " + std::to_string(up_to) + " out of range");
  BatchStates out;
  out.spans = batch.spans;
  out.cls_rows = batch.cls_rows;
  out.num_heads = config_.num_heads;
  out.states.push_back(embed(w, batch));
  for (std::size_t l = 1; l <= up_to; ++l) {
    LayerOutput o = layer(w, out.states.back(), batch, l);
    out.states.push_back(std::move(o.hidden));
    out.attentions.push_back(std::move(o.attention));
  }
  return out;
}

LayerStates Encoder::encode(std::span<const Tensor> w, const EncodedInput& input) const {
  const EncodedInput inputs[] = {input};
  const PackedBatch batch = pack_inputs(inputs);
  const BatchStates bs = forward(w, batch);
  LayerStates out;
  out.states = bs.states;
  const std::size_t n = input.size();
  for (const auto& a : bs.attentions) out.attentions.emplace_back(Shape{config_.num_heads, n, n}, a);
  return out;
}

Tensor cls_at(const LayerStates& states, std::size_t layer) {
  if (layer >= states.states.size()) {
    throw IndexError("cls_at: layer " + std::to_string(layer) + " out of range 0.." +
                     std::to_string(states.states.size() - 1));
  }
  const std::size_t row[] = {0};
  const Tensor& h = states.states[layer];
  return gather_rows(h, row).reshape({h.dim(1)});
}

Tensor cls_rows(const BatchStates& states, std::size_t layer) {
  if (layer >= states.states.size()) {
    throw IndexError("cls_rows: layer " + std::to_string(layer) + " out of range 0.." +
                     std::to_string(states.states.size() - 1));
  }
  return gather_rows(states.states[layer], states.cls_rows);
}

}  // namespace derc
