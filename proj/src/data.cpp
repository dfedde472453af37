#include "derc/data.hpp"

#include "derc/encoder.hpp"
#include "derc/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

namespace derc {

using ojson = nlohmann::ordered_json;

DataFormatError::DataFormatError(std::size_t line, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

Vocabulary::Vocabulary(std::size_t n_classes, std::size_t synonyms, std::size_t n_filler)
    : n_classes_(n_classes),
      synonyms_(synonyms),
      n_filler_(n_filler),
      first_filler_(tokens::kNumSpecial + n_classes * synonyms) {}

std::size_t Vocabulary::keyword(std::size_t cls, std::size_t synonym) const {
  if (cls >= n_classes_ || synonym >= synonyms_) throw IndexError("keyword index out of range");
  return tokens::kNumSpecial + cls * synonyms_ + synonym;
}

bool Vocabulary::is_keyword(std::size_t token) const {
  return token >= tokens::kNumSpecial && token < first_filler_;
}

std::size_t Vocabulary::keyword_class(std::size_t token) const {
  if (!is_keyword(token)) throw IndexError("token " + std::to_string(token) + " is not a keyword");
  return (token - tokens::kNumSpecial) / synonyms_;
}

std::string Vocabulary::surface(std::size_t token) const {
  if (token == tokens::kPad) return "[PAD]";
  if (token == tokens::kCls) return "[CLS]";
  if (token == tokens::kSep) return "[SEP]";
  if (is_keyword(token)) {
    const std::size_t k = token - tokens::kNumSpecial;
    return "kw" + std::to_string(k / synonyms_) + "_" + std::to_string(k % synonyms_);
  }
  if (is_filler(token)) return "w" + std::to_string(token - first_filler_);
  throw IndexError("token " + std::to_string(token) + " outside vocabulary");
}

namespace {

struct LengthChoice {
  std::size_t len_a, len_b;
  std::vector<std::size_t> shared_counts;
};

// Sentence lengths count the keyword. Shared fillers m plus a shared
// keyword must put the ratio strictly beyond the requested threshold.
std::vector<LengthChoice> feasible_lengths(const DatasetSpec& spec, bool high, bool same_keyword) {
  std::vector<LengthChoice> out;
  for (std::size_t na = spec.min_sentence_len; na <= spec.max_sentence_len; ++na) {
    for (std::size_t nb = spec.min_sentence_len; nb <= spec.max_sentence_len; ++nb) {
      LengthChoice c{na, nb, {}};
      const double longest = static_cast<double>(std::max(na, nb));
      for (std::size_t m = 0; m < std::min(na, nb); ++m) {
        const double r = static_cast<double>(m + (same_keyword ? 1 : 0)) / longest;
        if (high ? r > kHighOverlap : r < kLowOverlap) c.shared_counts.push_back(m);
      }
      if (!c.shared_counts.empty()) out.push_back(std::move(c));
    }
  }
  return out;
}

struct Plans {
  // Indexed by [high][same_keyword].
  std::vector<LengthChoice> table[2][2];
};

Plans make_plans(const DatasetSpec& spec) {
  Plans p;
  for (int high = 0; high < 2; ++high) {
    for (int same = 0; same < 2; ++same) p.table[high][same] = feasible_lengths(spec, high, same);
  }
  return p;
}

std::size_t draw_distinct(std::mt19937_64& rng, const Vocabulary& vocab, const std::vector<std::size_t>& avoid_a,
                          const std::vector<std::size_t>& avoid_b) {
  for (;;) {
    const std::size_t t = vocab.filler(uniform_index(rng, vocab.num_fillers()));
    if (std::find(avoid_a.begin(), avoid_a.end(), t) != avoid_a.end()) continue;
    if (std::find(avoid_b.begin(), avoid_b.end(), t) != avoid_b.end()) continue;
    return t;
  }
}

Instance make_instance(std::mt19937_64& rng, const DatasetSpec& spec, const Vocabulary& vocab, const Plans& plans,
                       bool duplicate, bool agrees) {
  const bool high = duplicate == agrees;
  const std::size_t C = spec.n_keyword_classes, S = spec.synonyms_per_class;
  const std::size_t ca = uniform_index(rng, C);
  const std::size_t sa = uniform_index(rng, S);
  const std::size_t cb = duplicate ? ca : (ca + 1 + uniform_index(rng, C - 1)) % C;
  const std::size_t sb = uniform_index(rng, S);
  const std::size_t ka = vocab.keyword(ca, sa), kb = vocab.keyword(cb, sb);
  const bool same = ka == kb;

  const auto& choices = plans.table[high][same];
  const LengthChoice& len = choices[uniform_index(rng, choices.size())];
  const std::size_t m = len.shared_counts[uniform_index(rng, len.shared_counts.size())];

  const std::vector<std::size_t> none;
  std::vector<std::size_t> fa;
  while (fa.size() + 1 < len.len_a) fa.push_back(draw_distinct(rng, vocab, fa, none));
  std::vector<std::size_t> shared = fa;
  shuffle_in_place(shared, rng);
  std::vector<std::size_t> fb(shared.begin(), shared.begin() + static_cast<std::ptrdiff_t>(m));
  while (fb.size() + 1 < len.len_b) fb.push_back(draw_distinct(rng, vocab, fa, fb));
  shuffle_in_place(fb, rng);

  const std::size_t pa = uniform_index(rng, len.len_a), pb = uniform_index(rng, len.len_b);
  Instance inst;
  inst.tokens_a = fa;
  inst.tokens_a.insert(inst.tokens_a.begin() + static_cast<std::ptrdiff_t>(pa), ka);
  inst.tokens_b = fb;
  inst.tokens_b.insert(inst.tokens_b.begin() + static_cast<std::ptrdiff_t>(pb), kb);
  inst.label = duplicate ? labels::kDuplicate : labels::kNonDuplicate;
  inst.overlap_ratio = overlap_ratio(inst.tokens_a, inst.tokens_b);
  inst.bias_tag = tag_instance(inst.overlap_ratio, inst.label);
  inst.gold_rationale = {1 + pa, len.len_a + 2 + pb};
  if (inst.bias_tag != (agrees ? BiasTag::Biased : BiasTag::AntiBiased)) {
    throw GenerationError("internal: generated overlap missed its target quadrant");
  }
  return inst;
}

std::size_t cumulative_count(double rate, std::size_t n) {
  return static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
}

std::vector<Instance> generate_split(const DatasetSpec& spec, const Vocabulary& vocab, const Plans& plans,
                                     const std::string& name, std::size_t n, double rate, std::size_t& shard) {
  std::vector<Instance> out;
  out.reserve(n);
  for (std::size_t begin = 0; begin < n; begin += spec.shard_size, ++shard) {
    const std::size_t end = std::min(n, begin + spec.shard_size);
    std::mt19937_64 rng(spec.seed + shard);
    const std::size_t dups = end / 2 - begin / 2;
    const std::size_t agree = cumulative_count(rate, end) - cumulative_count(rate, begin);
    std::vector<char> is_dup(end - begin, 0), agrees(end - begin, 0);
    std::fill(is_dup.begin(), is_dup.begin() + static_cast<std::ptrdiff_t>(dups), 1);
    std::fill(agrees.begin(), agrees.begin() + static_cast<std::ptrdiff_t>(agree), 1);
    shuffle_in_place(is_dup, rng);
    shuffle_in_place(agrees, rng);
    for (std::size_t i = 0; i < end - begin; ++i) {
      Instance inst = make_instance(rng, spec, vocab, plans, is_dup[i], agrees[i]);
      const std::string num = std::to_string(begin + i);
      inst.id = name + "-" + std::string(num.size() < 6 ? 6 - num.size() : 0, '0') + num;
      out.push_back(std::move(inst));
    }
  }
  return out;
}

}  // namespace

void DatasetSpec::validate() const {
  if (n_train == 0 || n_val == 0 || n_ood == 0) throw GenerationError("split counts must be positive");
  for (double r : {bias_rate, bias_rate_ood}) {
    if (!(r >= 0.0 && r <= 1.0)) throw GenerationError("bias rates must lie in [0, 1]");
  }
  if (n_keyword_classes < 2) throw GenerationError("n_keyword_classes must be at least 2 for non-duplicate pairs");
  if (synonyms_per_class < 1) throw GenerationError("synonyms_per_class must be positive");
  if (shard_size == 0) throw GenerationError("shard_size must be positive");
  if (min_sentence_len < 2 || min_sentence_len > max_sentence_len) {
    throw GenerationError("sentence length range [" + std::to_string(min_sentence_len) + ", " +
                          std::to_string(max_sentence_len) + "] is invalid; need 2 <= min <= max");
  }
  if (n_filler < 2 * (max_sentence_len - 1)) {
    throw GenerationError("n_filler " + std::to_string(n_filler) +
                          " cannot supply two disjoint sentences of length " + std::to_string(max_sentence_len));
  }
  const Plans plans = make_plans(*this);
  for (int high = 0; high < 2; ++high) {
    for (int same = 0; same < 2; ++same) {
      if (plans.table[high][same].empty()) {
        throw GenerationError(std::string("overlap ratio ") + (high ? "> 0.7" : "< 0.3") +
                              " is unreachable with sentence lengths in [" + std::to_string(min_sentence_len) +
                              ", " + std::to_string(max_sentence_len) + "]" +
                              (same ? " when the keywords coincide" : ""));
      }
    }
  }
}

Dataset generate(const DatasetSpec& spec) {
  spec.validate();
  const Vocabulary vocab(spec);
  const Plans plans = make_plans(spec);
  std::size_t shard = 0;
  Dataset d;
  d.train = generate_split(spec, vocab, plans, "train", spec.n_train, spec.bias_rate, shard);
  d.val = generate_split(spec, vocab, plans, "val", spec.n_val, spec.bias_rate, shard);
  d.ood = generate_split(spec, vocab, plans, "ood", spec.n_ood, spec.bias_rate_ood, shard);
  return d;
}

std::size_t semantic_label(const Instance& inst, const Vocabulary& vocab) {
  auto find_class = [&](const std::vector<std::size_t>& toks) {
    for (std::size_t t : toks) {
      if (vocab.is_keyword(t)) return vocab.keyword_class(t);
    }
    throw ContractError("instance " + inst.id + " has a sentence without a keyword");
  };
  return find_class(inst.tokens_a) == find_class(inst.tokens_b) ? labels::kDuplicate : labels::kNonDuplicate;
}

void write_jsonl(std::span<const Instance> instances, std::ostream& out) {
  for (const Instance& inst : instances) {
    ojson j;
    j["id"] = inst.id;
    j["tokens_a"] = inst.tokens_a;
    j["tokens_b"] = inst.tokens_b;
    j["label"] = label_name(inst.label);
    j["overlap_ratio"] = inst.overlap_ratio;
    j["bias_tag"] = to_string(inst.bias_tag);
    j["gold_rationale"] = inst.gold_rationale;
    out << j.dump() << '\n';
  }
}

void write_jsonl(std::span<const Instance> instances, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_jsonl(instances, out);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

namespace {

const std::set<std::string> kFields = {"id",           "tokens_a", "tokens_b",      "label",
                                       "overlap_ratio", "bias_tag", "gold_rationale"};

Instance parse_line(const std::string& text, std::size_t line, std::ostream* warnings) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataFormatError(line, std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw DataFormatError(line, "expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!kFields.count(key) && warnings) *warnings << "warning: line " << line << ": ignoring unknown field '" << key << "'\n";
  }
  auto require = [&](const char* key) -> const ojson& {
    const auto it = j.find(key);
    if (it == j.end()) throw DataFormatError(line, std::string("missing field '") + key + "'");
    return *it;
  };
  Instance inst;
  try {
    inst.id = require("id").get<std::string>();
    inst.tokens_a = require("tokens_a").get<std::vector<std::size_t>>();
    inst.tokens_b = require("tokens_b").get<std::vector<std::size_t>>();
    inst.label = parse_label(require("label").get<std::string>());
    inst.overlap_ratio = require("overlap_ratio").get<double>();
    inst.bias_tag = parse_bias_tag(require("bias_tag").get<std::string>());
    inst.gold_rationale = require("gold_rationale").get<std::vector<std::size_t>>();
  } catch (const DataFormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataFormatError(line, e.what());
  }
  return inst;
}

}  // namespace

std::vector<Instance> read_jsonl(std::istream& in, std::ostream* warnings) {
  std::vector<Instance> out;
  std::string text;
  for (std::size_t line = 1; std::getline(in, text); ++line) {
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_line(text, line, warnings));
  }
  return out;
}

std::vector<Instance> read_jsonl(const std::filesystem::path& path, std::ostream* warnings) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_jsonl(in, warnings);
}

void write_vocab_json(const Vocabulary& vocab, const std::filesystem::path& path) {
  ojson j = ojson::object();
  for (std::size_t t = 0; t < vocab.size(); ++t) j[std::to_string(t)] = vocab.surface(t);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

SplitSummary summarize(std::span<const Instance> instances) {
  SplitSummary s;
  for (const Instance& inst : instances) {
    ++s.count;
    if (inst.label == labels::kDuplicate) ++s.duplicates;
    switch (inst.bias_tag) {
      case BiasTag::Biased: ++s.biased; break;
      case BiasTag::AntiBiased: ++s.anti_biased; break;
      case BiasTag::Neutral: ++s.neutral; break;
    }
  }
  return s;
}

}  // namespace derc
