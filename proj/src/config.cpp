#include "derc/config.hpp"

#include "derc/random.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <type_traits>

namespace derc {

using nlohmann::json;

void to_json(json& j, const Mode& m) { j = std::string(to_string(m)); }
void from_json(const json& j, Mode& m) { m = parse_mode(j.get<std::string>()); }

namespace {

template <typename C, typename F>
void visit_fields(C& c, F&& f) {
  f("seed", c.seed);
  f("data_dir", c.data_dir);
  f("n_train", c.dataset.n_train);
  f("n_val", c.dataset.n_val);
  f("n_ood", c.dataset.n_ood);
  f("bias_rate", c.dataset.bias_rate);
  f("bias_rate_ood", c.dataset.bias_rate_ood);
  f("n_keyword_classes", c.dataset.n_keyword_classes);
  f("synonyms_per_class", c.dataset.synonyms_per_class);
  f("n_filler", c.dataset.n_filler);
  f("min_sentence_len", c.dataset.min_sentence_len);
  f("max_sentence_len", c.dataset.max_sentence_len);
  f("shard_size", c.dataset.shard_size);
  f("num_layers", c.encoder.num_layers);
  f("d_model", c.encoder.d_model);
  f("num_heads", c.encoder.num_heads);
  f("d_ff", c.encoder.d_ff);
  f("max_len", c.encoder.max_len);
  f("init_std", c.encoder.init_std);
  f("mode", c.derc.mode);
  f("l_b", c.derc.l_b);
  f("alpha", c.derc.alpha);
  f("epochs", c.train.epochs);
  f("batch_size", c.train.batch_size);
  f("learning_rate", c.train.learning_rate);
  f("beta1", c.train.beta1);
  f("beta2", c.train.beta2);
  f("adam_eps", c.train.adam_eps);
  f("history_interval", c.train.history_interval);
  f("probe_epochs", c.probe.epochs);
  f("probe_batch_size", c.probe.batch_size);
  f("probe_learning_rate", c.probe.learning_rate);
  f("smoothing_window", c.probe.smoothing_window);
  f("n_perturbations", c.n_perturbations);
  f("interp_split", c.interp_split);
  f("sweep_layers", c.sweep_layers);
  f("alphas", c.alphas);
}

template <typename T>
void check_kind(const std::string& key, const json& v) {
  if constexpr (std::is_same_v<T, std::uint64_t> || std::is_same_v<T, std::size_t>) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError("config key '" + key + "' must be a non-negative integer");
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  } else if constexpr (std::is_same_v<T, std::string> || std::is_same_v<T, Mode>) {
    if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
  } else {
    if (!v.is_array()) throw ConfigError("config key '" + key + "' must be an array");
    for (const json& e : v) check_kind<typename T::value_type>(key, e);
  }
}

}  // namespace

void to_json(json& j, const EncoderConfig& c) {
  j = json{{"num_layers", c.num_layers}, {"d_model", c.d_model}, {"num_heads", c.num_heads},
           {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
           {"seed", c.seed},             {"init_std", c.init_std}};
}

void from_json(const json& j, EncoderConfig& c) {
  j.at("num_layers").get_to(c.num_layers);
  j.at("d_model").get_to(c.d_model);
  j.at("num_heads").get_to(c.num_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_len").get_to(c.max_len);
  j.at("seed").get_to(c.seed);
  j.at("init_std").get_to(c.init_std);
}

void to_json(json& j, const DercConfig& c) {
  j = json{{"l_b", c.l_b}, {"mode", c.mode}, {"alpha", c.alpha}, {"num_labels", c.num_labels}};
}

void from_json(const json& j, DercConfig& c) {
  j.at("l_b").get_to(c.l_b);
  j.at("mode").get_to(c.mode);
  j.at("alpha").get_to(c.alpha);
  j.at("num_labels").get_to(c.num_labels);
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  std::set<std::string> known;
  visit_fields(c, [&](const char* name, auto& field) {
    known.insert(name);
    if (!j.contains(name)) return;
    using T = std::decay_t<decltype(field)>;
    const json& v = j.at(name);
    check_kind<T>(name, v);
    try {
      field = v.get<T>();
    } catch (const std::exception& e) {
      throw ConfigError("config key '" + std::string(name) + "': " + e.what());
    }
  });
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  c.resolve();
  return c;
}

json ExperimentConfig::to_json() const {
  json j = json::object();
  ExperimentConfig copy = *this;
  visit_fields(copy, [&](const char* name, auto& field) { j[name] = field; });
  return j;
}

void ExperimentConfig::resolve() {
  dataset.seed = derive_seed(seed, SeedStream::Data);
  encoder.seed = derive_seed(seed, SeedStream::Init);
  train.seed = derive_seed(seed, SeedStream::Shuffle);
  probe.seed = derive_seed(seed, SeedStream::Probe);
  encoder.vocab_size = Vocabulary(dataset).size();
  probe.init_std = encoder.init_std;
}

void ExperimentConfig::validate() const {
  try {
    dataset.validate();
    encoder.validate();
    derc.validate(encoder.num_layers);
    train.validate();
    probe.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  if (interp_split != "val" && interp_split != "ood") throw ConfigError("interp_split must be 'val' or 'ood'");
  if (n_perturbations == 0) throw ConfigError("n_perturbations must be positive");
  for (std::size_t l : sweep_layers) {
    if (l < 1 || l >= encoder.num_layers) {
      throw ConfigError("sweep layer " + std::to_string(l) + " must lie in [1, " +
                        std::to_string(encoder.num_layers - 1) + "]");
    }
  }
  for (double a : alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("alpha grid values must lie in [0, 1]");
  }
}

std::vector<std::size_t> ExperimentConfig::resolved_sweep_layers() const {
  if (!sweep_layers.empty()) return sweep_layers;
  std::vector<std::size_t> out;
  for (std::size_t l = 1; l < encoder.num_layers; ++l) out.push_back(l);
  return out;
}

std::vector<double> ExperimentConfig::resolved_alphas() const {
  if (!alphas.empty()) return alphas;
  std::vector<double> out;
  for (int i = 0; i <= 10; ++i) out.push_back(i / 10.0);
  return out;
}

std::uint64_t ExperimentConfig::hash() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string ExperimentConfig::hash_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
  return buf;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

void save_config(const ExperimentConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config " + path.string());
  out << config.to_json().dump(2) << '\n';
}

}  // namespace derc
