#include "csmcir/harness/config.hpp"

#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <toml.hpp>

#include "csmcir/error.hpp"

namespace csmcir::harness {

using nlohmann::json;

std::string_view to_string(BankPolicy p) {
  switch (p) {
    case BankPolicy::eamb: return "eamb";
    case BankPolicy::fifo: return "fifo";
    case BankPolicy::none: return "none";
  }
  return "?";
}

BankPolicy parse_bank_policy(std::string_view s) {
  if (s == "eamb") return BankPolicy::eamb;
  if (s == "fifo") return BankPolicy::fifo;
  if (s == "none") return BankPolicy::none;
  throw ContractError("bank_policy must be one of eamb, fifo, none (got '" + std::string(s) + "')");
}

std::string_view to_string(NegativeSelection s) {
  return s == NegativeSelection::per_anchor ? "per_anchor" : "entry_cls";
}

NegativeSelection parse_negative_selection(std::string_view s) {
  if (s == "per_anchor") return NegativeSelection::per_anchor;
  if (s == "entry_cls") return NegativeSelection::entry_cls;
  throw ContractError("negative_selection must be per_anchor or entry_cls (got '" + std::string(s) + "')");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (bank_policy == BankPolicy::none) {
    if (memory_size != 0) throw ContractError("bank_policy = none requires memory_size = 0");
  } else if (memory_size < batch_size) {
    throw ContractError("memory_size must be 0 or >= batch_size");
  }
  if (bank_policy != BankPolicy::none && n_max < 1) throw ContractError("n_max must be >= 1");
  if (dims.feature_dim < 1 || dims.embed_dim < 1 || dims.ff_dim < 1 || dims.num_query_tokens < 1) {
    throw ContractError("encoder dimensions must be positive");
  }
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ContractError("tau must be positive and finite");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ContractError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ContractError("weight_decay must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ContractError("adam betas must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) throw ContractError("adam_epsilon must be positive");
  if (steps == 0 && epochs == 0) throw ContractError("steps (or epochs) must be positive");
  if (lr_schedule != "cosine" && lr_schedule != "constant") {
    throw ContractError("lr_schedule must be cosine or constant");
  }
  if (eval_interval == 0) throw ContractError("eval_interval must be positive");
  if (data_dir.empty() && !synthetic) throw ContractError("either data_dir or a [data] table is required");
  if (!data_dir.empty() && synthetic) throw ContractError("data_dir and [data] are mutually exclusive");
  if (synthetic) {
    synthetic->validate();
    if (synthetic->feature_dim != dims.feature_dim) {
      throw ContractError("[data].feature_dim must equal feature_dim");
    }
  }
}

// ---- TOML -------------------------------------------------------------------

namespace {

class TableReader {
 public:
  TableReader(const toml::table& table, std::string scope) : table_(table), scope_(std::move(scope)) {}

  void reject_unknown() const {
    for (const auto& [key, node] : table_) {
      if (!seen_.contains(std::string(key.str()))) {
        throw SchemaError("unknown key '" + scope_ + std::string(key.str()) + "'",
                          key.source().begin.line);
      }
    }
  }

  template <typename T>
  void get(const char* key, T& field) {
    seen_.insert(key);
    const toml::node* node = table_.get(key);
    if (node == nullptr) return;
    const auto line = node->source().begin.line;
    if constexpr (std::is_same_v<T, bool>) {
      auto v = node->value<bool>();
      if (!node->is_boolean() || !v) throw SchemaError(scope_ + key + " must be a boolean", line);
      field = *v;
    } else if constexpr (std::is_integral_v<T>) {
      if (!node->is_integer()) throw SchemaError(scope_ + key + " must be an integer", line);
      const std::int64_t v = *node->value<std::int64_t>();
      if (v < 0) throw SchemaError(scope_ + key + " must be non-negative", line);
      field = static_cast<T>(v);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!node->is_number()) throw SchemaError(scope_ + key + " must be a number", line);
      field = *node->value<double>();
    } else {
      if (!node->is_string()) throw SchemaError(scope_ + key + " must be a string", line);
      field = *node->value<std::string>();
    }
  }

  const toml::table* subtable(const char* key) {
    seen_.insert(key);
    const toml::node* node = table_.get(key);
    if (node == nullptr) return nullptr;
    if (!node->is_table()) throw SchemaError(scope_ + key + " must be a table", node->source().begin.line);
    return node->as_table();
  }

 private:
  const toml::table& table_;
  std::string scope_;
  std::set<std::string> seen_;
};

data::SyntheticConfig read_synthetic(const toml::table& table) {
  data::SyntheticConfig s;
  TableReader r(table, "data.");
  r.get("latent_dim", s.latent_dim);
  r.get("raw_dim", s.raw_dim);
  r.get("feature_dim", s.feature_dim);
  r.get("num_attributes", s.num_attributes);
  r.get("num_samples", s.num_samples);
  r.get("train_pool", s.train_pool);
  r.get("gallery_size", s.gallery_size);
  r.get("num_queries", s.num_queries);
  r.get("subset_size", s.subset_size);
  r.get("noise", s.noise);
  r.get("shift_scale", s.shift_scale);
  r.get("seed", s.seed);
  r.reject_unknown();
  return s;
}

toml::table parse_toml(std::string_view text, std::string_view source) {
  try {
    return toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw SchemaError(std::string(source) + ": " + std::string(e.description()), e.source().begin.line);
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TrainConfig parse_train_config(std::string_view toml_text, std::string_view source) {
  const toml::table root = parse_toml(toml_text, source);
  TrainConfig c;
  TableReader r(root, "");
  std::string policy(to_string(c.bank_policy));
  std::string selection(to_string(c.negative_selection));
  r.get("batch_size", c.batch_size);
  r.get("memory_size", c.memory_size);
  r.get("n_max", c.n_max);
  r.get("num_query_tokens", c.dims.num_query_tokens);
  r.get("feature_dim", c.dims.feature_dim);
  r.get("embed_dim", c.dims.embed_dim);
  r.get("ff_dim", c.dims.ff_dim);
  r.get("tau", c.tau);
  r.get("learning_rate", c.learning_rate);
  r.get("weight_decay", c.weight_decay);
  r.get("adam_beta1", c.adam_beta1);
  r.get("adam_beta2", c.adam_beta2);
  r.get("adam_epsilon", c.adam_epsilon);
  r.get("steps", c.steps);
  r.get("epochs", c.epochs);
  r.get("lr_schedule", c.lr_schedule);
  r.get("bank_policy", policy);
  r.get("negative_selection", selection);
  r.get("exclude_self_similarity", c.exclude_self_similarity);
  r.get("eval_interval", c.eval_interval);
  r.get("checkpoint_interval", c.checkpoint_interval);
  r.get("check_invariants", c.check_invariants);
  r.get("seed", c.seed);
  r.get("data_dir", c.data_dir);
  r.get("out_dir", c.out_dir);
  if (const toml::table* t = r.subtable("data")) c.synthetic = read_synthetic(*t);
  r.reject_unknown();
  c.bank_policy = parse_bank_policy(policy);
  c.negative_selection = parse_negative_selection(selection);
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  TrainConfig c = parse_train_config(read_file(path), path.string());
  // Relative data paths resolve against the config file.
  if (!c.data_dir.empty() && std::filesystem::path(c.data_dir).is_relative()) {
    c.data_dir = (path.parent_path() / c.data_dir).lexically_normal().string();
  }
  return c;
}

GenDataConfig load_gen_data_config(const std::filesystem::path& path) {
  const toml::table root = parse_toml(read_file(path), path.string());
  GenDataConfig g;
  TableReader r(root, "");
  r.get("out_dir", g.out_dir);
  const toml::table* t = r.subtable("data");
  r.reject_unknown();
  if (t != nullptr) g.synthetic = read_synthetic(*t);
  g.synthetic.validate();
  if (g.out_dir.empty()) throw ContractError("gen-data config needs out_dir");
  return g;
}

// ---- JSON -------------------------------------------------------------------

json train_config_to_json(const TrainConfig& c) {
  json j;
  j["batch_size"] = c.batch_size;
  j["memory_size"] = c.memory_size;
  j["n_max"] = c.n_max;
  j["num_query_tokens"] = c.dims.num_query_tokens;
  j["feature_dim"] = c.dims.feature_dim;
  j["embed_dim"] = c.dims.embed_dim;
  j["ff_dim"] = c.dims.ff_dim;
  j["tau"] = c.tau;
  j["learning_rate"] = c.learning_rate;
  j["weight_decay"] = c.weight_decay;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_epsilon"] = c.adam_epsilon;
  j["steps"] = c.steps;
  j["epochs"] = c.epochs;
  j["lr_schedule"] = c.lr_schedule;
  j["bank_policy"] = to_string(c.bank_policy);
  j["negative_selection"] = to_string(c.negative_selection);
  j["exclude_self_similarity"] = c.exclude_self_similarity;
  j["eval_interval"] = c.eval_interval;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["check_invariants"] = c.check_invariants;
  j["seed"] = c.seed;
  j["data_dir"] = c.data_dir;
  j["out_dir"] = c.out_dir;
  if (c.synthetic) j["data"] = data::synthetic_config_to_json(*c.synthetic);
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  static const std::set<std::string> known = {
      "batch_size", "memory_size", "n_max", "num_query_tokens", "feature_dim", "embed_dim", "ff_dim",
      "tau", "learning_rate", "weight_decay", "adam_beta1", "adam_beta2", "adam_epsilon", "steps",
      "epochs", "lr_schedule", "bank_policy", "negative_selection", "exclude_self_similarity",
      "eval_interval", "checkpoint_interval", "check_invariants", "seed", "data_dir", "out_dir", "data"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw SchemaError("unknown config key '" + k + "'");
  }
  TrainConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("batch_size", c.batch_size);
  get("memory_size", c.memory_size);
  get("n_max", c.n_max);
  get("num_query_tokens", c.dims.num_query_tokens);
  get("feature_dim", c.dims.feature_dim);
  get("embed_dim", c.dims.embed_dim);
  get("ff_dim", c.dims.ff_dim);
  get("tau", c.tau);
  get("learning_rate", c.learning_rate);
  get("weight_decay", c.weight_decay);
  get("adam_beta1", c.adam_beta1);
  get("adam_beta2", c.adam_beta2);
  get("adam_epsilon", c.adam_epsilon);
  get("steps", c.steps);
  get("epochs", c.epochs);
  get("lr_schedule", c.lr_schedule);
  get("exclude_self_similarity", c.exclude_self_similarity);
  get("eval_interval", c.eval_interval);
  get("checkpoint_interval", c.checkpoint_interval);
  get("check_invariants", c.check_invariants);
  get("seed", c.seed);
  get("data_dir", c.data_dir);
  get("out_dir", c.out_dir);
  if (j.contains("bank_policy")) c.bank_policy = parse_bank_policy(j.at("bank_policy").get<std::string>());
  if (j.contains("negative_selection")) {
    c.negative_selection = parse_negative_selection(j.at("negative_selection").get<std::string>());
  }
  if (j.contains("data")) c.synthetic = data::synthetic_config_from_json(j.at("data"));
  c.validate();
  return c;
}

data::Dataset resolve_dataset(const TrainConfig& cfg) {
  if (cfg.synthetic) return data::generate_synthetic(*cfg.synthetic);
  return data::load_dataset(cfg.data_dir);
}

}  // namespace csmcir::harness
