// SPDX-License-Identifier: Apache-2.0
#include "kdqat/harness/config.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace kdqat {

void DiagnosticsConfig::validate(int sequence_length) const {
  if (top_k < 1 || top_k > sequence_length) throw ConfigError("diagnostics: top_k must lie in [1, sequence length]");
  if (token < 0 || token >= sequence_length) throw ConfigError("diagnostics: token must lie in [0, sequence length)");
  if (examples < 1) throw ConfigError("diagnostics: examples must be >= 1");
  if (power_steps < 1) throw ConfigError("diagnostics: power_steps must be >= 1");
  if (!(power_tol > 0.0)) throw ConfigError("diagnostics: power_tol must be positive");
  if (hessian_seeds < 0 || hessian_examples < 1) throw ConfigError("diagnostics: bad Hessian sample sizes");
}

ExperimentConfig::ExperimentConfig() {
  teacher.epochs = 3;
  teacher.learning_rate = 1e-3;
  qat.epochs = 3;
  qat.learning_rate = 5e-4;
  resolve();
}

void ExperimentConfig::apply_preset(const std::string& name) {
  const auto fresh = KDLossConfig::preset(name);
  kd.terms = fresh.terms;
  kd.unified = fresh.unified;
  preset = name;
}

namespace {

int to_int(const std::string& s, const std::string& what) {
  int v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError(what + ": expected an integer, got '" + s + "'");
  return v;
}

std::uint64_t to_u64(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError(what + ": expected a seed, got '" + s + "'");
  return v;
}

double to_double(const std::string& s, const std::string& what) {
  double v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError(what + ": expected a number, got '" + s + "'");
  return v;
}

bool to_bool(const std::string& s, const std::string& what) {
  if (s == "true" || s == "yes" || s == "1") return true;
  if (s == "false" || s == "no" || s == "0") return false;
  throw ConfigError(what + ": expected true or false, got '" + s + "'");
}

std::string fmt(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string fmt(bool v) { return v ? "true" : "false"; }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> parts;
  boost::split(parts, s, boost::is_any_of(","));
  for (auto& p : parts) boost::trim(p);
  std::erase_if(parts, [](const std::string& p) { return p.empty(); });
  return parts;
}

std::vector<TermWeight> parse_terms(const std::string& s) {
  std::vector<TermWeight> terms;
  for (const auto& item : split_list(s)) {
    const auto colon = item.find(':');
    TermWeight w{parse_loss_term(boost::trim_copy(item.substr(0, colon))), 1.0};
    if (colon != std::string::npos) w.weight = to_double(boost::trim_copy(item.substr(colon + 1)), "kd.terms");
    terms.push_back(w);
  }
  return terms;
}

std::string format_terms(const std::vector<TermWeight>& terms) {
  std::string out;
  for (const auto& w : terms) {
    if (!out.empty()) out += ", ";
    out += std::string(to_string(w.term)) + ":" + fmt(w.weight);
  }
  return out;
}

struct Binding {
  std::string section, key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

void bind_optimizer(std::vector<Binding>& b, const std::string& section, OptimizerConfig& o) {
  const auto w = section + ".";
  b.push_back({section, "epochs", [&, w](auto& s) { o.epochs = to_int(s, w + "epochs"); },
               [&] { return std::to_string(o.epochs); }});
  b.push_back({section, "batch_size", [&, w](auto& s) { o.batch_size = to_int(s, w + "batch_size"); },
               [&] { return std::to_string(o.batch_size); }});
  b.push_back({section, "examples", [&, w](auto& s) { o.examples = to_int(s, w + "examples"); },
               [&] { return std::to_string(o.examples); }});
  b.push_back({section, "learning_rate", [&, w](auto& s) { o.learning_rate = to_double(s, w + "learning_rate"); },
               [&] { return fmt(o.learning_rate); }});
  b.push_back({section, "warmup_fraction",
               [&, w](auto& s) { o.warmup_fraction = to_double(s, w + "warmup_fraction"); },
               [&] { return fmt(o.warmup_fraction); }});
  b.push_back({section, "weight_decay", [&, w](auto& s) { o.weight_decay = to_double(s, w + "weight_decay"); },
               [&] { return fmt(o.weight_decay); }});
  b.push_back({section, "clip_norm", [&, w](auto& s) { o.clip_norm = to_double(s, w + "clip_norm"); },
               [&] { return fmt(o.clip_norm); }});
}

// Field-by-field mapping between the INI text and a config, in output order.
std::vector<Binding> bindings(ExperimentConfig& c) {
  std::vector<Binding> b;
  b.push_back({"run", "seed", [&](auto& s) { c.seed = to_u64(s, "run.seed"); }, [&] { return std::to_string(c.seed); }});

  auto& t = c.task;
  b.push_back({"task", "kind", [&](auto& s) { t.kind = parse_task_kind(s); },
               [&] { return std::string(to_string(t.kind)); }});
  b.push_back({"task", "vocab", [&](auto& s) { t.vocab = to_int(s, "task.vocab"); }, [&] { return std::to_string(t.vocab); }});
  b.push_back({"task", "length", [&](auto& s) { t.length = to_int(s, "task.length"); },
               [&] { return std::to_string(t.length); }});
  b.push_back({"task", "classes", [&](auto& s) { t.classes = to_int(s, "task.classes"); },
               [&] { return std::to_string(t.classes); }});
  b.push_back({"task", "train_size", [&](auto& s) { t.train_size = to_int(s, "task.train_size"); },
               [&] { return std::to_string(t.train_size); }});
  b.push_back({"task", "dev_size", [&](auto& s) { t.dev_size = to_int(s, "task.dev_size"); },
               [&] { return std::to_string(t.dev_size); }});
  b.push_back({"task", "seed", [&](auto& s) { t.seed = to_u64(s, "task.seed"); }, [&] { return std::to_string(t.seed); }});

  auto& m = c.model;
  b.push_back({"model", "layers", [&](auto& s) { m.layers = to_int(s, "model.layers"); },
               [&] { return std::to_string(m.layers); }});
  b.push_back({"model", "hidden", [&](auto& s) { m.hidden = to_int(s, "model.hidden"); },
               [&] { return std::to_string(m.hidden); }});
  b.push_back({"model", "heads", [&](auto& s) { m.heads = to_int(s, "model.heads"); },
               [&] { return std::to_string(m.heads); }});
  b.push_back({"model", "ffn", [&](auto& s) { m.ffn = to_int(s, "model.ffn"); }, [&] { return std::to_string(m.ffn); }});
  b.push_back({"model", "softmax_scale",
               [&](auto& s) {
                 if (s == "hidden") m.softmax_scale = SoftmaxScale::hidden;
                 else if (s == "head") m.softmax_scale = SoftmaxScale::head;
                 else throw ConfigError("model.softmax_scale: expected hidden or head, got '" + s + "'");
               },
               [&] { return std::string(m.softmax_scale == SoftmaxScale::hidden ? "hidden" : "head"); }});
  b.push_back({"model", "layer_norm_eps", [&](auto& s) { m.layer_norm_eps = to_double(s, "model.layer_norm_eps"); },
               [&] { return fmt(m.layer_norm_eps); }});
  b.push_back({"model", "init_std", [&](auto& s) { m.init_std = to_double(s, "model.init_std"); },
               [&] { return fmt(m.init_std); }});

  bind_optimizer(b, "teacher", c.teacher);
  bind_optimizer(b, "qat", c.qat);

  auto& q = c.quant;
  b.push_back({"quant", "weights",
               [&](auto& s) {
                 if (s == "ternary") q.weights = WeightQuant::ternary_layerwise;
                 else if (s == "off") q.weights = WeightQuant::off;
                 else throw ConfigError("quant.weights: expected ternary or off, got '" + s + "'");
               },
               [&] { return std::string(q.weights == WeightQuant::off ? "off" : "ternary"); }});
  b.push_back({"quant", "embedding",
               [&](auto& s) {
                 if (s == "ternary") q.embedding = EmbeddingQuant::ternary_rowwise;
                 else if (s == "off") q.embedding = EmbeddingQuant::off;
                 else throw ConfigError("quant.embedding: expected ternary or off, got '" + s + "'");
               },
               [&] { return std::string(q.embedding == EmbeddingQuant::off ? "off" : "ternary"); }});
  b.push_back({"quant", "activation_bits",
               [&](auto& s) { q.activation_bits = s == "off" ? 0 : to_int(s, "quant.activation_bits"); },
               [&] { return q.activation_bits ? std::to_string(q.activation_bits) : std::string("off"); }});
  b.push_back({"quant", "threshold", [&](auto& s) { q.threshold_factor = to_double(s, "quant.threshold"); },
               [&] { return fmt(q.threshold_factor); }});

  // The preset comes first so explicit terms below override it.
  b.push_back({"kd", "preset", [&](auto& s) { c.apply_preset(s); }, [&] { return c.preset; }});
  b.push_back({"kd", "terms", [&](auto& s) { c.kd.terms = parse_terms(s); }, [&] { return format_terms(c.kd.terms); }});
  b.push_back({"kd", "unified", [&](auto& s) { c.kd.unified = parse_unified_mode(s); },
               [&] { return std::string(to_string(c.kd.unified)); }});
  b.push_back({"kd", "tau", [&](auto& s) { c.kd.tau = to_double(s, "kd.tau"); }, [&] { return fmt(c.kd.tau); }});
  b.push_back({"kd", "gamma", [&](auto& s) { c.kd.gamma = to_double(s, "kd.gamma"); }, [&] { return fmt(c.kd.gamma); }});
  b.push_back({"kd", "layers", [&](auto& s) { c.layers = s; }, [&] { return c.layers; }});
  b.push_back({"kd", "include_embedding",
               [&](auto& s) { c.kd.include_embedding = to_bool(s, "kd.include_embedding"); },
               [&] { return fmt(c.kd.include_embedding); }});

  auto& d = c.diagnostics;
  b.push_back({"diagnostics", "top_k", [&](auto& s) { d.top_k = to_int(s, "diagnostics.top_k"); },
               [&] { return std::to_string(d.top_k); }});
  b.push_back({"diagnostics", "token", [&](auto& s) { d.token = to_int(s, "diagnostics.token"); },
               [&] { return std::to_string(d.token); }});
  b.push_back({"diagnostics", "examples", [&](auto& s) { d.examples = to_int(s, "diagnostics.examples"); },
               [&] { return std::to_string(d.examples); }});
  b.push_back({"diagnostics", "power_steps", [&](auto& s) { d.power_steps = to_int(s, "diagnostics.power_steps"); },
               [&] { return std::to_string(d.power_steps); }});
  b.push_back({"diagnostics", "power_tol", [&](auto& s) { d.power_tol = to_double(s, "diagnostics.power_tol"); },
               [&] { return fmt(d.power_tol); }});
  b.push_back({"diagnostics", "hessian_seeds",
               [&](auto& s) { d.hessian_seeds = to_int(s, "diagnostics.hessian_seeds"); },
               [&] { return std::to_string(d.hessian_seeds); }});
  b.push_back({"diagnostics", "hessian_examples",
               [&](auto& s) { d.hessian_examples = to_int(s, "diagnostics.hessian_examples"); },
               [&] { return std::to_string(d.hessian_examples); }});
  return b;
}

std::vector<int> parse_layer_choice(const std::string& s, int num_layers) {
  if (s == "all") return {};
  if (s.starts_with("uniform:")) {
    return select_layers(num_layers, to_int(s.substr(8), "kd.layers"), LayerStrategy::uniform);
  }
  std::vector<int> layers;
  for (const auto& item : split_list(s)) layers.push_back(to_int(item, "kd.layers"));
  if (layers.empty()) throw ConfigError("kd.layers: expected all, uniform:K or a list of layer indices");
  return layers;
}

}  // namespace

void ExperimentConfig::resolve() {
  model.vocab = task.vocab;
  model.max_len = task.length;
  model.classes = task.outputs();
  kd.output_kind = task.regression() ? OutputKind::regression : OutputKind::classification;
  kd.layers = parse_layer_choice(layers, model.layers);
}

void ExperimentConfig::validate() const {
  task.validate();
  model.validate();
  teacher.validate();
  qat.validate();
  quant.validate();
  kd.validate(model.layers);
  diagnostics.validate(task.length);
  if (model.vocab != task.vocab || model.max_len != task.length || model.classes != task.outputs()) {
    throw ConfigError("model extents do not follow the task; call resolve()");
  }
}

ExperimentConfig parse_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  ExperimentConfig config;
  auto table = bindings(config);
  std::map<std::string, std::map<std::string, std::string>> given;
  for (const auto& [section, keys] : tree) {
    if (keys.empty() && !keys.data().empty()) throw ConfigError("config: key '" + section + "' outside any section");
    if (std::none_of(table.begin(), table.end(), [&](const Binding& b) { return b.section == section; })) {
      throw ConfigError("config: unknown section [" + section + "]");
    }
    for (const auto& [key, value] : keys) given[section][key] = boost::trim_copy(value.data());
  }
  for (const auto& [section, keys] : given) {
    for (const auto& [key, value] : keys) {
      const bool known = std::any_of(table.begin(), table.end(),
                                     [&](const Binding& b) { return b.section == section && b.key == key; });
      if (!known) throw ConfigError("config: unknown key '" + key + "' in section [" + section + "]");
    }
  }
  for (const auto& b : table) {
    const auto sec = given.find(b.section);
    if (sec == given.end()) continue;
    const auto val = sec->second.find(b.key);
    if (val != sec->second.end()) b.set(val->second);
  }
  config.resolve();
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string to_ini(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  std::string out, section;
  for (const auto& b : bindings(copy)) {
    if (b.section != section) {
      if (!section.empty()) out += "\n";
      section = b.section;
      out += "[" + section + "]\n";
    }
    out += b.key + " = " + b.get() + "\n";
  }
  return out;
}

}  // namespace kdqat
