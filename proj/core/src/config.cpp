#include "cgnet/config.hpp"

#include <fstream>
#include <set>

#include "cgnet/errors.hpp"

namespace cgnet {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// Reads typed fields from one JSON object and rejects unknown keys.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + where() + "' must be an object");
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }
  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("field '" + field(key) + "' has the wrong type");
    }
  }
  void get_size(const std::string& key, std::size_t& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError("field '" + field(key) + "' must be a non-negative integer");
    }
    out = v.get<std::size_t>();
  }
  void get_real(const std::string& key, double& out) {
    if (!has(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError("field '" + field(key) + "' must be a number");
    out = v.get<double>();
  }
  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown field '" + field(k) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Fn>
void wrap(const std::string& field, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.find("'" + field) != std::string::npos) throw;
    throw ConfigError("field '" + field + "': " + msg);
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

DataSource parse_source(const json& j, const std::string& name, const fs::path& base) {
  Section s(j, name);
  DataSource src;
  std::string format = "synthetic";
  s.get("format", format);
  s.get_size("limit", src.limit);
  if (format == "synthetic") {
    src.format = DataFormat::kSynthetic;
    auto& sp = src.synthetic;
    s.get_size("count", sp.count);
    s.get_size("classes", sp.classes);
    s.get_size("height", sp.height);
    s.get_size("width", sp.width);
    s.get("seed", sp.seed);
    s.get("prototype_seed", sp.prototype_seed);
    s.get_real("noise", sp.noise);
    s.get_real("jitter", sp.jitter);
    s.get_real("deform", sp.deform);
    s.get_size("clutter", sp.clutter);
    if (sp.count == 0) throw ConfigError("field '" + s.field("count") + "' must be positive");
    if (sp.classes < 2) throw ConfigError("field '" + s.field("classes") + "' must be at least 2");
    if (sp.height < 8 || sp.width < 8) {
      throw ConfigError("field '" + s.field("height") + "'/'width' must be at least 8");
    }
    if (sp.noise < 0.0) throw ConfigError("field '" + s.field("noise") + "' must be non-negative");
  } else if (format == "idx") {
    src.format = DataFormat::kIdx;
    std::string images, labels;
    if (!s.has("images")) throw ConfigError("missing field '" + s.field("images") + "'");
    if (!s.has("labels")) throw ConfigError("missing field '" + s.field("labels") + "'");
    s.get("images", images);
    s.get("labels", labels);
    src.images = resolve(base, images);
    src.labels = resolve(base, labels);
    if (!fs::exists(src.images)) {
      throw ConfigError("field '" + s.field("images") + "': file '" + src.images.string() +
                        "' does not exist");
    }
    if (!fs::exists(src.labels)) {
      throw ConfigError("field '" + s.field("labels") + "': file '" + src.labels.string() +
                        "' does not exist");
    }
  } else if (format == "raw_chw") {
    src.format = DataFormat::kRawChw;
    std::string path;
    if (!s.has("path")) throw ConfigError("missing field '" + s.field("path") + "'");
    s.get("path", path);
    src.path = resolve(base, path);
    if (!fs::exists(src.path)) {
      throw ConfigError("field '" + s.field("path") + "': file '" + src.path.string() +
                        "' does not exist");
    }
  } else {
    throw ConfigError("field '" + s.field("format") + "': unknown format '" + format +
                      "' (expected synthetic, idx or raw_chw)");
  }
  s.finish();
  return src;
}

void parse_loss(const json& j, ExperimentConfig& cfg, const fs::path& base) {
  Section s(j, "loss");
  LossConfig& l = cfg.loss;
  if (s.has("sparsity")) {
    std::string mode;
    s.get("sparsity", mode);
    wrap("loss.sparsity", [&] { l.sparsity = parse_sparsity_mode(mode); });
  }
  s.get_real("lambda", l.lambda);
  s.get_real("target", l.target);
  s.get_real("warmup_fraction", l.warmup_fraction);
  if (l.lambda < 0.0) throw ConfigError("field 'loss.lambda' must be non-negative");
  if (l.warmup_fraction < 0.0 || l.warmup_fraction > 1.0) {
    throw ConfigError("field 'loss.warmup_fraction' must be in [0, 1]");
  }
  if (s.has("kd")) {
    Section k(s.raw("kd"), "loss.kd");
    k.get("enabled", l.kd.enabled);
    k.get_real("kappa", l.kd.kappa);
    k.get_real("lambda_kd", l.kd.lambda_kd);
    if (k.has("teacher")) {
      std::string t;
      k.get("teacher", t);
      cfg.teacher = resolve(base, t);
    }
    k.finish();
    if (!(l.kd.kappa > 0.0)) throw ConfigError("field 'loss.kd.kappa' must be positive");
    if (l.kd.lambda_kd < 0.0 || l.kd.lambda_kd > 1.0) {
      throw ConfigError("field 'loss.kd.lambda_kd' must be in [0, 1]");
    }
    if (l.kd.enabled && cfg.teacher.empty()) {
      throw ConfigError("field 'loss.kd.teacher' is required when distillation is enabled");
    }
  }
  s.finish();
}

void parse_optimizer(const json& j, ExperimentConfig& cfg) {
  Section s(j, "optimizer");
  Schedule& o = cfg.schedule;
  s.get_size("epochs", o.epochs);
  s.get_size("batch_size", o.batch_size);
  s.get_real("lr", o.lr);
  s.get_real("momentum", o.momentum);
  s.get_real("weight_decay", o.weight_decay);
  if (s.has("lr_schedule")) {
    std::string name;
    s.get("lr_schedule", name);
    wrap("optimizer.lr_schedule", [&] { o.lr_schedule = parse_lr_schedule(name); });
  }
  s.get("milestones", o.milestones);
  s.get_real("gamma", o.gamma);
  s.get_size("eval_limit", cfg.eval_limit);
  if (s.has("grad_mode")) {
    std::string m;
    s.get("grad_mode", m);
    if (m == "straight_through") {
      cfg.grad_mode = GateGradMode::kStraightThrough;
    } else if (m == "smooth") {
      cfg.grad_mode = GateGradMode::kSmooth;
    } else {
      throw ConfigError("field 'optimizer.grad_mode': expected straight_through or smooth");
    }
  }
  s.finish();
  if (o.epochs == 0) throw ConfigError("field 'optimizer.epochs' must be positive");
  if (o.batch_size == 0) throw ConfigError("field 'optimizer.batch_size' must be positive");
  if (!(o.lr > 0.0)) throw ConfigError("field 'optimizer.lr' must be positive");
  if (o.momentum < 0.0 || o.momentum >= 1.0) {
    throw ConfigError("field 'optimizer.momentum' must be in [0, 1)");
  }
  if (o.weight_decay < 0.0) throw ConfigError("field 'optimizer.weight_decay' must be >= 0");
  if (!(o.gamma > 0.0)) throw ConfigError("field 'optimizer.gamma' must be positive");
}

void parse_analysis(const json& j, AnalysisConfig& a) {
  Section s(j, "analysis");
  s.get_size("samples", a.samples);
  s.get("tau_c_sweep", a.tau_c_sweep);
  s.get("group_sweep", a.group_sweep);
  s.get_size("intensity_samples", a.intensity_samples);
  s.finish();
  for (double t : a.tau_c_sweep) {
    if (t < 0.0 || t > 1.0) throw ConfigError("field 'analysis.tau_c_sweep' values must be in [0, 1]");
  }
  for (std::size_t g : a.group_sweep) {
    if (g == 0) throw ConfigError("field 'analysis.group_sweep' values must be positive");
  }
}

void parse_perf(const json& j, ArrayConfig& p) {
  Section s(j, "perf");
  s.get_size("rows", p.rows);
  s.get_size("cols", p.cols);
  s.get("fill_drain", p.fill_drain);
  s.finish();
  if (p.rows == 0) throw ConfigError("field 'perf.rows' must be positive");
  if (p.cols == 0) throw ConfigError("field 'perf.cols' must be positive");
}

void inject_target(json& layer, double target) {
  if (!layer.is_object()) return;
  const std::string type = layer.value("type", std::string());
  if (type == "cg_conv" && !layer.contains("target")) layer["target"] = target;
  if (type == "residual") {
    if (layer.contains("a")) {
      inject_target(layer["a"], target);
      if (layer.contains("b")) inject_target(layer["b"], target);
    } else if (layer.value("gated", true) && !layer.contains("target")) {
      layer["target"] = target;
    }
  }
}

}  // namespace

json with_default_targets(const json& model, double target) {
  json m = model;
  if (m.is_object() && m.contains("layers") && m["layers"].is_array()) {
    for (auto& l : m["layers"]) inject_target(l, target);
  }
  return m;
}

ExperimentConfig parse_config(const json& doc, const fs::path& base_dir) {
  Section s(doc, "");
  ExperimentConfig cfg;
  if (!s.has("schema_version")) throw ConfigError("missing field 'schema_version'");
  s.get("schema_version", cfg.schema_version);
  if (cfg.schema_version != kConfigSchemaVersion) {
    throw ConfigError("field 'schema_version': unsupported version " +
                      std::to_string(cfg.schema_version) + " (expected " +
                      std::to_string(kConfigSchemaVersion) + ")");
  }
  s.get("seed", cfg.seed);
  s.get("deterministic", cfg.deterministic);
  if (s.has("output_dir")) {
    std::string out;
    s.get("output_dir", out);
    cfg.output_dir = resolve(base_dir, out);
  } else {
    cfg.output_dir = base_dir / cfg.output_dir;
  }

  if (!s.has("dataset")) throw ConfigError("missing field 'dataset'");
  {
    Section d(s.raw("dataset"), "dataset");
    if (!d.has("train")) throw ConfigError("missing field 'dataset.train'");
    cfg.train = parse_source(d.raw("train"), "dataset.train", base_dir);
    if (!d.has("test")) throw ConfigError("missing field 'dataset.test'");
    cfg.test = parse_source(d.raw("test"), "dataset.test", base_dir);
    d.finish();
  }
  if (s.has("loss")) parse_loss(s.raw("loss"), cfg, base_dir);
  if (!s.has("model")) throw ConfigError("missing field 'model'");
  cfg.model = with_default_targets(s.raw("model"), cfg.loss.target);
  if (s.has("optimizer")) parse_optimizer(s.raw("optimizer"), cfg);
  if (s.has("gates")) {
    Section g(s.raw("gates"), "gates");
    g.get("force_open", cfg.force_open);
    g.finish();
  }
  if (s.has("analysis")) parse_analysis(s.raw("analysis"), cfg.analysis);
  if (s.has("perf")) parse_perf(s.raw("perf"), cfg.perf);
  s.finish();

  // Building once validates the topology and names the failing layer field.
  try {
    (void)Network::build(cfg.model, cfg.seed);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model.") + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(doc, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

Dataset load_dataset(const DataSource& src) {
  Dataset d;
  switch (src.format) {
    case DataFormat::kSynthetic: d = make_synthetic(src.synthetic); break;
    case DataFormat::kIdx: d = load_idx(src.images, src.labels); break;
    case DataFormat::kRawChw: d = load_raw_chw(src.path); break;
  }
  if (src.limit && src.limit < d.size()) d = d.subset(0, src.limit);
  d.validate();
  return d;
}

}  // namespace cgnet
