#include "onerec/pipeline.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <set>

#include "binary_io.hpp"
#include "json.hpp"

namespace onerec::pipeline {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------- config schema

// Reader and Writer share one field listing (visit_config) so the parsed
// schema and the dumped config cannot drift apart.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: " + where() + "expected an object");
  }

  template <typename T>
  void field(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    read(j_.at(key), path_ + key, out);
  }

  template <typename F>
  void object(const char* key, F&& fn) {
    seen_.insert(key);
    static const json empty = json::object();
    Reader sub(j_.contains(key) ? j_.at(key) : empty, path_ + key + ".");
    fn(sub);
    sub.finish();
  }

  void mix(const char* key, std::map<data::Source, double>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& m = j_.at(key);
    const std::string at = path_ + key;
    if (!m.is_object()) throw ConfigError("config: " + at + ": expected an object of source weights");
    out.clear();
    for (const auto& [name, w] : m.items()) {
      data::Source s;
      try {
        s = data::parse_source(name);
      } catch (const Error&) {
        throw ConfigError("config: " + at + "." + name + ": unknown data source");
      }
      read(w, at + "." + name, out[s]);
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("config: " + path_ + k + ": unknown field");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "" : path_.substr(0, path_.size() - 1) + ": "; }

  static void read(const json& v, const std::string& at, int& out) {
    if (!v.is_number_integer()) throw ConfigError("config: " + at + ": expected an integer");
    const auto x = v.get<std::int64_t>();
    if (x < INT32_MIN || x > INT32_MAX) throw ConfigError("config: " + at + ": integer out of range");
    out = static_cast<int>(x);
  }
  static void read(const json& v, const std::string& at, std::int64_t& out) {
    if (!v.is_number_integer()) throw ConfigError("config: " + at + ": expected an integer");
    out = v.get<std::int64_t>();
  }
  static void read(const json& v, const std::string& at, std::uint64_t& out) {
    if (!v.is_number_unsigned()) throw ConfigError("config: " + at + ": expected a non-negative integer");
    out = v.get<std::uint64_t>();
  }
  static void read(const json& v, const std::string& at, double& out) {
    if (!v.is_number()) throw ConfigError("config: " + at + ": expected a number");
    out = v.get<double>();
  }
  static void read(const json& v, const std::string& at, bool& out) {
    if (!v.is_boolean()) throw ConfigError("config: " + at + ": expected true or false");
    out = v.get<bool>();
  }
  static void read(const json& v, const std::string& at, std::string& out) {
    if (!v.is_string()) throw ConfigError("config: " + at + ": expected a string");
    out = v.get<std::string>();
  }
  template <typename T>
  static void read(const json& v, const std::string& at, std::vector<T>& out) {
    if (!v.is_array()) throw ConfigError("config: " + at + ": expected an array");
    out.assign(v.size(), T{});
    for (std::size_t i = 0; i < v.size(); ++i) read(v[i], at + "[" + std::to_string(i) + "]", out[i]);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  explicit Writer(json& j) : j_(j) {}

  template <typename T>
  void field(const char* key, const T& v) {
    j_[key] = v;
  }
  template <typename F>
  void object(const char* key, F&& fn) {
    json sub = json::object();
    Writer w(sub);
    fn(w);
    j_[key] = std::move(sub);
  }
  void mix(const char* key, const std::map<data::Source, double>& m) {
    json sub = json::object();
    for (const auto& [s, w] : m) sub[std::string(data::source_name(s))] = w;
    j_[key] = std::move(sub);
  }

 private:
  json& j_;
};

template <typename V, typename S>
void visit_stage(V& v, S& s) {
  v.field("steps", s.steps);
  v.field("batch_tokens", s.batch_tokens);
  v.field("peak_lr", s.peak_lr);
  v.field("min_lr", s.min_lr);
  v.field("warmup_fraction", s.warmup_fraction);
  v.field("clip_norm", s.clip_norm);
}

template <typename V, typename A>
void visit_adamw(V& v, A& a) {
  v.object("adamw", [&](V& o) {
    o.field("beta1", a.beta1);
    o.field("beta2", a.beta2);
    o.field("eps", a.eps);
    o.field("weight_decay", a.weight_decay);
  });
}

template <typename V, typename C>
void visit_config(V& v, C& c) {
  v.field("seed", c.seed);
  v.object("corpus", [&](V& o) {
    o.field("n_users", c.corpus.n_users);
    o.field("n_items", c.corpus.n_items);
    o.field("d_emb", c.corpus.d_emb);
    o.field("n_clusters_l1", c.corpus.n_clusters_l1);
    o.field("n_clusters_l2", c.corpus.n_clusters_l2);
    o.field("preference_sharpness", c.corpus.preference_sharpness);
    o.field("l1_scale", c.corpus.l1_scale);
    o.field("l2_scale", c.corpus.l2_scale);
    o.field("noise_scale", c.corpus.noise_scale);
    o.field("history_min", c.corpus.history_length_range.first);
    o.field("history_max", c.corpus.history_length_range.second);
    o.field("ad_fraction", c.corpus.ad_fraction);
    o.field("product_fraction", c.corpus.product_fraction);
    o.field("test_fraction", c.test_fraction);
  });
  v.object("tokenizer", [&](V& o) {
    o.field("level_sizes", c.level_sizes);
    o.field("fsq_dims", c.fsq_dims);
    o.field("fsq_levels_per_dim", c.fsq_levels_per_dim);
    o.field("kmeans_restarts", c.kmeans.restarts);
    o.field("kmeans_max_iter", c.kmeans.max_iter);
  });
  v.object("model", [&](V& o) {
    o.field("n_layers", c.model.n_layers);
    o.field("n_heads", c.model.n_heads);
    o.field("d_model", c.model.d_model);
    o.field("d_ff", c.model.d_ff);
    o.field("context_len", c.model.context_len);
  });
  v.object("pretrain", [&](V& o) {
    o.object("text", [&](V& s) {
      visit_stage(s, c.text_stage);
      visit_adamw(s, c.text_stage.adamw);
    });
    o.object("stage1", [&](V& s) {
      s.field("enabled", c.stage1_enabled);
      visit_stage(s, c.stage1);
      visit_adamw(s, c.stage1.adamw);
      s.mix("mix", c.stage1_mix);
    });
    o.object("stage2", [&](V& s) {
      visit_stage(s, c.stage2);
      visit_adamw(s, c.stage2.adamw);
      s.mix("mix", c.stage2_mix);
    });
    o.field("general_count", c.general_count);
  });
  v.object("sft", [&](V& o) {
    visit_stage(o, c.sft.stage);
    visit_adamw(o, c.sft.stage.adamw);
    o.field("max_per_user", c.sft_max_per_user);
    o.field("general_samples", c.sft_general_samples);
  });
  v.object("distill", [&](V& o) {
    o.field("clip_lo", c.distill.clip_lo);
    o.field("clip_hi", c.distill.clip_hi);
    o.field("temperature", c.distill.temperature);
    o.field("penalty_logprob", c.distill.penalty_logprob);
    o.field("penalize_item_tokens", c.distill.penalize_item_tokens);
    o.field("prompts_per_step", c.distill.prompts_per_step);
    o.field("max_new", c.distill.max_new);
    o.field("steps", c.distill.steps);
    o.field("peak_lr", c.distill.peak_lr);
    o.field("min_lr", c.distill.min_lr);
    o.field("warmup_fraction", c.distill.warmup_fraction);
    o.field("clip_norm", c.distill.clip_norm);
    visit_adamw(o, c.distill.adamw);
    o.field("prompts", c.distill_prompts);
  });
  v.object("recrl", [&](V& o) {
    o.field("group_size", c.recrl.group_size);
    o.field("kl_coefficient", c.recrl.kl_coefficient);
    o.field("advantage_eps", c.recrl.advantage_eps);
    o.field("temperature", c.recrl.temperature);
    o.field("prompts_per_step", c.recrl.prompts_per_step);
    o.field("steps", c.recrl.steps);
    o.field("peak_lr", c.recrl.peak_lr);
    o.field("min_lr", c.recrl.min_lr);
    o.field("warmup_fraction", c.recrl.warmup_fraction);
    o.field("clip_norm", c.recrl.clip_norm);
    o.field("length_normalize", c.recrl.length_normalize);
    visit_adamw(o, c.recrl.adamw);
  });
  v.object("eval", [&](V& o) {
    o.field("beam", c.eval.beam);
    o.field("max_text_tokens", c.eval.max_text_tokens);
    o.field("max_per_user", c.eval_max_per_user);
    o.field("max_samples_per_task", c.eval_max_samples);
    o.field("checkpoint", c.eval_checkpoint);
  });
  v.object("scaling", [&](V& o) {
    o.field("records", c.scaling.records);
    o.field("out", c.scaling.out);
    o.field("d_models", c.scaling.d_models);
    o.field("steps", c.scaling.steps);
    o.object("stage", [&](V& s) {
      visit_stage(s, c.scaling.stage);
      visit_adamw(s, c.scaling.stage.adamw);
    });
  });
}

void apply_override(json& doc, const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + item + ": expected key=value");
  const std::string key = item.substr(0, eq);
  const std::string raw = item.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &doc;
  std::size_t from = 0;
  while (true) {
    const auto dot = key.find('.', from);
    const std::string part = key.substr(from, dot == std::string::npos ? std::string::npos : dot - from);
    if (part.empty()) throw ConfigError("--set " + item + ": empty path component");
    if (!node->is_object()) throw ConfigError("--set " + item + ": " + key.substr(0, from - 1) + " is not an object");
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    from = dot + 1;
  }
}

void log_line(std::string_view command, const std::string& msg) {
  std::fprintf(stderr, "[onerec %.*s] %s\n", static_cast<int>(command.size()), command.data(), msg.c_str());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------- PipelineConfig

PipelineConfig::PipelineConfig() {
  corpus.n_users = 400;
  model.n_layers = 2;
  model.n_heads = 4;
  model.d_model = 32;
  model.d_ff = 128;
  model.context_len = 96;
  text_stage.steps = 400;
  text_stage.peak_lr = 3e-3;
  text_stage.min_lr = 3e-4;
  stage1 = train::stage1_defaults();
  stage1.steps = 1000;
  stage2 = train::stage2_defaults();
  stage2.steps = 1000;
  stage1_mix = {{data::Source::dense_caption, 0.5},
                {data::Source::persona_grounding, 0.25},
                {data::Source::user_behavior, 0.25}};
  stage2_mix = {{data::Source::dense_caption, 0.25},
                {data::Source::persona_grounding, 0.15},
                {data::Source::user_behavior, 0.35},
                {data::Source::general_text, 0.25}};
  sft.stage.steps = 300;
  scaling.stage.peak_lr = 3e-3;
  scaling.stage.min_lr = 3e-4;
}

void PipelineConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  corpus.validate();
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) fail("corpus.test_fraction: must lie in (0, 1)");
  if (level_sizes.empty()) fail("tokenizer.level_sizes: must not be empty");
  for (int k : level_sizes) {
    if (k < 2) fail("tokenizer.level_sizes: every level needs at least 2 codes");
  }
  if (fsq_dims < 0) fail("tokenizer.fsq_dims: must be >= 0");
  if (fsq_dims > 0 && fsq_levels_per_dim < 2) fail("tokenizer.fsq_levels_per_dim: must be >= 2");
  auto m = model;
  m.vocab_size = 256 + 7;
  try {
    m.validate();
  } catch (const Error& e) {
    fail(std::string("model: ") + e.what());
  }
  auto check_stage = [&](const train::StageConfig& s, const std::string& name) {
    if (s.steps < 1) fail(name + ".steps: must be >= 1");
    if (s.batch_tokens < model.context_len) fail(name + ".batch_tokens: must be >= model.context_len");
    if (!(s.peak_lr >= 0 && s.min_lr >= 0)) fail(name + ": learning rates must be >= 0");
    if (!(s.warmup_fraction >= 0 && s.warmup_fraction <= 1)) fail(name + ".warmup_fraction: must lie in [0, 1]");
  };
  check_stage(text_stage, "pretrain.text");
  check_stage(stage1, "pretrain.stage1");
  check_stage(stage2, "pretrain.stage2");
  check_stage(sft.stage, "sft");
  auto check_mix = [&](const std::map<data::Source, double>& mix, const std::string& name) {
    double total = 0;
    for (const auto& [s, w] : mix) {
      if (!(w >= 0)) fail(name + "." + std::string(data::source_name(s)) + ": weight must be >= 0");
      total += w;
    }
    if (!(total > 0)) fail(name + ": weights must not all be zero");
  };
  check_mix(stage1_mix, "pretrain.stage1.mix");
  if (stage1_mix.count(data::Source::general_text)) fail("pretrain.stage1.mix: general_text does not train item rows");
  check_mix(stage2_mix, "pretrain.stage2.mix");
  if (general_count < 1) fail("pretrain.general_count: must be >= 1");
  if (sft_max_per_user < 0) fail("sft.max_per_user: must be >= 0");
  if (sft_general_samples < 0) fail("sft.general_samples: must be >= 0");
  try {
    distill.validate();
  } catch (const Error& e) {
    fail(std::string("distill: ") + e.what());
  }
  if (distill_prompts < 1) fail("distill.prompts: must be >= 1");
  try {
    recrl.validate();
  } catch (const Error& e) {
    fail(std::string("recrl: ") + e.what());
  }
  if (eval.beam < 32) fail("eval.beam: must be >= 32 to report pass@32");
  if (eval.max_text_tokens < 1) fail("eval.max_text_tokens: must be >= 1");
  if (eval_max_per_user < 0) fail("eval.max_per_user: must be >= 0");
  if (eval_max_samples < 2) fail("eval.max_samples_per_task: must be >= 2");
  if (eval_checkpoint != "auto" && eval_checkpoint != "pretrain" && eval_checkpoint != "sft" &&
      eval_checkpoint != "distill" && eval_checkpoint != "recrl") {
    fail("eval.checkpoint: expected auto, pretrain, sft, distill or recrl");
  }
  for (int d : scaling.d_models) {
    if (d < model.n_heads || d % model.n_heads != 0) fail("scaling.d_models: each must be a multiple of model.n_heads");
  }
  for (auto s : scaling.steps) {
    if (s < 1) fail("scaling.steps: each must be >= 1");
  }
}

std::string PipelineConfig::to_json() const {
  json j = json::object();
  Writer w(j);
  visit_config(w, *this);
  j["artifact_dir"] = artifact_dir.string();
  return j.dump(2) + "\n";
}

std::uint64_t PipelineConfig::hash() const {
  json j = json::object();
  Writer w(j);
  visit_config(w, *this);
  return fnv1a(j.dump());
}

PipelineConfig parse_config(std::string_view json_text, std::span<const std::string> overrides,
                            std::optional<std::uint64_t> seed) {
  json doc = json::parse(json_text, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config: not valid JSON");
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  for (const auto& o : overrides) apply_override(doc, o);
  if (seed) doc["seed"] = *seed;

  PipelineConfig c;
  Reader r(doc, "");
  visit_config(r, c);
  std::string dir = c.artifact_dir.string();
  r.field("artifact_dir", dir);
  c.artifact_dir = dir;
  r.finish();
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides,
                           std::optional<std::uint64_t> seed) {
  if (!std::filesystem::exists(path)) throw ConfigError("config: file not found: " + path.string());
  return parse_config(io::read_file(path), overrides, seed);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

std::filesystem::path Layout::checkpoint(std::string_view stage) const {
  return root / "checkpoints" / (std::string(stage) + ".or1c");
}
std::filesystem::path Layout::trace(std::string_view name) const {
  return root / "traces" / (std::string(name) + ".csv");
}
std::filesystem::path Layout::manifest(std::string_view command) const {
  return root / "manifests" / (std::string(command) + ".json");
}

// ---------------------------------------------------------------- artifacts

namespace {

// Seed streams per stage.
enum Stream : std::uint64_t {
  kGen = 1,
  kSplit,
  kTokenize,
  kModelInit,
  kExamples,
  kTextMix,
  kItemicInit,
  kStage1Mix,
  kStage2Mix,
  kSftSamples,
  kSftMix,
  kDistillPrompts,
  kDistill,
  kRecrl,
  kEval,
  kScaling,
};

void require(const std::filesystem::path& p, std::string_view command, std::string_view producer) {
  if (!std::filesystem::exists(p)) {
    throw InputError(std::string(command) + ": missing " + p.string() + "; run `onerec " + std::string(producer) +
                     "` first");
  }
}

std::string_view producer_of(std::string_view stage) {
  return stage == "base" ? "pretrain" : stage;
}

void write_manifest(const PipelineConfig& cfg, std::string_view command,
                    const std::vector<std::filesystem::path>& outputs) {
  const Layout L(cfg.artifact_dir);
  json j;
  j["command"] = command;
  j["config_hash"] = hex64(cfg.hash());
  j["seed"] = cfg.seed;
  json out = json::object();
  for (const auto& p : outputs) {
    out[std::filesystem::relative(p, L.root).generic_string()] = hex64(fnv1a(io::read_file(p)));
  }
  j["outputs"] = std::move(out);
  std::filesystem::create_directories(L.manifest(command).parent_path());
  io::write_file_atomic(L.manifest(command), j.dump(2) + "\n");
}

void save_stage(const model::Parameters<float>& p, const PipelineConfig& cfg, const World& w, std::string_view stage) {
  const Layout L(cfg.artifact_dir);
  json prov;
  prov["stage"] = stage;
  prov["config_hash"] = hex64(cfg.hash());
  prov["tokenizer_hash"] = hex64(w.tokenizer_hash);
  std::filesystem::create_directories(L.checkpoint(stage).parent_path());
  model::save_checkpoint(p, L.checkpoint(stage), prov.dump());
}

void write_trace(const train::StageResult& r, const PipelineConfig& cfg, std::string_view name) {
  const Layout L(cfg.artifact_dir);
  std::filesystem::create_directories(L.trace(name).parent_path());
  train::write_loss_trace(r, L.trace(name));
}

void write_trace(std::span<const align::AlignTraceRow> rows, const PipelineConfig& cfg, std::string_view name) {
  const Layout L(cfg.artifact_dir);
  std::filesystem::create_directories(L.trace(name).parent_path());
  align::write_align_trace(rows, L.trace(name));
}

std::vector<data::TrainExample> examples_of(const PipelineConfig& cfg, const World& w, data::Source s) {
  data::ExampleOptions eo;
  eo.context_len = cfg.model.context_len;
  eo.general_count = cfg.general_count;
  eo.seed = mix_seed(cfg.seed, kExamples);
  return data::build_examples(w.catalog, w.train.users, s, eo);
}

train::MixStream make_mix(const PipelineConfig& cfg, const World& w, const std::map<data::Source, double>& weights,
                          std::uint64_t seed) {
  std::vector<train::MixSource> sources;
  for (const auto& [s, weight] : weights) {
    if (weight <= 0) continue;
    sources.push_back({s, weight, examples_of(cfg, w, s), {}});
  }
  return train::MixStream(std::move(sources), seed);
}

std::vector<align::ChatSample> sft_samples(const PipelineConfig& cfg, const World& w) {
  auto samples = task_samples(cfg, w, w.train.users, cfg.sft_max_per_user, std::nullopt,
                              mix_seed(cfg.seed, kSftSamples));
  align::TaskOptions opts;
  opts.context_len = cfg.model.context_len;
  opts.seed = mix_seed(cfg.seed, kSftSamples);
  auto general = align::build_general_samples(w.vocab, cfg.sft_general_samples, opts);
  samples.insert(samples.end(), general.begin(), general.end());
  return samples;
}

}  // namespace

World load_world(const PipelineConfig& cfg, std::string_view command) {
  const Layout L(cfg.artifact_dir);
  require(L.train_corpus() / "items.jsonl", command, "gen");
  require(L.test_corpus() / "items.jsonl", command, "gen");
  require(L.tokenizer(), command, "tokenize");
  World w;
  w.train = corpus::read_corpus(L.train_corpus());
  w.test = corpus::read_corpus(L.test_corpus());
  w.tokenizer = rq::load_tokenizer(L.tokenizer());
  w.tokenizer_hash = fnv1a(io::read_file(L.tokenizer()));
  w.vocab = vocab::build_vocab(w.tokenizer);
  if (std::filesystem::exists(L.vocab()) && !(vocab::Vocab::from_json(io::read_file(L.vocab())) == w.vocab)) {
    throw ConfigError(std::string(command) + ": " + L.vocab().string() +
                      " does not match the tokenizer; rerun `onerec tokenize`");
  }
  w.catalog = data::ItemCatalog(w.train, w.tokenizer, w.vocab);
  return w;
}

model::Parameters<float> load_stage(const World& w, const PipelineConfig& cfg, std::string_view stage,
                                    std::string_view command) {
  const Layout L(cfg.artifact_dir);
  const auto path = L.checkpoint(stage);
  require(path, command, producer_of(stage));
  auto ck = model::load_checkpoint(path);
  const json prov = json::parse(ck.provenance_json, nullptr, false);
  const std::string expect = hex64(w.tokenizer_hash);
  if (prov.is_discarded() || !prov.contains("tokenizer_hash") || prov["tokenizer_hash"] != expect) {
    throw ConfigError(std::string(command) + ": " + path.string() +
                      " was trained with a different tokenizer; rerun `onerec pretrain`");
  }
  if (ck.params.config.vocab_size != w.vocab.size()) {
    throw ConfigError(std::string(command) + ": " + path.string() + " vocabulary size differs from the tokenizer's");
  }
  return std::move(ck.params);
}

std::vector<align::ChatSample> task_samples(const PipelineConfig& cfg, const World& w,
                                            std::span<const corpus::UserRecord> users, int max_per_user,
                                            std::optional<align::ThinkMode> think, std::uint64_t seed) {
  std::vector<align::ChatSample> out;
  for (auto task : align::kRecIfTasks) {
    align::TaskOptions opts;
    opts.context_len = cfg.model.context_len;
    opts.max_per_user = max_per_user;
    opts.think = think;
    opts.seed = seed;
    auto s = align::build_task_samples(w.catalog, users, task, opts);
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return out;
}

eval::MetricReport evaluate(const PipelineConfig& cfg, const World& w, const model::Parameters<float>& params) {
  const align::TrieSet tries(w.catalog);
  eval::MetricReport report;
  for (auto task : align::kRecIfTasks) {
    align::TaskOptions opts;
    opts.context_len = params.config.context_len;
    opts.max_per_user = cfg.eval_max_per_user;
    opts.think = align::ThinkMode::no_think;
    opts.seed = mix_seed(cfg.seed, kEval);
    auto samples = align::build_task_samples(w.catalog, w.test.users, task, opts);
    if (samples.empty()) {
      throw InputError("eval: held-out users yield no " + std::string(align::task_name(task)) + " samples");
    }
    if (static_cast<int>(samples.size()) > cfg.eval_max_samples) samples.resize(cfg.eval_max_samples);
    report.tasks[std::string(align::task_name(task))] = align::evaluate_task(params, w.catalog, tries, samples, cfg.eval);
  }
  return report;
}

// ---------------------------------------------------------------- commands

void cmd_gen(const PipelineConfig& cfg) {
  const Layout L(cfg.artifact_dir);
  auto sc = cfg.corpus;
  sc.seed = mix_seed(cfg.seed, kGen);
  const auto syn = corpus::generate_synthetic_corpus(sc);
  corpus::SplitSpec split;
  split.test_fraction = cfg.test_fraction;
  split.seed = mix_seed(cfg.seed, kSplit);
  auto [train_users, test_users] = corpus::split_users(syn.corpus.users, split);
  log_line("gen", std::to_string(syn.corpus.items.size()) + " items, " + std::to_string(train_users.size()) +
                      " training users, " + std::to_string(test_users.size()) + " held-out users");
  corpus::write_corpus({syn.corpus.items, std::move(train_users)}, L.train_corpus());
  corpus::write_corpus({syn.corpus.items, std::move(test_users)}, L.test_corpus());
  io::write_file_atomic(L.root / "config.json", cfg.to_json());
  write_manifest(cfg, "gen",
                 {L.train_corpus() / "items.jsonl", L.train_corpus() / "interactions.jsonl",
                  L.test_corpus() / "items.jsonl", L.test_corpus() / "interactions.jsonl"});
}

void cmd_tokenize(const PipelineConfig& cfg) {
  const Layout L(cfg.artifact_dir);
  require(L.train_corpus() / "items.jsonl", "tokenize", "gen");
  const auto c = corpus::read_corpus(L.train_corpus());
  const auto emb = rq::embedding_matrix(c.items);
  auto tok = rq::fit_tokenizer(emb, cfg.level_sizes, mix_seed(cfg.seed, kTokenize), cfg.kmeans);
  if (cfg.fsq_dims > 0) tok = rq::fit_fsq_extension(tok, emb, cfg.fsq_dims, cfg.fsq_levels_per_dim);
  tok.config_hash = cfg.hash();
  const auto codes = rq::encode_all(tok, emb);
  log_line("tokenize", std::to_string(tok.levels()) + " levels, collision rate " + fmt(rq::collision_rate(codes)));
  rq::save_tokenizer(tok, L.tokenizer());
  json v = json::parse(vocab::build_vocab(tok).to_json());
  v["config_hash"] = hex64(cfg.hash());
  io::write_file_atomic(L.vocab(), v.dump(2) + "\n");
  write_manifest(cfg, "tokenize", {L.tokenizer(), L.vocab()});
}

PretrainSummary cmd_pretrain(const PipelineConfig& cfg) {
  const Layout L(cfg.artifact_dir);
  const World w = load_world(cfg, "pretrain");
  auto mc = cfg.model;
  mc.vocab_size = w.vocab.size();
  mc.seed = mix_seed(cfg.seed, kModelInit);
  auto p = model::init_parameters<float>(mc);
  std::vector<scaling::RunRecord> records;
  std::vector<std::filesystem::path> outputs;

  // General-text base: the distillation teacher and the starting point of Stage 1.
  {
    auto mix = make_mix(cfg, w, {{data::Source::general_text, 1.0}}, mix_seed(cfg.seed, kTextMix));
    const auto r = train::run_stage(p, mix, cfg.text_stage, train::TrainableMask::all(p.layout), "text");
    log_line("pretrain", "text base loss " + fmt(r.record.loss));
    write_trace(r, cfg, "text");
    records.push_back(r.record);
    save_stage(p, cfg, w, "base");
    outputs.push_back(L.trace("text"));
    outputs.push_back(L.checkpoint("base"));
  }
  vocab::init_itemic_embeddings(p.tensor("tok_emb"), p.config.d_model, w.vocab, mix_seed(cfg.seed, kItemicInit));

  PretrainSummary summary;
  if (cfg.stage1_enabled) {
    auto mix = make_mix(cfg, w, cfg.stage1_mix, mix_seed(cfg.seed, kStage1Mix));
    const auto before = p.values;
    const auto r = train::run_stage1(p, w.vocab, mix, cfg.stage1);
    const auto mask = train::TrainableMask::item_rows(p.layout, p.config, w.vocab);
    for (std::size_t i = 0; i < before.size(); ++i) {
      const bool same = std::memcmp(&before[i], &p.values[i], sizeof(float)) == 0;
      if (mask[i]) {
        summary.stage1_changed_entries += same ? 0 : 1;
      } else if (!same) {
        summary.stage1_frozen_unchanged = false;
      }
    }
    log_line("pretrain", "stage 1 loss " + fmt(r.record.loss) + ", " + std::to_string(summary.stage1_changed_entries) +
                             " item-row entries moved");
    write_trace(r, cfg, "stage1");
    records.push_back(r.record);
    outputs.push_back(L.trace("stage1"));
  } else {
    log_line("pretrain", "stage 1 skipped");
  }

  {
    auto held = examples_of(cfg, w, data::Source::dense_caption);
    auto beh = examples_of(cfg, w, data::Source::user_behavior);
    held.resize(std::min<std::size_t>(held.size(), 256));
    beh.resize(std::min<std::size_t>(beh.size(), 256));
    held.insert(held.end(), beh.begin(), beh.end());
    summary.stage2_initial_itemic_loss = train::mean_loss(p, held);
  }
  auto mix = make_mix(cfg, w, cfg.stage2_mix, mix_seed(cfg.seed, kStage2Mix));
  const auto r = train::run_stage2(p, mix, cfg.stage2);
  summary.stage2_final_loss = r.record.loss;
  log_line("pretrain", "stage 2 itemic-conditioned loss " + fmt(summary.stage2_initial_itemic_loss) +
                           " at start, final loss " + fmt(r.record.loss));
  write_trace(r, cfg, "stage2");
  records.push_back(r.record);
  save_stage(p, cfg, w, "pretrain");
  scaling::write_records(records, L.runs());

  json s;
  s["config_hash"] = hex64(cfg.hash());
  s["stage1_enabled"] = cfg.stage1_enabled;
  s["stage2_initial_itemic_loss"] = summary.stage2_initial_itemic_loss;
  s["stage2_final_loss"] = summary.stage2_final_loss;
  s["stage1_frozen_unchanged"] = summary.stage1_frozen_unchanged;
  s["stage1_changed_entries"] = summary.stage1_changed_entries;
  io::write_file_atomic(L.root / "pretrain_summary.json", s.dump(2) + "\n");
  outputs.insert(outputs.end(), {L.trace("stage2"), L.checkpoint("pretrain"), L.runs(), L.root / "pretrain_summary.json"});
  write_manifest(cfg, "pretrain", outputs);
  return summary;
}

void cmd_sft(const PipelineConfig& cfg) {
  const Layout L(cfg.artifact_dir);
  const World w = load_world(cfg, "sft");
  auto p = load_stage(w, cfg, "pretrain", "sft");
  const auto samples = sft_samples(cfg, w);
  const double before = align::sft_loss(p, samples, nullptr);
  const auto r = align::run_sft(p, samples, cfg.sft, mix_seed(cfg.seed, kSftMix));
  log_line("sft", std::to_string(samples.size()) + " samples, response loss " + fmt(before) + " -> " +
                      fmt(align::sft_loss(p, samples, nullptr)));
  write_trace(r, cfg, "sft");
  save_stage(p, cfg, w, "sft");
  write_manifest(cfg, "sft", {L.trace("sft"), L.checkpoint("sft")});
}

void cmd_distill(const PipelineConfig& cfg) {
  const Layout L(cfg.artifact_dir);
  const World w = load_world(cfg, "distill");
  auto student = load_stage(w, cfg, "sft", "distill");
  const auto teacher = load_stage(w, cfg, "base", "distill");

  // General prompts with a uniformly drawn think suffix.
  align::TaskOptions opts;
  opts.context_len = cfg.model.context_len;
  opts.seed = mix_seed(cfg.seed, kDistillPrompts);
  Rng rng(opts.seed);
  std::vector<std::vector<int>> prompts;
  for (const auto& s : align::build_general_samples(w.vocab, cfg.distill_prompts, opts)) {
    auto prompt = s.prompt;
    const auto suffix = align::think_suffix(align::draw_think_mode(rng));
    if (!suffix.empty()) data::append_text(prompt, w.vocab, suffix.substr(1));
    prompts.push_back(std::move(prompt));
  }
  const double mass0 = align::itemic_mass(student, w.vocab, prompts);
  auto dc = cfg.distill;
  dc.seed = mix_seed(cfg.seed, kDistill);
  const auto dump = L.root / "distill_trajectories.jsonl";
  const auto rows = align::run_distill(student, teacher, w.vocab, prompts, dc, &dump);
  log_line("distill", "itemic mass " + fmt(mass0) + " -> " + fmt(align::itemic_mass(student, w.vocab, prompts)) +
                          ", reverse KL " + fmt(rows.front().mean_reverse_kl) + " -> " +
                          fmt(rows.back().mean_reverse_kl));
  write_trace(rows, cfg, "distill");
  save_stage(student, cfg, w, "distill");
  write_manifest(cfg, "distill", {L.trace("distill"), L.checkpoint("distill"), dump});
}

void cmd_recrl(const PipelineConfig& cfg) {
  const Layout L(cfg.artifact_dir);
  const World w = load_world(cfg, "recrl");
  auto policy = load_stage(w, cfg, "distill", "recrl");
  const auto reference = policy;
  const auto samples = sft_samples(cfg, w);
  const align::TrieSet tries(w.catalog);
  auto gc = cfg.recrl;
  gc.seed = mix_seed(cfg.seed, kRecrl);
  const auto rows = align::run_grpo(policy, reference, samples, tries, gc);
  double first = 0, last = 0;
  const std::size_t n = std::max<std::size_t>(1, rows.size() / 10);
  for (std::size_t i = 0; i < n; ++i) {
    first += rows[i].hit_rate / n;
    last += rows[rows.size() - 1 - i].hit_rate / n;
  }
  log_line("recrl", "hit rate " + fmt(first) + " -> " + fmt(last));
  write_trace(rows, cfg, "recrl");
  save_stage(policy, cfg, w, "recrl");
  write_manifest(cfg, "recrl", {L.trace("recrl"), L.checkpoint("recrl")});
}

eval::MetricReport cmd_eval(const PipelineConfig& cfg) {
  const Layout L(cfg.artifact_dir);
  std::string stage = cfg.eval_checkpoint;
  if (stage == "auto") {
    stage.clear();
    for (std::string_view s : {"recrl", "distill", "sft", "pretrain"}) {
      if (std::filesystem::exists(L.checkpoint(s))) {
        stage = s;
        break;
      }
    }
    if (stage.empty()) {
      throw InputError("eval: no checkpoint under " + (L.root / "checkpoints").string() +
                       "; run `onerec pretrain` first");
    }
  }
  const World w = load_world(cfg, "eval");
  const auto params = load_stage(w, cfg, stage, "eval");
  log_line("eval", "evaluating the " + stage + " checkpoint on " + std::to_string(w.test.users.size()) +
                       " held-out users");
  const auto report = evaluate(cfg, w, params);
  io::write_file_atomic(L.report_json(), report.to_json());
  io::write_file_atomic(L.report_csv(), report.to_csv());
  write_manifest(cfg, "eval", {L.report_json(), L.report_csv()});
  return report;
}

scaling::ScalingReport cmd_fit_scaling(const PipelineConfig& cfg) {
  const Layout L(cfg.artifact_dir);
  std::vector<scaling::RunRecord> records;
  std::vector<std::filesystem::path> outputs;
  if (!cfg.scaling.records.empty()) {
    records = scaling::read_records(cfg.scaling.records);
  } else {
    const World w = load_world(cfg, "fit-scaling");
    for (int d : cfg.scaling.d_models) {
      for (auto steps : cfg.scaling.steps) {
        auto mc = cfg.model;
        mc.d_model = d;
        mc.d_ff = 4 * d;
        mc.vocab_size = w.vocab.size();
        mc.seed = mix_seed(cfg.seed, kScaling);
        auto p = model::init_parameters<float>(mc);
        auto mix = make_mix(cfg, w, cfg.stage2_mix, mix_seed(cfg.seed, kScaling));
        auto sc = cfg.scaling.stage;
        sc.steps = steps;
        const auto r = train::run_stage(p, mix, sc, train::TrainableMask::all(p.layout),
                                        "d" + std::to_string(d) + "_s" + std::to_string(steps));
        log_line("fit-scaling", r.record.label + ": N=" + fmt(r.record.N) + " D=" + fmt(r.record.D) +
                                    " loss=" + fmt(r.record.loss));
        records.push_back(r.record);
      }
    }
    std::filesystem::create_directories(L.scaling_dir());
    scaling::write_records(records, L.scaling_dir() / "runs.jsonl");
    outputs.push_back(L.scaling_dir() / "runs.jsonl");
  }
  const auto report = scaling::analyze(records);
  json j = json::parse(report.to_json());
  j["config_hash"] = hex64(cfg.hash());
  const std::filesystem::path out = cfg.scaling.out.empty() ? L.scaling_dir() / "report.json" : std::filesystem::path(cfg.scaling.out);
  const auto frontier = out.parent_path() / (out.stem().string() + "_frontier.csv");
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  io::write_file_atomic(out, j.dump(2) + "\n");
  scaling::write_frontier_csv(report.frontier, frontier);
  if (cfg.scaling.out.empty()) {
    outputs.push_back(out);
    outputs.push_back(frontier);
  }
  log_line("fit-scaling", "alpha " + fmt(report.parametric.alpha) + ", beta " + fmt(report.parametric.beta) +
                              ", derived a " + fmt(report.derived_a) + ", b " + fmt(report.derived_b));
  write_manifest(cfg, "fit-scaling", outputs);
  return report;
}

eval::MetricReport cmd_pipeline(const PipelineConfig& cfg) {
  cmd_gen(cfg);
  cmd_tokenize(cfg);
  cmd_pretrain(cfg);
  cmd_sft(cfg);
  cmd_distill(cfg);
  cmd_recrl(cfg);
  return cmd_eval(cfg);
}

}  // namespace onerec::pipeline
