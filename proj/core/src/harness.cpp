#include "peftlab/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "peftlab/bytes.hpp"
#include "peftlab/errors.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {
namespace {

using nlohmann::json;

struct Preset {
  const char* name;
  double learning_rate;
  std::size_t batch_size;
};

constexpr Preset kPresets[] = {
    {"toy", 1e-2, 4},      {"tiny", 3.75e-5, 8},   {"base", 2.5e-5, 8},
    {"small", 1.25e-5, 4}, {"medium", 6.25e-6, 2}, {"large", 4.375e-6, 1},
};

const Preset& find_preset(const std::string& name) {
  for (const Preset& p : kPresets) {
    if (name == p.name) return p;
  }
  std::string known;
  for (const Preset& p : kPresets) {
    if (!known.empty()) known += ", ";
    known += p.name;
  }
  throw ConfigError("unknown preset '" + name + "' (expected one of " + known + ")");
}

void expect_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed) {
      if (key == a) known = true;
    }
    if (!known) throw ConfigError(std::string("unknown key '") + key + "' in " + where);
  }
}

Precision parse_precision(const std::string& name) {
  if (name == "f64") return Precision::f64;
  if (name == "f32") return Precision::f32;
  throw ConfigError("unknown precision '" + name + "' (expected f32 or f64)");
}

std::string target_name(AttentionTarget t) {
  switch (t) {
    case AttentionTarget::wq:
      return "wq";
    case AttentionTarget::wk:
      return "wk";
    case AttentionTarget::wv:
      return "wv";
  }
  throw ConfigError("unknown attention target value");
}

json eval_to_json(const EvalMetrics& m) {
  json j;
  j["exact_match"] = m.exact_match;
  j["rouge1"] = m.rouge1;
  j["rouge2"] = m.rouge2;
  j["rouge_l"] = m.rouge_l;
  j["rouge_s"] = m.rouge_s;
  j["wer"] = m.wer;
  return j;
}

json report_to_json(const RunReport& report, bool include_timing) {
  json j;
  j["label"] = report.label;
  j["config"] = json::parse(report.config.to_json_string());
  j["parameters"] = {{"trainable", report.trainable_params}, {"frozen", report.frozen_params}};
  j["losses"] = report.losses;
  j["initial_loss"] = report.initial_loss;
  j["final_loss"] = report.final_loss;
  j["eval"] = eval_to_json(report.eval);
  j["footprint"] = {{"trainable_bytes", report.footprint.trainable_bytes},
                    {"frozen_dense_bytes", report.footprint.frozen_dense_bytes},
                    {"quantized_bytes", report.footprint.quantized_bytes},
                    {"frozen_dense_equivalent_bytes",
                     report.footprint.frozen_dense_equivalent_bytes},
                    {"total_bytes", report.footprint.total_bytes()}};
  if (include_timing) j["timing"] = {{"train_ms", report.train_ms}};
  return j;
}

std::string csv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  if (train_examples == 0) throw ConfigError("train_examples must be positive");
  if (eval_examples == 0) throw ConfigError("eval_examples must be positive");
  if (min_source_len == 0 || min_source_len > max_source_len) {
    throw ConfigError("need 1 <= min_source_len <= max_source_len");
  }
  if (max_source_len + 1 > model.max_len) {
    throw ConfigError("max_source_len " + std::to_string(max_source_len) +
                      " does not fit max_len " + std::to_string(model.max_len) +
                      " once framed");
  }
  if (preset) find_preset(*preset);

  const bool quant_fields = scheme || granularity || block_size || double_quant;
  const bool budget_fields = gamma || schedule;
  switch (mode) {
    case AdapterMode::none:
      if (rank || targets || quant_fields || budget_fields) {
        throw ConfigError("full fine-tuning takes no adapter settings");
      }
      break;
    case AdapterMode::lora:
      if (quant_fields) throw ConfigError("quantization settings require qlora mode");
      if (budget_fields) throw ConfigError("budget settings require adalora mode");
      break;
    case AdapterMode::adalora:
      if (quant_fields) throw ConfigError("quantization settings require qlora mode");
      break;
    case AdapterMode::qlora:
      if (budget_fields) throw ConfigError("budget settings require adalora mode");
      if (!scheme) throw ConfigError("qlora requires a quantization scheme");
      break;
  }
  if (mode != AdapterMode::none) {
    const AdapterSpec spec = adapter_spec();
    if (spec.rank > model.d_model) {
      throw ConfigError("rank " + std::to_string(spec.rank) + " exceeds projection dimension " +
                        std::to_string(model.d_model));
    }
  }
}

AdapterSpec ExperimentConfig::adapter_spec() const {
  if (mode == AdapterMode::none) {
    throw UsageError("full fine-tuning has no adapter spec");
  }
  AdapterSpec spec;
  spec.mode = mode;
  spec.rank = rank.value_or(8);
  spec.targets = targets.value_or(
      std::vector<AttentionTarget>{AttentionTarget::wq, AttentionTarget::wv});
  if (mode == AdapterMode::adalora) {
    spec.gamma = gamma.value_or(0.1);
    if (schedule) {
      spec.schedule = *schedule;
    } else {
      spec.schedule.initial_budget = spec.rank;
      spec.schedule.final_budget = std::max<std::size_t>(1, spec.rank / 4);
      spec.schedule.total_steps = train.steps;
      spec.schedule.warmup_steps = train.steps / 10;
    }
  }
  if (mode == AdapterMode::qlora) {
    spec.scheme = parse_scheme(scheme.value());
    Granularity g = parse_granularity(granularity.value_or("per-block"));
    if (g.kind == GranularityKind::per_block) {
      g.block_size = block_size.value_or(64);
    } else if (block_size) {
      throw ConfigError("block_size applies only to per-block granularity");
    }
    spec.granularity = g;
    spec.double_quant = double_quant;
  }
  spec.validate();
  return spec;
}

std::string ExperimentConfig::to_json_string() const {
  json j;
  j["mode"] = mode_name(mode);
  j["task"] = task_name(task);
  j["seed"] = seed;
  j["model"] = {{"vocab_size", model.vocab_size},   {"d_model", model.d_model},
                {"d_k", model.d_k},                 {"layers", model.layers},
                {"max_len", model.max_len},         {"precision", precision_name(model.precision)},
                {"embed_stddev", model.embed_stddev}, {"attn_stddev", model.attn_stddev},
                {"ff_stddev", model.ff_stddev}};
  j["data"] = {{"train_examples", train_examples},
               {"eval_examples", eval_examples},
               {"min_source_len", min_source_len},
               {"max_source_len", max_source_len}};
  j["train"] = {{"learning_rate", train.learning_rate},
                {"steps", train.steps},
                {"batch_size", train.batch_size}};
  if (preset) j["preset"] = *preset;

  json adapter = json::object();
  if (rank) adapter["rank"] = *rank;
  if (targets) {
    json names = json::array();
    for (AttentionTarget t : *targets) names.push_back(target_name(t));
    adapter["targets"] = names;
  }
  if (gamma) adapter["gamma"] = *gamma;
  if (schedule) {
    adapter["schedule"] = {{"initial_budget", schedule->initial_budget},
                           {"final_budget", schedule->final_budget},
                           {"total_steps", schedule->total_steps},
                           {"warmup_steps", schedule->warmup_steps}};
  }
  if (scheme) adapter["scheme"] = *scheme;
  if (granularity) adapter["granularity"] = *granularity;
  if (block_size) adapter["block_size"] = *block_size;
  if (double_quant) adapter["double_quant"] = *double_quant;
  if (!adapter.empty()) j["adapter"] = adapter;

  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  expect_keys(j, "config",
              {"mode", "task", "seed", "model", "data", "train", "preset", "adapter"});

  ExperimentConfig c;
  try {
    if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
    if (j.contains("task")) c.task = parse_task(j["task"].get<std::string>());
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("model")) {
      const json& m = j["model"];
      expect_keys(m, "model",
                  {"vocab_size", "d_model", "d_k", "layers", "max_len", "precision",
                   "embed_stddev", "attn_stddev", "ff_stddev"});
      if (m.contains("vocab_size")) c.model.vocab_size = m["vocab_size"].get<std::size_t>();
      if (m.contains("d_model")) c.model.d_model = m["d_model"].get<std::size_t>();
      c.model.d_k = c.model.d_model;
      if (m.contains("d_k")) c.model.d_k = m["d_k"].get<std::size_t>();
      if (m.contains("layers")) c.model.layers = m["layers"].get<std::size_t>();
      if (m.contains("max_len")) c.model.max_len = m["max_len"].get<std::size_t>();
      if (m.contains("precision")) {
        c.model.precision = parse_precision(m["precision"].get<std::string>());
      }
      if (m.contains("embed_stddev")) c.model.embed_stddev = m["embed_stddev"].get<double>();
      if (m.contains("attn_stddev")) c.model.attn_stddev = m["attn_stddev"].get<double>();
      if (m.contains("ff_stddev")) c.model.ff_stddev = m["ff_stddev"].get<double>();
    }
    if (j.contains("data")) {
      const json& d = j["data"];
      expect_keys(d, "data",
                  {"train_examples", "eval_examples", "min_source_len", "max_source_len"});
      if (d.contains("train_examples")) c.train_examples = d["train_examples"].get<std::size_t>();
      if (d.contains("eval_examples")) c.eval_examples = d["eval_examples"].get<std::size_t>();
      if (d.contains("min_source_len")) c.min_source_len = d["min_source_len"].get<std::size_t>();
      if (d.contains("max_source_len")) c.max_source_len = d["max_source_len"].get<std::size_t>();
    }
    if (j.contains("train")) {
      const json& t = j["train"];
      expect_keys(t, "train", {"learning_rate", "steps", "batch_size"});
      if (t.contains("learning_rate")) c.train.learning_rate = t["learning_rate"].get<double>();
      if (t.contains("steps")) c.train.steps = t["steps"].get<std::size_t>();
      if (t.contains("batch_size")) c.train.batch_size = t["batch_size"].get<std::size_t>();
    }
    if (j.contains("preset")) {
      apply_preset(c, j["preset"].get<std::string>());
      // Explicit train settings win over the preset they accompany.
      if (j.contains("train")) {
        const json& t = j["train"];
        if (t.contains("learning_rate")) c.train.learning_rate = t["learning_rate"].get<double>();
        if (t.contains("batch_size")) c.train.batch_size = t["batch_size"].get<std::size_t>();
      }
    }
    if (j.contains("adapter")) {
      const json& a = j["adapter"];
      expect_keys(a, "adapter",
                  {"rank", "targets", "gamma", "schedule", "scheme", "granularity", "block_size",
                   "double_quant"});
      if (a.contains("rank")) c.rank = a["rank"].get<std::size_t>();
      if (a.contains("targets")) {
        std::vector<AttentionTarget> ts;
        std::string csv;
        for (const json& name : a["targets"]) {
          if (!csv.empty()) csv += ',';
          csv += name.get<std::string>();
        }
        c.targets = parse_targets(csv);
      }
      if (a.contains("gamma")) c.gamma = a["gamma"].get<double>();
      if (a.contains("schedule")) {
        const json& s = a["schedule"];
        expect_keys(s, "schedule",
                    {"initial_budget", "final_budget", "total_steps", "warmup_steps"});
        BudgetSchedule sched;
        if (s.contains("initial_budget")) sched.initial_budget = s["initial_budget"].get<std::size_t>();
        if (s.contains("final_budget")) sched.final_budget = s["final_budget"].get<std::size_t>();
        if (s.contains("total_steps")) sched.total_steps = s["total_steps"].get<std::size_t>();
        if (s.contains("warmup_steps")) sched.warmup_steps = s["warmup_steps"].get<std::size_t>();
        c.schedule = sched;
      }
      if (a.contains("scheme")) c.scheme = a["scheme"].get<std::string>();
      if (a.contains("granularity")) c.granularity = a["granularity"].get<std::string>();
      if (a.contains("block_size")) c.block_size = a["block_size"].get<std::size_t>();
      if (a.contains("double_quant")) c.double_quant = a["double_quant"].get<bool>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config value: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_string(text);
}

std::uint64_t ExperimentConfig::config_hash() const { return fnv1a(to_json_string()); }

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const Preset& p : kPresets) names.emplace_back(p.name);
  return names;
}

void apply_preset(ExperimentConfig& config, const std::string& name) {
  const Preset& p = find_preset(name);
  config.train.learning_rate = p.learning_rate;
  config.train.batch_size = p.batch_size;
  config.preset = name;
}

EvalMetrics evaluate_model(const TransformerModel& model, const SeqDataset& data) {
  if (data.empty()) throw UsageError("evaluation data is empty");
  std::vector<CorpusExample> corpus;
  corpus.reserve(data.size());
  std::size_t hits = 0;
  for (const SeqPair& pair : data) {
    TokenIds emitted = greedy_decode(model, pair.source);
    if (decode_matches(emitted, pair.target)) ++hits;
    if (!emitted.empty() && emitted.back() == kEosToken) emitted.pop_back();
    corpus.push_back({token_text(pair.source), token_text(emitted), {token_text(pair.target)}});
  }
  const CorpusReport scored = evaluate_corpus(corpus);
  EvalMetrics m;
  m.exact_match = static_cast<double>(hits) / static_cast<double>(data.size());
  m.rouge1 = scored.means.rouge1;
  m.rouge2 = scored.means.rouge2;
  m.rouge_l = scored.means.rouge_l;
  m.rouge_s = scored.means.rouge_s;
  m.wer = scored.means.wer;
  return m;
}

StorageFootprint measure_footprint(const TransformerModel& model) {
  StorageFootprint f;
  const std::size_t elem = bytes_per_element(model.config.precision);
  f.trainable_bytes = trainable_parameter_count(model) * elem;
  f.frozen_dense_equivalent_bytes = frozen_parameter_count(model) * elem;

  auto dense_frozen = [&](const Tensor& t) {
    if (!t.requires_grad()) f.frozen_dense_bytes += t.size() * elem;
  };
  dense_frozen(model.embedding);
  dense_frozen(model.w_out);
  for (const EncoderBlock& block : model.encoder) dense_frozen(block.w_ff);
  for (const DecoderBlock& block : model.decoder) dense_frozen(block.w_ff);
  for (const Projection* proj : attention_projections(model)) {
    if (proj->qlora) {
      f.quantized_bytes += footprint(*proj->qlora->w_q).total();
    } else {
      dense_frozen(proj->weight);
    }
  }
  return f;
}

std::string run_label(const ExperimentConfig& config) {
  if (config.mode == AdapterMode::none) return "full";
  std::string label = mode_name(config.mode);
  if (config.mode == AdapterMode::qlora) label += "-" + config.scheme.value_or("?");
  label += "-r" + std::to_string(config.rank.value_or(8));
  return label;
}

std::string RunReport::to_json_string(bool include_timing) const {
  return report_to_json(*this, include_timing).dump(2);
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();

  Rng init_rng(Rng::derive(config.seed, "init"));
  TransformerModel model = TransformerModel::create(config.model, init_rng);
  if (config.mode != AdapterMode::none) {
    Rng attach_rng(Rng::derive(config.seed, "attach"));
    attach_adapters(model, config.adapter_spec(), attach_rng);
  }

  Rng train_data_rng(Rng::derive(config.seed, "train-data"));
  const SeqDataset train_data =
      make_task_dataset(config.task, config.train_examples, config.min_source_len,
                        config.max_source_len, config.model.vocab_size, train_data_rng);
  Rng eval_data_rng(Rng::derive(config.seed, "eval-data"));
  const SeqDataset eval_data =
      make_task_dataset(config.task, config.eval_examples, config.min_source_len,
                        config.max_source_len, config.model.vocab_size, eval_data_rng);

  RunReport report;
  report.label = run_label(config);
  report.config = config;
  report.trainable_params = trainable_parameter_count(model);
  report.frozen_params = frozen_parameter_count(model);

  Rng train_rng(Rng::derive(config.seed, "train"));
  const auto started = std::chrono::steady_clock::now();
  report.losses = train(model, train_data, config.train, train_rng);
  report.train_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started)
          .count();
  report.initial_loss = report.losses.front();
  report.final_loss = report.losses.back();
  report.eval = evaluate_model(model, eval_data);
  report.footprint = measure_footprint(model);

  return {std::move(report), save_checkpoint(model, config)};
}

std::string ComparisonReport::to_json_string(bool include_timing) const {
  json j;
  json rows = json::array();
  for (const RunReport& run : runs) rows.push_back(report_to_json(run, include_timing));
  j["runs"] = rows;
  return j.dump(2);
}

std::string ComparisonReport::to_csv() const {
  std::string out = "step";
  std::size_t max_steps = 0;
  for (const RunReport& run : runs) {
    out += ',';
    out += run.label;
    max_steps = std::max(max_steps, run.losses.size());
  }
  out += '\n';
  for (std::size_t step = 0; step < max_steps; ++step) {
    out += std::to_string(step);
    for (const RunReport& run : runs) {
      out += ',';
      if (step < run.losses.size()) out += csv_double(run.losses[step]);
    }
    out += '\n';
  }
  return out;
}

ComparisonReport compare_modes(const std::vector<ExperimentConfig>& configs) {
  if (configs.size() < 2) {
    throw UsageError("a comparison needs at least two configurations");
  }
  for (const ExperimentConfig& c : configs) {
    if (c.task != configs.front().task || c.seed != configs.front().seed) {
      throw UsageError("compared runs must share the task and the seed");
    }
  }
  ComparisonReport report;
  for (const ExperimentConfig& c : configs) {
    report.runs.push_back(run_experiment(c).report);
  }
  // Duplicate labels get an index suffix so CSV columns stay unambiguous.
  for (std::size_t i = 0; i < report.runs.size(); ++i) {
    std::size_t seen = 0;
    for (std::size_t k = 0; k < i; ++k) {
      if (report.runs[k].label == report.runs[i].label) ++seen;
    }
    if (seen > 0) report.runs[i].label += "#" + std::to_string(seen + 1);
  }
  return report;
}

std::string token_text(const TokenIds& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += 't' + std::to_string(ids[i]);
  }
  return out;
}

TokenIds parse_token_text(const std::string& text) {
  TokenIds ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && text[pos] == ' ') ++pos;
    if (pos >= text.size()) break;
    std::size_t end = text.find(' ', pos);
    if (end == std::string::npos) end = text.size();
    const std::string word = text.substr(pos, end - pos);
    pos = end;
    if (word.size() < 2 || word[0] != 't') {
      throw FormatError("bad token '" + word + "' (expected t<id>)");
    }
    long long value = 0;
    for (std::size_t k = 1; k < word.size(); ++k) {
      if (word[k] < '0' || word[k] > '9') {
        throw FormatError("bad token '" + word + "' (expected t<id>)");
      }
      value = value * 10 + (word[k] - '0');
      if (value > 0x7fffffff) throw FormatError("token id out of range in '" + word + "'");
    }
    ids.push_back(static_cast<TokenId>(value));
  }
  return ids;
}

void write_dataset_jsonl(const SeqDataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open dataset file for writing: " + path);
  for (const SeqPair& pair : data) {
    json j;
    j["source"] = token_text(pair.source);
    j["target"] = token_text(pair.target);
    out << j.dump() << '\n';
  }
  if (!out) throw FormatError("failed writing dataset file: " + path);
}

SeqDataset read_dataset_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset file: " + path);
  SeqDataset data;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string at = "dataset line " + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError(at + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("source") || !j["source"].is_string() ||
        !j.contains("target") || !j["target"].is_string()) {
      throw FormatError(at + ": expected an object with string 'source' and 'target'");
    }
    for (const auto& [key, value] : j.items()) {
      if (key != "source" && key != "target") {
        throw FormatError(at + ": unknown key '" + key + "'");
      }
    }
    try {
      SeqPair pair;
      pair.source = parse_token_text(j["source"].get<std::string>());
      pair.target = parse_token_text(j["target"].get<std::string>());
      data.push_back(std::move(pair));
    } catch (const FormatError& e) {
      throw FormatError(at + ": " + e.what());
    }
  }
  return data;
}

void write_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open file for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing file: " + path);
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open file for writing: " + path);
  out << text;
  if (!out) throw FormatError("failed writing file: " + path);
}

}  // namespace peftlab
