// Experiment driver: synthesizes datasets, trains adapters in every mode,
// evaluates checkpoints, and reports quantization and storage numbers, all
// deterministic from one seed. Exit codes: 0 success, 2 configuration error,
// 3 data or format error, 4 training failure, 1 anything else.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "peftlab/errors.hpp"
#include "peftlab/harness.hpp"
#include "peftlab/quant.hpp"
#include "peftlab/rng.hpp"

using namespace peftlab;
using nlohmann::json;

namespace {

struct ConfigFlags {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string mode;
  std::size_t rank = 0;
  std::string scheme;
  std::size_t block_size = 0;
  std::string preset;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.config_path, "Experiment config JSON file");
  cmd->add_option("--seed", f.seed, "Override the experiment seed");
  cmd->add_option("--mode", f.mode, "Override the mode: full, lora, adalora, qlora");
  cmd->add_option("--rank", f.rank, "Override the adapter rank");
  cmd->add_option("--scheme", f.scheme,
                  "Override the quantization scheme, one of int8, int4, sym-int8, sym-int4, nf4");
  cmd->add_option("--block-size", f.block_size, "Override the per-block group size");
  cmd->add_option("--preset", f.preset, "Apply a named learning-rate preset");
}

ExperimentConfig resolve_config(const CLI::App* cmd, const ConfigFlags& f) {
  ExperimentConfig c;
  if (cmd->count("--config")) c = ExperimentConfig::from_json_file(f.config_path);
  if (cmd->count("--preset")) apply_preset(c, f.preset);
  if (cmd->count("--seed")) c.seed = f.seed;
  if (cmd->count("--mode")) c.mode = parse_mode(f.mode);
  if (cmd->count("--rank")) c.rank = f.rank;
  if (cmd->count("--scheme")) c.scheme = f.scheme;
  if (cmd->count("--block-size")) c.block_size = f.block_size;
  return c;
}

std::filesystem::path ensure_out_dir(const std::string& out) {
  std::filesystem::path dir(out);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create output directory " + out + ": " + ec.message());
  return dir;
}

SeqDataset regenerate_eval_data(const ExperimentConfig& c) {
  Rng rng(Rng::derive(c.seed, "eval-data"));
  return make_task_dataset(c.task, c.eval_examples, c.min_source_len, c.max_source_len,
                           c.model.vocab_size, rng);
}

json eval_json(const EvalMetrics& m) {
  json j;
  j["exact_match"] = m.exact_match;
  j["rouge1"] = m.rouge1;
  j["rouge2"] = m.rouge2;
  j["rouge_l"] = m.rouge_l;
  j["rouge_s"] = m.rouge_s;
  j["wer"] = m.wer;
  return j;
}

// gen-data: deterministic JSONL dataset from the config's task settings.
int cmd_gen_data(const CLI::App* cmd, const ConfigFlags& f, const std::string& task,
                 std::size_t count, const std::string& out) {
  ExperimentConfig c = resolve_config(cmd, f);
  if (cmd->count("--task")) c.task = parse_task(task);
  if (cmd->count("--count")) c.train_examples = count;
  Rng rng(Rng::derive(c.seed, "train-data"));
  SeqDataset data = make_task_dataset(c.task, c.train_examples, c.min_source_len,
                                      c.max_source_len, c.model.vocab_size, rng);
  const std::string path = (ensure_out_dir(out) / "dataset.jsonl").string();
  write_dataset_jsonl(data, path);
  std::printf("wrote %zu %s examples to %s\n", data.size(), task_name(c.task).c_str(),
              path.c_str());
  return 0;
}

// train: the full pipeline; leaves config, report, and checkpoint in --out.
int cmd_train(const CLI::App* cmd, const ConfigFlags& f, const std::string& out) {
  ExperimentConfig c = resolve_config(cmd, f);
  ExperimentResult result = run_experiment(c);
  const std::filesystem::path dir = ensure_out_dir(out);
  write_text((dir / "config.json").string(), c.to_json_string() + "\n");
  write_text((dir / "report.json").string(), result.report.to_json_string(true) + "\n");
  write_bytes((dir / "checkpoint.plck").string(), result.checkpoint);
  const RunReport& r = result.report;
  std::printf("%s: %zu trainable / %zu frozen parameters\n", r.label.c_str(),
              r.trainable_params, r.frozen_params);
  std::printf("loss %.6f -> %.6f over %zu steps (%.1f ms)\n", r.initial_loss, r.final_loss,
              r.losses.size(), r.train_ms);
  std::printf("eval exact-match %.3f, rouge-1 %.3f, wer %.3f\n", r.eval.exact_match,
              r.eval.rouge1, r.eval.wer);
  std::printf("artifacts in %s\n", dir.string().c_str());
  return 0;
}

// eval: rescore a checkpoint, on its own held-out split or a dataset file.
int cmd_eval(const CLI::App* cmd, const std::string& checkpoint_path,
             const std::string& data_path, const std::string& out) {
  LoadedExperiment loaded = load_checkpoint(read_bytes(checkpoint_path));
  SeqDataset data = cmd->count("--data") ? read_dataset_jsonl(data_path)
                                         : regenerate_eval_data(loaded.config);
  EvalMetrics m = evaluate_model(loaded.model, data);
  json j;
  j["label"] = run_label(loaded.config);
  j["examples"] = data.size();
  j["metrics"] = eval_json(m);
  const std::string text = j.dump(2);
  std::printf("%s\n", text.c_str());
  if (cmd->count("--out")) {
    write_text((ensure_out_dir(out) / "eval.json").string(), text + "\n");
  }
  return 0;
}

// quantize: compress every attention projection of the configured model and
// report exact byte footprints plus reconstruction error.
int cmd_quantize(const CLI::App* cmd, const ConfigFlags& f, const std::string& granularity,
                 bool dq_on, bool dq_off, const std::string& out) {
  ExperimentConfig c = resolve_config(cmd, f);
  const std::string scheme_name =
      cmd->count("--scheme") ? f.scheme : c.scheme.value_or(std::string());
  if (scheme_name.empty()) {
    throw ConfigError("quantize needs a scheme (--scheme or the config's adapter.scheme)");
  }
  const QuantScheme scheme = parse_scheme(scheme_name);
  Granularity gran = parse_granularity(granularity);
  if (gran.kind == GranularityKind::per_block) {
    gran.block_size = cmd->count("--block-size") ? f.block_size : c.block_size.value_or(64);
  } else if (cmd->count("--block-size") || c.block_size) {
    throw ConfigError("block_size applies only to per-block granularity");
  }
  std::optional<bool> double_quant = c.double_quant;
  if (dq_on) double_quant = true;
  if (dq_off) double_quant = false;

  Rng rng(Rng::derive(c.seed, "init"));
  TransformerModel model = TransformerModel::create(c.model, rng);
  const std::size_t elem = bytes_per_element(c.model.precision);

  json rows = json::array();
  std::size_t dense_total = 0;
  std::size_t packed_total = 0;
  std::size_t param_total = 0;
  auto add_row = [&](const std::string& name, const Tensor& w) {
    const QuantizedTensor q = quantize(w, scheme, gran, double_quant);
    const FootprintReport fp = footprint(q);
    const Tensor back = dequantize(q);
    double max_err = 0.0;
    double sum_err = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double err = std::fabs(w.data()[k] - back.data()[k]);
      max_err = std::max(max_err, err);
      sum_err += err;
    }
    json row;
    row["name"] = name;
    row["rows"] = q.rows;
    row["cols"] = q.cols;
    row["dense_bytes"] = w.size() * elem;
    row["code_bytes"] = fp.code_bytes;
    row["constant_bytes"] = fp.constant_bytes;
    row["codebook_bytes"] = fp.codebook_bytes;
    row["metadata_bytes"] = fp.metadata_bytes;
    row["serialized_bytes"] = serialize(q).size();
    row["max_abs_error"] = max_err;
    row["mean_abs_error"] = w.size() ? sum_err / static_cast<double>(w.size()) : 0.0;
    rows.push_back(row);
    dense_total += w.size() * elem;
    packed_total += fp.total();
    param_total += w.size();
  };
  for (std::size_t i = 0; i < model.encoder.size(); ++i) {
    const std::string base = "enc" + std::to_string(i);
    add_row(base + ".wq", model.encoder[i].attn.wq.weight);
    add_row(base + ".wk", model.encoder[i].attn.wk.weight);
    add_row(base + ".wv", model.encoder[i].attn.wv.weight);
  }
  for (std::size_t i = 0; i < model.decoder.size(); ++i) {
    const std::string base = "dec" + std::to_string(i);
    add_row(base + ".self.wq", model.decoder[i].self_attn.wq.weight);
    add_row(base + ".self.wk", model.decoder[i].self_attn.wk.weight);
    add_row(base + ".self.wv", model.decoder[i].self_attn.wv.weight);
    add_row(base + ".cross.wq", model.decoder[i].cross_attn.wq.weight);
    add_row(base + ".cross.wk", model.decoder[i].cross_attn.wk.weight);
    add_row(base + ".cross.wv", model.decoder[i].cross_attn.wv.weight);
  }

  const std::size_t half_total = param_total * 2;
  json j;
  j["scheme"] = scheme.name();
  j["granularity"] = gran.name();
  j["tensors"] = rows;
  j["totals"] = {{"parameters", param_total},
                 {"dense_bytes", dense_total},
                 {"quantized_bytes", packed_total},
                 {"half_precision_bytes", half_total},
                 {"reduction_vs_dense_percent",
                  dense_total ? 100.0 * (1.0 - static_cast<double>(packed_total) /
                                                   static_cast<double>(dense_total))
                              : 0.0},
                 {"reduction_vs_half_percent",
                  half_total ? 100.0 * (1.0 - static_cast<double>(packed_total) /
                                                  static_cast<double>(half_total))
                             : 0.0}};
  const std::string text = j.dump(2);
  std::printf("%s\n", text.c_str());
  if (cmd->count("--out")) {
    write_text((ensure_out_dir(out) / "quantize.json").string(), text + "\n");
  }
  return 0;
}

// footprint: storage accounting for the configured mode, adapters attached.
int cmd_footprint(const CLI::App* cmd, const ConfigFlags& f, const std::string& out) {
  ExperimentConfig c = resolve_config(cmd, f);
  c.validate();
  Rng init_rng(Rng::derive(c.seed, "init"));
  TransformerModel model = TransformerModel::create(c.model, init_rng);
  if (c.mode != AdapterMode::none) {
    Rng attach_rng(Rng::derive(c.seed, "attach"));
    attach_adapters(model, c.adapter_spec(), attach_rng);
  }
  const StorageFootprint fp = measure_footprint(model);
  json j;
  j["label"] = run_label(c);
  j["parameters"] = {{"trainable", trainable_parameter_count(model)},
                     {"frozen", frozen_parameter_count(model)}};
  j["trainable_bytes"] = fp.trainable_bytes;
  j["frozen_dense_bytes"] = fp.frozen_dense_bytes;
  j["quantized_bytes"] = fp.quantized_bytes;
  j["frozen_dense_equivalent_bytes"] = fp.frozen_dense_equivalent_bytes;
  j["total_bytes"] = fp.total_bytes();
  if (fp.frozen_dense_equivalent_bytes > 0) {
    const double stored =
        static_cast<double>(fp.frozen_dense_bytes) + static_cast<double>(fp.quantized_bytes);
    j["frozen_savings_percent"] =
        100.0 * (1.0 - stored / static_cast<double>(fp.frozen_dense_equivalent_bytes));
  }
  const std::string text = j.dump(2);
  std::printf("%s\n", text.c_str());
  if (cmd->count("--out")) {
    write_text((ensure_out_dir(out) / "footprint.json").string(), text + "\n");
  }
  return 0;
}

// compare: several configs or mode variants of one base config, shared seed.
int cmd_compare(const CLI::App* cmd, const std::vector<std::string>& config_paths,
                const std::string& modes_csv, const ConfigFlags& f, const std::string& out) {
  std::vector<ExperimentConfig> configs;
  if (!modes_csv.empty() && config_paths.size() > 1) {
    throw ConfigError("choose either several --config files or one base config with --modes");
  }
  ExperimentConfig base;
  if (!config_paths.empty()) base = ExperimentConfig::from_json_file(config_paths.front());
  if (cmd->count("--preset")) apply_preset(base, f.preset);
  if (cmd->count("--seed")) base.seed = f.seed;

  if (!modes_csv.empty()) {
    std::size_t pos = 0;
    while (pos <= modes_csv.size()) {
      std::size_t comma = modes_csv.find(',', pos);
      if (comma == std::string::npos) comma = modes_csv.size();
      const std::string name = modes_csv.substr(pos, comma - pos);
      pos = comma + 1;
      if (name.empty()) continue;
      ExperimentConfig v = base;
      v.mode = parse_mode(name);
      // The base config may carry fields a variant's mode forbids.
      if (v.mode != AdapterMode::qlora) {
        v.scheme.reset();
        v.granularity.reset();
        v.block_size.reset();
        v.double_quant.reset();
      }
      if (v.mode != AdapterMode::adalora) {
        v.gamma.reset();
        v.schedule.reset();
      }
      if (v.mode == AdapterMode::none) {
        v.rank.reset();
        v.targets.reset();
      }
      configs.push_back(std::move(v));
    }
  } else {
    if (config_paths.size() < 2) {
      throw ConfigError("compare needs at least two --config files or a --modes list");
    }
    configs.push_back(base);
    for (std::size_t i = 1; i < config_paths.size(); ++i) {
      ExperimentConfig c = ExperimentConfig::from_json_file(config_paths[i]);
      if (cmd->count("--preset")) apply_preset(c, f.preset);
      if (cmd->count("--seed")) c.seed = f.seed;
      configs.push_back(std::move(c));
    }
  }
  for (ExperimentConfig& c : configs) {
    if (c.mode != AdapterMode::none) {
      if (cmd->count("--rank")) c.rank = f.rank;
      if (c.mode == AdapterMode::qlora) {
        if (cmd->count("--scheme")) c.scheme = f.scheme;
        if (cmd->count("--block-size")) c.block_size = f.block_size;
      }
    }
  }

  const ComparisonReport report = compare_modes(configs);
  const std::filesystem::path dir = ensure_out_dir(out);
  write_text((dir / "comparison.json").string(), report.to_json_string() + "\n");
  write_text((dir / "comparison.csv").string(), report.to_csv());
  std::printf("%-20s %12s %14s %14s %12s\n", "label", "trainable", "initial-loss", "final-loss",
              "exact-match");
  for (const RunReport& r : report.runs) {
    std::printf("%-20s %12zu %14.6f %14.6f %12.3f\n", r.label.c_str(), r.trainable_params,
                r.initial_loss, r.final_loss, r.eval.exact_match);
  }
  std::printf("artifacts in %s\n", dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"peftlab: parameter-efficient fine-tuning experiments on a toy transformer"};
  app.require_subcommand(1);

  ConfigFlags gen_flags;
  std::string gen_task;
  std::size_t gen_count = 0;
  std::string gen_out = ".";
  CLI::App* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as JSON lines");
  add_config_flags(gen, gen_flags);
  gen->add_option("--task", gen_task, "Task: copy, reverse, summarize");
  gen->add_option("--count", gen_count, "Number of examples");
  gen->add_option("--out", gen_out, "Output directory");

  ConfigFlags train_flags;
  std::string train_out = ".";
  CLI::App* train = app.add_subcommand("train", "Run one experiment end to end");
  add_config_flags(train, train_flags);
  train->add_option("--out", train_out, "Output directory");

  std::string eval_checkpoint;
  std::string eval_data;
  std::string eval_out = ".";
  CLI::App* eval = app.add_subcommand("eval", "Score a trained checkpoint");
  eval->add_option("checkpoint", eval_checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset JSONL to score instead of the held-out split");
  eval->add_option("--out", eval_out, "Output directory");

  ConfigFlags quant_flags;
  std::string quant_granularity = "per-block";
  bool quant_dq_on = false;
  bool quant_dq_off = false;
  std::string quant_out = ".";
  CLI::App* quant = app.add_subcommand("quantize", "Quantize attention weights and report bytes");
  add_config_flags(quant, quant_flags);
  quant->add_option("--granularity", quant_granularity,
                    "Grouping: per-tensor, per-row, per-block");
  quant->add_flag("--double-quant", quant_dq_on, "Quantize the group scales as well");
  quant->add_flag("--no-double-quant", quant_dq_off, "Keep group scales in full precision");
  quant->add_option("--out", quant_out, "Output directory");

  ConfigFlags foot_flags;
  std::string foot_out = ".";
  CLI::App* foot = app.add_subcommand("footprint", "Report storage for the configured mode");
  add_config_flags(foot, foot_flags);
  foot->add_option("--out", foot_out, "Output directory");

  std::vector<std::string> cmp_configs;
  std::string cmp_modes;
  ConfigFlags cmp_flags;
  std::string cmp_out = ".";
  CLI::App* cmp = app.add_subcommand("compare", "Train several configs on one task and seed");
  cmp->add_option("--config", cmp_configs, "Config files (repeat), or one base for --modes");
  cmp->add_option("--modes", cmp_modes, "Comma-separated modes derived from the base config");
  cmp->add_option("--seed", cmp_flags.seed, "Shared seed for every run");
  cmp->add_option("--rank", cmp_flags.rank, "Adapter rank for every adapter run");
  cmp->add_option("--scheme", cmp_flags.scheme, "Quantization scheme for qlora runs");
  cmp->add_option("--block-size", cmp_flags.block_size, "Group size for qlora runs");
  cmp->add_option("--preset", cmp_flags.preset, "Learning-rate preset for every run");
  cmp->add_option("--out", cmp_out, "Output directory");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_data(gen, gen_flags, gen_task, gen_count, gen_out);
    if (train->parsed()) return cmd_train(train, train_flags, train_out);
    if (eval->parsed()) return cmd_eval(eval, eval_checkpoint, eval_data, eval_out);
    if (quant->parsed()) {
      return cmd_quantize(quant, quant_flags, quant_granularity, quant_dq_on, quant_dq_off,
                          quant_out);
    }
    if (foot->parsed()) return cmd_footprint(foot, foot_flags, foot_out);
    if (cmp->parsed()) return cmd_compare(cmp, cmp_configs, cmp_modes, cmp_flags, cmp_out);
    return 2;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 3;
  } catch (const IntegrityError& e) {
    std::fprintf(stderr, "integrity error: %s\n", e.what());
    return 3;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 3;
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "training error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
