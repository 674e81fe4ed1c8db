#pragma once

// Experiment orchestration: a single validated configuration drives model
// construction, adapter attachment, dataset synthesis, training, held-out
// evaluation, storage accounting, and checkpointing, all from one seed.
// Reports are canonical JSON so two runs of the same configuration produce
// byte-identical output (timing is kept under a separate key and can be
// excluded). Multi-run comparisons align per-step losses across modes.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "peftlab/metrics.hpp"
#include "peftlab/transformer.hpp"

namespace peftlab {

struct ExperimentConfig {
  AdapterMode mode = AdapterMode::none;
  TaskKind task = TaskKind::copy;
  std::uint64_t seed = 1234;
  TransformerConfig model;

  std::size_t train_examples = 256;
  std::size_t eval_examples = 64;
  std::size_t min_source_len = 1;
  std::size_t max_source_len = 6;

  TrainConfig train;
  // Recorded when a named preset filled the training fields.
  std::optional<std::string> preset;

  // Adapter settings; which ones may be set depends on the mode, checked by
  // validate() before any compute happens.
  std::optional<std::size_t> rank;
  std::optional<std::vector<AttentionTarget>> targets;
  std::optional<double> gamma;
  std::optional<BudgetSchedule> schedule;
  std::optional<std::string> scheme;
  std::optional<std::string> granularity;
  std::optional<std::size_t> block_size;
  std::optional<bool> double_quant;

  // Cross-field consistency: full fine-tuning takes no adapter settings,
  // quantization settings belong to qlora only (where a scheme is required),
  // budget settings to adalora only, and generated sequences must fit the
  // model's length budget.
  void validate() const;

  // The resolved adapter recipe. Meaningless in full mode (UsageError).
  AdapterSpec adapter_spec() const;

  // Canonical JSON: stable key order, resolved values only. Hashing this
  // string identifies the configuration.
  std::string to_json_string() const;
  static ExperimentConfig from_json_string(const std::string& text);
  static ExperimentConfig from_json_file(const std::string& path);

  std::uint64_t config_hash() const;
};

// Named learning-rate/batch-size pairs; unknown names are a ConfigError.
std::vector<std::string> preset_names();
void apply_preset(ExperimentConfig& config, const std::string& name);

struct EvalMetrics {
  double exact_match = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rouge_l = 0.0;
  double rouge_s = 0.0;
  double wer = 0.0;
};

// Greedy-decodes every example and scores the emissions (trailing end
// marker stripped) against the targets, both as exact sequence matches and
// as text metrics over spelled-out token strings.
EvalMetrics evaluate_model(const TransformerModel& model, const SeqDataset& data);

struct StorageFootprint {
  // Adapter or dense trainable parameters, at the model's element width.
  std::size_t trainable_bytes = 0;
  // Frozen tensors still stored densely.
  std::size_t frozen_dense_bytes = 0;
  // Serialized size of every quantized base, codes and constants included.
  std::size_t quantized_bytes = 0;
  // What the frozen tensors would cost stored densely; the savings baseline.
  std::size_t frozen_dense_equivalent_bytes = 0;

  std::size_t total_bytes() const {
    return trainable_bytes + frozen_dense_bytes + quantized_bytes;
  }
};

StorageFootprint measure_footprint(const TransformerModel& model);

struct RunReport {
  std::string label;
  ExperimentConfig config;
  std::size_t trainable_params = 0;
  std::size_t frozen_params = 0;
  std::vector<double> losses;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  EvalMetrics eval;
  StorageFootprint footprint;
  // Wall-clock training time; lives under its own JSON key so deterministic
  // comparisons can drop it.
  double train_ms = 0.0;

  std::string to_json_string(bool include_timing = true) const;
};

// "full", or mode plus the distinguishing knobs, e.g. "lora-r8",
// "qlora-nf4-r8".
std::string run_label(const ExperimentConfig& config);

struct ExperimentResult {
  RunReport report;
  std::vector<std::uint8_t> checkpoint;
};

// The whole pipeline for one configuration. Every random choice derives
// from config.seed, so equal configs give byte-equal reports (timing aside)
// and byte-equal checkpoints.
ExperimentResult run_experiment(const ExperimentConfig& config);

struct ComparisonReport {
  std::vector<RunReport> runs;

  std::string to_json_string(bool include_timing = false) const;
  // step column plus one loss column per run, aligned by step index.
  std::string to_csv() const;
};

// Runs each configuration in sequence. All entries must share the task and
// seed so the comparison isolates the mode (UsageError otherwise).
ComparisonReport compare_modes(const std::vector<ExperimentConfig>& configs);

// Token sequences as whitespace-joined "t<id>" words, the spelling shared by
// dataset files and metric scoring.
std::string token_text(const TokenIds& ids);
TokenIds parse_token_text(const std::string& text);

// One {"source": "t3 t4", "target": "t4 t3"} object per line.
void write_dataset_jsonl(const SeqDataset& data, const std::string& path);
SeqDataset read_dataset_jsonl(const std::string& path);

// Checkpoint container: header (magic, version, seed, config hash), the
// canonical config JSON, then one named section per stored tensor, quantized
// base, or budget state. Loading parses and validates everything before
// constructing the model, so a damaged file never yields a half-built one.
std::vector<std::uint8_t> save_checkpoint(const TransformerModel& model,
                                          const ExperimentConfig& config);

struct LoadedExperiment {
  ExperimentConfig config;
  TransformerModel model;
};

LoadedExperiment load_checkpoint(std::span<const std::uint8_t> bytes);

void write_bytes(const std::string& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_bytes(const std::string& path);
void write_text(const std::string& path, const std::string& text);

}  // namespace peftlab
