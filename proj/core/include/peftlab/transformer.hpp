#pragma once

// A deliberately small encoder-decoder transformer for sequence-to-sequence
// drills: single-head attention with full-width projections, square
// feed-forward layers with tanh, sinusoidal positions, and an output head
// initialized from the transposed embedding. Every attention projection can
// host a low-rank adapter, a budgeted adapter, or a quantized base with an
// adapter beside it; the surrounding architecture is identical in all modes,
// so mode comparisons isolate the adapter itself.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "peftlab/adapters.hpp"
#include "peftlab/ops.hpp"
#include "peftlab/qlora.hpp"
#include "peftlab/quant.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab {

class Rng;

inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kBosToken = 1;
inline constexpr TokenId kEosToken = 2;
// Ids below this are reserved; task generators draw from [here, vocab).
inline constexpr TokenId kFirstContentToken = 3;

struct TransformerConfig {
  std::size_t vocab_size = 32;
  std::size_t d_model = 32;
  // Key width. The attention projections are square, so this must equal
  // d_model; it exists so the mismatch is caught loudly rather than by a
  // shape error deep inside a forward pass.
  std::size_t d_k = 32;
  std::size_t layers = 2;
  // Upper bound on any framed sequence: source plus its end marker, or
  // begin marker plus target.
  std::size_t max_len = 16;
  Precision precision = Precision::f32;
  double embed_stddev = 0.5;
  double attn_stddev = 0.1;
  double ff_stddev = 0.02;

  void validate() const;
};

enum class AdapterMode { none, lora, adalora, qlora };

// Accepts "full", "lora", "adalora", "qlora".
AdapterMode parse_mode(const std::string& name);
std::string mode_name(AdapterMode mode);

enum class AttentionTarget { wq, wk, wv };

// Comma-separated subset of "wq,wk,wv", deduplicated.
std::vector<AttentionTarget> parse_targets(const std::string& csv);

// One attention projection. At most one adapter member is engaged; with
// none, the dense weight applies alone. A quantized base replaces the dense
// weight entirely.
struct Projection {
  Tensor weight;
  std::optional<LoraAdapter> lora;
  std::optional<AdaLoraAdapter> adalora;
  std::optional<QloraLinear> qlora;

  Tensor forward(const Tensor& x) const;
  bool has_adapter() const { return lora || adalora || qlora; }
  std::size_t in_dim() const;
  std::size_t out_dim() const;
};

struct AttentionLayer {
  Projection wq, wk, wv;
};

struct EncoderBlock {
  AttentionLayer attn;
  Tensor w_ff;
};

struct DecoderBlock {
  AttentionLayer self_attn;
  AttentionLayer cross_attn;
  Tensor w_ff;
};

struct AdapterSpec {
  AdapterMode mode = AdapterMode::lora;
  std::size_t rank = 8;
  std::vector<AttentionTarget> targets = {AttentionTarget::wq, AttentionTarget::wv};
  double init_stddev = 0.02;
  // Budgeted-adapter settings.
  double gamma = 0.1;
  BudgetSchedule schedule;
  // Quantized-base settings.
  QuantScheme scheme = QuantScheme::nf4_scheme();
  Granularity granularity = Granularity::per_block(64);
  std::optional<bool> double_quant;
  bool cache_dequantized = false;

  void validate() const;
};

struct TransformerModel {
  TransformerConfig config;
  Tensor embedding;  // vocab x d_model
  Tensor w_out;      // d_model x vocab
  std::vector<EncoderBlock> encoder;
  std::vector<DecoderBlock> decoder;
  AdapterMode adapter_mode = AdapterMode::none;

  // Draw order is fixed (embedding, then each encoder block's wq/wk/wv/ff,
  // then each decoder block's self, cross, ff), so a seed pins every weight.
  // The output head copies the transposed embedding without consuming draws.
  static TransformerModel create(const TransformerConfig& cfg, Rng& rng);
};

// Freezes every base weight, then hangs adapters on the targeted attention
// projections of all blocks. In quantized mode the targeted projections drop
// their dense weights for quantized codes; everything else stays dense and
// frozen. Attaching twice is a UsageError.
void attach_adapters(TransformerModel& model, const AdapterSpec& spec, Rng& rng);

// All attention projections in canonical block order. Six entries per
// configured layer pair: one per encoder block, self plus cross per decoder
// block, times the three projections.
std::vector<const Projection*> attention_projections(const TransformerModel& model);
std::vector<Projection*> attention_projections(TransformerModel& model);

// Sinusoidal position table, untracked.
Tensor positional_encoding(std::size_t len, std::size_t d_model, Precision prec);

// Zero on and below the diagonal, a large negative additive penalty above.
Tensor causal_mask(std::size_t len, Precision prec);

// Source framed with a trailing end marker, then the encoder stack.
Tensor encode(const TransformerModel& model, const TokenIds& source);

// Decoder stack over an explicit input row sequence, against the encoder
// output; returns one logit row per input position.
Tensor decode_logits(const TransformerModel& model, const Tensor& enc_out,
                     const TokenIds& decoder_input);

// Teacher-forced mean cross entropy: decoder input is BOS + target, labels
// are target + EOS.
Tensor sequence_loss(const TransformerModel& model, const TokenIds& source,
                     const TokenIds& target);

// Greedy argmax decoding, lowest id on ties. Emits up to max_len - 1 tokens
// and includes the end marker when one is produced; a return without a
// trailing end marker means the length budget ran out first.
TokenIds greedy_decode(const TransformerModel& model, const TokenIds& source);

// Equality after stripping one trailing end marker from the emission.
bool decode_matches(const TokenIds& emitted, const TokenIds& target);

struct SeqPair {
  TokenIds source;
  TokenIds target;
};

using SeqDataset = std::vector<SeqPair>;

double exact_match_rate(const TransformerModel& model, const SeqDataset& data);

enum class TaskKind { copy, reverse, summarize };

TaskKind parse_task(const std::string& name);
std::string task_name(TaskKind task);

// The ground-truth mapping: identity, reversal, or every second token
// starting from the first.
TokenIds task_target(TaskKind task, const TokenIds& source);

// Random sources of uniform length in [min_len, max_len] over the content
// alphabet, paired with their ground-truth targets.
SeqDataset make_task_dataset(TaskKind task, std::size_t count, std::size_t min_len,
                             std::size_t max_len, std::size_t vocab_size, Rng& rng);

struct TrainConfig {
  double learning_rate = 1e-2;
  std::size_t steps = 100;
  std::size_t batch_size = 4;

  void validate() const;
};

// Mini-batch SGD over randomly drawn examples: per-sequence losses averaged,
// orthogonality penalties added for budgeted adapters, which are also pruned
// once per step. Returns the loss value of every step. A non-finite loss
// aborts with a TrainingError naming the step.
std::vector<double> train(TransformerModel& model, const SeqDataset& data,
                          const TrainConfig& cfg, Rng& rng);

// Parameters the optimizer updates, in deterministic traversal order.
std::vector<Tensor> trainable_parameters(const TransformerModel& model);
std::size_t trainable_parameter_count(const TransformerModel& model);

// Elements held fixed during training, counting quantized bases at their
// logical size.
std::size_t frozen_parameter_count(const TransformerModel& model);

}  // namespace peftlab
