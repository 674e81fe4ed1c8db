#include "peftlab/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "peftlab/errors.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {
namespace {

constexpr double kMaskPenalty = -1e30;

Tensor trainable_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng,
                        Precision prec) {
  Tensor t = Tensor::random_normal(rows, cols, stddev, rng, prec);
  t.set_requires_grad(true);
  return t;
}

void check_stddev(double value, const char* field) {
  if (!std::isfinite(value) || value < 0.0) {
    throw ConfigError(std::string(field) + " must be finite and non-negative");
  }
}

bool has_target(const std::vector<AttentionTarget>& targets, AttentionTarget t) {
  return std::find(targets.begin(), targets.end(), t) != targets.end();
}

// Queries attend over the key sequence; an optional causal penalty keeps
// position i from seeing positions beyond i.
Tensor attention(const AttentionLayer& layer, const Tensor& queries, const Tensor& keys,
                 bool causal, const TransformerConfig& cfg) {
  Tensor q = layer.wq.forward(queries);
  Tensor k = layer.wk.forward(keys);
  Tensor v = layer.wv.forward(keys);
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(cfg.d_k)));
  if (causal) scores = add(scores, causal_mask(queries.rows(), scores.precision()));
  return matmul(softmax_rows(scores), v);
}

Tensor embed_sequence(const TransformerModel& model, const TokenIds& ids) {
  Tensor x = embedding_rows(model.embedding, ids);
  return add(x, positional_encoding(ids.size(), model.config.d_model, x.precision()));
}

void append_projection_params(const Projection& proj, std::vector<Tensor>& out) {
  if (proj.qlora) {
    out.push_back(proj.qlora->adapter.a);
    out.push_back(proj.qlora->adapter.b);
  } else if (proj.lora) {
    out.push_back(proj.lora->a);
    out.push_back(proj.lora->b);
  } else if (proj.adalora) {
    out.push_back(proj.adalora->p);
    out.push_back(proj.adalora->lambda);
    out.push_back(proj.adalora->q);
  } else if (proj.weight.requires_grad()) {
    out.push_back(proj.weight);
  }
}

std::size_t frozen_projection_elements(const Projection& proj) {
  if (proj.qlora) return proj.qlora->w_q->rows * proj.qlora->w_q->cols;
  return proj.weight.requires_grad() ? 0 : proj.weight.size();
}

}  // namespace

void TransformerConfig::validate() const {
  if (vocab_size < static_cast<std::size_t>(kFirstContentToken) + 1) {
    throw ConfigError("vocab_size must leave room for at least one content token");
  }
  if (d_model == 0) throw ConfigError("d_model must be positive");
  if (d_k != d_model) throw ConfigError("d_k must equal d_model");
  if (layers == 0) throw ConfigError("layers must be positive");
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  check_stddev(embed_stddev, "embed_stddev");
  check_stddev(attn_stddev, "attn_stddev");
  check_stddev(ff_stddev, "ff_stddev");
}

AdapterMode parse_mode(const std::string& name) {
  if (name == "full") return AdapterMode::none;
  if (name == "lora") return AdapterMode::lora;
  if (name == "adalora") return AdapterMode::adalora;
  if (name == "qlora") return AdapterMode::qlora;
  throw ConfigError("unknown mode: " + name);
}

std::string mode_name(AdapterMode mode) {
  switch (mode) {
    case AdapterMode::none:
      return "full";
    case AdapterMode::lora:
      return "lora";
    case AdapterMode::adalora:
      return "adalora";
    case AdapterMode::qlora:
      return "qlora";
  }
  throw ConfigError("unknown mode value");
}

std::vector<AttentionTarget> parse_targets(const std::string& csv) {
  std::vector<AttentionTarget> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    std::size_t comma = csv.find(',', pos);
    if (comma == std::string::npos) comma = csv.size();
    std::string item = csv.substr(pos, comma - pos);
    item.erase(std::remove(item.begin(), item.end(), ' '), item.end());
    if (!item.empty()) {
      AttentionTarget t;
      if (item == "wq") {
        t = AttentionTarget::wq;
      } else if (item == "wk") {
        t = AttentionTarget::wk;
      } else if (item == "wv") {
        t = AttentionTarget::wv;
      } else {
        throw ConfigError("unknown attention target: " + item);
      }
      if (!has_target(out, t)) out.push_back(t);
    }
    pos = comma + 1;
  }
  if (out.empty()) throw ConfigError("no attention targets given");
  std::sort(out.begin(), out.end());
  return out;
}

Tensor Projection::forward(const Tensor& x) const {
  if (qlora) return qlora_forward(x, *qlora);
  if (lora) return lora_forward(x, weight, *lora);
  if (adalora) return adalora_forward(x, weight, *adalora);
  return matmul(x, weight);
}

std::size_t Projection::in_dim() const { return qlora ? qlora->in_dim() : weight.rows(); }

std::size_t Projection::out_dim() const { return qlora ? qlora->out_dim() : weight.cols(); }

void AdapterSpec::validate() const {
  if (mode == AdapterMode::none) {
    throw ConfigError("full fine-tuning attaches no adapters");
  }
  if (rank == 0) throw ConfigError("adapter rank must be positive");
  if (targets.empty()) throw ConfigError("at least one attention target is required");
  if (mode == AdapterMode::adalora) {
    schedule.validate();
    if (!std::isfinite(gamma) || gamma < 0.0) {
      throw ConfigError("gamma must be finite and non-negative");
    }
    if (schedule.initial_budget > rank) {
      throw ConfigError("initial budget cannot exceed the adapter rank");
    }
  }
  if (mode == AdapterMode::qlora) scheme.validate();
  check_stddev(init_stddev, "init_stddev");
}

TransformerModel TransformerModel::create(const TransformerConfig& cfg, Rng& rng) {
  cfg.validate();
  TransformerModel model;
  model.config = cfg;
  const std::size_t d = cfg.d_model;
  const Precision prec = cfg.precision;

  model.embedding = trainable_normal(cfg.vocab_size, d, cfg.embed_stddev, rng, prec);

  auto make_attention = [&] {
    AttentionLayer layer;
    layer.wq.weight = trainable_normal(d, d, cfg.attn_stddev, rng, prec);
    layer.wk.weight = trainable_normal(d, d, cfg.attn_stddev, rng, prec);
    layer.wv.weight = trainable_normal(d, d, cfg.attn_stddev, rng, prec);
    return layer;
  };

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    EncoderBlock block;
    block.attn = make_attention();
    block.w_ff = trainable_normal(d, d, cfg.ff_stddev, rng, prec);
    model.encoder.push_back(std::move(block));
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    DecoderBlock block;
    block.self_attn = make_attention();
    block.cross_attn = make_attention();
    block.w_ff = trainable_normal(d, d, cfg.ff_stddev, rng, prec);
    model.decoder.push_back(std::move(block));
  }

  std::vector<double> tied(d * cfg.vocab_size);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) {
      tied[i * cfg.vocab_size + j] = model.embedding.at(j, i);
    }
  }
  model.w_out = Tensor::from_data(d, cfg.vocab_size, std::move(tied), prec);
  model.w_out.set_requires_grad(true);
  return model;
}

void attach_adapters(TransformerModel& model, const AdapterSpec& spec, Rng& rng) {
  spec.validate();
  if (model.adapter_mode != AdapterMode::none) {
    throw UsageError("model already has adapters attached");
  }

  model.embedding.set_requires_grad(false);
  model.w_out.set_requires_grad(false);
  for (Projection* proj : attention_projections(model)) {
    proj->weight.set_requires_grad(false);
  }
  for (EncoderBlock& block : model.encoder) block.w_ff.set_requires_grad(false);
  for (DecoderBlock& block : model.decoder) block.w_ff.set_requires_grad(false);

  auto attach_one = [&](Projection& proj, AttentionTarget which) {
    if (!has_target(spec.targets, which)) return;
    switch (spec.mode) {
      case AdapterMode::lora:
        proj.lora = LoraAdapter::create(proj.weight, spec.rank, rng, spec.init_stddev);
        break;
      case AdapterMode::adalora:
        proj.adalora = AdaLoraAdapter::create(proj.weight, spec.rank, spec.schedule, rng,
                                              spec.gamma, spec.init_stddev);
        break;
      case AdapterMode::qlora:
        proj.qlora = QloraLinear::create(proj.weight, spec.scheme, spec.granularity, spec.rank,
                                         rng, spec.double_quant, model.config.precision,
                                         spec.cache_dequantized, spec.init_stddev);
        // The dense original is gone; only codes and the adapter remain.
        proj.weight = Tensor();
        break;
      case AdapterMode::none:
        break;
    }
  };

  auto attach_layer = [&](AttentionLayer& layer) {
    attach_one(layer.wq, AttentionTarget::wq);
    attach_one(layer.wk, AttentionTarget::wk);
    attach_one(layer.wv, AttentionTarget::wv);
  };
  for (EncoderBlock& block : model.encoder) attach_layer(block.attn);
  for (DecoderBlock& block : model.decoder) {
    attach_layer(block.self_attn);
    attach_layer(block.cross_attn);
  }
  model.adapter_mode = spec.mode;
}

std::vector<Projection*> attention_projections(TransformerModel& model) {
  std::vector<Projection*> out;
  auto push_layer = [&](AttentionLayer& layer) {
    out.push_back(&layer.wq);
    out.push_back(&layer.wk);
    out.push_back(&layer.wv);
  };
  for (EncoderBlock& block : model.encoder) push_layer(block.attn);
  for (DecoderBlock& block : model.decoder) {
    push_layer(block.self_attn);
    push_layer(block.cross_attn);
  }
  return out;
}

std::vector<const Projection*> attention_projections(const TransformerModel& model) {
  std::vector<const Projection*> out;
  for (Projection* proj : attention_projections(const_cast<TransformerModel&>(model))) {
    out.push_back(proj);
  }
  return out;
}

Tensor positional_encoding(std::size_t len, std::size_t d_model, Precision prec) {
  Tensor table(len, d_model, prec);
  for (std::size_t p = 0; p < len; ++p) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const std::size_t pair = i - (i % 2);
      const double angle =
          static_cast<double>(p) /
          std::pow(10000.0, static_cast<double>(pair) / static_cast<double>(d_model));
      table.set(p, i, i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return table;
}

Tensor causal_mask(std::size_t len, Precision prec) {
  Tensor mask(len, len, prec);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = i + 1; j < len; ++j) mask.set(i, j, kMaskPenalty);
  }
  return mask;
}

Tensor encode(const TransformerModel& model, const TokenIds& source) {
  TokenIds framed = source;
  framed.push_back(kEosToken);
  if (framed.size() > model.config.max_len) {
    throw UsageError("source length " + std::to_string(source.size()) +
                     " exceeds max_len " + std::to_string(model.config.max_len) +
                     " once framed");
  }
  Tensor x = embed_sequence(model, framed);
  for (const EncoderBlock& block : model.encoder) {
    x = add(x, attention(block.attn, x, x, false, model.config));
    x = add(x, tanh_map(matmul(x, block.w_ff)));
  }
  return x;
}

Tensor decode_logits(const TransformerModel& model, const Tensor& enc_out,
                     const TokenIds& decoder_input) {
  if (decoder_input.empty()) throw UsageError("decoder input is empty");
  if (decoder_input.size() > model.config.max_len) {
    throw UsageError("decoder input length " + std::to_string(decoder_input.size()) +
                     " exceeds max_len " + std::to_string(model.config.max_len));
  }
  Tensor y = embed_sequence(model, decoder_input);
  for (const DecoderBlock& block : model.decoder) {
    y = add(y, attention(block.self_attn, y, y, true, model.config));
    y = add(y, attention(block.cross_attn, y, enc_out, false, model.config));
    y = add(y, tanh_map(matmul(y, block.w_ff)));
  }
  return matmul(y, model.w_out);
}

Tensor sequence_loss(const TransformerModel& model, const TokenIds& source,
                     const TokenIds& target) {
  Tensor enc = encode(model, source);
  TokenIds decoder_input;
  decoder_input.reserve(target.size() + 1);
  decoder_input.push_back(kBosToken);
  decoder_input.insert(decoder_input.end(), target.begin(), target.end());
  TokenIds labels = target;
  labels.push_back(kEosToken);
  return cross_entropy(decode_logits(model, enc, decoder_input), labels);
}

TokenIds greedy_decode(const TransformerModel& model, const TokenIds& source) {
  const Tensor enc = encode(model, source);
  TokenIds decoder_input{kBosToken};
  TokenIds emitted;
  while (decoder_input.size() < model.config.max_len) {
    const Tensor logits = decode_logits(model, enc, decoder_input);
    const std::size_t last = logits.rows() - 1;
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j) {
      if (logits.at(last, j) > logits.at(last, best)) best = j;
    }
    const TokenId token = static_cast<TokenId>(best);
    emitted.push_back(token);
    if (token == kEosToken) break;
    decoder_input.push_back(token);
  }
  return emitted;
}

bool decode_matches(const TokenIds& emitted, const TokenIds& target) {
  TokenIds trimmed = emitted;
  if (!trimmed.empty() && trimmed.back() == kEosToken) trimmed.pop_back();
  return trimmed == target;
}

double exact_match_rate(const TransformerModel& model, const SeqDataset& data) {
  if (data.empty()) throw UsageError("exact_match_rate needs at least one example");
  std::size_t hits = 0;
  for (const SeqPair& pair : data) {
    if (decode_matches(greedy_decode(model, pair.source), pair.target)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

TaskKind parse_task(const std::string& name) {
  if (name == "copy") return TaskKind::copy;
  if (name == "reverse") return TaskKind::reverse;
  if (name == "summarize") return TaskKind::summarize;
  throw ConfigError("unknown task: " + name);
}

std::string task_name(TaskKind task) {
  switch (task) {
    case TaskKind::copy:
      return "copy";
    case TaskKind::reverse:
      return "reverse";
    case TaskKind::summarize:
      return "summarize";
  }
  throw ConfigError("unknown task value");
}

TokenIds task_target(TaskKind task, const TokenIds& source) {
  switch (task) {
    case TaskKind::copy:
      return source;
    case TaskKind::reverse: {
      TokenIds out(source.rbegin(), source.rend());
      return out;
    }
    case TaskKind::summarize: {
      TokenIds out;
      for (std::size_t i = 0; i < source.size(); i += 2) out.push_back(source[i]);
      return out;
    }
  }
  throw UsageError("unknown task value");
}

SeqDataset make_task_dataset(TaskKind task, std::size_t count, std::size_t min_len,
                             std::size_t max_len, std::size_t vocab_size, Rng& rng) {
  if (min_len == 0 || min_len > max_len) {
    throw UsageError("need 1 <= min_len <= max_len");
  }
  const std::size_t reserved = static_cast<std::size_t>(kFirstContentToken);
  if (vocab_size <= reserved) {
    throw UsageError("vocab too small for content tokens");
  }
  SeqDataset data;
  data.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    TokenIds source(len);
    for (std::size_t k = 0; k < len; ++k) {
      source[k] = static_cast<TokenId>(reserved + rng.below(vocab_size - reserved));
    }
    TokenIds target = task_target(task, source);
    data.push_back({std::move(source), std::move(target)});
  }
  return data;
}

void TrainConfig::validate() const {
  if (!std::isfinite(learning_rate) || learning_rate < 0.0) {
    throw ConfigError("learning_rate must be finite and non-negative");
  }
  if (steps == 0) throw ConfigError("steps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
}

std::vector<double> train(TransformerModel& model, const SeqDataset& data,
                          const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (data.empty()) throw UsageError("training data is empty");
  std::vector<Tensor> params = trainable_parameters(model);
  if (params.empty()) throw UsageError("model has no trainable parameters");

  std::vector<AdaLoraAdapter*> budgeted;
  for (Projection* proj : attention_projections(model)) {
    if (proj->adalora) budgeted.push_back(&*proj->adalora);
  }

  SgdConfig sgd;
  sgd.learning_rate = cfg.learning_rate;
  sgd.steps = cfg.steps;
  sgd.validate();

  std::vector<double> losses;
  losses.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tape tape;
    Tensor total;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const SeqPair& example = data[rng.below(data.size())];
      Tensor item = sequence_loss(model, example.source, example.target);
      total = b == 0 ? item : add(total, item);
    }
    Tensor loss = scale(total, 1.0 / static_cast<double>(cfg.batch_size));
    for (AdaLoraAdapter* adapter : budgeted) {
      loss = add(loss, orthogonality_penalty(*adapter));
    }
    const double value = loss.at(0, 0);
    if (!std::isfinite(value)) {
      throw TrainingError("non-finite loss at step " + std::to_string(step));
    }
    tape.backward(loss);
    sgd_step(params, sgd);
    for (AdaLoraAdapter* adapter : budgeted) prune_step(*adapter);
    losses.push_back(value);
  }
  return losses;
}

std::vector<Tensor> trainable_parameters(const TransformerModel& model) {
  std::vector<Tensor> out;
  if (model.embedding.requires_grad()) out.push_back(model.embedding);
  for (const EncoderBlock& block : model.encoder) {
    append_projection_params(block.attn.wq, out);
    append_projection_params(block.attn.wk, out);
    append_projection_params(block.attn.wv, out);
    if (block.w_ff.requires_grad()) out.push_back(block.w_ff);
  }
  for (const DecoderBlock& block : model.decoder) {
    append_projection_params(block.self_attn.wq, out);
    append_projection_params(block.self_attn.wk, out);
    append_projection_params(block.self_attn.wv, out);
    append_projection_params(block.cross_attn.wq, out);
    append_projection_params(block.cross_attn.wk, out);
    append_projection_params(block.cross_attn.wv, out);
    if (block.w_ff.requires_grad()) out.push_back(block.w_ff);
  }
  if (model.w_out.requires_grad()) out.push_back(model.w_out);
  return out;
}

std::size_t trainable_parameter_count(const TransformerModel& model) {
  std::size_t count = 0;
  for (const Tensor& t : trainable_parameters(model)) count += t.size();
  return count;
}

std::size_t frozen_parameter_count(const TransformerModel& model) {
  std::size_t count = 0;
  auto add_plain = [&count](const Tensor& t) {
    if (!t.requires_grad()) count += t.size();
  };
  add_plain(model.embedding);
  for (const Projection* proj : attention_projections(model)) {
    count += frozen_projection_elements(*proj);
  }
  for (const EncoderBlock& block : model.encoder) add_plain(block.w_ff);
  for (const DecoderBlock& block : model.decoder) add_plain(block.w_ff);
  add_plain(model.w_out);
  return count;
}

}  // namespace peftlab
