#include <map>
#include <string>

#include "peftlab/bytes.hpp"
#include "peftlab/errors.hpp"
#include "peftlab/harness.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {
namespace {

constexpr char kMagic[4] = {'P', 'L', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

enum class SectionKind : std::uint8_t { tensor = 0, quantized = 1, budget_state = 2 };

struct Section {
  SectionKind kind;
  std::string name;
  std::vector<std::uint8_t> payload;
};

std::vector<std::uint8_t> tensor_payload(const Tensor& t) {
  ByteWriter w;
  w.u8(t.precision() == Precision::f64 ? 0 : 1);
  w.u8(t.requires_grad() ? 1 : 0);
  w.u64(t.rows());
  w.u64(t.cols());
  for (double v : t.data()) w.f64(v);
  return w.take();
}

std::vector<std::uint8_t> budget_payload(const AdaLoraAdapter& adapter) {
  ByteWriter w;
  w.u64(adapter.step);
  w.f64(adapter.gamma);
  w.u64(adapter.schedule.initial_budget);
  w.u64(adapter.schedule.final_budget);
  w.u64(adapter.schedule.total_steps);
  w.u64(adapter.schedule.warmup_steps);
  w.u64(adapter.mask.size());
  for (std::uint8_t flag : adapter.mask) w.u8(flag);
  return w.take();
}

// The single traversal both save and load follow; section order and names
// are part of the format.
template <typename Fn>
void walk_projection(const std::string& prefix, const Projection& proj, Fn&& emit) {
  if (proj.qlora) {
    emit(SectionKind::quantized, prefix + ".codes");
    emit(SectionKind::tensor, prefix + ".lora.a");
    emit(SectionKind::tensor, prefix + ".lora.b");
    return;
  }
  emit(SectionKind::tensor, prefix + ".weight");
  if (proj.lora) {
    emit(SectionKind::tensor, prefix + ".lora.a");
    emit(SectionKind::tensor, prefix + ".lora.b");
  } else if (proj.adalora) {
    emit(SectionKind::tensor, prefix + ".adalora.p");
    emit(SectionKind::tensor, prefix + ".adalora.lambda");
    emit(SectionKind::tensor, prefix + ".adalora.q");
    emit(SectionKind::budget_state, prefix + ".adalora.state");
  }
}

template <typename Fn>
void walk_model(const TransformerModel& model, Fn&& emit) {
  emit(SectionKind::tensor, std::string("embedding"));
  for (std::size_t i = 0; i < model.encoder.size(); ++i) {
    const std::string base = "enc" + std::to_string(i);
    walk_projection(base + ".wq", model.encoder[i].attn.wq, emit);
    walk_projection(base + ".wk", model.encoder[i].attn.wk, emit);
    walk_projection(base + ".wv", model.encoder[i].attn.wv, emit);
    emit(SectionKind::tensor, base + ".ff");
  }
  for (std::size_t i = 0; i < model.decoder.size(); ++i) {
    const std::string base = "dec" + std::to_string(i);
    walk_projection(base + ".self.wq", model.decoder[i].self_attn.wq, emit);
    walk_projection(base + ".self.wk", model.decoder[i].self_attn.wk, emit);
    walk_projection(base + ".self.wv", model.decoder[i].self_attn.wv, emit);
    walk_projection(base + ".cross.wq", model.decoder[i].cross_attn.wq, emit);
    walk_projection(base + ".cross.wk", model.decoder[i].cross_attn.wk, emit);
    walk_projection(base + ".cross.wv", model.decoder[i].cross_attn.wv, emit);
    emit(SectionKind::tensor, base + ".ff");
  }
  emit(SectionKind::tensor, std::string("w_out"));
}

// Resolves a section path to the live object inside the model.
struct ModelIndex {
  std::map<std::string, Tensor*> tensors;
  std::map<std::string, QloraLinear*> quantized;
  std::map<std::string, AdaLoraAdapter*> budgets;

  static ModelIndex build(TransformerModel& model) {
    ModelIndex idx;
    auto index_projection = [&idx](const std::string& prefix, Projection& proj) {
      if (proj.qlora) {
        idx.quantized[prefix + ".codes"] = &*proj.qlora;
        idx.tensors[prefix + ".lora.a"] = &proj.qlora->adapter.a;
        idx.tensors[prefix + ".lora.b"] = &proj.qlora->adapter.b;
        return;
      }
      idx.tensors[prefix + ".weight"] = &proj.weight;
      if (proj.lora) {
        idx.tensors[prefix + ".lora.a"] = &proj.lora->a;
        idx.tensors[prefix + ".lora.b"] = &proj.lora->b;
      } else if (proj.adalora) {
        idx.tensors[prefix + ".adalora.p"] = &proj.adalora->p;
        idx.tensors[prefix + ".adalora.lambda"] = &proj.adalora->lambda;
        idx.tensors[prefix + ".adalora.q"] = &proj.adalora->q;
        idx.budgets[prefix + ".adalora.state"] = &*proj.adalora;
      }
    };
    idx.tensors["embedding"] = &model.embedding;
    for (std::size_t i = 0; i < model.encoder.size(); ++i) {
      const std::string base = "enc" + std::to_string(i);
      index_projection(base + ".wq", model.encoder[i].attn.wq);
      index_projection(base + ".wk", model.encoder[i].attn.wk);
      index_projection(base + ".wv", model.encoder[i].attn.wv);
      idx.tensors[base + ".ff"] = &model.encoder[i].w_ff;
    }
    for (std::size_t i = 0; i < model.decoder.size(); ++i) {
      const std::string base = "dec" + std::to_string(i);
      index_projection(base + ".self.wq", model.decoder[i].self_attn.wq);
      index_projection(base + ".self.wk", model.decoder[i].self_attn.wk);
      index_projection(base + ".self.wv", model.decoder[i].self_attn.wv);
      index_projection(base + ".cross.wq", model.decoder[i].cross_attn.wq);
      index_projection(base + ".cross.wk", model.decoder[i].cross_attn.wk);
      index_projection(base + ".cross.wv", model.decoder[i].cross_attn.wv);
      idx.tensors[base + ".ff"] = &model.decoder[i].w_ff;
    }
    idx.tensors["w_out"] = &model.w_out;
    return idx;
  }
};

void apply_tensor(const std::string& name, std::span<const std::uint8_t> payload, Tensor& t) {
  ByteReader r(payload);
  const std::uint8_t prec_code = r.u8();
  if (prec_code > 1) throw FormatError("bad precision code in section " + name);
  const Precision prec = prec_code == 0 ? Precision::f64 : Precision::f32;
  const std::uint8_t rg = r.u8();
  if (rg > 1) throw FormatError("bad gradient flag in section " + name);
  const std::uint64_t rows = r.u64();
  const std::uint64_t cols = r.u64();
  if (prec != t.precision() || rows != t.rows() || cols != t.cols()) {
    throw FormatError("section " + name + " does not match the configured model shape");
  }
  if ((rg == 1) != t.requires_grad()) {
    throw FormatError("section " + name + " disagrees about trainability");
  }
  auto data = t.data_mut();
  for (std::size_t k = 0; k < data.size(); ++k) {
    const double v = r.f64();
    // A value the tensor's precision cannot represent exactly (NaN
    // included) can only come from corruption; stored tensors always hold
    // representable finite values.
    if (!(round_to(prec, v) == v)) {
      throw IntegrityError("section " + name + " holds a value invalid at its precision");
    }
    data[k] = v;
  }
  if (!r.exhausted()) throw FormatError("trailing bytes in section " + name);
}

void apply_quantized(const std::string& name, std::span<const std::uint8_t> payload,
                     QloraLinear& layer) {
  QuantizedTensor loaded = deserialize_quantized(payload);
  if (loaded.rows != layer.w_q->rows || loaded.cols != layer.w_q->cols) {
    throw FormatError("section " + name + " does not match the configured base shape");
  }
  layer.w_q = std::make_shared<const QuantizedTensor>(std::move(loaded));
  layer.adapter.base_id = layer.w_q.get();
  if (layer.cache) layer.cache->reset();
}

void apply_budget_state(const std::string& name, std::span<const std::uint8_t> payload,
                        AdaLoraAdapter& adapter) {
  ByteReader r(payload);
  adapter.step = r.u64();
  const double gamma = r.f64();
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
    throw IntegrityError("section " + name + " holds an invalid penalty weight");
  }
  adapter.gamma = gamma;
  BudgetSchedule schedule;
  schedule.initial_budget = r.u64();
  schedule.final_budget = r.u64();
  schedule.total_steps = r.u64();
  schedule.warmup_steps = r.u64();
  try {
    schedule.validate();
  } catch (const ConfigError& e) {
    throw IntegrityError("section " + name + " holds an invalid schedule: " + e.what());
  }
  adapter.schedule = schedule;
  const std::uint64_t rank = r.u64();
  if (rank != adapter.mask.size()) {
    throw FormatError("section " + name + " does not match the configured rank");
  }
  for (std::size_t k = 0; k < rank; ++k) {
    const std::uint8_t flag = r.u8();
    if (flag > 1) throw FormatError("bad mask flag in section " + name);
    adapter.mask[k] = flag;
  }
  if (!r.exhausted()) throw FormatError("trailing bytes in section " + name);
}

}  // namespace

std::vector<std::uint8_t> save_checkpoint(const TransformerModel& model,
                                          const ExperimentConfig& config) {
  const ModelIndex index = ModelIndex::build(const_cast<TransformerModel&>(model));

  std::vector<Section> sections;
  walk_model(model, [&](SectionKind kind, const std::string& name) {
    Section s;
    s.kind = kind;
    s.name = name;
    switch (kind) {
      case SectionKind::tensor:
        s.payload = tensor_payload(*index.tensors.at(name));
        break;
      case SectionKind::quantized:
        s.payload = serialize(*index.quantized.at(name)->w_q);
        break;
      case SectionKind::budget_state:
        s.payload = budget_payload(*index.budgets.at(name));
        break;
    }
    sections.push_back(std::move(s));
  });

  ByteWriter w;
  w.str(std::string(kMagic, 4));
  w.u16(kVersion);
  w.u64(config.seed);
  const std::string config_json = config.to_json_string();
  w.u64(fnv1a(config_json));
  w.u32(static_cast<std::uint32_t>(config_json.size()));
  w.str(config_json);
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const Section& s : sections) {
    w.u8(static_cast<std::uint8_t>(s.kind));
    w.u32(static_cast<std::uint32_t>(s.name.size()));
    w.str(s.name);
    w.u64(s.payload.size());
    w.bytes(s.payload);
  }
  return w.take();
}

LoadedExperiment load_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4, "magic") != std::string(kMagic, 4)) {
    throw FormatError("not a checkpoint (bad magic)", 0);
  }
  const std::uint16_t version = r.u16();
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t seed = r.u64();
  const std::uint64_t stored_hash = r.u64();
  const std::uint32_t config_len = r.u32();
  const std::string config_json = r.str(config_len, "config");
  if (fnv1a(config_json) != stored_hash) {
    throw FormatError("embedded config does not match its hash");
  }
  ExperimentConfig config;
  try {
    config = ExperimentConfig::from_json_string(config_json);
    config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("embedded config is invalid: ") + e.what());
  }
  if (config.seed != seed) {
    throw FormatError("header seed disagrees with the embedded config");
  }

  const std::uint32_t section_count = r.u32();
  std::map<std::string, Section> sections;
  for (std::uint32_t i = 0; i < section_count; ++i) {
    Section s;
    const std::uint8_t kind = r.u8();
    if (kind > 2) throw FormatError("unknown section kind " + std::to_string(kind));
    s.kind = static_cast<SectionKind>(kind);
    const std::uint32_t name_len = r.u32();
    s.name = r.str(name_len, "section name");
    const std::uint64_t payload_len = r.u64();
    auto payload = r.bytes(payload_len, "section payload");
    s.payload.assign(payload.begin(), payload.end());
    if (!sections.emplace(s.name, std::move(s)).second) {
      throw FormatError("duplicate section '" + s.name + "'");
    }
  }
  if (!r.exhausted()) throw FormatError("trailing bytes after the last section");

  // Rebuild the skeleton exactly as run_experiment would, then overwrite
  // every stored value. Nothing escapes until the whole file has applied.
  Rng init_rng(Rng::derive(seed, "init"));
  TransformerModel model = TransformerModel::create(config.model, init_rng);
  if (config.mode != AdapterMode::none) {
    Rng attach_rng(Rng::derive(seed, "attach"));
    attach_adapters(model, config.adapter_spec(), attach_rng);
  }

  const ModelIndex index = ModelIndex::build(model);
  walk_model(model, [&](SectionKind kind, const std::string& name) {
    auto it = sections.find(name);
    if (it == sections.end()) throw FormatError("missing section '" + name + "'");
    const Section& s = it->second;
    if (s.kind != kind) throw FormatError("section '" + name + "' has the wrong kind");
    switch (kind) {
      case SectionKind::tensor:
        apply_tensor(name, s.payload, *index.tensors.at(name));
        break;
      case SectionKind::quantized:
        apply_quantized(name, s.payload, *index.quantized.at(name));
        break;
      case SectionKind::budget_state:
        apply_budget_state(name, s.payload, *index.budgets.at(name));
        break;
    }
    sections.erase(it);
  });
  if (!sections.empty()) {
    throw FormatError("unexpected section '" + sections.begin()->first + "'");
  }

  return {std::move(config), std::move(model)};
}

}  // namespace peftlab
