#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "satcap/adam.hpp"
#include "satcap/config.hpp"
#include "satcap/container.hpp"
#include "satcap/model.hpp"
#include "satcap/vocab.hpp"

namespace satcap {

// Where a training run stands; stored next to the weights so a resumed run
// continues exactly.
struct TrainProgress {
  std::uint64_t epoch = 0;  // completed epochs
  std::string rng_state;
  double best_composite = -1.0;
  std::uint64_t best_epoch = 0;
};

template <class T>
struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  Vocabulary vocab;
  std::vector<ContainerEntry> params;   // name = parameter name
  std::vector<ContainerEntry> buffers;  // name = buffer name
  std::optional<AdamState<T>> adam;
  TrainProgress progress;
};

namespace checkpoint_detail {

inline constexpr std::uint64_t kFormat = 1;

template <class T>
constexpr const char* dtype_name() {
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <class T>
ContainerEntry tensor_entry(const std::string& name, const Tensor<T>& t) {
  return make_entry(name, t.shape(), t.data());
}

template <class T>
ContainerEntry vector_entry(const std::string& name, const std::vector<T>& v) {
  return make_entry(name, {v.size()}, std::span<const T>(v));
}

inline const ContainerEntry& require(const std::map<std::string, const ContainerEntry*>& index, const std::string& name) {
  const auto it = index.find(name);
  if (it == index.end()) throw LoadError("checkpoint: missing entry '" + name + "'");
  return *it->second;
}

inline std::uint64_t scalar_u64(const ContainerEntry& e) {
  if (e.dtype != DType::u64 || e.numel() != 1) throw LoadError("checkpoint: '" + e.name + "' must be one u64");
  return entry_values<std::uint64_t>(e)[0];
}

}  // namespace checkpoint_detail

template <class T>
std::vector<ContainerEntry> checkpoint_entries(const SatCapModel<T>& model, const Vocabulary& vocab, const TrainConfig& train,
                                               const std::type_identity_t<AdamState<T>>* adam, const TrainProgress& progress) {
  using namespace checkpoint_detail;
  std::vector<ContainerEntry> out;
  const std::vector<std::uint64_t> format{kFormat}, epoch{progress.epoch}, best_epoch{progress.best_epoch};
  const std::vector<double> best{progress.best_composite};
  out.push_back(make_entry("meta.format", std::span<const std::uint64_t>(format)));
  out.push_back(make_text_entry("meta.dtype", dtype_name<T>()));
  out.push_back(make_text_entry("meta.model_config", format_key_values(to_key_values(model.config()))));
  out.push_back(make_text_entry("meta.train_config", format_key_values(to_key_values(train))));
  out.push_back(make_text_entry("meta.vocab", vocab.serialize()));
  out.push_back(make_entry("meta.epoch", std::span<const std::uint64_t>(epoch)));
  out.push_back(make_text_entry("meta.rng", progress.rng_state));
  out.push_back(make_entry("meta.best_composite", {1}, std::span<const double>(best)));
  out.push_back(make_entry("meta.best_epoch", std::span<const std::uint64_t>(best_epoch)));
  for (const auto& p : model.store().params()) out.push_back(tensor_entry("param." + p.name, p.tensor));
  for (const auto& b : model.store().buffers()) out.push_back(tensor_entry("buffer." + b.name, b.tensor));
  if (adam) {
    const std::vector<std::uint64_t> step{adam->step};
    out.push_back(make_entry("adam.step", std::span<const std::uint64_t>(step)));
    const auto& params = model.store().params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.push_back(vector_entry("adam.m." + params[i].name, adam->m[i]));
      out.push_back(vector_entry("adam.v." + params[i].name, adam->v[i]));
    }
  }
  return out;
}

template <class T>
void save_checkpoint(const std::string& path, const SatCapModel<T>& model, const Vocabulary& vocab, const TrainConfig& train,
                     const std::type_identity_t<AdamState<T>>* adam, const TrainProgress& progress) {
  write_container(path, checkpoint_entries(model, vocab, train, adam, progress));
}

inline std::string checkpoint_dtype(const std::vector<ContainerEntry>& entries) {
  const auto index = index_entries(entries);
  return entry_text(checkpoint_detail::require(index, "meta.dtype"));
}

inline std::string checkpoint_dtype(const std::string& path) { return checkpoint_dtype(read_container(path)); }

// Parses the container; shapes are validated when applied to a model.
template <class T>
Checkpoint<T> parse_checkpoint(const std::vector<ContainerEntry>& entries) {
  using namespace checkpoint_detail;
  const auto index = index_entries(entries);
  if (scalar_u64(require(index, "meta.format")) != kFormat) throw LoadError("checkpoint: unsupported format version");
  Checkpoint<T> ck;
  const auto unknown = apply(ck.model_config, ck.train_config, parse_key_values(entry_text(require(index, "meta.model_config"))));
  const auto unknown_train = apply(ck.model_config, ck.train_config, parse_key_values(entry_text(require(index, "meta.train_config"))));
  if (!unknown.empty() || !unknown_train.empty()) throw LoadError("checkpoint: unknown config key in metadata");
  ck.vocab = Vocabulary::parse(entry_text(require(index, "meta.vocab")));
  if (ck.vocab.size() != ck.model_config.vocab_size) {
    throw ShapeConflictError("checkpoint: vocabulary has " + std::to_string(ck.vocab.size()) + " tokens, config says " +
                             std::to_string(ck.model_config.vocab_size));
  }
  ck.progress.epoch = scalar_u64(require(index, "meta.epoch"));
  ck.progress.rng_state = entry_text(require(index, "meta.rng"));
  ck.progress.best_composite = entry_values<double>(require(index, "meta.best_composite")).at(0);
  ck.progress.best_epoch = scalar_u64(require(index, "meta.best_epoch"));
  for (const auto& e : entries) {
    if (e.name.starts_with("param.")) ck.params.push_back(e), ck.params.back().name = e.name.substr(6);
    else if (e.name.starts_with("buffer.")) ck.buffers.push_back(e), ck.buffers.back().name = e.name.substr(7);
  }
  if (index.count("adam.step")) {
    AdamState<T> s;
    s.step = scalar_u64(*index.at("adam.step"));
    for (const auto& p : ck.params) {
      s.m.push_back(entry_values<T>(require(index, "adam.m." + p.name)));
      s.v.push_back(entry_values<T>(require(index, "adam.v." + p.name)));
    }
    ck.adam = std::move(s);
  }
  return ck;
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  return parse_checkpoint<T>(read_container(path));
}

// Copies stored weights into a model built from the same config. Every
// parameter and buffer must be present with exactly the model's shape.
template <class T>
void apply_weights(const Checkpoint<T>& ck, SatCapModel<T>& model) {
  auto fill = [](const std::vector<ContainerEntry>& stored, const std::vector<NamedTensor<T>>& targets, const char* what) {
    std::map<std::string, const ContainerEntry*> by_name;
    for (const auto& e : stored) by_name[e.name] = &e;
    if (stored.size() != targets.size()) {
      throw ShapeConflictError(std::string("checkpoint: ") + std::to_string(stored.size()) + " " + what + " entries, model has " +
                               std::to_string(targets.size()));
    }
    for (auto t : targets) {
      const auto it = by_name.find(t.name);
      if (it == by_name.end()) throw LoadError(std::string("checkpoint: missing ") + what + " '" + t.name + "'");
      if (it->second->shape != t.tensor.shape()) {
        throw ShapeConflictError("checkpoint: '" + t.name + "' stored as " + shape_str(it->second->shape) + ", model expects " +
                                 shape_str(t.tensor.shape()));
      }
      const auto values = entry_values<T>(*it->second);
      std::copy(values.begin(), values.end(), t.tensor.mutable_data().begin());
    }
  };
  fill(ck.params, model.store().params(), "parameter");
  fill(ck.buffers, model.store().buffers(), "buffer");
}

template <class T>
SatCapModel<T> build_model(const Checkpoint<T>& ck) {
  SatCapModel<T> model(ck.model_config, 0);
  apply_weights(ck, model);
  return model;
}

}  // namespace satcap
