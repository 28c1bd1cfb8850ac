#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "satcap/checkpoint.hpp"
#include "satcap/grad_suite.hpp"
#include "satcap/metrics.hpp"
#include "satcap/synth.hpp"
#include "satcap/trainer.hpp"

using namespace satcap;
namespace fs = std::filesystem;

namespace {

struct GenDataArgs {
  SynthConfig cfg;
  std::string out;
};

struct TrainArgs {
  std::string data, config, out, resume;
  std::vector<std::string> overrides;
  std::optional<std::size_t> epochs;
  bool stop_when_memorized = false;
};

struct EvalArgs {
  std::string ckpt, data, split = "test", stratify = "each", dump;
};

struct CaptionArgs {
  std::string ckpt, before, after, export_attention;
  bool features = false;
  std::size_t beam = 0;
};

struct AblateArgs {
  std::string axis, data, config, out;
  std::vector<std::string> overrides;
};

void load_configs(const std::string& path, const std::vector<std::string>& overrides, ModelConfig& model, TrainConfig& train) {
  KeyValues kv;
  if (!path.empty()) kv = read_key_values(path);
  for (const auto& o : overrides) {
    for (const auto& [k, v] : parse_key_values(o)) kv[k] = v;
  }
  const auto unknown = apply(model, train, kv);
  if (!unknown.empty()) {
    std::string keys;
    for (const auto& k : unknown) keys += (keys.empty() ? "" : ", ") + k;
    throw ConfigError("config: unknown keys: " + keys);
  }
}

int gen_data(const GenDataArgs& a) {
  const auto d = generate(a.cfg);
  write_dataset(a.out, d);
  std::cerr << "wrote " << d.pairs.size() << " pairs to " << a.out << " (" << split_summary(d) << ")\n";
  return 0;
}

template <class T>
int train_as(const TrainArgs& a, const Dataset& data, const ModelConfig& model, const TrainConfig& train) {
  TrainOptions opts;
  opts.out_dir = a.out;
  opts.log = &std::cout;
  opts.stop_when_memorized = a.stop_when_memorized;
  std::optional<Trainer<T>> trainer;
  if (a.resume.empty()) {
    trainer.emplace(data, model, train, opts);
  } else {
    trainer.emplace(data, load_checkpoint<T>(a.resume), opts, a.epochs);
  }
  trainer->run();
  std::cerr << "epochs " << trainer->epoch() << ", best val composite " << trainer->best_composite() * 100 << " at epoch "
            << trainer->best_epoch() << "; checkpoints in " << a.out << "\n";
  return 0;
}

int train(const TrainArgs& a) {
  const auto data = load_manifest(a.data);
  ModelConfig model;
  TrainConfig train;
  std::string dtype;
  if (a.resume.empty()) {
    load_configs(a.config, a.overrides, model, train);
    if (a.epochs) train.epochs = *a.epochs;
    dtype = train.dtype;
  } else {
    if (!a.config.empty() || !a.overrides.empty()) throw ConfigError("train: --resume takes its configuration from the checkpoint");
    dtype = checkpoint_dtype(a.resume);
  }
  return dtype == "f64" ? train_as<double>(a, data, model, train) : train_as<float>(a, data, model, train);
}

template <class T>
int eval_as(const EvalArgs& a) {
  const auto ck = load_checkpoint<T>(a.ckpt);
  const auto model = build_model(ck);
  const auto data = load_manifest(a.data);
  const auto records = decode_split(model, ck.vocab, data, parse_split(a.split));
  if (!a.dump.empty()) {
    std::ofstream out(a.dump);
    if (!out) throw LoadError(a.dump + ": cannot open for writing");
    write_jsonl(out, corpus_of(records));
  }
  nlohmann::json reports = nlohmann::json::array();
  for (const auto& r : stratified_reports(records, parse_stratify(a.stratify))) reports.push_back(r.to_json());
  std::cout << reports.dump(2) << "\n";
  return 0;
}

int eval(const EvalArgs& a) { return checkpoint_dtype(a.ckpt) == "f64" ? eval_as<double>(a) : eval_as<float>(a); }

// A feature file holds one [C_o, H, W] tensor.
template <class T>
Tensor<T> read_features(const std::string& path) {
  const auto entries = read_container(path);
  if (entries.size() != 1 || entries[0].shape.size() != 3) throw LoadError(path + ": expected one [C,H,W] tensor entry");
  auto shape = entries[0].shape;
  shape.insert(shape.begin(), 1);
  return Tensor<T>::from(shape, entry_values<T>(entries[0]));
}

template <class T>
Tensor<T> read_input(const std::string& path, bool features) {
  if (features) return read_features<T>(path);
  const auto img = read_image(path);
  return Tensor<T>::from({1, 3, img.size, img.size}, std::vector<T>(img.pixels.begin(), img.pixels.end()));
}

template <class T>
int caption_as(const CaptionArgs& a) {
  const auto ck = load_checkpoint<T>(a.ckpt);
  if (a.features == ck.model_config.encoder.use_backbone) {
    throw ConfigError(a.features ? "caption: checkpoint expects images, not --features-from inputs"
                                 : "caption: checkpoint expects precomputed features; pass --features-from");
  }
  const auto model = build_model(ck);
  const auto before = read_input<T>(a.before, a.features);
  const auto after = read_input<T>(a.after, a.features);
  const auto cap = a.beam > 0 ? model.beam(before, after, a.beam) : model.greedy(before, after).at(0);
  std::cout << ck.vocab.decode(cap.ids) << "\n";
  if (!a.export_attention.empty()) {
    std::vector<std::uint64_t> ids(cap.ids.begin(), cap.ids.end());
    const auto hw = ck.model_config.encoder.feature_hw;
    const std::vector<std::uint64_t> grid{hw, hw};
    write_container(a.export_attention, {make_entry("tokens", std::span<const std::uint64_t>(ids)),
                                         make_entry("feature_grid", std::span<const std::uint64_t>(grid)),
                                         make_entry("attention", cap.attention.shape(), cap.attention.data()),
                                         make_entry("attention_mean", cap.attention_mean.shape(), cap.attention_mean.data())});
  }
  return 0;
}

int caption(const CaptionArgs& a) { return checkpoint_dtype(a.ckpt) == "f64" ? caption_as<double>(a) : caption_as<float>(a); }

int grad_check_cmd(bool full_model) {
  bool ok = true;
  auto report = [&](const GradCase& c) {
    const bool pass = c.report.passed();
    ok = ok && pass;
    std::cout << (pass ? "ok   " : "FAIL ") << c.name << " seed " << c.seed << ": max rel err " << c.report.max_rel_error << " (tol "
              << c.report.tol << ", " << c.report.checked << " entries";
    if (!pass) std::cout << ", worst " << c.report.worst_tensor << "[" << c.report.worst_index << "]";
    std::cout << ")\n";
  };
  for (auto seed : grad_suite_seeds()) {
    for (const auto& c : layer_grad_suite(seed)) report(c);
    if (full_model)
      for (const auto& c : model_grad_suite(seed)) report(c);
  }
  return ok ? 0 : 1;
}

template <class T>
int ablate_as(const AblateArgs& a, const Dataset& data, const ModelConfig& model, const TrainConfig& train) {
  TrainOptions opts;
  opts.out_dir = a.out;
  opts.log = &std::cout;
  const auto rows = ablate<T>(data, a.axis, model, train, opts);
  const auto md = ablation_markdown(a.axis, rows);
  fs::create_directories(a.out);
  std::ofstream(fs::path(a.out) / (a.axis + ".md")) << md;
  std::ofstream(fs::path(a.out) / (a.axis + ".csv")) << ablation_csv(a.axis, rows);
  std::cerr << md;
  return 0;
}

int ablate_cmd(const AblateArgs& a) {
  ablation_variants(a.axis, ModelConfig{});  // rejects an unknown axis before any data is read
  const auto data = load_manifest(a.data);
  ModelConfig model;
  TrainConfig train;
  load_configs(a.config, a.overrides, model, train);
  return train.dtype == "f64" ? ablate_as<double>(a, data, model, train) : ablate_as<float>(a, data, model, train);
}

int score_cmd(const std::string& path) {
  std::cout << score(read_jsonl(path)).to_json().dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Change captioning for bi-temporal image pairs"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic bi-temporal dataset");
  gen_cmd->add_option("--seed", gen.cfg.seed, "Generator seed");
  gen_cmd->add_option("--pairs", gen.cfg.pairs, "Number of image pairs");
  gen_cmd->add_option("--size", gen.cfg.image_size, "Image side length in pixels");
  gen_cmd->add_option("--p-change", gen.cfg.p_change, "Probability that a pair contains a change");
  gen_cmd->add_option("--noise", gen.cfg.noise, "Pixel noise amplitude");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model; prints one JSON object per epoch");
  train_cmd->add_option("--data", tr.data, "Dataset directory or manifest.json")->required();
  train_cmd->add_option("--config", tr.config, "key=value configuration file");
  train_cmd->add_option("--set", tr.overrides, "Extra key=value settings, applied after --config");
  train_cmd->add_option("--out", tr.out, "Checkpoint directory")->required();
  train_cmd->add_option("--resume", tr.resume, "Continue from this checkpoint");
  train_cmd->add_option("--epochs", tr.epochs, "Epoch budget (overrides config and checkpoint)");
  train_cmd->add_flag("--stop-when-memorized", tr.stop_when_memorized, "Stop once every training pair decodes to a reference");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score greedy captions on a split");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory or manifest.json")->required();
  eval_cmd->add_option("--split", ev.split, "train, val or test");
  eval_cmd->add_option("--stratify", ev.stratify, "all, change_only, nochange_only or each");
  eval_cmd->add_option("--dump", ev.dump, "Write hypotheses and references as JSON lines");

  CaptionArgs cap;
  auto* caption_cmd = app.add_subcommand("caption", "Caption one image pair");
  caption_cmd->add_option("--ckpt", cap.ckpt, "Checkpoint file")->required();
  caption_cmd->add_option("--before", cap.before, "Before image (PPM or tensor container)")->required();
  caption_cmd->add_option("--after", cap.after, "After image (PPM or tensor container)")->required();
  caption_cmd->add_option("--export-attention", cap.export_attention, "Write decoder cross-attention to this container file");
  caption_cmd->add_flag("--features-from", cap.features, "Inputs are precomputed [C,H,W] feature containers");
  caption_cmd->add_option("--beam", cap.beam, "Beam width; 0 decodes greedily");

  bool full_model = false;
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference gradient checks at f64");
  grad_cmd->add_flag("--full-model", full_model, "Also check the assembled model");

  AblateArgs ab;
  auto* ablate_sub = app.add_subcommand("ablate", "Train every variant of one ablation axis and tabulate test scores");
  ablate_sub->add_option("--axis", ab.axis, "cosine_axis, fusion_method, depth, local_enhance, ordering or layernorm_sharing")->required();
  ablate_sub->add_option("--data", ab.data, "Dataset directory or manifest.json")->required();
  ablate_sub->add_option("--config", ab.config, "key=value base configuration");
  ablate_sub->add_option("--set", ab.overrides, "Extra key=value settings");
  ablate_sub->add_option("--out", ab.out, "Output directory for tables and checkpoints")->required();

  std::string hyp_refs;
  auto* score_sub = app.add_subcommand("score", "Score a JSON-lines file of hypotheses and references");
  score_sub->add_option("--hyp-refs", hyp_refs, "JSON lines with id, hypothesis, references")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return gen_data(gen);
    if (*train_cmd) return train(tr);
    if (*eval_cmd) return eval(ev);
    if (*caption_cmd) return caption(cap);
    if (*grad_cmd) return grad_check_cmd(full_model);
    if (*ablate_sub) return ablate_cmd(ab);
    if (*score_sub) return score_cmd(hyp_refs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
