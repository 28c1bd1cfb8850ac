#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "satcap/adam.hpp"
#include "satcap/checkpoint.hpp"
#include "satcap/metrics.hpp"
#include "satcap/model.hpp"
#include "satcap/synth.hpp"

namespace satcap {

// [B, 3, S, S] from either the before or the after images of a batch.
template <class T>
Tensor<T> stack_images(const std::vector<const SamplePair*>& pairs, bool after) {
  if (pairs.empty()) throw EmptyInputError("stack_images: empty batch");
  const std::size_t s = pairs[0]->before.size;
  std::vector<T> v;
  v.reserve(pairs.size() * 3 * s * s);
  for (const auto* p : pairs) {
    const auto& img = after ? p->after : p->before;
    if (img.size != s) throw DimensionError("stack_images: mixed image sizes in batch");
    v.insert(v.end(), img.pixels.begin(), img.pixels.end());
  }
  return Tensor<T>::from({pairs.size(), 3, s, s}, std::move(v));
}

inline std::string normalize_caption(const std::string& s) { return join_tokens(tokenize(s)); }

inline bool matches_reference(const std::string& hypothesis, const std::vector<std::string>& references) {
  const auto h = normalize_caption(hypothesis);
  return std::any_of(references.begin(), references.end(), [&](const std::string& r) { return normalize_caption(r) == h; });
}

// Most frequent caption string over a split; ties go to the lexicographically
// smallest. The constant-output baseline for held-out scoring.
inline std::string most_frequent_caption(const Dataset& d, Split split) {
  std::map<std::string, std::size_t> counts;
  for (const auto* p : d.select(split))
    for (const auto& c : p->captions) ++counts[normalize_caption(c)];
  if (counts.empty()) throw EmptyInputError("most_frequent_caption: split " + to_string(split) + " is empty");
  return std::max_element(counts.begin(), counts.end(), [](const auto& a, const auto& b) { return a.second < b.second; })->first;
}

template <class T>
std::vector<std::string> caption_pairs(const SatCapModel<T>& model, const Vocabulary& vocab, const std::vector<const SamplePair*>& pairs,
                                       std::size_t batch = 32) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < pairs.size(); i += batch) {
    const std::vector<const SamplePair*> chunk(pairs.begin() + static_cast<std::ptrdiff_t>(i),
                                               pairs.begin() + static_cast<std::ptrdiff_t>(std::min(pairs.size(), i + batch)));
    for (const auto& c : model.greedy(stack_images<T>(chunk, false), stack_images<T>(chunk, true))) out.push_back(vocab.decode(c.ids));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRecord {
  EvalItem item;
  bool changed = false;
};

enum class Stratify { all, change_only, nochange_only, each };

inline Stratify parse_stratify(const std::string& s) {
  if (s == "all") return Stratify::all;
  if (s == "change_only") return Stratify::change_only;
  if (s == "nochange_only") return Stratify::nochange_only;
  if (s == "each") return Stratify::each;
  throw ConfigError("stratify: unknown value '" + s + "' (valid: all, change_only, nochange_only, each)");
}

struct StratumReport {
  std::string stratum;
  std::size_t pairs = 0;
  std::optional<MetricReport> report;  // empty stratum when absent

  nlohmann::json to_json() const {
    nlohmann::json j = report ? report->to_json() : nlohmann::json{{"pairs", 0}, {"empty", true}};
    j["stratum"] = stratum;
    return j;
  }
};

template <class T>
std::vector<EvalRecord> decode_split(const SatCapModel<T>& model, const Vocabulary& vocab, const Dataset& d, Split split) {
  const auto pairs = d.select(split);
  const auto hyps = caption_pairs(model, vocab, pairs);
  std::vector<EvalRecord> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) out.push_back({{pairs[i]->id, hyps[i], pairs[i]->captions}, pairs[i]->changed});
  return out;
}

inline std::vector<StratumReport> stratified_reports(const std::vector<EvalRecord>& records, Stratify stratify,
                                                     const CompositeWeights& w = {}) {
  auto build = [&](const std::string& name, auto keep) {
    EvalCorpus c;
    for (const auto& r : records)
      if (keep(r)) c.push_back(r.item);
    StratumReport s{name, c.size(), std::nullopt};
    if (!c.empty()) s.report = score(c, w);
    return s;
  };
  const auto all = [](const EvalRecord&) { return true; };
  const auto change = [](const EvalRecord& r) { return r.changed; };
  const auto same = [](const EvalRecord& r) { return !r.changed; };
  switch (stratify) {
    case Stratify::all: return {build("all", all)};
    case Stratify::change_only: return {build("change_only", change)};
    case Stratify::nochange_only: return {build("nochange_only", same)};
    case Stratify::each: return {build("nochange_only", same), build("change_only", change), build("all", all)};
  }
  return {};
}

inline EvalCorpus corpus_of(const std::vector<EvalRecord>& records) {
  EvalCorpus c;
  for (const auto& r : records) c.push_back(r.item);
  return c;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::string out_dir;  // last.satc / best.satc written here when set
  std::ostream* log = nullptr;
  std::size_t validate_every = 1;  // 0 disables validation
  std::size_t val_limit = 0;       // 0 means the whole val split
  // Stop once greedy decoding reproduces a reference caption on every
  // training pair, checked every memorize_check_every epochs.
  bool stop_when_memorized = false;
  std::size_t memorize_check_every = 10;
  double max_activation_gib = 16.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::optional<MetricReport> val;
  bool improved = false;
  std::optional<std::size_t> train_exact;
  double seconds = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"loss", loss}, {"best", improved}, {"seconds", seconds}};
    if (val) j["val"] = val->to_json();
    if (train_exact) j["train_exact"] = *train_exact;
    return j;
  }
};

// Rough upper bound on the bytes held by one training step's tape.
inline double activation_bytes(const ModelConfig& m, std::size_t batch, std::size_t dtype_size) {
  const double hw = static_cast<double>(m.encoder.feature_hw * m.encoder.feature_hw);
  const double c = static_cast<double>(m.encoder.model_dim);
  const double img = static_cast<double>(m.encoder.image_size * m.encoder.image_size);
  const double backbone = m.encoder.use_backbone ? img * static_cast<double>(m.encoder.backbone_channels) * 4.0 : 0.0;
  const double encoder = hw * (c * 40.0 + static_cast<double>(m.encoder.hidden()) * 6.0 + hw * static_cast<double>(m.encoder.heads) * 3.0) *
                         static_cast<double>(m.encoder.encoder_layers);
  const double t = static_cast<double>(m.decoder.max_len);
  const double decoder = t * (c * 30.0 + static_cast<double>(m.decoder.hidden()) * 3.0 + (t + hw) * static_cast<double>(m.decoder.heads) * 3.0) *
                             static_cast<double>(m.decoder.layers) +
                         t * static_cast<double>(m.vocab_size) * 3.0;
  return static_cast<double>(batch) * (2.0 * (backbone + encoder) + hw * c * 20.0 + decoder) * static_cast<double>(dtype_size);
}

template <class T>
class Trainer {
 public:
  // Fresh run; the vocabulary comes from the training captions.
  Trainer(const Dataset& data, ModelConfig model_cfg, TrainConfig train_cfg, TrainOptions opts)
      : data_(data), train_cfg_(std::move(train_cfg)), opts_(std::move(opts)), rng_(mix_seed(train_cfg_.seed, 0x7a1)) {
    train_cfg_.validate();
    std::vector<std::string> captions;
    for (const auto* p : data_.select(Split::train)) captions.insert(captions.end(), p->captions.begin(), p->captions.end());
    if (captions.empty()) throw EmptyInputError("train: the train split is empty");
    vocab_ = Vocabulary::build(captions);
    model_cfg.vocab_size = vocab_.size();
    preflight(model_cfg);
    model_ = std::make_unique<SatCapModel<T>>(model_cfg, train_cfg_.seed);
    adam_ = std::make_unique<Adam<T>>(model_->store().params(), AdamConfig::from(train_cfg_));
  }

  // Resume from a checkpoint written by a previous run; `epochs` extends the
  // stored epoch budget when given.
  Trainer(const Dataset& data, const Checkpoint<T>& ck, TrainOptions opts, std::optional<std::size_t> epochs = std::nullopt)
      : data_(data), train_cfg_(ck.train_config), opts_(std::move(opts)), vocab_(ck.vocab) {
    if (epochs) train_cfg_.epochs = *epochs;
    if (!ck.adam) throw LoadError("resume: checkpoint has no optimizer state");
    preflight(ck.model_config);
    model_ = std::make_unique<SatCapModel<T>>(build_model(ck));
    adam_ = std::make_unique<Adam<T>>(model_->store().params(), AdamConfig::from(train_cfg_));
    adam_->set_state(*ck.adam);
    rng_.set_state(ck.progress.rng_state);
    epoch_ = ck.progress.epoch;
    best_composite_ = ck.progress.best_composite;
    best_epoch_ = ck.progress.best_epoch;
  }

  const SatCapModel<T>& model() const { return *model_; }
  SatCapModel<T>& model() { return *model_; }
  const Vocabulary& vocab() const { return vocab_; }
  const TrainConfig& train_config() const { return train_cfg_; }
  std::size_t epoch() const { return epoch_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  double best_composite() const { return best_composite_; }
  std::size_t best_epoch() const { return best_epoch_; }
  bool memorized() const { return memorized_; }

  TrainProgress progress() const { return {epoch_, rng_.state(), best_composite_, best_epoch_}; }

  std::vector<ContainerEntry> checkpoint_entries() const {
    return satcap::checkpoint_entries(*model_, vocab_, train_cfg_, &adam_->state(), progress());
  }

  void save(const std::string& path) const { write_container(path, checkpoint_entries()); }

  // Runs epochs until the configured budget (or memorization) is reached.
  void run() {
    while (epoch_ < train_cfg_.epochs && !memorized_) run_epoch();
  }

  EpochRecord run_epoch() {
    const auto start = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.loss = train_epoch();
    rec.epoch = ++epoch_;
    if (opts_.validate_every > 0 && epoch_ % opts_.validate_every == 0) rec.val = validate();
    // Without a validation score every epoch counts as the newest best.
    if (!rec.val || rec.val->composite > best_composite_) {
      rec.improved = true;
      if (rec.val) best_composite_ = rec.val->composite;
      best_epoch_ = epoch_;
      snapshot_best();
    }
    if (opts_.stop_when_memorized && (epoch_ % opts_.memorize_check_every == 0 || epoch_ == train_cfg_.epochs)) {
      rec.train_exact = count_memorized();
      memorized_ = *rec.train_exact == data_.count(Split::train);
    }
    if (!opts_.out_dir.empty()) {
      std::filesystem::create_directories(opts_.out_dir);
      save((std::filesystem::path(opts_.out_dir) / "last.satc").string());
      if (rec.improved) save((std::filesystem::path(opts_.out_dir) / "best.satc").string());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (opts_.log) *opts_.log << rec.to_json().dump() << std::endl;
    history_.push_back(rec);
    return rec;
  }

  // One pass over the shuffled training split; returns the token-weighted
  // mean teacher-forced loss. Pair i of the split trains on caption
  // (epoch + i) mod count, so one epoch mixes every template slot.
  double train_epoch() {
    const auto train = data_.select(Split::train);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng_.shuffle(order.begin(), order.end());
    double total = 0.0;
    std::size_t tokens = 0;
    const double dropout = model_->config().decoder.dropout;
    for (std::size_t b = 0; b < order.size(); b += train_cfg_.batch_size) {
      std::vector<const SamplePair*> batch;
      std::vector<std::vector<int>> captions;
      for (std::size_t i = b; i < std::min(order.size(), b + train_cfg_.batch_size); ++i) {
        const auto* p = train[order[i]];
        batch.push_back(p);
        captions.push_back(vocab_.encode(p->captions[(epoch_ + order[i]) % p->captions.size()]));
      }
      const auto tb = TokenBatch::from(captions);
      model_->store().zero_grad();
      const auto loss = model_->loss(stack_images<T>(batch, false), stack_images<T>(batch, true), tb,
                                     ForwardContext::train(dropout, &rng_));
      backward(loss);
      clip_grad_norm(model_->store().params(), train_cfg_.clip_norm);
      adam_->step();
      const auto n = static_cast<std::size_t>(std::count_if(tb.targets.begin(), tb.targets.end(), [](int t) { return t != Vocabulary::kPad; }));
      total += static_cast<double>(loss.item()) * static_cast<double>(n);
      tokens += n;
    }
    return total / static_cast<double>(tokens);
  }

  std::optional<MetricReport> validate() const {
    auto val = data_.select(Split::val);
    if (val.empty()) return std::nullopt;
    if (opts_.val_limit > 0 && val.size() > opts_.val_limit) val.resize(opts_.val_limit);
    const auto hyps = caption_pairs(*model_, vocab_, val);
    EvalCorpus c;
    for (std::size_t i = 0; i < val.size(); ++i) c.push_back({val[i]->id, hyps[i], val[i]->captions});
    return score(c);
  }

  std::size_t count_memorized() const {
    const auto train = data_.select(Split::train);
    const auto hyps = caption_pairs(*model_, vocab_, train);
    std::size_t exact = 0;
    for (std::size_t i = 0; i < train.size(); ++i) exact += matches_reference(hyps[i], train[i]->captions);
    return exact;
  }

  // Puts the weights of the best-validated epoch back into the model.
  void restore_best() {
    if (best_params_.empty()) return;
    auto copy_in = [](const std::vector<std::vector<T>>& src, const std::vector<NamedTensor<T>>& dst) {
      for (std::size_t i = 0; i < dst.size(); ++i) {
        auto t = dst[i].tensor;
        std::copy(src[i].begin(), src[i].end(), t.mutable_data().begin());
      }
    };
    copy_in(best_params_, model_->store().params());
    copy_in(best_buffers_, model_->store().buffers());
  }

 private:
  void preflight(const ModelConfig& m) const {
    m.validate();
    std::size_t longest = 0;
    for (const auto* p : data_.select(Split::train))
      for (const auto& c : p->captions) longest = std::max(longest, tokenize(c).size());
    if (longest + 1 > m.decoder.max_len) {
      throw ConfigError("train: longest training caption needs " + std::to_string(longest + 1) + " steps, max_len is " +
                        std::to_string(m.decoder.max_len));
    }
    if (!m.encoder.use_backbone) throw ConfigError("train: use_backbone=false expects feature maps; the trainer reads images");
    if (data_.image_size != m.encoder.image_size) {
      throw ConfigError("train: dataset images are " + std::to_string(data_.image_size) + "px, model expects " +
                        std::to_string(m.encoder.image_size));
    }
    const double gib = activation_bytes(m, train_cfg_.batch_size, sizeof(T)) / (1024.0 * 1024.0 * 1024.0);
    if (gib > opts_.max_activation_gib) {
      std::ostringstream os;
      os << "train: estimated " << gib << " GiB of activations per step exceeds the " << opts_.max_activation_gib
         << " GiB limit; lower batch_size or model size";
      throw ConfigError(os.str());
    }
  }

  void snapshot_best() {
    auto copy_out = [](const std::vector<NamedTensor<T>>& src) {
      std::vector<std::vector<T>> out;
      for (const auto& p : src) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
      return out;
    };
    best_params_ = copy_out(model_->store().params());
    best_buffers_ = copy_out(model_->store().buffers());
  }

  const Dataset& data_;
  TrainConfig train_cfg_;
  TrainOptions opts_;
  Vocabulary vocab_;
  Rng rng_;
  std::unique_ptr<SatCapModel<T>> model_;
  std::unique_ptr<Adam<T>> adam_;
  std::size_t epoch_ = 0;
  double best_composite_ = -1.0;
  std::size_t best_epoch_ = 0;
  bool memorized_ = false;
  std::vector<EpochRecord> history_;
  std::vector<std::vector<T>> best_params_, best_buffers_;
};

// ---------------------------------------------------------------------------
// Ablation sweeps

struct AblationVariant {
  std::string label;
  ModelConfig config;
};

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"cosine_axis", "fusion_method", "depth", "local_enhance", "ordering", "layernorm_sharing"};
  return axes;
}

inline std::vector<AblationVariant> ablation_variants(const std::string& axis, const ModelConfig& base) {
  std::vector<AblationVariant> out;
  auto add = [&](std::string label, auto edit) {
    ModelConfig c = base;
    edit(c);
    out.push_back({std::move(label), c});
  };
  if (axis == "cosine_axis") {
    const std::vector<std::pair<std::string, CosineAxis>> rows{
        {"none", CosineAxis::none},
        {"height", CosineAxis::height},
        {"width", CosineAxis::width},
        {"height_x_width", CosineAxis::height_x_width},
        {"height_and_width", CosineAxis::height_and_width},
        {"channel", CosineAxis::channel},
        {"channel_hw", CosineAxis::channel_hw},
        {"channel_h_w", CosineAxis::channel_h_w},
    };
    for (const auto& [label, a] : rows) add(label, [a = a](ModelConfig& c) { c.fusion.cosine_axis = a; });
  } else if (axis == "fusion_method") {
    for (auto m : {FusionMethod::sub, FusionMethod::sum, FusionMethod::product, FusionMethod::concat}) {
      add(to_string(m), [m](ModelConfig& c) { c.fusion.method = m; });
    }
  } else if (axis == "depth") {
    const std::vector<std::pair<std::size_t, std::size_t>> rows{{1, 1}, {2, 1}, {3, 1}, {3, 2}, {3, 3}};
    for (const auto& [e, d] : rows) {
      add("E" + std::to_string(e) + "_D" + std::to_string(d), [e = e, d = d](ModelConfig& c) {
        c.encoder.encoder_layers = e;
        c.decoder.layers = d;
      });
    }
  } else if (axis == "local_enhance") {
    for (auto l : {LocalEnhance::conv1x1, LocalEnhance::conv3x3, LocalEnhance::dwconv}) {
      add(to_string(l), [l](ModelConfig& c) { c.encoder.cam_local_enhance = l; });
    }
  } else if (axis == "ordering") {
    const std::vector<std::pair<std::string, Ordering>> rows{
        {"sam_only", Ordering::sam_only},         {"cam_only", Ordering::cam_only}, {"sam_then_cam", Ordering::sam_then_cam},
        {"cam_then_sam", Ordering::cam_then_sam}, {"parallel", Ordering::parallel},
    };
    for (const auto& [label, o] : rows) add(label, [o = o](ModelConfig& c) { c.encoder.ordering = o; });
  } else if (axis == "layernorm_sharing") {
    for (auto o : {Ordering::cam_then_sam, Ordering::sam_then_cam}) {
      for (bool shared : {false, true}) {
        add(to_string(o) + (shared ? "_shared" : "_separate"), [o, shared](ModelConfig& c) {
          c.encoder.ordering = o;
          c.encoder.share_layernorm = shared;
        });
      }
    }
  } else {
    std::string valid;
    for (const auto& a : ablation_axes()) valid += (valid.empty() ? "" : ", ") + a;
    throw ConfigError("ablate: unknown axis '" + axis + "' (valid: " + valid + ")");
  }
  return out;
}

struct AblationRow {
  std::string label;
  ModelConfig config;
  MetricReport report;
  std::size_t parameters = 0;
  std::size_t best_epoch = 0;
};

// Trains every variant with the same seed, keeps its best-validated weights
// and scores them on the test split.
template <class T>
std::vector<AblationRow> ablate(const Dataset& data, const std::string& axis, const ModelConfig& base, const TrainConfig& train,
                                TrainOptions opts) {
  std::vector<AblationRow> rows;
  const std::string root = opts.out_dir;
  for (const auto& v : ablation_variants(axis, base)) {
    if (!root.empty()) opts.out_dir = (std::filesystem::path(root) / v.label).string();
    Trainer<T> trainer(data, v.config, train, opts);
    trainer.run();
    trainer.restore_best();
    const auto records = decode_split(trainer.model(), trainer.vocab(), data, Split::test);
    if (records.empty()) throw EmptyInputError("ablate: the test split is empty");
    rows.push_back({v.label, trainer.model().config(), score(corpus_of(records)), trainer.model().store().parameter_count(),
                    trainer.best_epoch()});
  }
  return rows;
}

inline std::string ablation_markdown(const std::string& axis, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "| " << axis << " | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | ROUGE-L | CIDEr-D | composite | params |\n";
  os << "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    os << "| " << r.label;
    for (double b : r.report.bleu) os << " | " << b * 100;
    os << " | " << r.report.rouge_l * 100 << " | " << r.report.cider_d * 100 << " | " << r.report.composite * 100 << " | "
       << r.parameters << " |\n";
  }
  return os.str();
}

inline std::string ablation_csv(const std::string& axis, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << axis << ",bleu1,bleu2,bleu3,bleu4,rouge_l,cider_d,composite,params,best_epoch\n";
  for (const auto& r : rows) {
    os << r.label;
    for (double b : r.report.bleu) os << ',' << b * 100;
    os << ',' << r.report.rouge_l * 100 << ',' << r.report.cider_d * 100 << ',' << r.report.composite * 100 << ',' << r.parameters
       << ',' << r.best_epoch << '\n';
  }
  return os.str();
}

}  // namespace satcap
