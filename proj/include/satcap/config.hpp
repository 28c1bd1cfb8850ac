#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "satcap/errors.hpp"

namespace satcap {

enum class Ordering { sam_then_cam, cam_then_sam, parallel, sam_only, cam_only };
enum class LocalEnhance { dwconv, conv1x1, conv3x3, none };
enum class FfnVariant { gated, standard };
enum class FusionMethod { concat, sub, sum, product };
enum class CosineAxis { channel, height, width, height_x_width, height_and_width, channel_hw, channel_h_w, none };

namespace detail {

template <class E, std::size_t N>
std::string enum_name(E v, const std::array<std::pair<E, std::string_view>, N>& table) {
  for (const auto& [e, s] : table) {
    if (e == v) return std::string(s);
  }
  return "?";
}

template <class E, std::size_t N>
E enum_parse(std::string_view key, std::string_view text, const std::array<std::pair<E, std::string_view>, N>& table) {
  std::string valid;
  for (const auto& [e, s] : table) {
    if (s == text) return e;
    valid += valid.empty() ? "" : ", ";
    valid += s;
  }
  throw ConfigError(std::string(key) + ": unknown value '" + std::string(text) + "' (valid: " + valid + ")");
}

inline constexpr std::array<std::pair<Ordering, std::string_view>, 5> kOrderings{{
    {Ordering::sam_then_cam, "sam_then_cam"},
    {Ordering::cam_then_sam, "cam_then_sam"},
    {Ordering::parallel, "parallel"},
    {Ordering::sam_only, "sam_only"},
    {Ordering::cam_only, "cam_only"},
}};
inline constexpr std::array<std::pair<LocalEnhance, std::string_view>, 4> kLocalEnhance{{
    {LocalEnhance::dwconv, "dwconv"},
    {LocalEnhance::conv1x1, "conv1x1"},
    {LocalEnhance::conv3x3, "conv3x3"},
    {LocalEnhance::none, "none"},
}};
inline constexpr std::array<std::pair<FfnVariant, std::string_view>, 2> kFfn{{
    {FfnVariant::gated, "gated"},
    {FfnVariant::standard, "standard"},
}};
inline constexpr std::array<std::pair<FusionMethod, std::string_view>, 4> kFusion{{
    {FusionMethod::concat, "concat"},
    {FusionMethod::sub, "sub"},
    {FusionMethod::sum, "sum"},
    {FusionMethod::product, "product"},
}};
inline constexpr std::array<std::pair<CosineAxis, std::string_view>, 8> kCosine{{
    {CosineAxis::channel, "channel"},
    {CosineAxis::height, "height"},
    {CosineAxis::width, "width"},
    {CosineAxis::height_x_width, "height_x_width"},
    {CosineAxis::height_and_width, "height_and_width"},
    {CosineAxis::channel_hw, "channel_hw"},
    {CosineAxis::channel_h_w, "channel_h_w"},
    {CosineAxis::none, "none"},
}};

}  // namespace detail

inline std::string to_string(Ordering v) { return detail::enum_name(v, detail::kOrderings); }
inline std::string to_string(LocalEnhance v) { return detail::enum_name(v, detail::kLocalEnhance); }
inline std::string to_string(FfnVariant v) { return detail::enum_name(v, detail::kFfn); }
inline std::string to_string(FusionMethod v) { return detail::enum_name(v, detail::kFusion); }
inline std::string to_string(CosineAxis v) { return detail::enum_name(v, detail::kCosine); }

inline Ordering parse_ordering(std::string_view s) { return detail::enum_parse("ordering", s, detail::kOrderings); }
inline LocalEnhance parse_local_enhance(std::string_view s) {
  return detail::enum_parse("cam_local_enhance", s, detail::kLocalEnhance);
}
inline FfnVariant parse_ffn_variant(std::string_view s) { return detail::enum_parse("ffn_variant", s, detail::kFfn); }
inline FusionMethod parse_fusion_method(std::string_view s) { return detail::enum_parse("fusion_method", s, detail::kFusion); }
inline CosineAxis parse_cosine_axis(std::string_view s) { return detail::enum_parse("cosine_axis", s, detail::kCosine); }

struct EncoderConfig {
  std::size_t image_channels = 3;
  std::size_t image_size = 32;
  std::size_t backbone_channels = 128;  // C_o
  std::size_t feature_hw = 8;
  std::size_t model_dim = 64;  // C
  std::size_t heads = 4;
  std::size_t encoder_layers = 3;
  Ordering ordering = Ordering::sam_then_cam;
  bool share_layernorm = true;
  LocalEnhance cam_local_enhance = LocalEnhance::dwconv;
  FfnVariant ffn_variant = FfnVariant::gated;
  std::size_t ffn_hidden = 0;  // 0 means 4 * model_dim
  // When false the model ingests precomputed [C_o, H, W] features.
  bool use_backbone = true;

  std::size_t hidden() const { return ffn_hidden ? ffn_hidden : 4 * model_dim; }

  // Number of stride-2 backbone stages needed to reach feature_hw.
  std::size_t backbone_downsamples() const {
    std::size_t s = 0;
    for (std::size_t size = image_size; size > feature_hw; size /= 2) ++s;
    return s;
  }

  void validate() const {
    if (model_dim == 0 || heads == 0 || model_dim % heads != 0) {
      throw ConfigError("encoder: model_dim " + std::to_string(model_dim) + " must be divisible by heads " +
                        std::to_string(heads));
    }
    if (feature_hw == 0 || backbone_channels == 0) throw ConfigError("encoder: feature_hw and backbone_channels must be positive");
    if (ffn_variant == FfnVariant::gated && hidden() % 2 != 0) {
      throw ConfigError("encoder: gated ConvFFN needs an even hidden width, got " + std::to_string(hidden()));
    }
    if (use_backbone) {
      const std::size_t ds = backbone_downsamples();
      if (image_size == 0 || (feature_hw << ds) != image_size || ds > 4) {
        throw ConfigError("encoder: image_size " + std::to_string(image_size) + " must be feature_hw * 2^k with k <= 4");
      }
      if (backbone_channels % 8 != 0) throw ConfigError("encoder: backbone_channels must be a multiple of 8");
    }
  }
};

struct FusionConfig {
  FusionMethod method = FusionMethod::concat;
  CosineAxis cosine_axis = CosineAxis::channel;
  double eps = 1e-8;
};

struct DecoderConfig {
  std::size_t layers = 1;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 0;  // 0 means 4 * model_dim
  std::size_t max_len = 40;
  double dropout = 0.1;

  std::size_t hidden() const { return ffn_hidden ? ffn_hidden : 4 * model_dim; }

  void validate() const {
    if (layers < 1) throw ConfigError("decoder: layers must be >= 1");
    if (max_len < 2) throw ConfigError("decoder: max_len must be >= 2");
    if (heads == 0 || model_dim % heads != 0) throw ConfigError("decoder: model_dim must be divisible by heads");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("decoder: dropout must lie in [0, 1)");
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  FusionConfig fusion;
  DecoderConfig decoder;
  std::size_t vocab_size = 0;

  void validate() const {
    encoder.validate();
    decoder.validate();
    if (decoder.model_dim != encoder.model_dim) throw ConfigError("model: encoder and decoder model_dim differ");
    if (vocab_size < 5) throw ConfigError("model: vocabulary must contain at least one non-reserved token");
  }
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double clip_norm = 5.0;  // <= 0 disables clipping
  std::string dtype = "f32";

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (dtype != "f32" && dtype != "f64") throw ConfigError("train: dtype must be f32 or f64");
  }
};

// ---------------------------------------------------------------------------
// Flat key=value text. Keys are the field names above; model_dim and heads
// set encoder and decoder together, the decoder_* keys target the decoder.

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline KeyValues parse_key_values(const std::string& text) {
  std::istringstream is(text);
  return parse_key_values(is);
}

inline KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  return parse_key_values(in);
}

namespace detail {

inline std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

// Applies recognized keys; returns the keys it did not recognize.
inline std::vector<std::string> apply(ModelConfig& m, TrainConfig& t, const KeyValues& kv) {
  std::vector<std::string> unknown;
  // decoder_* keys go last so they override the shared model_dim/heads.
  std::vector<std::pair<std::string, std::string>> ordered;
  for (const auto& e : kv) if (!e.first.starts_with("decoder_")) ordered.push_back(e);
  for (const auto& e : kv) if (e.first.starts_with("decoder_")) ordered.push_back(e);
  for (const auto& [k, v] : ordered) {
    using namespace detail;
    if (k == "image_channels") m.encoder.image_channels = to_size(k, v);
    else if (k == "image_size") m.encoder.image_size = to_size(k, v);
    else if (k == "backbone_channels") m.encoder.backbone_channels = to_size(k, v);
    else if (k == "feature_hw") m.encoder.feature_hw = to_size(k, v);
    else if (k == "model_dim") m.encoder.model_dim = m.decoder.model_dim = to_size(k, v);
    else if (k == "heads") m.encoder.heads = m.decoder.heads = to_size(k, v);
    else if (k == "encoder_layers") m.encoder.encoder_layers = to_size(k, v);
    else if (k == "ordering") m.encoder.ordering = parse_ordering(v);
    else if (k == "share_layernorm") m.encoder.share_layernorm = to_bool(k, v);
    else if (k == "cam_local_enhance") m.encoder.cam_local_enhance = parse_local_enhance(v);
    else if (k == "ffn_variant") m.encoder.ffn_variant = parse_ffn_variant(v);
    else if (k == "ffn_hidden") m.encoder.ffn_hidden = to_size(k, v);
    else if (k == "use_backbone") m.encoder.use_backbone = to_bool(k, v);
    else if (k == "fusion_method") m.fusion.method = parse_fusion_method(v);
    else if (k == "cosine_axis") m.fusion.cosine_axis = parse_cosine_axis(v);
    else if (k == "fusion_eps") m.fusion.eps = to_double(k, v);
    else if (k == "decoder_layers") m.decoder.layers = to_size(k, v);
    else if (k == "decoder_heads") m.decoder.heads = to_size(k, v);
    else if (k == "decoder_ffn_hidden") m.decoder.ffn_hidden = to_size(k, v);
    else if (k == "max_len") m.decoder.max_len = to_size(k, v);
    else if (k == "dropout") m.decoder.dropout = to_double(k, v);
    else if (k == "vocab_size") m.vocab_size = to_size(k, v);
    else if (k == "learning_rate") t.learning_rate = to_double(k, v);
    else if (k == "epochs") t.epochs = to_size(k, v);
    else if (k == "batch_size") t.batch_size = to_size(k, v);
    else if (k == "beta1") t.beta1 = to_double(k, v);
    else if (k == "beta2") t.beta2 = to_double(k, v);
    else if (k == "adam_eps") t.adam_eps = to_double(k, v);
    else if (k == "seed") t.seed = to_size(k, v);
    else if (k == "clip_norm") t.clip_norm = to_double(k, v);
    else if (k == "dtype") t.dtype = v;
    else unknown.push_back(k);
  }
  return unknown;
}

inline KeyValues to_key_values(const ModelConfig& m) {
  using detail::fmt_double;
  const auto& e = m.encoder;
  const auto& d = m.decoder;
  return {
      {"image_channels", std::to_string(e.image_channels)},
      {"image_size", std::to_string(e.image_size)},
      {"backbone_channels", std::to_string(e.backbone_channels)},
      {"feature_hw", std::to_string(e.feature_hw)},
      {"model_dim", std::to_string(e.model_dim)},
      {"heads", std::to_string(e.heads)},
      {"encoder_layers", std::to_string(e.encoder_layers)},
      {"ordering", to_string(e.ordering)},
      {"share_layernorm", e.share_layernorm ? "true" : "false"},
      {"cam_local_enhance", to_string(e.cam_local_enhance)},
      {"ffn_variant", to_string(e.ffn_variant)},
      {"ffn_hidden", std::to_string(e.ffn_hidden)},
      {"use_backbone", e.use_backbone ? "true" : "false"},
      {"fusion_method", to_string(m.fusion.method)},
      {"cosine_axis", to_string(m.fusion.cosine_axis)},
      {"fusion_eps", fmt_double(m.fusion.eps)},
      {"decoder_layers", std::to_string(d.layers)},
      {"decoder_heads", std::to_string(d.heads)},
      {"decoder_ffn_hidden", std::to_string(d.ffn_hidden)},
      {"max_len", std::to_string(d.max_len)},
      {"dropout", fmt_double(d.dropout)},
      {"vocab_size", std::to_string(m.vocab_size)},
  };
}

inline KeyValues to_key_values(const TrainConfig& t) {
  using detail::fmt_double;
  return {
      {"learning_rate", fmt_double(t.learning_rate)},
      {"epochs", std::to_string(t.epochs)},
      {"batch_size", std::to_string(t.batch_size)},
      {"beta1", fmt_double(t.beta1)},
      {"beta2", fmt_double(t.beta2)},
      {"adam_eps", fmt_double(t.adam_eps)},
      {"seed", std::to_string(t.seed)},
      {"clip_norm", fmt_double(t.clip_norm)},
      {"dtype", t.dtype},
  };
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

}  // namespace satcap
