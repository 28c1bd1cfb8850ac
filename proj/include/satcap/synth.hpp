#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "satcap/container.hpp"
#include "satcap/errors.hpp"
#include "satcap/random.hpp"

namespace satcap {

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw LoadError("unknown split tag '" + s + "' (valid: train, val, test)");
}

// Planar RGB in [0, 1], [3, size, size].
struct Image {
  std::size_t size = 0;
  std::vector<float> pixels;

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * size + y) * size + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * size + y) * size + x]; }
};

enum class Background { desert, green, water };
enum class ObjectKind { house, road, tree, building };
enum class Orientation { horizontal, vertical };

struct SceneObject {
  ObjectKind kind = ObjectKind::house;
  std::size_t x = 0, y = 0;  // top-left corner of the footprint
  std::size_t size = 0;      // footprint edge; for roads the width
  Orientation orientation = Orientation::horizontal;

  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  Background background = Background::desert;
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
};

struct SamplePair {
  std::string id;
  Image before;
  Image after;
  std::vector<std::string> captions;
  Split split = Split::train;
  bool changed = false;
};

struct Dataset {
  std::size_t image_size = 0;
  std::vector<SamplePair> pairs;

  std::size_t count(Split s) const {
    return static_cast<std::size_t>(std::count_if(pairs.begin(), pairs.end(), [&](const SamplePair& p) { return p.split == s; }));
  }
  std::vector<const SamplePair*> select(Split s) const {
    std::vector<const SamplePair*> out;
    for (const auto& p : pairs)
      if (p.split == s) out.push_back(&p);
    return out;
  }
  std::vector<std::string> all_captions() const {
    std::vector<std::string> out;
    for (const auto& p : pairs) out.insert(out.end(), p.captions.begin(), p.captions.end());
    return out;
  }
};

// ---------------------------------------------------------------------------
// Caption templates. Bumping the version is required whenever any string
// below changes, since tests and stored datasets pin these sentences.

inline constexpr int kCaptionTemplateVersion = 1;

namespace synth_detail {

// {n} count word, {obj} object phrase (singular or plural), {bg} background,
// {v:sing|plur} verb form chosen by count.
inline constexpr std::array<const char*, 5> kAddTemplates{
    "{n} {obj} {v:appears|appear} in the {bg}",
    "{n} new {obj} {v:has|have} been built in the {bg}",
    "{n} {obj} {v:was|were} added to the {bg}",
    "there {v:is|are} {n} new {obj} in the {bg}",
    "compared with before {n} {obj} {v:appears|appear} in the {bg}",
};
inline constexpr std::array<const char*, 5> kRemoveTemplates{
    "{n} {obj} {v:disappears|disappear} from the {bg}",
    "{n} {obj} {v:has|have} been removed from the {bg}",
    "{n} {obj} {v:was|were} cleared from the {bg}",
    "the {bg} lost {n} {obj}",
    "compared with before {n} {obj} {v:is|are} gone from the {bg}",
};
inline constexpr std::array<const char*, 5> kSameTemplates{
    "the scene is the same as before",
    "there is no change",
    "nothing has changed in the {bg}",
    "the two images look the same",
    "no difference can be seen in the {bg}",
};

inline const char* background_word(Background b) {
  switch (b) {
    case Background::desert: return "desert";
    case Background::green: return "meadow";
    case Background::water: return "lake";
  }
  return "?";
}

inline std::string object_phrase(ObjectKind k, Orientation o, std::size_t count) {
  const bool plural = count > 1;
  switch (k) {
    case ObjectKind::house: return plural ? "houses" : "house";
    case ObjectKind::tree: return plural ? "trees" : "tree";
    case ObjectKind::building: return plural ? "buildings" : "building";
    case ObjectKind::road: return std::string(o == Orientation::horizontal ? "horizontal " : "vertical ") + (plural ? "roads" : "road");
  }
  return "?";
}

inline const char* count_word(std::size_t n) {
  switch (n) {
    case 1: return "a";
    case 2: return "two";
    case 3: return "three";
  }
  return "several";
}

inline std::string fill(const std::string& tmpl, std::size_t count, const std::string& obj, const std::string& bg) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl[i] != '{') {
      out += tmpl[i++];
      continue;
    }
    const auto close = tmpl.find('}', i);
    const auto key = tmpl.substr(i + 1, close - i - 1);
    if (key == "n") out += count_word(count);
    else if (key == "obj") out += obj;
    else if (key == "bg") out += bg;
    else if (key.starts_with("v:")) {
      const auto bar = key.find('|');
      out += count > 1 ? key.substr(bar + 1) : key.substr(2, bar - 2);
    }
    i = close + 1;
  }
  return out;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

using Rgb = std::array<float, 3>;

inline Rgb background_color(Background b) {
  switch (b) {
    case Background::desert: return {0.85f, 0.74f, 0.50f};
    case Background::green: return {0.32f, 0.62f, 0.30f};
    case Background::water: return {0.18f, 0.36f, 0.72f};
  }
  return {0, 0, 0};
}

inline Rgb object_color(ObjectKind k) {
  switch (k) {
    case ObjectKind::house: return {0.80f, 0.18f, 0.16f};
    case ObjectKind::road: return {0.22f, 0.22f, 0.24f};
    case ObjectKind::tree: return {0.04f, 0.30f, 0.08f};
    case ObjectKind::building: return {0.92f, 0.92f, 0.95f};
  }
  return {0, 0, 0};
}

struct Footprint {
  std::size_t x0, y0, x1, y1;  // half-open
  bool overlaps(const Footprint& o, std::size_t gap) const {
    return x0 < o.x1 + gap && o.x0 < x1 + gap && y0 < o.y1 + gap && o.y0 < y1 + gap;
  }
};

inline Footprint footprint(const SceneObject& o, std::size_t canvas) {
  if (o.kind == ObjectKind::road) {
    return o.orientation == Orientation::horizontal ? Footprint{0, o.y, canvas, o.y + o.size}
                                                    : Footprint{o.x, 0, o.x + o.size, canvas};
  }
  return {o.x, o.y, o.x + o.size, o.y + o.size};
}

inline std::size_t object_size(ObjectKind k, std::size_t canvas) {
  const std::size_t unit = std::max<std::size_t>(1, canvas / 16);
  switch (k) {
    case ObjectKind::house: return 2 * unit + 1;
    case ObjectKind::road: return unit + 1;
    case ObjectKind::tree: return 2 * unit + 1;
    case ObjectKind::building: return 4 * unit;
  }
  return unit;
}

// Places one object away from every existing footprint, or fails.
inline bool place(std::vector<SceneObject>& objects, ObjectKind kind, Orientation orient, std::size_t canvas, Rng& rng) {
  const std::size_t size = object_size(kind, canvas);
  if (size + 2 > canvas) return false;
  for (int attempt = 0; attempt < 200; ++attempt) {
    SceneObject o{kind, 0, 0, size, orient};
    const auto span = static_cast<int>(canvas - size - 1);
    o.x = static_cast<std::size_t>(rng.range(1, span));
    o.y = static_cast<std::size_t>(rng.range(1, span));
    const auto fp = footprint(o, canvas);
    bool clear = true;
    for (const auto& other : objects) clear = clear && !fp.overlaps(footprint(other, canvas), 1);
    if (clear) {
      objects.push_back(o);
      return true;
    }
  }
  return false;
}

inline void paint(Image& img, const SceneObject& o) {
  const auto fp = footprint(o, img.size);
  const auto col = object_color(o.kind);
  const double cx = (static_cast<double>(fp.x0) + static_cast<double>(fp.x1) - 1) / 2.0;
  const double cy = (static_cast<double>(fp.y0) + static_cast<double>(fp.y1) - 1) / 2.0;
  const double r = static_cast<double>(o.size) / 2.0;
  for (std::size_t y = fp.y0; y < fp.y1; ++y)
    for (std::size_t x = fp.x0; x < fp.x1; ++x) {
      if (o.kind == ObjectKind::tree) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        if (dx * dx + dy * dy > r * r) continue;
      }
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = col[c];
    }
}

}  // namespace synth_detail

inline Image render(const SceneSpec& spec, std::size_t size, Rng& noise_rng, double noise = 0.03) {
  Image img{size, std::vector<float>(3 * size * size)};
  const auto bg = synth_detail::background_color(spec.background);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < size * size; ++i) img.pixels[c * size * size + i] = bg[c];
  for (const auto& o : spec.objects) synth_detail::paint(img, o);
  for (auto& p : img.pixels) p = static_cast<float>(std::clamp(p + noise_rng.uniform(-noise, noise), 0.0, 1.0));
  return img;
}

// 80/10/10 split keyed on (seed, id) only.
inline Split split_for(std::uint64_t seed, const std::string& id) {
  const auto bucket = mix_seed(seed ^ 0x5b17, synth_detail::fnv1a(id)) % 10;
  return bucket < 8 ? Split::train : bucket == 8 ? Split::val : Split::test;
}

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t pairs = 64;
  std::size_t image_size = 32;
  double p_change = 0.5;
  double noise = 0.03;
};

struct GeneratedPair {
  SamplePair sample;
  SceneSpec before;
  SceneSpec after;
};

inline std::string pair_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%06zu", index);
  return buf;
}

inline GeneratedPair generate_pair(const SynthConfig& cfg, std::size_t index) {
  using namespace synth_detail;
  GeneratedPair g;
  auto& s = g.sample;
  s.id = pair_id(index);
  s.split = split_for(cfg.seed, s.id);
  const std::uint64_t pair_seed = mix_seed(cfg.seed, fnv1a(s.id));
  Rng rng(pair_seed);
  const auto canvas = cfg.image_size;
  const auto bg = static_cast<Background>(rng.below(3));
  g.before = {bg, {}, pair_seed};
  s.changed = rng.uniform() < cfg.p_change;
  const auto change_kind = static_cast<ObjectKind>(rng.below(4));
  const auto orient = static_cast<Orientation>(rng.below(2));
  const auto count = static_cast<std::size_t>(rng.range(1, 3));
  const bool adding = rng.below(2) == 0;
  // Changed objects are placed first so context can never crowd them out.
  std::vector<SceneObject> placed;
  if (s.changed) {
    for (std::size_t i = 0; i < count; ++i) {
      if (!place(placed, change_kind, orient, canvas, rng)) {
        throw ConfigError("generate: image_size " + std::to_string(canvas) + " too small to place " + std::to_string(count) +
                          " objects for " + s.id);
      }
    }
  }
  const std::size_t changed_objects = placed.size();
  // Context objects never share the changed kind, so counts in captions are
  // exactly the number of objects of that kind that came or went.
  const auto context = rng.below(3);
  for (std::uint64_t i = 0; i < context; ++i) {
    auto kind = static_cast<ObjectKind>(rng.below(4));
    if (s.changed && kind == change_kind) kind = static_cast<ObjectKind>((static_cast<int>(kind) + 1) % 4);
    place(placed, kind, static_cast<Orientation>(rng.below(2)), canvas, rng);
  }
  const std::vector<SceneObject> context_objects(placed.begin() + static_cast<std::ptrdiff_t>(changed_objects), placed.end());
  g.before.objects = context_objects;
  g.after = g.before;
  if (s.changed) {
    auto& grow = adding ? g.after : g.before;
    grow.objects.insert(grow.objects.end(), placed.begin(), placed.begin() + static_cast<std::ptrdiff_t>(changed_objects));
    const auto obj = object_phrase(change_kind, orient, count);
    for (const char* t : adding ? kAddTemplates : kRemoveTemplates) s.captions.push_back(fill(t, count, obj, background_word(bg)));
  } else {
    for (const char* t : kSameTemplates) s.captions.push_back(fill(t, 1, "", background_word(bg)));
  }
  Rng noise(mix_seed(pair_seed, 0x401e));
  s.before = render(g.before, canvas, noise, cfg.noise);
  s.after = render(g.after, canvas, noise, cfg.noise);
  return g;
}

inline Dataset generate(const SynthConfig& cfg) {
  if (cfg.pairs < 1) throw ConfigError("generate: pairs must be >= 1");
  if (cfg.image_size < 16) throw ConfigError("generate: image_size " + std::to_string(cfg.image_size) + " too small, need >= 16");
  if (cfg.p_change < 0.0 || cfg.p_change > 1.0) throw ConfigError("generate: p_change must lie in [0, 1]");
  Dataset d;
  d.image_size = cfg.image_size;
  for (std::size_t i = 0; i < cfg.pairs; ++i) d.pairs.push_back(generate_pair(cfg, i).sample);
  return d;
}

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255).

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("ppm: cannot write " + path);
  out << "P6\n" << img.size << ' ' << img.size << "\n255\n";
  const std::size_t plane = img.size * img.size;
  std::vector<char> row(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(img.pixels[c * plane + i], 0.0f, 1.0f);
      row[3 * i + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
    }
  out.write(row.data(), static_cast<std::streamsize>(row.size()));
}

inline Image read_ppm(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0'), ++digits;
    if (digits == 0) throw LoadError(path + ": ppm header missing " + what);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw MagicError(path + ": bad magic, expected P6");
  pos = 2;
  const auto w = number("width"), h = number("height"), maxval = number("maxval");
  if (maxval != 255) throw LoadError(path + ": only 8-bit PPM supported, maxval " + std::to_string(maxval));
  if (w != h || w == 0) throw LoadError(path + ": expected a square image, got " + std::to_string(w) + "x" + std::to_string(h));
  ++pos;  // single whitespace after maxval
  const std::size_t plane = w * h;
  if (bytes.size() < pos + 3 * plane) throw TruncationError(path + ": ppm pixel data truncated");
  Image img{w, std::vector<float>(3 * plane)};
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) img.pixels[c * plane + i] = static_cast<float>(bytes[pos + 3 * i + c]) / 255.0f;
  return img;
}

// Raw tensor alternative: a container with one f32/f64 entry of shape [3,S,S].
inline Image read_tensor_image(const std::string& path) {
  const auto entries = read_container(path);
  if (entries.size() != 1) throw LoadError(path + ": expected exactly one tensor entry");
  const auto& e = entries[0];
  if (e.shape.size() != 3 || e.shape[0] != 3 || e.shape[1] != e.shape[2]) {
    throw LoadError(path + ": image tensor must be [3,S,S], got " + shape_str(e.shape));
  }
  return {e.shape[1], entry_values<float>(e)};
}

inline Image read_image(const std::string& path) {
  const auto head = read_file_bytes(path);
  if (head.size() >= 4 && std::equal(head.begin(), head.begin() + 4, "SATC")) return read_tensor_image(path);
  return read_ppm(path);
}

// ---------------------------------------------------------------------------
// Manifest: JSON array of {"id","before","after","captions","split"} with
// image paths relative to the manifest's directory.

inline void write_dataset(const std::string& dir, const Dataset& d) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& p : d.pairs) {
    const std::string before = "images/" + p.id + "_A.ppm", after = "images/" + p.id + "_B.ppm";
    write_ppm((fs::path(dir) / before).string(), p.before);
    write_ppm((fs::path(dir) / after).string(), p.after);
    manifest.push_back({{"id", p.id},
                        {"before", before},
                        {"after", after},
                        {"captions", p.captions},
                        {"split", to_string(p.split)},
                        {"changed", p.changed}});
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw Error("manifest: cannot write in " + dir);
  out << manifest.dump(1) << '\n';
}

// Accepts a manifest file or a directory holding manifest.json.
inline Dataset load_manifest(const std::string& path) {
  namespace fs = std::filesystem;
  fs::path file = path;
  if (fs::is_directory(file)) file /= "manifest.json";
  std::ifstream in(file);
  if (!in) throw LoadError("manifest: cannot open " + file.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest " + file.string() + ": " + e.what());
  }
  if (!manifest.is_array()) throw LoadError("manifest " + file.string() + ": expected a JSON array");
  const auto root = file.parent_path();
  Dataset d;
  for (const auto& entry : manifest) {
    const std::string id = entry.contains("id") && entry["id"].is_string() ? entry["id"].get<std::string>() : "<no id>";
    try {
      SamplePair p;
      p.id = id;
      if (id == "<no id>") throw LoadError("missing string id");
      p.captions = entry.at("captions").get<std::vector<std::string>>();
      if (p.captions.empty()) throw LoadError("caption count is 0");
      for (const auto& c : p.captions)
        if (c.find_first_not_of(" \t") == std::string::npos) throw LoadError("empty caption");
      p.split = parse_split(entry.at("split").get<std::string>());
      auto load = [&](const char* key) {
        const auto rel = entry.at(key).get<std::string>();
        const auto full = (root / rel).string();
        if (!fs::exists(full)) throw LoadError(std::string(key) + " image missing: " + full);
        return read_image(full);
      };
      p.before = load("before");
      p.after = load("after");
      if (p.before.size != p.after.size) throw LoadError("before/after sizes differ");
      if (d.image_size == 0) d.image_size = p.before.size;
      if (p.before.size != d.image_size) throw LoadError("image size " + std::to_string(p.before.size) + " differs from dataset");
      p.changed = entry.value("changed", true);
      d.pairs.push_back(std::move(p));
    } catch (const MagicError& e) {
      throw MagicError("manifest entry '" + id + "': " + e.what());
    } catch (const TruncationError& e) {
      throw TruncationError("manifest entry '" + id + "': " + e.what());
    } catch (const LoadError& e) {
      throw LoadError("manifest entry '" + id + "': " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("manifest entry '" + id + "': " + e.what());
    }
  }
  if (d.pairs.empty()) throw LoadError("manifest " + file.string() + ": no entries");
  return d;
}

inline std::string split_summary(const Dataset& d) {
  std::ostringstream os;
  os << "train=" << d.count(Split::train) << " val=" << d.count(Split::val) << " test=" << d.count(Split::test);
  return os.str();
}

}  // namespace satcap
