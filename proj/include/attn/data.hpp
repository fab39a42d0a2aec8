#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "attn/attention.hpp"
#include "attn/bytes.hpp"
#include "attn/rng.hpp"
#include "attn/tensor.hpp"

namespace attn {

// Synthetic scene-caption corpus: colored shapes on a g x g grid, described by
// template captions with ground-truth word-to-cell alignments. Captions are a
// deterministic function of the scene (canonical subject order, canonical
// relation direction), so the conditional word distribution is learnable to
// certainty and BLEU ceilings are limited only by the model.

struct SceneSpec {
  std::size_t grid_side = 4;
  std::vector<std::string> colors = {"red",    "green", "blue",  "yellow", "purple",
                                     "orange", "pink",  "brown", "black",  "white"};
  std::vector<std::string> shapes = {"square",  "circle", "triangle", "diamond", "star",
                                     "hexagon", "cross",  "heart",    "ring",    "arrow"};
  std::size_t objects_min = 1;
  std::size_t objects_max = 3;
  double noise_sigma = 0.05;

  // {color}/{shape} placeholders pair up per object, {rel} expands to the
  // relation phrase picked from the pair's geometry.
  std::string single_template = "a {color} {shape}";
  std::string relation_template = "a {color} {shape} {rel} a {color} {shape}";
  std::string horizontal_relation = "left of";  // subject strictly left of partner
  std::string vertical_relation = "above";      // same column, subject on top

  std::size_t locations() const { return grid_side * grid_side; }
  std::size_t feature_dim() const { return colors.size() + shapes.size() + 3; }

  void validate() const {
    check(grid_side >= 1, "scene spec: grid side must be at least 1");
    check(!colors.empty() && !shapes.empty(), "scene spec: need at least one color and shape");
    check(!single_template.empty() && !relation_template.empty(),
          "scene spec: need at least one template");
    check(objects_min >= 1 && objects_min <= objects_max, "scene spec: bad object count range");
    check(objects_max <= locations(), "scene spec: too many objects for the grid");
    check(objects_max <= colors.size() * shapes.size(),
          "scene spec: not enough distinct color/shape combinations");
    check(noise_sigma >= 0.0, "scene spec: noise sigma must be nonnegative");
  }
};

struct SceneObject {
  std::uint16_t cell;   // row-major index
  std::uint16_t color;  // index into spec.colors
  std::uint16_t shape;  // index into spec.shapes
};

struct Scene {
  std::size_t grid_side = 0;
  std::vector<SceneObject> objects;  // sorted row-major
  std::vector<std::string> caption;  // words, no BOS/EOS
  std::vector<std::pair<std::uint16_t, std::uint16_t>> alignment;  // (word pos, cell)
};

struct Vocabulary {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, std::uint32_t> index;

  static constexpr std::uint32_t kBos = 0;
  static constexpr std::uint32_t kEos = 1;
  static constexpr std::uint32_t kUnk = 2;

  std::uint32_t bos() const { return kBos; }
  std::uint32_t eos() const { return kEos; }
  std::uint32_t unk() const { return kUnk; }
  std::uint32_t size() const { return static_cast<std::uint32_t>(tokens.size()); }

  std::uint32_t lookup(const std::string& word) const {
    auto it = index.find(word);
    return it == index.end() ? kUnk : it->second;
  }

  const std::string& word(std::uint32_t id) const {
    check(id < tokens.size(), "vocabulary index out of range");
    return tokens[id];
  }

  void add(const std::string& word) {
    if (index.find(word) == index.end()) {
      index.emplace(word, static_cast<std::uint32_t>(tokens.size()));
      tokens.push_back(word);
    }
  }

  static Vocabulary build(const SceneSpec& spec) {
    Vocabulary v;
    v.add("<s>");
    v.add("</s>");
    v.add("<unk>");
    auto add_words = [&](const std::string& text) {
      std::istringstream in(text);
      std::string w;
      while (in >> w)
        if (w.front() != '{') v.add(w);
    };
    add_words(spec.single_template);
    add_words(spec.relation_template);
    add_words(spec.horizontal_relation);
    add_words(spec.vertical_relation);
    for (const auto& c : spec.colors) v.add(c);
    for (const auto& s : spec.shapes) v.add(s);
    return v;
  }
};

namespace detail {

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// Instantiates a template for the given objects (in caption order), recording
// which word positions name object attributes.
inline void instantiate_template(const SceneSpec& spec, const std::string& templ,
                                 const std::vector<SceneObject>& objs,
                                 const std::string& relation, Scene& scene) {
  std::size_t obj = 0;
  for (const std::string& tok : split_words(templ)) {
    if (tok == "{color}") {
      check(obj < objs.size(), "template names more objects than the scene provides");
      scene.alignment.emplace_back(static_cast<std::uint16_t>(scene.caption.size()),
                                   objs[obj].cell);
      scene.caption.push_back(spec.colors[objs[obj].color]);
    } else if (tok == "{shape}") {
      check(obj < objs.size(), "template names more objects than the scene provides");
      scene.alignment.emplace_back(static_cast<std::uint16_t>(scene.caption.size()),
                                   objs[obj].cell);
      scene.caption.push_back(spec.shapes[objs[obj].shape]);
      ++obj;  // {color} {shape} pairs advance to the next object
    } else if (tok == "{rel}") {
      for (const std::string& w : split_words(relation)) scene.caption.push_back(w);
    } else {
      scene.caption.push_back(tok);
    }
  }
}

inline std::vector<std::size_t> sample_distinct(std::size_t count, std::size_t universe,
                                                Rng& rng) {
  std::vector<std::size_t> pool(universe);
  for (std::size_t i = 0; i < universe; ++i) pool[i] = i;
  for (std::size_t i = 0; i < count; ++i)
    std::swap(pool[i], pool[i + rng.uniform_index(universe - i)]);
  pool.resize(count);
  return pool;
}

}  // namespace detail

inline Scene generate_scene(const SceneSpec& spec, Rng& rng) {
  const std::size_t n_obj =
      spec.objects_min + rng.uniform_index(spec.objects_max - spec.objects_min + 1);
  const auto combos =
      detail::sample_distinct(n_obj, spec.colors.size() * spec.shapes.size(), rng);
  const auto cells = detail::sample_distinct(n_obj, spec.locations(), rng);

  Scene scene;
  scene.grid_side = spec.grid_side;
  for (std::size_t i = 0; i < n_obj; ++i) {
    SceneObject o;
    o.cell = static_cast<std::uint16_t>(cells[i]);
    o.color = static_cast<std::uint16_t>(combos[i] / spec.shapes.size());
    o.shape = static_cast<std::uint16_t>(combos[i] % spec.shapes.size());
    scene.objects.push_back(o);
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });

  if (n_obj == 1) {
    detail::instantiate_template(spec, spec.single_template, {scene.objects[0]}, "", scene);
    return scene;
  }

  // Canonical pair: the two first objects in row-major order, reordered so the
  // relation direction is deterministic given their cells.
  SceneObject a = scene.objects[0];
  SceneObject b = scene.objects[1];
  const std::size_t g = spec.grid_side;
  const std::size_t col_a = a.cell % g, col_b = b.cell % g;
  std::string relation;
  std::vector<SceneObject> order;
  if (col_a != col_b) {
    relation = spec.horizontal_relation;
    order = col_a < col_b ? std::vector<SceneObject>{a, b} : std::vector<SceneObject>{b, a};
  } else {
    relation = spec.vertical_relation;
    order = {a, b};  // already sorted row-major, so a is on top
  }
  detail::instantiate_template(spec, spec.relation_template, order, relation, scene);
  return scene;
}

inline std::vector<Scene> generate_corpus(const SceneSpec& spec, std::size_t count, Rng& rng) {
  spec.validate();
  check(count >= 1, "generate_corpus: count must be at least 1");
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng scene_rng = rng.split(i);
    out.push_back(generate_scene(spec, scene_rng));
  }
  return out;
}

// Per-cell feature vector: one-hot color, one-hot shape, occupancy bit, then
// the two normalized center coordinates (x, y), plus N(0, sigma^2) noise on
// every component.
inline AnnotationGrid encode_scene(const Scene& scene, const SceneSpec& spec, Rng& rng) {
  const std::size_t g = spec.grid_side;
  const std::size_t L = spec.locations(), D = spec.feature_dim();
  const std::size_t nc = spec.colors.size(), ns = spec.shapes.size();
  Tensor f({L, D});
  for (std::size_t cell = 0; cell < L; ++cell) {
    const std::size_t row = cell / g, col = cell % g;
    f.at(cell, nc + ns + 1) = (static_cast<double>(col) + 0.5) / static_cast<double>(g);
    f.at(cell, nc + ns + 2) = (static_cast<double>(row) + 0.5) / static_cast<double>(g);
  }
  for (const SceneObject& o : scene.objects) {
    f.at(o.cell, o.color) = 1.0;
    f.at(o.cell, nc + o.shape) = 1.0;
    f.at(o.cell, nc + ns) = 1.0;  // occupancy
  }
  if (spec.noise_sigma > 0.0)
    for (auto& v : f.data) v += rng.normal(0.0, spec.noise_sigma);
  return AnnotationGrid(std::move(f));
}

inline std::vector<std::uint32_t> encode_caption(const std::vector<std::string>& words,
                                                 const Vocabulary& vocab) {
  std::vector<std::uint32_t> out;
  out.reserve(words.size() + 1);
  for (const auto& w : words) out.push_back(vocab.lookup(w));
  out.push_back(vocab.eos());
  return out;
}

// Inverse of encode_caption for in-vocabulary input: drops the trailing EOS.
inline std::vector<std::string> decode_caption(const std::vector<std::uint32_t>& ids,
                                               const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == vocab.eos() && i + 1 == ids.size()) break;
    out.push_back(vocab.word(ids[i]));
  }
  return out;
}

// --- dataset container and file format --------------------------------------

struct DataRecord {
  std::vector<std::uint32_t> caption;  // includes terminal EOS
  Tensor grid;                         // L x D
  std::vector<std::pair<std::uint16_t, std::uint16_t>> alignment;  // (word pos, cell)
};

struct Dataset {
  std::uint32_t L = 0, D = 0, K = 0;
  std::vector<DataRecord> records;
};

inline constexpr std::string_view kDatasetMagic = "ATTNDATA";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_annotations(const Dataset& ds, const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.records.size()));
  w.u32(ds.L);
  w.u32(ds.D);
  w.u32(ds.K);
  for (const DataRecord& rec : ds.records) {
    check(rec.grid.rank() == 2 && rec.grid.rows() == ds.L && rec.grid.cols() == ds.D,
          "write_annotations: record grid shape does not match dataset header");
    check(rec.caption.size() <= UINT16_MAX, "caption too long for format");
    w.u16(static_cast<std::uint16_t>(rec.caption.size()));
    for (auto tok : rec.caption) w.u32(tok);
    for (double v : rec.grid.data) w.f64(v);
    w.u16(static_cast<std::uint16_t>(rec.alignment.size()));
    for (auto [pos, cell] : rec.alignment) {
      w.u16(pos);
      w.u16(cell);
    }
  }
  w.to_file(path);
}

inline Dataset read_annotations(const std::filesystem::path& path) {
  ByteReader r = ByteReader::from_file(path);
  if (r.remaining() < kDatasetMagic.size() || r.bytes(kDatasetMagic.size()) != kDatasetMagic)
    throw bad_magic_error("not an annotation dataset (bad magic): " + path.string());
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion)
    throw version_error("unsupported dataset version " + std::to_string(version));

  Dataset ds;
  const std::uint32_t count = r.u32();
  ds.L = r.u32();
  ds.D = r.u32();
  ds.K = r.u32();
  check(ds.L >= 1 && ds.D >= 1 && ds.K >= 1, "dataset header has zero dimensions");
  ds.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    DataRecord rec;
    const std::uint16_t clen = r.u16();
    rec.caption.reserve(clen);
    for (std::uint16_t t = 0; t < clen; ++t) {
      const std::uint32_t tok = r.u32();
      if (tok >= ds.K) throw io_error("dataset record " + std::to_string(i) +
                                      ": caption token out of vocabulary range");
      rec.caption.push_back(tok);
    }
    rec.grid = Tensor({ds.L, ds.D});
    for (auto& v : rec.grid.data) v = r.f64();
    if (!rec.grid.all_finite())
      throw numeric_error("dataset record " + std::to_string(i) +
                          ": grid contains non-finite values");
    const std::uint16_t alen = r.u16();
    for (std::uint16_t a = 0; a < alen; ++a) {
      const std::uint16_t pos = r.u16();
      const std::uint16_t cell = r.u16();
      if (cell >= ds.L)
        throw io_error("dataset record " + std::to_string(i) + ": alignment cell out of range");
      rec.alignment.emplace_back(pos, cell);
    }
    ds.records.push_back(std::move(rec));
  }
  if (!r.at_end()) throw io_error("trailing bytes after last dataset record");
  return ds;
}

// 80/10/10 split by record index.
struct SplitIndices {
  std::size_t train_begin = 0, train_end = 0;
  std::size_t val_begin = 0, val_end = 0;
  std::size_t test_begin = 0, test_end = 0;
};

inline SplitIndices split_indices(std::size_t count) {
  SplitIndices s;
  s.train_end = count * 8 / 10;
  s.val_begin = s.train_end;
  s.val_end = count * 9 / 10;
  s.test_begin = s.val_end;
  s.test_end = count;
  return s;
}

// Corpus generation, feature encoding and caption encoding in one pass; the
// scene list comes back too for alignment-aware evaluation.
inline Dataset build_dataset(const SceneSpec& spec, std::size_t count, std::uint64_t seed,
                             const Vocabulary& vocab, std::vector<Scene>* scenes_out = nullptr) {
  Rng root(seed);
  Rng corpus_rng = root.split(0x5ce9e5);
  std::vector<Scene> scenes = generate_corpus(spec, count, corpus_rng);

  Dataset ds;
  ds.L = static_cast<std::uint32_t>(spec.locations());
  ds.D = static_cast<std::uint32_t>(spec.feature_dim());
  ds.K = vocab.size();
  ds.records.reserve(count);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    Rng enc_rng = root.split(0xfea70000ULL + i);
    DataRecord rec;
    rec.caption = encode_caption(scenes[i].caption, vocab);
    rec.grid = encode_scene(scenes[i], spec, enc_rng).features;
    rec.alignment = scenes[i].alignment;
    ds.records.push_back(std::move(rec));
  }
  if (scenes_out) *scenes_out = std::move(scenes);
  return ds;
}

// Vocabulary sidecar: one token per line, line number = index. The binary
// dataset format carries only indices, so the word list travels next to it.
inline void write_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open '" + path.string() + "' for writing");
  for (const auto& t : vocab.tokens) out << t << '\n';
}

inline Vocabulary read_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open '" + path.string() + "' for reading");
  Vocabulary v;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) v.add(line);
  check(v.size() >= 3, "vocabulary sidecar too small");
  return v;
}

}  // namespace attn
