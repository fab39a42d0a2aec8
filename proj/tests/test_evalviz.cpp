#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "attn/evalviz.hpp"
#include "attn/rng.hpp"

using namespace attn;

namespace {

using Sent = std::vector<std::string>;

Sent words(std::initializer_list<const char*> w) {
  Sent out;
  for (auto* s : w) out.emplace_back(s);
  return out;
}

}  // namespace

TEST_CASE("bleu: candidate equal to its reference scores one at every order") {
  Sent s = words({"a", "red", "square", "left", "of", "a", "blue", "circle"});
  auto report = bleu<std::string>({s}, {{s}});
  for (int n = 0; n < 4; ++n) REQUIRE(report.bleu[n] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("bleu: clipped unigram precision on the repeated-token candidate") {
  // "a a a a" vs "a b": clipping to the reference count gives 1/4.
  auto report = bleu<std::string>({words({"a", "a", "a", "a"})}, {{words({"a", "b"})}});
  REQUIRE(report.precisions[0] == Catch::Approx(0.25).margin(1e-12));
  REQUIRE(report.bleu[0] == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("bleu: zero bigram overlap zeroes orders two and above only") {
  Sent cand = words({"a", "c", "b", "d"});
  Sent ref = words({"a", "b", "c", "d"});
  auto report = bleu<std::string>({cand}, {{ref}});
  REQUIRE(report.bleu[0] == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(report.bleu[1] == 0.0);
  REQUIRE(report.bleu[2] == 0.0);
  REQUIRE(report.bleu[3] == 0.0);
}

TEST_CASE("bleu: multiple references clip against the maximum count") {
  Sent cand = words({"the", "the", "cat"});
  auto report =
      bleu<std::string>({cand}, {{words({"the", "cat"}), words({"the", "the", "dog"})}});
  // "the" clips at 2 (second reference), "cat" matches once: 3/3 unigrams.
  REQUIRE(report.precisions[0] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("bleu: permutation invariance over the corpus ordering") {
  Rng rng(3);
  std::vector<Sent> cands, flat_refs;
  for (int i = 0; i < 12; ++i) {
    Sent c, r;
    for (int j = 0; j < 6; ++j) {
      c.push_back(std::string(1, static_cast<char>('a' + rng.uniform_index(5))));
      r.push_back(std::string(1, static_cast<char>('a' + rng.uniform_index(5))));
    }
    cands.push_back(c);
    flat_refs.push_back(r);
  }
  std::vector<std::vector<Sent>> refs;
  for (auto& r : flat_refs) refs.push_back({r});
  auto base = bleu<std::string>(cands, refs);

  std::vector<std::size_t> perm(cands.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  for (std::size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  std::vector<Sent> cands2;
  std::vector<std::vector<Sent>> refs2;
  for (std::size_t i : perm) {
    cands2.push_back(cands[i]);
    refs2.push_back(refs[i]);
  }
  auto shuffled = bleu<std::string>(cands2, refs2);
  for (int n = 0; n < 4; ++n)
    REQUIRE(base.bleu[n] == Catch::Approx(shuffled.bleu[n]).margin(1e-12));
}

TEST_CASE("bleu: never exceeds one, including super-sequence candidates") {
  Rng rng(4);
  Sent ref = words({"a", "red", "square"});
  Sent longer = words({"a", "red", "square", "left", "of", "a", "blue", "circle"});
  auto report = bleu<std::string>({longer}, {{ref}});
  for (int n = 0; n < 4; ++n) {
    REQUIRE(report.bleu[n] >= 0.0);
    REQUIRE(report.bleu[n] <= 1.0);
  }
}

TEST_CASE("bleu: input validation") {
  REQUIRE_THROWS_AS((bleu<std::string>({}, {})), error);
  REQUIRE_THROWS_AS((bleu<std::string>({words({"a"})}, {})), error);
  REQUIRE_THROWS_AS((bleu<std::string>({words({"a"})}, {{}})), error);
}

TEST_CASE("gaussian kernel is normalized") {
  for (double sigma : {2.0, 8.0, 13.5}) {
    auto k = gaussian_kernel(sigma);
    REQUIRE(k.size() == 2 * static_cast<std::size_t>(std::ceil(3.0 * sigma)) + 1);
    double sum = 0.0;
    for (double v : k) sum += v;
    REQUIRE(std::fabs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("render_attention: impulse peaks at the center of its cell block") {
  // Interior cell so edge clamping stays symmetric.
  AttentionTrace trace;
  trace.per_step.push_back(Tensor::one_hot(16, 6));  // 4x4 grid, row 1 col 2
  auto maps = render_attention(trace, 4);
  REQUIRE(maps.size() == 1);
  const Heatmap& hm = maps[0];
  REQUIRE(hm.width == 64);
  REQUIRE(hm.height == 64);
  std::size_t best = 0;
  for (std::size_t i = 1; i < hm.v.size(); ++i)
    if (hm.v[i] > hm.v[best]) best = i;
  const double bx = static_cast<double>(best % 64), by = static_cast<double>(best / 64);
  REQUIRE(std::fabs(bx - 39.5) <= 0.5);  // block [32,48) centered at 39.5
  REQUIRE(std::fabs(by - 23.5) <= 0.5);  // block [16,32) centered at 23.5
  REQUIRE(hm.v[best] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("render_attention: uniform weights normalize to an all-ones map") {
  AttentionTrace trace;
  Tensor u({16});
  u.fill(1.0 / 16.0);
  trace.per_step.push_back(u);
  auto maps = render_attention(trace, 4);
  for (double v : maps[0].v) REQUIRE(v == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("render_attention: dominant cell keeps the brightest block") {
  // Attention maps are concentrated in practice; with a dominant cell the
  // blurred block ordering must follow the weight ordering.
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor alpha({16});
    const std::size_t hot = rng.uniform_index(16);
    double rest = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
      alpha.data[i] = rng.uniform(0.0, 1.0);
      rest += alpha.data[i];
    }
    for (std::size_t i = 0; i < 16; ++i) alpha.data[i] *= 0.4 / rest;
    alpha.data[hot] += 0.6;
    double z = 0.0;
    for (double v : alpha.data) z += v;
    for (auto& v : alpha.data) v /= z;

    AttentionTrace trace;
    trace.per_step.push_back(alpha);
    auto maps = render_attention(trace, 4);
    const Heatmap& hm = maps[0];
    std::size_t best_cell = 0;
    double best_mass = -1.0;
    for (std::size_t cell = 0; cell < 16; ++cell) {
      const std::size_t cx = (cell % 4) * 16, cy = (cell / 4) * 16;
      double mass = 0.0;
      for (std::size_t y = cy; y < cy + 16; ++y)
        for (std::size_t x = cx; x < cx + 16; ++x) mass += hm.at(x, y);
      if (mass > best_mass) {
        best_mass = mass;
        best_cell = cell;
      }
    }
    REQUIRE(best_cell == hot);
  }
}

TEST_CASE("render_attention: rejects non-square location counts") {
  AttentionTrace trace;
  Tensor bad({15});
  bad.fill(1.0 / 15.0);
  trace.per_step.push_back(bad);
  REQUIRE_THROWS_AS(render_attention(trace, 4), shape_error);
}

TEST_CASE("alignment_score: spec values") {
  AttentionTrace trace;
  trace.per_step.push_back(Tensor::one_hot(16, 3));
  trace.per_step.push_back(Tensor::one_hot(16, 3));
  std::vector<std::pair<std::uint16_t, std::uint16_t>> align{{0, 3}, {1, 3}};
  auto s = alignment_score(trace, align);
  REQUIRE(s.has_value());
  REQUIRE(*s == Catch::Approx(1.0).margin(1e-12));

  AttentionTrace uniform;
  Tensor u({16});
  u.fill(1.0 / 16.0);
  uniform.per_step.push_back(u);
  std::vector<std::pair<std::uint16_t, std::uint16_t>> one{{0, 7}};
  REQUIRE(*alignment_score(uniform, one) == Catch::Approx(0.0625).margin(1e-12));

  std::vector<std::pair<std::uint16_t, std::uint16_t>> none{};
  REQUIRE_FALSE(alignment_score(uniform, none).has_value());
}

TEST_CASE("export_heatmaps: files plus manifest, and P5 round-trip") {
  Rng rng(31);
  AttentionTrace trace;
  for (int t = 0; t < 3; ++t) {
    Tensor a({16});
    for (auto& v : a.data) v = rng.uniform(0.0, 1.0);
    double z = 0.0;
    for (double v : a.data) z += v;
    for (auto& v : a.data) v /= z;
    trace.per_step.push_back(a);
  }
  std::vector<std::string> wordlist{"red", "square", "</s>"};
  auto maps = render_attention(trace, 4, 8.0, &wordlist);
  REQUIRE(maps.size() == 3);
  REQUIRE(maps[1].word == "square");

  const auto dir = std::filesystem::temp_directory_path() / "attn_viz_test";
  auto manifest = export_heatmaps(maps, nullptr, dir, "cap0");

  std::ifstream mf(manifest);
  std::string line;
  std::size_t rows = 0;
  std::vector<std::string> files;
  while (std::getline(mf, line)) {
    ++rows;
    files.push_back(line.substr(line.rfind('\t') + 1));
  }
  REQUIRE(rows == 3);
  for (const auto& f : files) {
    Heatmap back = read_pgm(dir / f);
    REQUIRE(back.width == 64);
    REQUIRE(back.height == 64);
  }
  // Quantization bound: intensities within 1/255 of the source.
  Heatmap back = read_pgm(dir / files[0]);
  for (std::size_t i = 0; i < back.v.size(); ++i)
    REQUIRE(std::fabs(back.v[i] - maps[0].v[i]) <= 1.0 / 255.0 + 1e-12);

  // Empty trace: manifest only.
  auto manifest2 = export_heatmaps(std::vector<Heatmap>{}, nullptr, dir, "empty");
  std::ifstream mf2(manifest2);
  rows = 0;
  while (std::getline(mf2, line)) ++rows;
  REQUIRE(rows == 0);

  std::filesystem::remove_all(dir);
}

TEST_CASE("feature_norm_raster matches heatmap dimensions") {
  Rng rng(33);
  Tensor grid({16, 5});
  fill_uniform(grid, rng, 1.0);
  Heatmap base = feature_norm_raster(grid, 4);
  REQUIRE(base.width == 64);
  REQUIRE(base.height == 64);
  double mx = 0.0;
  for (double v : base.v) {
    REQUIRE(v >= 0.0);
    mx = std::max(mx, v);
  }
  REQUIRE(mx == Catch::Approx(1.0).margin(1e-12));
}
