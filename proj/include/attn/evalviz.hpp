#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attn/attention.hpp"
#include "attn/common.hpp"

namespace attn {

// --- BLEU -------------------------------------------------------------------

struct BleuReport {
  std::array<double, 4> bleu{0, 0, 0, 0};        // geometric means up to n
  std::array<double, 4> precisions{0, 0, 0, 0};  // modified n-gram precisions
  std::size_t candidate_count = 0;
  std::size_t reference_count = 0;
};

// Corpus-level BLEU-1..max_n without a brevity penalty: clipped (modified)
// n-gram precision pooled over the corpus, geometric mean over orders. A zero
// precision at any order zeroes that and every higher order.
template <class Tok>
BleuReport bleu(const std::vector<std::vector<Tok>>& candidates,
                const std::vector<std::vector<std::vector<Tok>>>& reference_sets,
                int max_n = 4) {
  check(!candidates.empty(), "bleu: empty candidate list");
  check(candidates.size() == reference_sets.size(),
        "bleu: candidate and reference-set counts differ");
  check(max_n >= 1 && max_n <= 4, "bleu: max_n must be in 1..4");
  for (const auto& refs : reference_sets)
    check(!refs.empty(), "bleu: a candidate has no references");

  BleuReport report;
  report.candidate_count = candidates.size();
  for (const auto& refs : reference_sets) report.reference_count += refs.size();

  using Ngram = std::vector<Tok>;
  for (int n = 1; n <= max_n; ++n) {
    std::size_t matched = 0, total = 0;
    for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
      const auto& cand = candidates[ci];
      if (cand.size() < static_cast<std::size_t>(n)) continue;
      std::map<Ngram, std::size_t> cand_counts;
      for (std::size_t i = 0; i + n <= cand.size(); ++i)
        ++cand_counts[Ngram(cand.begin() + i, cand.begin() + i + n)];

      std::map<Ngram, std::size_t> ref_max;
      for (const auto& ref : reference_sets[ci]) {
        std::map<Ngram, std::size_t> counts;
        for (std::size_t i = 0; i + n <= ref.size(); ++i)
          ++counts[Ngram(ref.begin() + i, ref.begin() + i + n)];
        for (const auto& [ng, c] : counts) ref_max[ng] = std::max(ref_max[ng], c);
      }

      for (const auto& [ng, c] : cand_counts) {
        auto it = ref_max.find(ng);
        matched += std::min(c, it == ref_max.end() ? std::size_t{0} : it->second);
      }
      total += cand.size() - static_cast<std::size_t>(n) + 1;
    }
    report.precisions[n - 1] =
        total > 0 ? static_cast<double>(matched) / static_cast<double>(total) : 0.0;
  }

  for (int n = 1; n <= max_n; ++n) {
    double logsum = 0.0;
    bool zero = false;
    for (int k = 1; k <= n; ++k) {
      if (report.precisions[k - 1] <= 0.0) {
        zero = true;
        break;
      }
      logsum += std::log(report.precisions[k - 1]);
    }
    report.bleu[n - 1] = zero ? 0.0 : std::exp(logsum / n);
  }
  return report;
}

// --- attention-map rendering --------------------------------------------------

struct Heatmap {
  std::size_t width = 0, height = 0;
  std::vector<double> v;  // row-major intensities in [0,1]
  std::string word;

  double at(std::size_t x, std::size_t y) const { return v[y * width + x]; }
};

inline constexpr std::size_t kUpsampleFactor = 16;

// Truncated 1-D Gaussian, radius ceil(3 sigma), normalized to sum exactly 1.
inline std::vector<double> gaussian_kernel(double sigma) {
  check(sigma > 0.0, "gaussian_kernel: sigma must be positive");
  const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

namespace detail {

// Separable edge-clamped convolution.
inline void blur_inplace(std::vector<double>& img, std::size_t w, std::size_t h,
                         const std::vector<double>& kernel) {
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  std::vector<double> tmp(img.size());
  auto clamp = [](std::ptrdiff_t x, std::ptrdiff_t n) {
    return std::min(std::max(x, std::ptrdiff_t{0}), n - 1);
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k)
        s += kernel[static_cast<std::size_t>(k + radius)] *
             img[y * w + static_cast<std::size_t>(clamp(static_cast<std::ptrdiff_t>(x) + k,
                                                        static_cast<std::ptrdiff_t>(w)))];
      tmp[y * w + x] = s;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k)
        s += kernel[static_cast<std::size_t>(k + radius)] *
             tmp[static_cast<std::size_t>(clamp(static_cast<std::ptrdiff_t>(y) + k,
                                                static_cast<std::ptrdiff_t>(h))) *
                     w +
                 x];
      img[y * w + x] = s;
    }
}

}  // namespace detail

// One heatmap per timestep: alpha reshaped to g x g, nearest-neighbor
// upsampled by 16, Gaussian-filtered, then normalized to [0,1] by its own
// maximum (an all-zero map stays zero).
inline std::vector<Heatmap> render_attention(const AttentionTrace& trace, std::size_t grid_side,
                                             double sigma = 8.0,
                                             const std::vector<std::string>* words = nullptr) {
  const std::size_t g = grid_side;
  const std::vector<double> kernel = gaussian_kernel(sigma);
  std::vector<Heatmap> out;
  out.reserve(trace.length());
  for (std::size_t t = 0; t < trace.length(); ++t) {
    const Tensor& alpha = trace.per_step[t];
    check_shape(alpha.size() == g * g,
                "render_attention: weight count is not a square grid of side " +
                    std::to_string(g));
    Heatmap hm;
    hm.width = hm.height = g * kUpsampleFactor;
    hm.v.assign(hm.width * hm.height, 0.0);
    if (words && t < words->size()) hm.word = (*words)[t];

    for (std::size_t y = 0; y < hm.height; ++y)
      for (std::size_t x = 0; x < hm.width; ++x)
        hm.v[y * hm.width + x] =
            alpha.data[(y / kUpsampleFactor) * g + (x / kUpsampleFactor)];

    detail::blur_inplace(hm.v, hm.width, hm.height, kernel);

    double mx = 0.0;
    for (double v : hm.v) mx = std::max(mx, v);
    if (mx > 0.0)
      for (auto& v : hm.v) v /= mx;
    out.push_back(std::move(hm));
  }
  return out;
}

// --- alignment quality ----------------------------------------------------

// Mean attention mass placed on the ground-truth cell over aligned content
// words; the trace is expected to follow the record's caption (teacher-forced
// or a matching decode). Returns nothing when no aligned word is covered.
inline std::optional<double> alignment_score(
    const AttentionTrace& trace,
    std::span<const std::pair<std::uint16_t, std::uint16_t>> alignment) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& [pos, cell] : alignment) {
    if (pos >= trace.length()) continue;
    const Tensor& alpha = trace.per_step[pos];
    check_shape(cell < alpha.size(), "alignment_score: cell index out of range");
    sum += alpha.data[cell];
    ++count;
  }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

// --- image export ---------------------------------------------------------

inline void write_pgm(const Heatmap& hm, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open '" + path.string() + "' for writing");
  out << "P5\n" << hm.width << " " << hm.height << "\n255\n";
  for (double v : hm.v) {
    const double clamped = std::min(std::max(v, 0.0), 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
  }
  if (!out) throw io_error("short write to '" + path.string() + "'");
}

inline Heatmap read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path.string() + "' for reading");
  std::string magic;
  in >> magic;
  if (magic != "P5") throw bad_magic_error("not a P5 graymap: " + path.string());
  std::size_t w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || maxval != 255) throw io_error("unsupported P5 header in " + path.string());
  in.get();  // single whitespace after header
  Heatmap hm;
  hm.width = w;
  hm.height = h;
  hm.v.resize(w * h);
  for (auto& v : hm.v) {
    const int c = in.get();
    if (c == EOF) throw truncated_error("truncated P5 data in " + path.string());
    v = static_cast<double>(c) / 255.0;
  }
  return hm;
}

// Writes one 8-bit P5 graymap per heatmap plus a tab-separated manifest of
// (decode step, word, filename). `base`, when given, is alpha-blended 50/50
// under each map. Returns the manifest path.
inline std::filesystem::path export_heatmaps(std::span<const Heatmap> heatmaps,
                                             const Heatmap* base,
                                             const std::filesystem::path& dir,
                                             const std::string& stem) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path manifest_path = dir / (stem + "_manifest.tsv");
  std::ofstream manifest(manifest_path, std::ios::trunc);
  if (!manifest) throw io_error("cannot open '" + manifest_path.string() + "' for writing");

  for (std::size_t t = 0; t < heatmaps.size(); ++t) {
    const Heatmap& hm = heatmaps[t];
    Heatmap blended = hm;
    if (base) {
      check_shape(base->width == hm.width && base->height == hm.height,
                  "export_heatmaps: base image dimensions differ");
      for (std::size_t i = 0; i < blended.v.size(); ++i)
        blended.v[i] = 0.5 * base->v[i] + 0.5 * hm.v[i];
    }
    std::string fname = stem + "_t" + std::to_string(t);
    if (!hm.word.empty()) {
      fname += "_";
      for (char c : hm.word)  // keep filenames portable
        fname += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
    }
    fname += ".pgm";
    write_pgm(blended, dir / fname);
    manifest << t << '\t' << hm.word << '\t' << fname << '\n';
  }
  if (!manifest) throw io_error("short write to '" + manifest_path.string() + "'");
  return manifest_path;
}

// Spec-agnostic scene backdrop for blending: per-cell feature norms upsampled
// to heatmap resolution and normalized.
inline Heatmap feature_norm_raster(const Tensor& grid, std::size_t grid_side) {
  check_shape(grid.rank() == 2 && grid.rows() == grid_side * grid_side,
              "feature_norm_raster: grid is not square");
  Heatmap hm;
  hm.width = hm.height = grid_side * kUpsampleFactor;
  hm.v.assign(hm.width * hm.height, 0.0);
  std::vector<double> norms(grid.rows());
  double mx = 0.0;
  for (std::size_t i = 0; i < grid.rows(); ++i) {
    double s = 0.0;
    for (std::size_t d = 0; d < grid.cols(); ++d) s += grid.at(i, d) * grid.at(i, d);
    norms[i] = std::sqrt(s);
    mx = std::max(mx, norms[i]);
  }
  for (std::size_t y = 0; y < hm.height; ++y)
    for (std::size_t x = 0; x < hm.width; ++x)
      hm.v[y * hm.width + x] =
          mx > 0 ? norms[(y / kUpsampleFactor) * grid_side + (x / kUpsampleFactor)] / mx : 0.0;
  return hm;
}

}  // namespace attn
