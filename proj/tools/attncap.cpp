// attncap: synthetic scene-caption generator, attention decoder training
// (soft and hard), caption decoding with attention-map export, BLEU and
// alignment evaluation, and the numerical verification suites.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "attn/checkpoint.hpp"
#include "attn/data.hpp"
#include "attn/evalviz.hpp"
#include "attn/training.hpp"
#include "attn/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

attn::AttMode parse_mode(const std::string& mode) {
  if (mode == "soft") return attn::AttMode::Soft;
  if (mode == "hard") return attn::AttMode::Hard;
  throw CLI::ValidationError("--mode", "must be 'soft' or 'hard'");
}

std::vector<std::size_t> split_range(const attn::SplitIndices& si, const std::string& name) {
  std::size_t begin = 0, end = 0;
  if (name == "train") {
    begin = si.train_begin;
    end = si.train_end;
  } else if (name == "val") {
    begin = si.val_begin;
    end = si.val_end;
  } else if (name == "test") {
    begin = si.test_begin;
    end = si.test_end;
  } else {
    begin = 0;
    end = si.test_end;  // "all"
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
  return idx;
}

void validate_captions(const attn::Dataset& ds) {
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    attn::CaptionSequence c{ds.records[i].caption};
    try {
      c.validate(attn::Vocabulary::kEos, ds.K);
    } catch (const attn::error& e) {
      throw attn::io_error("dataset record " + std::to_string(i) + ": " + e.what());
    }
  }
}

// --- gen-data ----------------------------------------------------------------

struct GenDataArgs {
  std::string out;
  std::size_t count = 5000;
  std::uint64_t seed = 0;
  std::size_t grid_side = 4;
  std::string colors, shapes;
  std::size_t objects_min = 1, objects_max = 3;
  double noise = 0.05;
};

int cmd_gen_data(const GenDataArgs& a) {
  attn::SceneSpec spec;
  spec.grid_side = a.grid_side;
  if (!a.colors.empty()) spec.colors = split_csv(a.colors);
  if (!a.shapes.empty()) spec.shapes = split_csv(a.shapes);
  spec.objects_min = a.objects_min;
  spec.objects_max = a.objects_max;
  spec.noise_sigma = a.noise;
  spec.validate();

  attn::Vocabulary vocab = attn::Vocabulary::build(spec);
  attn::Dataset ds = attn::build_dataset(spec, a.count, a.seed, vocab);
  attn::write_annotations(ds, a.out);
  attn::write_vocab(vocab, a.out + ".vocab");

  std::map<std::size_t, std::size_t> hist;
  for (const auto& rec : ds.records) ++hist[rec.caption.size()];
  std::cout << "wrote " << ds.records.size() << " records to " << a.out << " (L=" << ds.L
            << " D=" << ds.D << " K=" << ds.K << ")\n";
  std::cout << "vocabulary sidecar: " << a.out << ".vocab\n";
  std::cout << "caption length histogram (terminal token included):\n";
  for (const auto& [len, count] : hist) std::cout << "  len " << len << ": " << count << "\n";
  const attn::SplitIndices si = attn::split_indices(ds.records.size());
  std::cout << "split by index: train " << si.train_end - si.train_begin << ", val "
            << si.val_end - si.val_begin << ", test " << si.test_end - si.test_begin << "\n";
  return kExitOk;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string data, out, config;
  std::uint64_t seed = 0;
  std::string mode;  // empty: from config or default soft
  long long m = -1, n = -1, attn_dim = -1;
  std::string optimizer;  // rmsprop | adam
  double lr = -1.0;
  long long batch = -1, epochs = -1, patience = -1;
  double lambda_penalty = -1.0, lambda_r = -1.0, lambda_e = -1.0;
  double dropout = -1.0, clip = -1.0;
  long long samples = -1;
  double subst_prob = -1.0, baseline_decay = -1.0;
  long long max_gen_len = -1;
};

json effective_train_config(const TrainArgs& a) {
  // Precedence: built-in defaults < config file < flags.
  json cfg = {{"mode", "soft"},
              {"m", 32},
              {"n", 32},
              {"attn_dim", 0},  // 0: use n
              {"optimizer", "adam"},
              {"lr", 4e-3},
              {"batch_size", 64},
              {"epochs", 80},
              {"patience", 15},
              {"lambda_penalty", 0.5},
              {"lambda_r", 1.0},
              {"lambda_e", 0.01},
              {"dropout", 0.5},
              {"clip_norm", 5.0},
              {"samples", 1},
              {"substitution_prob", 0.5},
              {"baseline_decay", 0.9},
              {"max_gen_len", 16}};
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw attn::io_error("cannot open config file '" + a.config + "'");
    json file_cfg = json::parse(in, nullptr, true, true);
    for (auto& [key, value] : file_cfg.items()) {
      if (!cfg.contains(key)) throw attn::io_error("unknown config key '" + key + "'");
      cfg[key] = value;
    }
  }
  if (!a.mode.empty()) cfg["mode"] = a.mode;
  if (a.m >= 0) cfg["m"] = a.m;
  if (a.n >= 0) cfg["n"] = a.n;
  if (a.attn_dim >= 0) cfg["attn_dim"] = a.attn_dim;
  if (!a.optimizer.empty()) cfg["optimizer"] = a.optimizer;
  if (a.lr >= 0) cfg["lr"] = a.lr;
  if (a.batch >= 0) cfg["batch_size"] = a.batch;
  if (a.epochs >= 0) cfg["epochs"] = a.epochs;
  if (a.patience >= 0) cfg["patience"] = a.patience;
  if (a.lambda_penalty >= 0) cfg["lambda_penalty"] = a.lambda_penalty;
  if (a.lambda_r >= 0) cfg["lambda_r"] = a.lambda_r;
  if (a.lambda_e >= 0) cfg["lambda_e"] = a.lambda_e;
  if (a.dropout >= 0) cfg["dropout"] = a.dropout;
  if (a.clip >= 0) cfg["clip_norm"] = a.clip;
  if (a.samples >= 0) cfg["samples"] = a.samples;
  if (a.subst_prob >= 0) cfg["substitution_prob"] = a.subst_prob;
  if (a.baseline_decay >= 0) cfg["baseline_decay"] = a.baseline_decay;
  if (a.max_gen_len >= 0) cfg["max_gen_len"] = a.max_gen_len;
  cfg["seed"] = a.seed;
  cfg["data"] = a.data;
  return cfg;
}

int cmd_train(const TrainArgs& a) {
  const json cfg = effective_train_config(a);
  attn::Dataset ds = attn::read_annotations(a.data);
  attn::check(!ds.records.empty(), "dataset is empty");
  validate_captions(ds);

  const attn::SplitIndices si = attn::split_indices(ds.records.size());
  std::vector<std::size_t> train_idx = split_range(si, "train");
  std::vector<std::size_t> val_idx = split_range(si, "val");
  attn::check(!train_idx.empty() && !val_idx.empty(),
              "dataset too small for an 80/10/10 split");

  attn::ModelDims dims;
  dims.K = ds.K;
  dims.D = ds.D;
  dims.m = cfg["m"].get<std::size_t>();
  dims.n = cfg["n"].get<std::size_t>();
  dims.A = cfg["attn_dim"].get<std::size_t>();
  if (dims.A == 0) dims.A = dims.n;

  attn::TrainConfig tc;
  tc.mode = parse_mode(cfg["mode"].get<std::string>());
  tc.soft.lambda_penalty = cfg["lambda_penalty"].get<double>();
  tc.soft.dropout_rate = cfg["dropout"].get<double>();
  tc.hard.lambda_r = cfg["lambda_r"].get<double>();
  tc.hard.lambda_e = cfg["lambda_e"].get<double>();
  tc.hard.sample_count = cfg["samples"].get<std::size_t>();
  tc.hard.expectation_substitution_prob = cfg["substitution_prob"].get<double>();
  tc.hard.baseline_decay = cfg["baseline_decay"].get<double>();
  tc.hard.dropout_rate = cfg["dropout"].get<double>();
  const std::string alg = cfg["optimizer"].get<std::string>();
  if (alg != "rmsprop" && alg != "adam")
    throw CLI::ValidationError("--optimizer", "must be 'rmsprop' or 'adam'");
  tc.opt.alg = alg == "adam" ? attn::OptAlg::Adam : attn::OptAlg::RmsProp;
  tc.opt.lr = cfg["lr"].get<double>();
  tc.batch_size = cfg["batch_size"].get<std::size_t>();
  tc.max_epochs = cfg["epochs"].get<std::size_t>();
  tc.patience = cfg["patience"].get<std::size_t>();
  tc.clip_norm = cfg["clip_norm"].get<double>();
  tc.max_gen_len = cfg["max_gen_len"].get<std::size_t>();
  tc.seed = a.seed;

  fs::create_directories(a.out);
  {
    std::ofstream echo(fs::path(a.out) / "effective_config.json");
    echo << cfg.dump(2) << "\n";
  }

  attn::Rng init_rng(attn::Rng(a.seed).split(0xd1ce).seed());
  attn::DecoderParams params = attn::DecoderParams::init(dims, init_rng);

  std::ofstream metrics(fs::path(a.out) / "metrics.log", std::ios::trunc);
  if (!metrics) throw attn::io_error("cannot open metrics log for writing");
  std::cout << "training " << cfg["mode"].get<std::string>() << " model: K=" << dims.K
            << " m=" << dims.m << " n=" << dims.n << " D=" << dims.D << " A=" << dims.A
            << ", " << train_idx.size() << " train / " << val_idx.size() << " val records\n";

  attn::TrainResult result = attn::train(ds, train_idx, val_idx, params, tc, &metrics);

  const fs::path ckpt = fs::path(a.out) / "checkpoint.bin";
  attn::save_checkpoint(result.best_params, tc.mode, ckpt);
  std::cout << "best epoch " << result.best_epoch << ": bleu1=" << result.best_bleu[0]
            << " bleu2=" << result.best_bleu[1] << " bleu3=" << result.best_bleu[2]
            << " bleu4=" << result.best_bleu[3] << "\n";
  std::cout << "checkpoint: " << ckpt.string() << "\n";
  std::cout << "metrics log: " << (fs::path(a.out) / "metrics.log").string() << "\n";
  return kExitOk;
}

// --- caption -----------------------------------------------------------------

struct CaptionArgs {
  std::string checkpoint, data, out;
  std::uint64_t seed = 0;
  std::string mode;  // default: checkpoint's training mode
  std::string strategy = "greedy";
  std::size_t width = 3;
  double temperature = 1.0;
  std::string split = "test";
  std::size_t max_len = 16;
  bool sample_attention = false;
  bool viz = false;
  std::size_t viz_limit = 8;
  double viz_sigma = 8.0;
};

int cmd_caption(const CaptionArgs& a) {
  attn::Checkpoint ck = attn::load_checkpoint(a.checkpoint);
  attn::Dataset ds = attn::read_annotations(a.data);
  if (ck.params.dims.K != ds.K || ck.params.dims.D != ds.D)
    throw attn::io_error("checkpoint/dataset mismatch: checkpoint expects K=" +
                         std::to_string(ck.params.dims.K) + ", D=" +
                         std::to_string(ck.params.dims.D) + " but dataset has K=" +
                         std::to_string(ds.K) + ", D=" + std::to_string(ds.D));

  std::optional<attn::Vocabulary> vocab;
  if (fs::exists(a.data + ".vocab")) vocab = attn::read_vocab(a.data + ".vocab");

  attn::GenerateOptions opt;
  opt.mode = a.mode.empty() ? ck.train_mode : parse_mode(a.mode);
  opt.max_len = a.max_len;
  opt.sample_attention = a.sample_attention;
  if (a.strategy == "greedy") {
    opt.strategy.kind = attn::GenStrategy::Greedy;
  } else if (a.strategy == "beam") {
    opt.strategy.kind = attn::GenStrategy::Beam;
    opt.strategy.width = a.width;
  } else if (a.strategy == "sample") {
    opt.strategy.kind = attn::GenStrategy::Sample;
    opt.strategy.temperature = a.temperature;
  } else {
    throw CLI::ValidationError("--strategy", "must be greedy, beam or sample");
  }

  fs::create_directories(a.out);
  std::ofstream captions(fs::path(a.out) / "captions.tsv", std::ios::trunc);
  if (!captions) throw attn::io_error("cannot open captions.tsv for writing");

  const attn::SplitIndices si = attn::split_indices(ds.records.size());
  const std::vector<std::size_t> indices = split_range(si, a.split);
  attn::check(!indices.empty(), "selected split is empty");

  const auto grid_side = static_cast<std::size_t>(std::lround(std::sqrt(ds.L)));
  const bool square = grid_side * grid_side == ds.L;
  attn::Rng root(a.seed);
  std::size_t rendered = 0;
  for (std::size_t idx : indices) {
    const attn::DataRecord& rec = ds.records[idx];
    attn::Rng gen_rng = root.split(idx);
    attn::Generated gen =
        attn::generate(attn::AnnotationGrid{attn::Tensor(rec.grid)}, ck.params, opt, gen_rng);

    std::vector<std::string> words;
    std::ostringstream line;
    line << idx << '\t';
    for (std::size_t t = 0; t < gen.caption.tokens.size(); ++t) {
      const std::uint32_t tok = gen.caption.tokens[t];
      const std::string w = vocab ? vocab->word(tok) : std::to_string(tok);
      words.push_back(w);
      line << (t ? " " : "") << w;
    }
    captions << line.str() << "\n";

    if (a.viz && rendered < a.viz_limit) {
      attn::check(square, "--viz needs a square location grid");
      auto maps = attn::render_attention(gen.trace, grid_side, a.viz_sigma, &words);
      attn::Heatmap base = attn::feature_norm_raster(rec.grid, grid_side);
      attn::export_heatmaps(maps, &base, fs::path(a.out) / "viz",
                            "record" + std::to_string(idx));
      ++rendered;
    }
  }
  std::cout << "wrote " << indices.size() << " captions to "
            << (fs::path(a.out) / "captions.tsv").string() << "\n";
  if (a.viz) std::cout << "rendered attention maps for " << rendered << " records\n";
  return kExitOk;
}

// --- evaluate ------------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint, data;
  std::uint64_t seed = 0;
  std::string split = "test";
  std::string mode;
  std::size_t max_len = 16;
};

int cmd_evaluate(const EvaluateArgs& a) {
  attn::Checkpoint ck = attn::load_checkpoint(a.checkpoint);
  attn::Dataset ds = attn::read_annotations(a.data);
  if (ck.params.dims.K != ds.K || ck.params.dims.D != ds.D)
    throw attn::io_error("checkpoint/dataset mismatch (K or D differ)");
  validate_captions(ds);

  const attn::AttMode mode = a.mode.empty() ? ck.train_mode : parse_mode(a.mode);
  const attn::SplitIndices si = attn::split_indices(ds.records.size());
  const std::vector<std::size_t> indices = split_range(si, a.split);
  attn::check(!indices.empty(), "selected split is empty");

  const auto bleu_scores = attn::validation_bleu(ds, indices, ck.params, mode,
                                                 attn::Vocabulary::kBos, attn::Vocabulary::kEos,
                                                 a.max_len);

  // Alignment quality from teacher-forced traces against the stored ground truth.
  double align_sum = 0.0;
  std::size_t align_count = 0;
  attn::Rng root(a.seed);
  for (std::size_t idx : indices) {
    const attn::DataRecord& rec = ds.records[idx];
    if (rec.alignment.empty()) continue;
    attn::ForcedOptions fo;
    fo.mode = mode;
    attn::Rng step_rng = root.split(idx);
    fo.rng = &step_rng;
    attn::ForcedResult f =
        attn::teacher_forced(attn::AnnotationGrid{attn::Tensor(rec.grid)},
                             attn::CaptionSequence{rec.caption}, ck.params,
                             attn::Vocabulary::kBos, fo);
    if (auto s = attn::alignment_score(f.trace, rec.alignment)) {
      align_sum += *s;
      ++align_count;
    }
  }

  std::cout << "split=" << a.split << " records=" << indices.size()
            << " mode=" << (mode == attn::AttMode::Soft ? "soft" : "hard") << "\n";
  std::cout << "bleu1=" << bleu_scores[0] << " bleu2=" << bleu_scores[1]
            << " bleu3=" << bleu_scores[2] << " bleu4=" << bleu_scores[3] << "\n";
  if (align_count > 0) {
    std::cout << "alignment=" << align_sum / static_cast<double>(align_count)
              << " uniform_baseline=" << 1.0 / static_cast<double>(ds.L) << " (over "
              << align_count << " records)\n";
  } else {
    std::cout << "alignment=absent (no ground-truth alignments in this split)\n";
  }
  return kExitOk;
}

// --- verify --------------------------------------------------------------------

int cmd_verify(const std::string& level, std::uint64_t seed, bool inject_bug) {
  if (level != "fast" && level != "full")
    throw CLI::ValidationError("--level", "must be 'fast' or 'full'");
  attn::VerifyOptions opt;
  opt.seed = seed;
  opt.full = level == "full";
  opt.inject_gradient_bug = inject_bug;
  attn::VerifyReport report = attn::run_verification(opt);
  for (const auto& c : report.checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << " (" << c.detail << ") ["
              << static_cast<long>(c.ms) << " ms]\n";
  }
  std::cout << (report.all_pass() ? "all checks passed" : "VERIFICATION FAILED") << " ("
            << report.checks.size() << " checks, level " << level << ")\n";
  return report.all_pass() ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention caption decoder: synthetic data, training, decoding, evaluation"};
  app.require_subcommand(1);

  GenDataArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic scene-caption dataset");
  gen->add_option("--out", gen_args.out, "output dataset path")->required();
  gen->add_option("--count", gen_args.count, "number of scenes");
  gen->add_option("--seed", gen_args.seed, "random seed")->required();
  gen->add_option("--grid-side", gen_args.grid_side, "grid side length g (L = g*g)");
  gen->add_option("--colors", gen_args.colors, "comma-separated color words");
  gen->add_option("--shapes", gen_args.shapes, "comma-separated shape words");
  gen->add_option("--objects-min", gen_args.objects_min, "minimum objects per scene");
  gen->add_option("--objects-max", gen_args.objects_max, "maximum objects per scene");
  gen->add_option("--noise", gen_args.noise, "feature noise sigma");

  TrainArgs train_args;
  CLI::App* tr = app.add_subcommand("train", "train a caption decoder");
  tr->add_option("--data", train_args.data, "dataset path")->required();
  tr->add_option("--out", train_args.out, "output directory")->required();
  tr->add_option("--seed", train_args.seed, "random seed")->required();
  tr->add_option("--config", train_args.config, "JSON config file (flags override it)");
  tr->add_option("--mode", train_args.mode, "soft | hard");
  tr->add_option("--embed-dim", train_args.m, "embedding size m");
  tr->add_option("--hidden-dim", train_args.n, "LSTM size n");
  tr->add_option("--attn-dim", train_args.attn_dim, "attention MLP size A (0: use n)");
  tr->add_option("--optimizer", train_args.optimizer, "rmsprop | adam");
  tr->add_option("--lr", train_args.lr, "learning rate");
  tr->add_option("--batch", train_args.batch, "mini-batch size");
  tr->add_option("--epochs", train_args.epochs, "maximum epochs");
  tr->add_option("--patience", train_args.patience, "early-stopping patience on BLEU-4");
  tr->add_option("--lambda-penalty", train_args.lambda_penalty,
                 "doubly stochastic penalty weight (soft)");
  tr->add_option("--lambda-r", train_args.lambda_r, "reward scale (hard)");
  tr->add_option("--lambda-e", train_args.lambda_e, "entropy bonus scale (hard)");
  tr->add_option("--dropout", train_args.dropout, "dropout rate on h before the output");
  tr->add_option("--clip-norm", train_args.clip, "global gradient-norm clip");
  tr->add_option("--samples", train_args.samples, "Monte Carlo samples per caption (hard)");
  tr->add_option("--substitution-prob", train_args.subst_prob,
                 "expected-context substitution probability (hard)");
  tr->add_option("--baseline-decay", train_args.baseline_decay, "baseline decay (hard)");
  tr->add_option("--max-gen-len", train_args.max_gen_len, "decode length cap for validation");

  CaptionArgs cap_args;
  CLI::App* cap = app.add_subcommand("caption", "decode captions from a checkpoint");
  cap->add_option("--checkpoint", cap_args.checkpoint, "checkpoint path")->required();
  cap->add_option("--data", cap_args.data, "dataset path")->required();
  cap->add_option("--out", cap_args.out, "output directory")->required();
  cap->add_option("--seed", cap_args.seed, "random seed")->required();
  cap->add_option("--mode", cap_args.mode, "soft | hard (default: checkpoint's mode)");
  cap->add_option("--strategy", cap_args.strategy, "greedy | beam | sample");
  cap->add_option("--width", cap_args.width, "beam width");
  cap->add_option("--temperature", cap_args.temperature, "sampling temperature");
  cap->add_option("--split", cap_args.split, "train | val | test | all");
  cap->add_option("--max-len", cap_args.max_len, "maximum caption length");
  cap->add_flag("--sample-attention", cap_args.sample_attention,
                "hard mode: sample the location instead of argmax");
  cap->add_flag("--viz", cap_args.viz, "export attention heatmaps");
  cap->add_option("--viz-limit", cap_args.viz_limit, "max records to render");
  cap->add_option("--viz-sigma", cap_args.viz_sigma, "Gaussian filter sigma in pixels");

  EvaluateArgs eval_args;
  CLI::App* ev = app.add_subcommand("evaluate", "BLEU and alignment on a split");
  ev->add_option("--checkpoint", eval_args.checkpoint, "checkpoint path")->required();
  ev->add_option("--data", eval_args.data, "dataset path")->required();
  ev->add_option("--seed", eval_args.seed, "random seed")->required();
  ev->add_option("--split", eval_args.split, "train | val | test | all");
  ev->add_option("--mode", eval_args.mode, "soft | hard (default: checkpoint's mode)");
  ev->add_option("--max-len", eval_args.max_len, "maximum caption length");

  std::string verify_level = "fast";
  std::uint64_t verify_seed = 0;
  bool inject_bug = false;
  CLI::App* vf = app.add_subcommand("verify", "run the numerical verification suites");
  vf->add_option("--level", verify_level, "fast | full");
  vf->add_option("--seed", verify_seed, "random seed")->required();
  vf->add_flag("--inject-grad-bug", inject_bug,
               "corrupt one gradient to prove the harness catches it")
      ->group("");  // hidden test hook

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (tr->parsed()) return cmd_train(train_args);
    if (cap->parsed()) return cmd_caption(cap_args);
    if (ev->parsed()) return cmd_evaluate(eval_args);
    if (vf->parsed()) return cmd_verify(verify_level, verify_seed, inject_bug);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const attn::numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const attn::io_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const attn::error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
