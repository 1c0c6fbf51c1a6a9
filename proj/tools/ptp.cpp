// ptp: command-line front end for rendering, pre-training, fine-tuning and
// evaluation of screenshot language models.
#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ptp/arscreen.hpp"
#include "ptp/checkpoint.hpp"
#include "ptp/patchwork.hpp"
#include "ptp/png_io.hpp"
#include "ptp/ptp_model.hpp"
#include "ptp/screenrender.hpp"
#include "ptp/tasks.hpp"
#include "ptp/textcodec.hpp"
#include "ptp/trainer.hpp"

namespace fs = std::filesystem;
using namespace ptp;

namespace {

GlyphAtlas atlas_from(const std::string& path) { return path.empty() ? builtin_test_atlas() : load_atlas(path); }

std::string vocab_path_for(const std::string& explicit_path, const std::string& ckpt) {
  if (!explicit_path.empty()) return explicit_path;
  return (fs::path(ckpt).parent_path() / "vocab.txt").string();
}

std::string checkpoint_magic(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  char m[4] = {};
  if (!in.read(m, 4)) throw Error("cannot read checkpoint " + path);
  return std::string(m, 4);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw Error("cannot write " + path);
}

/// Config file (if any), then --set key=value overrides, then explicit flags.
TrainConfig merged_config(const std::string& config_path, const std::vector<std::string>& sets) {
  TrainConfig cfg;
  try {
    if (!config_path.empty()) cfg.apply(parse_kv_config(read_text_file(config_path)));
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw Error("--set expects key=value, got '" + s + "'");
      cfg.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
  } catch (const Error& e) {
    throw CLI::ValidationError("config", e.what());
  }
  return cfg;
}

struct Options {
  std::string text, infile, atlas, out, corpus, config, vocab, ckpt, init, train, valid, spec, grid, mode = "encoder_only";
  std::string context = "all";
  std::vector<std::string> sets;
  int patches = 0;
  int steps = -1;
  int ckpt_every = -1;
  int vocab_size = 512;
  std::optional<std::uint64_t> seed;
  bool no_eos = false;
  std::optional<std::string> prefix;
  double lr = 1e-3;
  int batch = 16;
  std::int64_t chars = 1000000;
};

int cmd_render(const Options& o) {
  if (o.text.empty() == o.infile.empty()) throw CLI::ValidationError("render", "give exactly one of --text or --infile");
  RenderConfig cfg;
  if (o.patches > 0) cfg.max_patches = o.patches;
  if (o.prefix) cfg.prefix = *o.prefix;
  cfg.eos_black_patch = !o.no_eos;
  const auto text = o.text.empty() ? read_text_file(o.infile) : o.text;
  const auto shot = render_line(text, atlas_from(o.atlas), cfg);
  save_png(shot, o.out);
  std::cout << "patches_used=" << measure_fit(text, atlas_from(o.atlas), cfg) << "\n"
            << "truncated=" << (shot.truncated ? "true" : "false") << "\n";
  return 0;
}

int cmd_train_vocab(const Options& o) {
  const auto vocab = train_bpe(load_corpus(o.corpus), static_cast<std::size_t>(o.vocab_size));
  save_vocab(vocab, o.out);
  std::cout << "vocab_size=" << vocab.size() << "\n";
  return 0;
}

int cmd_pretrain(const Options& o, const std::string& model) {
  auto cfg = merged_config(o.config, o.sets);
  cfg.model = model;
  if (model == "ar" && cfg.preset.rfind("ar-", 0) != 0) cfg.preset = "ar-tiny";
  if (o.steps >= 0) cfg.steps = o.steps;
  if (o.ckpt_every >= 0) cfg.ckpt_every = o.ckpt_every;
  if (o.seed) cfg.seed = *o.seed;
  const auto corpus = load_corpus(o.corpus);
  fs::create_directories(o.out);
  const Vocab vocab = o.vocab.empty() ? train_bpe(corpus, static_cast<std::size_t>(cfg.effective_vocab_size()))
                                      : load_vocab(o.vocab);
  save_vocab(vocab, (fs::path(o.out) / "vocab.txt").string());
  write_text((fs::path(o.out) / "config.txt").string(), cfg.dump());
  std::optional<Checkpoint> init;
  if (!o.init.empty()) init = load_checkpoint(o.init, model == "ar" ? "PTPA" : "PTPC");
  PretrainIO io;
  io.out_dir = o.out;
  io.progress = &std::cout;
  const auto res = run_pretraining(corpus, cfg, vocab, atlas_from(o.atlas), io, init ? &*init : nullptr);
  if (res.aborted) {
    std::cerr << "training aborted after " << cfg.abort_after << " consecutive non-finite losses; diagnostic checkpoint: "
              << res.diagnostic_checkpoint << "\n";
    return 1;
  }
  std::cout << "checkpoint=" << (fs::path(o.out) / "final.ckpt").string() << "\n";
  return 0;
}

TaskSpec task_spec_from(const std::string& path) {
  if (path.empty()) {
    TaskSpec t;
    t.label_texts = {"good", "bad"};
    return t;
  }
  return TaskSpec::parse(read_text_file(path));
}

int cmd_finetune(const Options& o) {
  if (o.train.empty()) throw CLI::ValidationError("finetune", "--train (or --task) is required");
  const auto spec = task_spec_from(o.spec);
  const GridSpec grid = o.grid.empty() ? GridSpec{} : GridSpec::parse(read_text_file(o.grid));
  const auto base = load_checkpoint(o.ckpt, "PTPC");
  const auto vocab = load_vocab(vocab_path_for(o.vocab, o.ckpt));
  const auto train = parse_task_tsv(read_text_file(o.train), spec.pair_task);
  const auto valid = parse_task_tsv(read_text_file(o.valid), spec.pair_task);
  const auto res = run_grid(train, valid, spec, grid, base, parse_mode(o.mode), atlas_from(o.atlas), vocab,
                            RenderConfig{}, &std::cerr);
  const auto table = format_grid_tsv(res);
  if (!o.out.empty()) write_text(o.out, table);
  std::cout << table;
  const auto& best = res.cells[res.best_cell];
  std::cout << "best_cell\tlr=" << best.lr << "\tbatch=" << best.batch << "\tsteps=" << best.steps
            << "\tmean_score=" << best.mean_score << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const auto spec = task_spec_from(o.spec);
  const auto base = load_checkpoint(o.ckpt, "PTPC");
  const auto vocab = load_vocab(vocab_path_for(o.vocab, o.ckpt));
  const auto train = o.train.empty() ? std::vector<TaskExample>{} : parse_task_tsv(read_text_file(o.train), spec.pair_task);
  const auto valid = parse_task_tsv(read_text_file(o.valid), spec.pair_task);
  FinetuneOptions opt;
  opt.mode = parse_mode(o.mode);
  opt.lr = o.lr;
  opt.batch = o.batch;
  opt.steps = std::max(o.steps, 0);
  opt.seed = o.seed.value_or(42);
  opt.eval_every = std::max(opt.steps, 1);
  Finetuner ft(base, spec, vocab, opt, RenderConfig{});
  if (opt.steps > 0 && train.empty()) throw CLI::ValidationError("eval", "--steps > 0 needs --train");
  const auto atlas = atlas_from(o.atlas);
  const auto res = ft.run(train.empty() ? valid : train, valid, atlas);
  std::cout << "step\t" << metric_name(spec.metric) << "\n";
  for (const auto& [step, score] : res.curve) std::cout << step << "\t" << score << "\n";
  return 0;
}

int cmd_eval_ppl(const Options& o) {
  const auto ck = load_checkpoint(o.ckpt, "PTPA");
  const auto model = ARModel<float>::from_checkpoint(ck);
  const auto vocab = load_vocab(vocab_path_for(o.vocab, o.ckpt));
  const auto atlas = atlas_from(o.atlas);
  const auto corpus = load_corpus(o.corpus);
  ARDataOptions opt;
  opt.render.prefix.clear();
  opt.render.max_patches = o.patches > 0 ? o.patches : 64;
  opt.render.line_height = model.config().patch_h;
  opt.render.patch_width = model.config().patch_w;
  opt.max_seq = model.config().max_seq;
  opt.channels = model.config().channels;

  const std::vector<std::string> all{"screenshot", "text", "blank", "none"};
  std::vector<std::string> conditions = o.context == "all" ? all : std::vector<std::string>{o.context};
  for (const auto& c : conditions) {
    if (std::find(all.begin(), all.end(), c) == all.end()) {
      throw CLI::ValidationError("--context", "expected screenshot, text, blank, none or all");
    }
  }
  std::cout << "context\tppl\n";
  for (const auto& cond : conditions) {
    double log_sum = 0;
    std::size_t n_tok = 0;
    for (const auto& line : corpus) {
      const auto [shot_text, follow_text] = ar_segments(line);
      const auto eval = encode(follow_text, vocab);
      if (eval.empty()) continue;
      MixedSequence ctx;
      if (cond == "screenshot" || cond == "blank") {
        const auto shot = render_ar_screenshot(shot_text, atlas, opt.render);
        ctx = build_mixed_input(shot, {}, vocab, shot.num_patches(), opt.channels);
        if (cond == "blank") ctx = blank_patches(ctx);
      } else if (cond == "text") {
        TokenSequence t{special_id(Special::kBos)};
        const auto s = encode(shot_text, vocab);
        t.insert(t.end(), s.begin(), s.end());
        ctx = token_sequence(t);
      }
      const double ppl = model.perplexity(ctx, eval);
      log_sum += std::log(ppl) * static_cast<double>(eval.size());
      n_tok += eval.size();
    }
    if (n_tok == 0) throw Error("eval-ppl: corpus has no evaluation tokens");
    std::cout << cond << "\t" << std::exp(log_sum / static_cast<double>(n_tok)) << "\n";
  }
  return 0;
}

/// Copy of `pixels` with the listed patches replaced by `values` (row-major
/// patch vectors, channel 0), clamped to [0, 1].
std::vector<float> paint_patches(std::vector<float> pixels, int width, int ph, int pw, int channels,
                                 const std::vector<int>& patches, const std::vector<std::vector<float>>& values) {
  for (std::size_t k = 0; k < patches.size(); ++k) {
    for (int y = 0; y < ph; ++y) {
      for (int x = 0; x < pw; ++x) {
        const float v = values[k][static_cast<std::size_t>((y * pw + x) * channels)];
        pixels[static_cast<std::size_t>(y) * width + patches[k] * pw + x] = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return pixels;
}

std::vector<float> unstandardize(std::span<const float> pred, std::span<const float> original) {
  const auto m = patch_moments(original);
  std::vector<float> out(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) out[i] = static_cast<float>(pred[i] * m.stddev + m.mean);
  return out;
}

int cmd_inspect(const Options& o) {
  const auto atlas = atlas_from(o.atlas);
  const auto vocab = load_vocab(vocab_path_for(o.vocab, o.ckpt));
  fs::create_directories(o.out);
  Rng rng(o.seed.value_or(42));
  const auto dir = fs::path(o.out);
  if (checkpoint_magic(o.ckpt) == "PTPA") {
    const auto model = ARModel<float>::from_checkpoint(load_checkpoint(o.ckpt, "PTPA"));
    RenderConfig rc;
    rc.max_patches = o.patches > 0 ? o.patches : 64;
    rc.line_height = model.config().patch_h;
    rc.patch_width = model.config().patch_w;
    const auto shot = render_ar_screenshot(o.text, atlas, rc);
    const auto seq = build_mixed_input(shot, {}, vocab, shot.num_patches(), model.config().channels);
    const auto pred = model.forward(seq);
    const double err = static_cast<double>(ARModel<float>::patch_mse(seq, pred).item());
    std::vector<int> patches;
    std::vector<std::vector<float>> values;
    for (std::size_t k = 0; k < pred.patch_positions.size(); ++k) {
      const auto& target = seq.elements[static_cast<std::size_t>(pred.patch_positions[k]) + 1].patch;
      patches.push_back(static_cast<int>(patches.size()));
      values.push_back(unstandardize(pred.patch_predictions.row(static_cast<int>(k)), target));
    }
    save_png(shot, (dir / "input.png").string());
    save_gray_png(shot.height, shot.width, paint_patches(shot.pixels, shot.width, rc.line_height, rc.patch_width,
                                                         model.config().channels, patches, values),
                  (dir / "reconstruction.png").string());
    std::cout << "patch_mse=" << err << "\n";
    return 0;
  }
  const auto model = PTPModel<float>::from_checkpoint(load_checkpoint(o.ckpt, "PTPC"));
  const auto& mc = model.config();
  RenderConfig rc;
  rc.max_patches = mc.max_patches;
  rc.patch_width = mc.patch_w;
  rc.line_height = mc.patch_h;
  MaskConfig mask;
  mask.channels = mc.channels;
  const auto ex = assemble_ptp_example(o.text, atlas, rc, mask, vocab, rng);
  const auto out = model.loss(ex);
  std::vector<std::vector<float>> values;
  for (std::size_t k = 0; k < ex.patch_plan.masked.size(); ++k) {
    values.push_back(unstandardize(out.patch_predictions.row(static_cast<int>(k)),
                                   ex.grid.patch(ex.patch_plan.masked[k])));
  }
  const auto& s = ex.screenshot;
  save_png(s, (dir / "input.png").string());
  save_gray_png(s.height, s.width, overlay_masked(s, ex.patch_plan), (dir / "masked.png").string());
  save_gray_png(s.height, s.width,
                paint_patches(s.pixels, s.width, mc.patch_h, mc.patch_w, mc.channels, ex.patch_plan.masked, values),
                (dir / "reconstruction.png").string());
  std::cout << "masked_patches=" << ex.patch_plan.masked.size() << "\n"
            << "mse_patch=" << out.mse_patch.item() << "\n"
            << "ce_text=" << out.ce_text.item() << "\n";
  return 0;
}

int cmd_config(const Options& o) {
  auto cfg = merged_config(o.config, o.sets);
  std::cout << cfg.dump();
  return 0;
}

int cmd_bench_render(const Options& o) {
  std::vector<std::string> corpus;
  if (!o.corpus.empty()) {
    corpus = load_corpus(o.corpus);
  } else {
    Rng rng(o.seed.value_or(7));
    std::int64_t total = 0;
    while (total < o.chars) {
      std::string line;
      const int len = 40 + static_cast<int>(rng.below(80));
      for (int i = 0; i < len; ++i) line += static_cast<char>(rng.below(6) == 0 ? ' ' : 'a' + rng.below(26));
      total += len;
      corpus.push_back(std::move(line));
    }
  }
  RenderConfig cfg;
  if (o.patches > 0) cfg.max_patches = o.patches;
  const auto r = bench_render(corpus, atlas_from(o.atlas), cfg);
  std::cout << "strings=" << r.strings << "\nchars=" << r.chars << "\npatches=" << r.patches
            << "\nseconds=" << r.seconds << "\nchars_per_sec=" << r.chars_per_sec
            << "\npatches_per_sec=" << r.patches_per_sec << "\n";
  return 0;
}

int cmd_make_atlas(const Options& o) {
  save_atlas(builtin_test_atlas(), o.out);
  std::cout << "wrote " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Screenshot language model toolkit"};
  app.require_subcommand(1);
  Options o;

  const auto seed_opt = [&o](CLI::App* c) {
    c->add_option("--seed", o.seed, "random seed");
  };

  auto* render = app.add_subcommand("render", "render text to a PNG screenshot");
  render->add_option("--text", o.text, "text to render");
  render->add_option("--infile", o.infile, "UTF-8 file to render")->check(CLI::ExistingFile);
  render->add_option("--atlas", o.atlas, "glyph atlas (default: builtin test font)");
  render->add_option("--out", o.out, "output PNG")->required();
  render->add_option("--patches", o.patches, "max patches");
  render->add_option("--prefix", o.prefix, "rendered prefix");
  render->add_flag("--no-eos", o.no_eos, "omit the black end-of-sequence patch");
  seed_opt(render);

  auto* vocab = app.add_subcommand("train-vocab", "train a byte-level BPE vocabulary");
  vocab->add_option("--corpus", o.corpus, "one text per line")->required()->check(CLI::ExistingFile);
  vocab->add_option("--size", o.vocab_size, "target vocabulary size");
  vocab->add_option("--out", o.out, "vocabulary file")->required();

  const auto train_opts = [&](CLI::App* c) {
    c->add_option("--corpus", o.corpus, "one text per line")->required()->check(CLI::ExistingFile);
    c->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
    c->add_option("--set", o.sets, "override a config key (key=value)");
    c->add_option("--steps", o.steps, "optimization steps");
    c->add_option("--ckpt-every", o.ckpt_every, "checkpoint cadence (0: final only)");
    c->add_option("--out", o.out, "output directory")->required();
    c->add_option("--vocab", o.vocab, "vocabulary (default: trained on the corpus)");
    c->add_option("--atlas", o.atlas, "glyph atlas");
    c->add_option("--init", o.init, "checkpoint to continue from");
    seed_opt(c);
  };
  auto* pretrain = app.add_subcommand("pretrain", "pre-train a PTP encoder-decoder");
  train_opts(pretrain);
  auto* ar_pretrain = app.add_subcommand("ar-pretrain", "pre-train the autoregressive mixed-modal model");
  train_opts(ar_pretrain);

  const auto task_opts = [&](CLI::App* c) {
    c->add_option("--ckpt", o.ckpt, "PTP checkpoint")->required()->check(CLI::ExistingFile);
    c->add_option("--vocab", o.vocab, "vocabulary (default: next to the checkpoint)");
    c->add_option("--spec", o.spec, "task spec file (default: binary, good/bad)");
    c->add_option("--valid", o.valid, "validation TSV")->required()->check(CLI::ExistingFile);
    c->add_option("--mode", o.mode, "encoder_only or s2s")->check(CLI::IsMember({"encoder_only", "s2s"}));
    c->add_option("--atlas", o.atlas, "glyph atlas");
  };
  auto* finetune = app.add_subcommand("finetune", "grid-search fine-tuning");
  task_opts(finetune);
  finetune->add_option("--train", o.train, "training TSV")->check(CLI::ExistingFile);
  finetune->add_option("--task", o.train, "alias of --train")->check(CLI::ExistingFile);
  finetune->add_option("--grid", o.grid, "grid spec file")->check(CLI::ExistingFile);
  finetune->add_option("--out", o.out, "results TSV");
  auto* eval = app.add_subcommand("eval", "single fine-tuning run / evaluation");
  task_opts(eval);
  eval->add_option("--train", o.train, "training TSV")->check(CLI::ExistingFile);
  eval->add_option("--steps", o.steps, "fine-tuning steps (0: evaluate as is)");
  eval->add_option("--lr", o.lr, "learning rate");
  eval->add_option("--batch", o.batch, "batch size");
  seed_opt(eval);

  auto* ppl = app.add_subcommand("eval-ppl", "perplexity under screenshot/text/blank/no context");
  ppl->add_option("--ckpt", o.ckpt, "autoregressive checkpoint")->required()->check(CLI::ExistingFile);
  ppl->add_option("--corpus", o.corpus, "evaluation lines")->required()->check(CLI::ExistingFile);
  ppl->add_option("--vocab", o.vocab, "vocabulary (default: next to the checkpoint)");
  ppl->add_option("--context", o.context, "screenshot, text, blank, none or all");
  ppl->add_option("--atlas", o.atlas, "glyph atlas");
  ppl->add_option("--patches", o.patches, "max screenshot patches");
  seed_opt(ppl);

  auto* inspect = app.add_subcommand("inspect", "write input/masked/reconstruction PNGs");
  inspect->add_option("--ckpt", o.ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  inspect->add_option("--text", o.text, "text to render")->required();
  inspect->add_option("--out", o.out, "output directory")->required();
  inspect->add_option("--vocab", o.vocab, "vocabulary (default: next to the checkpoint)");
  inspect->add_option("--atlas", o.atlas, "glyph atlas");
  inspect->add_option("--patches", o.patches, "max patches (autoregressive checkpoints)");
  seed_opt(inspect);

  auto* config = app.add_subcommand("config", "print the effective training configuration");
  config->add_flag("--dump", "print every key with its value (default behaviour)");
  config->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
  config->add_option("--set", o.sets, "override a config key (key=value)");

  auto* bench = app.add_subcommand("bench-render", "measure renderer throughput");
  bench->add_option("--corpus", o.corpus, "lines to render (default: synthetic)")->check(CLI::ExistingFile);
  bench->add_option("--chars", o.chars, "synthetic corpus size in characters");
  bench->add_option("--atlas", o.atlas, "glyph atlas");
  bench->add_option("--patches", o.patches, "max patches");
  seed_opt(bench);

  auto* make_atlas = app.add_subcommand("make-atlas", "write the builtin test font as an atlas file");
  make_atlas->add_option("--out", o.out, "atlas path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cerr, std::cerr);
    return 2;
  }

  try {
    if (*render) return cmd_render(o);
    if (*vocab) return cmd_train_vocab(o);
    if (*pretrain) return cmd_pretrain(o, "ptp");
    if (*ar_pretrain) return cmd_pretrain(o, "ar");
    if (*finetune) return cmd_finetune(o);
    if (*eval) return cmd_eval(o);
    if (*ppl) return cmd_eval_ppl(o);
    if (*inspect) return cmd_inspect(o);
    if (*config) return cmd_config(o);
    if (*bench) return cmd_bench_render(o);
    if (*make_atlas) return cmd_make_atlas(o);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
