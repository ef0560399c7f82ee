// bgadapt command-line front end.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or validation
// error, 3 I/O or corrupt input.

#include <CLI11.hpp>

#include <iostream>
#include <string>

#include "bgadapt/errors.hpp"
#include "bgadapt/runtime.hpp"
#include "commands.hpp"

namespace {

using namespace bgadapt;
using namespace bgadapt::cli;

void add_config_flags(CLI::App* sub, ConfigArgs& c) {
  sub->add_option("--config", c.config, "key = value config file");
  sub->add_option("--set", c.overrides, "config override key=value (repeatable)");
  sub->add_option("--seed", c.seed, "override the config seed");
}

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Background adaptation for class-incremental segmentation (toy scale)"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "write synthetic datasets for every step of a protocol");
  gen_cmd->add_option("--protocol", gen.protocol, "N-M protocol name, e.g. 4-1");
  gen_cmd->add_option("--count", gen.count, "scenes per training split");
  gen_cmd->add_option("--val-count", gen.val_count, "scenes in the validation split");
  gen_cmd->add_option("--canvas", gen.canvas, "image side length");
  gen_cmd->add_option("--seed", gen.seed, "generator seed");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_flag("--pgm", gen.pgm, "also dump label maps as graymaps");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "run all protocol steps (or resume)");
  add_config_flags(train_cmd, tr.cfg);
  train_cmd->add_option("--data", tr.data, "directory written by gen-data (default: generate from the config)");
  train_cmd->add_option("--out", tr.out, "output directory")->required();
  train_cmd->add_option("--resume-from", tr.resume_from, "checkpoint to continue from");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "grouped mIoU of a checkpoint on the validation split");
  add_config_flags(eval_cmd, ev.cfg);
  eval_cmd->add_option("--data", ev.data, "directory written by gen-data");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
  eval_cmd->add_option("--out", ev.out, "directory for eval.json and the manifest");

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "train method variants from a shared initial step");
  add_config_flags(ablate_cmd, ab.cfg);
  ablate_cmd->add_option("--variants", ab.variants, "variant ids (default: all)")->delimiter(',');
  ablate_cmd->add_option("--seeds", ab.seeds, "seeds (default: the config seed)")->delimiter(',');
  ablate_cmd->add_option("--out", ab.out, "output directory")->required();

  GradCheckArgs gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "compare autodiff gradients with finite differences");
  gc_cmd->add_option("--seed", gc.seed, "instance seed");
  gc_cmd->add_option("--cases", gc.cases, "case names (default: all)")->delimiter(',');
  gc_cmd->add_option("--instances", gc.instances, "random instances per case");
  gc_cmd->add_option("--inject", gc.inject, "fault injection for negative controls (bga_minus_sign)");
  gc_cmd->add_option("--out", gc.out, "directory for the report, failures and manifest");

  DumpLogitsArgs dl;
  auto* dl_cmd = app.add_subcommand("dump-logits", "export background and adaptation grids for one image");
  add_config_flags(dl_cmd, dl.cfg);
  dl_cmd->add_option("--data", dl.data, "directory written by gen-data");
  dl_cmd->add_option("--checkpoint", dl.checkpoint, "model checkpoint")->required();
  dl_cmd->add_option("--image-index", dl.image_index, "validation image index");
  dl_cmd->add_option("--out", dl.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const std::string cmdline = join_args(argc, argv);
  try {
    if (*gen_cmd) return gen_data(gen, cmdline);
    if (*train_cmd) return train(tr, cmdline);
    if (*eval_cmd) return eval(ev, cmdline);
    if (*ablate_cmd) return ablate(ab, cmdline);
    if (*gc_cmd) return grad_check(gc, cmdline);
    if (*dl_cmd) return dump_logits(dl, cmdline);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kVerificationFailed;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  }
  return kUsage;
}
