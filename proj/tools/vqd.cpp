// vqd: data generation, training, evaluation and diagnostics for the toy
// monocular detector.

#include <iostream>

#include "CLI11.hpp"
#include "vqd/commands.hpp"

using namespace vqd::cli;

int main(int argc, char** argv) {
  CLI::App app{"Variational query denoising on synthetic monocular scenes"};
  app.require_subcommand(1);

  GenDataArgs gen;
  std::string out_path;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic scene dataset");
  gen_cmd->add_option("--out", out_path, "Output dataset file")->required();
  gen_cmd->add_option("--scenes", gen.scenes, "Number of scenes")->required();
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed")->required();
  gen_cmd->add_option("--split", gen.split, "train or val")
      ->check(CLI::IsMember({"train", "val"}));
  gen_cmd->add_flag("--force", gen.force, "Overwrite an existing file");
  std::string gen_config;
  gen_cmd->add_option("--config", gen_config, "Run configuration (scene keys)");

  TrainArgs tr;
  std::string tr_config, tr_data, tr_val, tr_mode;
  auto* train_cmd = app.add_subcommand("train", "Train one run");
  train_cmd->add_option("--config", tr_config, "Run configuration file");
  train_cmd->add_option("--data", tr_data, "Training dataset")->required();
  train_cmd->add_option("--val", tr_val, "Validation dataset")->required();
  train_cmd->add_option("--run", tr.run, "Run name under runs_dir")->required();
  train_cmd->add_option("--mode", tr_mode, "baseline, fld, fld+dn or fld+vdn");

  EvalArgs ev;
  std::string ev_ckpt, ev_data, ev_config;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev_data, "Dataset")->required();
  eval_cmd->add_option("--iou", ev.iou, "IoU3D threshold");
  eval_cmd->add_option("--config", ev_config, "Run configuration (default: beside checkpoint)");

  GradCheckArgs gc;
  auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference gradient suite");
  grad_cmd->add_option("--seed", gc.seed, "Suite seed");
  grad_cmd->add_option("--perturb", gc.perturb, "Inject a gradient error (negative control)");

  DiagnoseArgs dg;
  std::string dg_dir = "runs";
  auto* diag_cmd = app.add_subcommand("diagnose", "Compare entropy and mass trends");
  diag_cmd->add_option("--runs", dg.runs, "Run names")->required();
  diag_cmd->add_option("--runs-dir", dg_dir, "Directory holding the runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsageError;
  }

  if (*gen_cmd) {
    gen.out = out_path;
    if (!gen_config.empty()) gen.config = gen_config;
    return cmd_gen_data(gen, std::cout, std::cerr);
  }
  if (*train_cmd) {
    if (!tr_config.empty()) tr.config = tr_config;
    if (!tr_mode.empty()) tr.mode = tr_mode;
    tr.data = tr_data;
    tr.val = tr_val;
    return cmd_train(tr, std::cout, std::cerr);
  }
  if (*eval_cmd) {
    ev.checkpoint = ev_ckpt;
    ev.data = ev_data;
    if (!ev_config.empty()) ev.config = ev_config;
    return cmd_eval(ev, std::cout, std::cerr);
  }
  if (*grad_cmd) return cmd_grad_check(gc, std::cout, std::cerr);
  if (*diag_cmd) {
    dg.runs_dir = dg_dir;
    return cmd_diagnose(dg, std::cout, std::cerr);
  }
  return kUsageError;
}
