// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "commands.hpp"

using namespace fpt::cli;

namespace {

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config_path, "Config file (JSON); built-in desk defaults when omitted");
  cmd->add_option("--data", f.data_root, "Dataset root; the synthetic set from the config when omitted");
  cmd->add_option("--cache-dir", f.cache_dir, "Cache root (default $FPT_CACHE_DIR, then ./fpt-cache)");
  cmd->add_option("--mode", f.mode, "fpt | side_only | fpt_no_selection | fpt_symmetric");
  cmd->add_option("--epochs", f.epochs);
  cmd->add_option("--batch-size", f.batch_size);
  cmd->add_option("--lr", f.lr);
  cmd->add_option("--ratio", f.ratio, "Token selection ratio m in (0, 1]");
  cmd->add_option("--seed", f.seed);
  cmd->add_option("--weights", f.weights, "Backbone weight archive");
  cmd->add_option("--pretrain-grid", f.pretrain_grid, "Positional grid the weights were trained at");
  cmd->add_flag("--no-cache", f.no_cache, "Recompute frozen features instead of reading the cache");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fine-grained prompt tuning on a frozen high-resolution backbone"};
  app.require_subcommand(1);

  CacheFlags cache;
  auto* c = app.add_subcommand("cache", "Precompute frozen features for dataset splits");
  add_run_flags(c, cache.run);
  c->add_option("--splits", cache.splits)->delimiter(',');
  c->add_flag("--force", cache.force, "Replace an existing cache");
  c->add_option("--threads", cache.threads, "Worker threads (0: hardware concurrency)");

  TrainFlags tr;
  auto* t = app.add_subcommand("train", "Train the side network, prompts and fusion modules");
  add_run_flags(t, tr.run);
  t->add_option("--out", tr.out_dir, "Run directory for checkpoint.fptk and report.json")->required();
  t->add_option("--max-steps", tr.max_steps);

  EvalFlags ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint (or the untrained model) on a split");
  add_run_flags(e, ev.run);
  e->add_option("--checkpoint", ev.checkpoint);
  e->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test"}));
  e->add_flag("--json", ev.json);

  ReportFlags rp;
  auto* r = app.add_subcommand("report", "Print the parameter and memory efficiency table");
  r->add_option("--config", rp.config_path);
  r->add_option("--fixtures", rp.fixtures, "Published rows (score, params, memory) as JSON");
  r->add_option("--runs", rp.runs, "report.json files written by train")->delimiter(',');
  r->add_flag("--analytic", rp.analytic, "Add per-mode rows estimated from the config shape");
  r->add_option("--json", rp.json_out, "Also write the table as JSON");

  SweepFlags sw;
  auto* s = app.add_subcommand("sweep", "Train several modes and seeds as child runs");
  add_run_flags(s, sw.run);
  s->add_option("--modes", sw.modes)->delimiter(',');
  s->add_option("--seeds", sw.seeds)->delimiter(',');
  s->add_option("--out", sw.out_dir)->required();

  auto* st = app.add_subcommand("selftest", "Run the quick invariant checks");

  SynthFlags sy;
  auto* y = app.add_subcommand("synth", "Write the synthetic dataset as PNG files");
  y->add_option("--config", sy.config_path);
  y->add_option("--out", sy.out_root)->required();

  PretrainFlags pt;
  auto* p = app.add_subcommand("pretrain", "Warm up backbone weights on synthetic source crops");
  p->add_option("--config", pt.config_path);
  p->add_option("--out", pt.out, "Weight archive to write")->required();
  p->add_option("--write-config", pt.write_config, "Also write a config that loads the weights");
  p->add_option("--samples", pt.samples);
  p->add_option("--epochs", pt.epochs);
  p->add_option("--source-size", pt.source_size);

  ConfigFlags cf;
  auto* g = app.add_subcommand("config", "Print or write a preset configuration");
  g->add_option("--preset", cf.preset)->check(CLI::IsMember({"desk", "vit-base", "tiny"}));
  g->add_option("--out", cf.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kConfigError;
  }

  if (c->parsed()) return guarded([&] { return cmd_cache(cache); });
  if (t->parsed()) return guarded([&] { return cmd_train(tr); });
  if (e->parsed()) return guarded([&] { return cmd_eval(ev); });
  if (r->parsed()) return guarded([&] { return cmd_report(rp); });
  if (s->parsed()) {
    std::error_code ec;
    sw.self_exe = std::filesystem::read_symlink("/proc/self/exe", ec).string();
    if (ec) sw.self_exe = argv[0];
    return guarded([&] { return cmd_sweep(sw); });
  }
  if (st->parsed()) return guarded([&] { return cmd_selftest(); });
  if (y->parsed()) return guarded([&] { return cmd_synth(sy); });
  if (p->parsed()) return guarded([&] { return cmd_pretrain(pt); });
  if (g->parsed()) return guarded([&] { return cmd_config(cf); });
  return kFailure;
}
