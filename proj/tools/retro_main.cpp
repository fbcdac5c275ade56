//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "retro/pipeline.hpp"

namespace {

struct FeatureFlags {
  std::string file;
  int dim = 200;
  std::uint64_t seed = 7;

  void attach(CLI::App* sub) {
    sub->add_option("--feat-file", file,
                    "JSON file of per-element feature vectors");
    sub->add_option("--feat-dim", dim,
                    "fallback feature width when no file is given");
    sub->add_option("--feat-seed", seed, "fallback feature seed");
  }
  retro::FeatureSpec spec() const { return {file, dim, seed}; }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"retrieval-augmented precursor prediction for inorganic "
               "synthesis planning"};
  app.require_subcommand(1);
  std::string workspace_flag;
  bool force = false;
  app.add_option("--workspace", workspace_flag,
                 "artifact root (default: $RETRO_WORKSPACE)");
  app.add_flag("--force", force, "rerun even when outputs are current");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  synth->fallthrough();
  retro::SynthStageConfig synth_cfg;
  synth->add_option("--out", synth_cfg.out,
                    "output directory (default <workspace>/corpus)");
  synth->add_option("--recipes", synth_cfg.synth.n_recipes, "recipe count");
  synth->add_option("--elements", synth_cfg.synth.n_elements,
                    "cation pool size");
  synth->add_option("--vocab", synth_cfg.synth.vocab_size,
                    "precursor vocabulary size");
  synth->add_option("--seed", synth_cfg.synth.rule_seed, "corpus seed");
  synth->add_option("--noise", synth_cfg.synth.noise_rate,
                    "experimental energy noise");
  synth->add_option("--year-min", synth_cfg.synth.year_range.first,
                    "earliest recipe year");
  synth->add_option("--year-max", synth_cfg.synth.year_range.second,
                    "latest recipe year");
  synth->add_option("--dft-entries", synth_cfg.synth.dft_entries,
                    "dft energy table size");
  synth->add_option("--exp-entries", synth_cfg.synth.exp_entries,
                    "experimental energy table size");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "load, validate, and split a "
                                              "recipe corpus");
  ingest->fallthrough();
  retro::IngestStageConfig ingest_cfg;
  std::string ingest_split = "random";
  ingest->add_option("--recipes", ingest_cfg.recipes, "recipe JSONL file")
      ->required();
  ingest->add_option("--dft", ingest_cfg.dft, "dft energy CSV");
  ingest->add_option("--exp", ingest_cfg.exp, "experimental energy CSV");
  ingest->add_option("--split", ingest_split, "split mode")
      ->check(CLI::IsMember({"random", "year"}));
  ingest->add_option("--seed", ingest_cfg.seed, "random split seed");

  // train-mpc
  auto* train_mpc = app.add_subcommand(
      "train-mpc", "train the masked precursor completion retriever");
  train_mpc->fallthrough();
  retro::MpcTrainConfig mpc_cfg;
  train_mpc->add_option("--d-prime", mpc_cfg.d_prime, "representation width");
  train_mpc->add_option("--epochs", mpc_cfg.epochs, "epoch budget");
  train_mpc->add_option("--patience", mpc_cfg.patience, "early stop patience");
  train_mpc->add_option("--batch", mpc_cfg.batch_size, "batch size");
  train_mpc->add_option("--lr", mpc_cfg.lr, "learning rate");
  train_mpc->add_option("--p-mask", mpc_cfg.p_mask, "label mask probability");
  train_mpc->add_option("--seed", mpc_cfg.seed, "training seed");

  // train-nre
  auto* train_nre = app.add_subcommand(
      "train-nre", "train the reaction energy retriever");
  train_nre->fallthrough();
  retro::NreStageConfig nre_cfg;
  FeatureFlags nre_feats;
  bool no_pretrain = false;
  train_nre->add_option("--hidden", nre_cfg.train.encoder.hidden_dim,
                        "encoder hidden width");
  train_nre->add_option("--layers", nre_cfg.train.encoder.layers,
                        "encoder message passing layers");
  train_nre->add_option("--pretrain-epochs", nre_cfg.train.pretrain_epochs,
                        "dft pretraining epoch budget");
  train_nre->add_option("--finetune-epochs", nre_cfg.train.finetune_epochs,
                        "experimental fine-tuning epoch budget");
  train_nre->add_option("--patience", nre_cfg.train.patience,
                        "early stop patience");
  train_nre->add_option("--batch", nre_cfg.train.batch_size, "batch size");
  train_nre->add_option("--lr", nre_cfg.train.lr, "learning rate");
  train_nre->add_option("--seed", nre_cfg.train.seed, "training seed");
  train_nre->add_flag("--no-pretrain", no_pretrain,
                      "fit the experimental table only");
  nre_feats.attach(train_nre);

  // precompute-refs
  auto* refs = app.add_subcommand(
      "precompute-refs", "store top-K references for every recipe");
  refs->fallthrough();
  retro::RefsStageConfig refs_cfg;
  std::string refs_mode = "subset";
  refs->add_option("--k", refs_cfg.k, "references per retriever");
  refs->add_option("--mode", refs_mode, "element filter mode")
      ->check(CLI::IsMember({"subset", "coverage"}));

  // train
  auto* train = app.add_subcommand("train", "train the fused predictor");
  train->fallthrough();
  retro::TrainStageConfig train_cfg;
  train_cfg.train.batch_size = 0;
  FeatureFlags train_feats;
  int train_dim = 256;
  train->add_option("--dim", train_dim, "encoder and fusion width");
  train->add_option("--layers", train_cfg.train.encoder.layers,
                    "encoder message passing layers");
  train->add_option("--self-layers", train_cfg.train.fusion.self_layers,
                    "self attention layers over each reference stack");
  train->add_option("--cross-layers", train_cfg.train.fusion.cross_layers,
                    "cross attention layers against the references");
  train->add_option("--epochs", train_cfg.train.epochs, "epoch budget");
  train->add_option("--patience", train_cfg.train.patience,
                    "early stop patience");
  train->add_option("--batch", train_cfg.train.batch_size,
                    "batch size (0 picks 128 for year splits, 32 otherwise)");
  train->add_option("--lr", train_cfg.train.lr, "learning rate");
  train->add_option("--weight-decay", train_cfg.train.weight_decay,
                    "decoupled weight decay, 0 disables");
  train->add_option("--seed", train_cfg.train.seed, "training seed");
  train->add_flag("--zero-retrieval", train_cfg.train.zero_retrieval,
                  "ablation: train with all references zeroed");
  train->add_option("--top-n", train_cfg.train.decode.top_n,
                    "candidate pool for set decoding");
  train->add_option("--max-size", train_cfg.train.decode.max_size,
                    "largest decoded precursor set");
  train->add_option("--beam", train_cfg.train.decode.beam,
                    "decoded sets kept per recipe");
  train_feats.attach(train);

  // predict
  auto* predict = app.add_subcommand("predict",
                                     "predict precursor sets for one target");
  predict->fallthrough();
  retro::PredictConfig predict_cfg;
  predict->add_option("--target", predict_cfg.target, "target formula")
      ->required();
  predict->add_option("--topk", predict_cfg.topk, "sets to print");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate",
                                      "score the trained model on a split");
  evaluate->fallthrough();
  retro::EvalStageConfig eval_cfg;
  std::string eval_case = "exact";
  evaluate->add_option("--split", eval_cfg.split, "split to score")
      ->check(CLI::IsMember({"train", "valid", "test"}));
  evaluate->add_option("--case", eval_case,
                       "known set membership rule for case metrics")
      ->check(CLI::IsMember({"exact", "subset"}));

  CLI11_PARSE(app, argc, argv);

  retro::Workspace ws;
  try {
    ws = retro::Workspace::resolve(workspace_flag);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    retro::WorkspaceLock lock(ws);
    try {
      retro::append_log(ws, {{"command", command}, {"event", "start"}});
      retro::StageResult result;
      if (synth->parsed()) {
        result = retro::run_synth(ws, synth_cfg, force);
      } else if (ingest->parsed()) {
        ingest_cfg.split = retro::split_mode_from(ingest_split);
        result = retro::run_ingest(ws, ingest_cfg, force);
      } else if (train_mpc->parsed()) {
        result = retro::run_train_mpc(ws, mpc_cfg, force);
      } else if (train_nre->parsed()) {
        nre_cfg.train.pretrain = !no_pretrain;
        nre_cfg.feats = nre_feats.spec();
        result = retro::run_train_nre(ws, nre_cfg, force);
      } else if (refs->parsed()) {
        refs_cfg.mode = retro::filter_mode_from(refs_mode);
        result = retro::run_precompute_refs(ws, refs_cfg, force);
      } else if (train->parsed()) {
        train_cfg.train.encoder.hidden_dim = train_dim;
        train_cfg.train.fusion.hidden_dim = train_dim;
        train_cfg.feats = train_feats.spec();
        result = retro::run_train(ws, train_cfg, force);
      } else if (predict->parsed()) {
        result.summary = retro::run_predict(ws, predict_cfg);
      } else if (evaluate->parsed()) {
        eval_cfg.mode = retro::case_mode_from(eval_case);
        result = retro::run_evaluate(ws, eval_cfg, force);
      }
      retro::append_log(
          ws, {{"command", command},
               {"event", result.skipped ? "skipped" : "done"}});
      if (result.skipped)
        std::cerr << "outputs are current; use --force to rerun\n";
      std::cout << result.summary.dump(2) << "\n";
      return 0;
    } catch (const std::exception& e) {
      retro::append_log(ws, {{"command", command},
                             {"event", "error"},
                             {"message", e.what()}});
      throw;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
