//
// Project retro - Copyright 2026 The retro Authors.
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "retro/dataset.hpp"
#include "retro/evalkit.hpp"
#include "retro/features.hpp"
#include "retro/fusion.hpp"
#include "retro/mpc.hpp"
#include "retro/nre.hpp"
#include "retro/serialize.hpp"
#include "retro/synthgen.hpp"

namespace retro {

/// Artifact root for one experiment. Commands read and write only inside
/// this tree, so separate workspaces never share state.
struct Workspace {
  std::filesystem::path root;

  /// An explicit flag wins over the RETRO_WORKSPACE environment variable.
  static Workspace resolve(const std::string& flag) {
    if (!flag.empty()) return Workspace{flag};
    const char* env = std::getenv("RETRO_WORKSPACE");
    if (env != nullptr && *env != '\0') return Workspace{env};
    throw std::runtime_error(
        "no workspace given; pass --workspace or set RETRO_WORKSPACE");
  }

  std::filesystem::path corpus_dir() const { return root / "corpus"; }
  std::filesystem::path ingest_dir() const { return root / "ingest"; }
  std::filesystem::path mpc_dir() const { return root / "mpc"; }
  std::filesystem::path nre_dir() const { return root / "nre"; }
  std::filesystem::path refs_dir() const { return root / "refs"; }
  std::filesystem::path model_dir() const { return root / "model"; }
  std::filesystem::path eval_dir() const { return root / "eval"; }

  std::filesystem::path split_file(const std::string& name) const {
    return ingest_dir() / (name + ".jsonl");
  }
  std::filesystem::path log_file() const { return root / "logs.jsonl"; }
  std::filesystem::path lock_path() const { return root / ".lock"; }
};

/// Exclusive workspace lock. Creation is atomic via O_EXCL so two commands
/// cannot hold it at once; the destructor removes the file.
class WorkspaceLock {
 public:
  explicit WorkspaceLock(const Workspace& ws) : path_(ws.lock_path()) {
    std::filesystem::create_directories(ws.root);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw std::runtime_error("another retro command holds the workspace "
                               "lock at " +
                               path_.string() +
                               "; remove the file if that command is gone");
    const std::string pid = std::to_string(::getpid()) + "\n";
    const ssize_t n = ::write(fd, pid.data(), pid.size());
    (void)n;
    ::close(fd);
  }
  ~WorkspaceLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }
  WorkspaceLock(const WorkspaceLock&) = delete;
  WorkspaceLock& operator=(const WorkspaceLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Appends one JSON object per line. Entries carry no clocks, so a given
/// command sequence writes identical log bytes on every run.
inline void append_log(const Workspace& ws, const nlohmann::json& entry) {
  std::filesystem::create_directories(ws.root);
  std::ofstream out(ws.log_file(), std::ios::app);
  if (!out)
    throw std::runtime_error("cannot write " + ws.log_file().string());
  out << entry.dump() << "\n";
}

struct StageResult {
  bool skipped = false;    // outputs were already current
  nlohmann::json summary;  // printed by the CLI; stable across reruns
};

inline std::string split_mode_name(SplitMode m) {
  return m == SplitMode::year ? "year" : "random";
}
inline SplitMode split_mode_from(const std::string& s) {
  if (s == "year") return SplitMode::year;
  if (s == "random") return SplitMode::random;
  throw std::invalid_argument("unknown split mode " + s);
}

inline std::string filter_mode_name(FilterMode m) {
  return m == FilterMode::coverage ? "coverage" : "subset";
}
inline FilterMode filter_mode_from(const std::string& s) {
  if (s == "coverage") return FilterMode::coverage;
  if (s == "subset") return FilterMode::subset;
  throw std::invalid_argument("unknown element filter mode " + s);
}

inline std::string case_mode_name(CaseMode m) {
  return m == CaseMode::subset_relation ? "subset" : "exact";
}
inline CaseMode case_mode_from(const std::string& s) {
  if (s == "subset") return CaseMode::subset_relation;
  if (s == "exact") return CaseMode::exact_set;
  throw std::invalid_argument("unknown case mode " + s);
}

/// Where per-element feature vectors come from. A file path gives curated
/// features; otherwise seeded fallback vectors of the given width are used.
struct FeatureSpec {
  std::string file;  // empty means fallback
  int dim = 200;
  std::uint64_t seed = 7;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["source"] = file.empty() ? "fallback" : "file";
    if (!file.empty()) j["file"] = file;
    j["dim"] = dim;
    j["seed"] = seed;
    return j;
  }
  static FeatureSpec from_json(const nlohmann::json& j) {
    FeatureSpec s;
    if (j.at("source").get<std::string>() == "file")
      s.file = j.at("file").get<std::string>();
    s.dim = j.at("dim").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
  }
  ElementFeatureTable build() const {
    if (!file.empty()) return load_element_features(file);
    return fallback_element_features(dim, seed);
  }
};

namespace detail {

/// A stage is current when its sidecar records the same config and input
/// checksums and every listed output still exists.
inline bool stage_current(const std::filesystem::path& sidecar,
                          const nlohmann::json& config,
                          const nlohmann::json& inputs,
                          const std::vector<std::filesystem::path>& outputs) {
  if (!std::filesystem::exists(sidecar)) return false;
  nlohmann::json j;
  try {
    j = io::read_json(sidecar);
  } catch (const std::exception&) {
    return false;
  }
  if (!j.contains("config") || !j.contains("inputs")) return false;
  if (j["config"] != config || j["inputs"] != inputs) return false;
  for (const auto& p : outputs)
    if (!std::filesystem::exists(p)) return false;
  return true;
}

/// Missing prerequisites name the command that produces them.
inline void require_artifact(const std::filesystem::path& path,
                             const std::string& what,
                             const std::string& producer) {
  if (!std::filesystem::exists(path))
    throw std::runtime_error("missing " + what + " at " + path.string() +
                             "; run `retro " + producer + "` first");
}

/// Split files are written by ingest, so an unreadable line means the
/// workspace was modified by hand.
inline std::vector<RawRecipe> load_split(const std::filesystem::path& path) {
  auto result = load_recipes(path.string());
  if (!result.rejects.empty())
    throw std::runtime_error(path.string() + " is corrupt: " +
                             std::to_string(result.rejects.size()) +
                             " unreadable lines; rerun `retro ingest`");
  return std::move(result.records);
}

inline void write_split(const std::filesystem::path& path,
                        const std::vector<RawRecipe>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) {
    nlohmann::json j;
    j["id"] = r.id;
    j["target_formula"] = r.target.formula;
    j["precursor_formulas"] = r.precursor_formulas;
    if (r.year) j["year"] = *r.year;
    out << j.dump() << "\n";
  }
}

inline nlohmann::json encoder_config_json(const EncoderConfig& c) {
  return {{"feature_dim", c.feature_dim},
          {"hidden_dim", c.hidden_dim},
          {"layers", c.layers}};
}
inline EncoderConfig encoder_config_from(const nlohmann::json& j) {
  EncoderConfig c;
  c.feature_dim = j.at("feature_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.layers = j.at("layers").get<int>();
  return c;
}

inline nlohmann::json fusion_config_json(const FusionConfig& c) {
  return {{"hidden_dim", c.hidden_dim},
          {"self_layers", c.self_layers},
          {"cross_layers", c.cross_layers}};
}
inline FusionConfig fusion_config_from(const nlohmann::json& j) {
  FusionConfig c;
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.self_layers = j.at("self_layers").get<int>();
  c.cross_layers = j.at("cross_layers").get<int>();
  return c;
}

inline nlohmann::json decode_config_json(const DecodeConfig& c) {
  return {{"top_n", c.top_n}, {"max_size", c.max_size}, {"beam", c.beam}};
}
inline DecodeConfig decode_config_from(const nlohmann::json& j) {
  DecodeConfig c;
  c.top_n = j.at("top_n").get<int>();
  c.max_size = j.at("max_size").get<int>();
  c.beam = j.at("beam").get<int>();
  return c;
}

inline nlohmann::json regressor_report_json(const RegressorTrainReport& r) {
  nlohmann::json j;
  j["epochs_run"] = r.train_loss.size();
  j["best_epoch"] = r.best_epoch;
  j["best_valid"] = r.best_valid;
  return j;
}

inline nlohmann::json topk_json(const std::map<int, double>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

inline nlohmann::json case_metrics_json(const CaseMetrics& c) {
  return {{"count", c.count}, {"top_k", topk_json(c.top_k_acc)}};
}

inline nlohmann::json eval_report_json(const EvalReport& r) {
  nlohmann::json j;
  j["count"] = r.count;
  j["top_k"] = topk_json(r.top_k_acc);
  j["macro_recall"] = r.macro_recall;
  j["micro_recall"] = r.micro_recall;
  j["subset_case"] = case_metrics_json(r.subset_case);
  j["new_case"] = case_metrics_json(r.new_case);
  j["oov_misses"] = r.oov_miss_count;
  return j;
}

/// Feature tables are rebuilt from the recorded spec, so a changed file
/// is caught by width before it can corrupt an encoder.
inline ElementFeatureTable build_features_checked(const FeatureSpec& spec,
                                                  int expected_dim,
                                                  const std::string& producer) {
  ElementFeatureTable t = spec.build();
  if (t.dim != expected_dim)
    throw std::runtime_error(
        "element features now have width " + std::to_string(t.dim) +
        " but the checkpoint expects " + std::to_string(expected_dim) +
        "; rerun `retro " + producer + "`");
  return t;
}

template <typename Fn>
auto with_sidecar(const std::filesystem::path& path, const std::string& producer,
                  Fn&& fn) {
  try {
    return fn(io::read_json(path));
  } catch (const nlohmann::json::exception&) {
    throw std::runtime_error("unreadable sidecar " + path.string() +
                             "; rerun `retro " + producer + "`");
  }
}

inline MpcParams load_mpc_checkpoint(const Workspace& ws, int expect_vocab) {
  const auto sidecar = ws.mpc_dir() / "mpc.json";
  const auto bin = ws.mpc_dir() / "mpc.bin";
  require_artifact(sidecar, "mpc checkpoint", "train-mpc");
  require_artifact(bin, "mpc checkpoint", "train-mpc");
  int vocab = 0, d_prime = 0;
  with_sidecar(sidecar, "train-mpc", [&](const nlohmann::json& j) {
    vocab = j.at("model").at("vocab_size").get<int>();
    d_prime = j.at("model").at("d_prime").get<int>();
    return 0;
  });
  if (expect_vocab > 0 && vocab != expect_vocab)
    throw std::runtime_error(
        "mpc checkpoint was trained on a different vocabulary (" +
        std::to_string(vocab) + " vs " + std::to_string(expect_vocab) +
        " precursors); rerun `retro train-mpc`");
  Rng rng(0);
  MpcParams params = MpcParams::make(vocab, d_prime, rng);
  io::load_params(bin, params.params());
  return params;
}

struct NreCheckpoint {
  NreParams params;
  EncoderConfig encoder;
  FeatureSpec feats;
};

inline NreCheckpoint load_nre_checkpoint(const Workspace& ws) {
  const auto sidecar = ws.nre_dir() / "nre.json";
  const auto bin = ws.nre_dir() / "nre.bin";
  require_artifact(sidecar, "nre checkpoint", "train-nre");
  require_artifact(bin, "nre checkpoint", "train-nre");
  EncoderConfig enc;
  FeatureSpec feats;
  with_sidecar(sidecar, "train-nre", [&](const nlohmann::json& j) {
    enc = encoder_config_from(j.at("config").at("encoder"));
    feats = FeatureSpec::from_json(j.at("config").at("feats"));
    return 0;
  });
  Rng rng(0);
  NreCheckpoint out{NreParams::make(enc, rng), enc, feats};
  io::load_params(bin, out.params.params());
  return out;
}

struct ModelCheckpoint {
  FullModel model;
  EncoderConfig encoder;
  FusionConfig fusion;
  FeatureSpec feats;
  DecodeConfig decode;
  bool zero_retrieval = false;
  int refs_k = 3;
  FilterMode refs_mode = FilterMode::subset;
};

inline ModelCheckpoint load_model_checkpoint(const Workspace& ws) {
  const auto sidecar = ws.model_dir() / "model.json";
  const auto bin = ws.model_dir() / "model.bin";
  require_artifact(sidecar, "trained model", "train");
  require_artifact(bin, "trained model", "train");
  EncoderConfig enc;
  FusionConfig fus;
  FeatureSpec feats;
  DecodeConfig decode;
  bool zero = false;
  int vocab = 0, refs_k = 3;
  FilterMode refs_mode = FilterMode::subset;
  with_sidecar(sidecar, "train", [&](const nlohmann::json& j) {
    const auto& cfg = j.at("config");
    enc = encoder_config_from(cfg.at("encoder"));
    fus = fusion_config_from(cfg.at("fusion"));
    feats = FeatureSpec::from_json(cfg.at("feats"));
    decode = decode_config_from(cfg.at("decode"));
    zero = cfg.at("zero_retrieval").get<bool>();
    vocab = j.at("model").at("vocab_size").get<int>();
    const auto& refs = j.at("model").at("refs");
    if (refs.is_object() && refs.contains("k")) {
      refs_k = refs.at("k").get<int>();
      refs_mode = filter_mode_from(refs.at("mode").get<std::string>());
    }
    return 0;
  });
  Rng rng(0);
  ModelCheckpoint out{FullModel::make(enc, fus, vocab, rng),
                      enc,
                      fus,
                      feats,
                      decode,
                      zero,
                      refs_k,
                      refs_mode};
  io::load_params(bin, out.model.params());
  return out;
}

/// One table serves both retriever columns: train_full reads the mpc field
/// from its first table argument and the nre field from the second.
inline RefTable ref_table_from_json(const nlohmann::json& refs,
                                    std::initializer_list<const char*> splits) {
  RefTable table;
  for (const char* name : splits) {
    const auto it = refs.find(name);
    if (it == refs.end()) continue;
    for (const auto& [id, entry] : it->items()) {
      SampleRefs s;
      s.mpc = entry.at("mpc").get<std::vector<int>>();
      s.nre = entry.at("nre").get<std::vector<int>>();
      table[id] = std::move(s);
    }
  }
  return table;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// synth

struct SynthStageConfig {
  SynthConfig synth;
  std::string out;  // empty means <workspace>/corpus
};

inline StageResult run_synth(const Workspace& ws, const SynthStageConfig& cfg,
                             bool force = false) {
  const std::filesystem::path out =
      cfg.out.empty() ? ws.corpus_dir() : std::filesystem::path(cfg.out);
  nlohmann::json config;
  config["n_recipes"] = cfg.synth.n_recipes;
  config["n_elements"] = cfg.synth.n_elements;
  config["vocab_size"] = cfg.synth.vocab_size;
  config["rule_seed"] = cfg.synth.rule_seed;
  config["noise_rate"] = cfg.synth.noise_rate;
  config["year_min"] = cfg.synth.year_range.first;
  config["year_max"] = cfg.synth.year_range.second;
  config["dft_entries"] = cfg.synth.dft_entries;
  config["exp_entries"] = cfg.synth.exp_entries;
  const nlohmann::json inputs = nlohmann::json::object();

  const auto sidecar = out / "synth.json";
  const std::vector<std::filesystem::path> outputs = {
      out / "recipes.jsonl", out / "dft.csv", out / "exp.csv"};
  if (!force && detail::stage_current(sidecar, config, inputs, outputs))
    return {true, io::read_json(sidecar)};

  const SynthPaths paths = generate_corpus(cfg.synth, out.string());
  nlohmann::json j;
  j["config"] = config;
  j["inputs"] = inputs;
  j["stats"] = {{"out", out.string()},
                {"recipes", cfg.synth.n_recipes},
                {"dft_entries", cfg.synth.dft_entries},
                {"exp_entries", cfg.synth.exp_entries},
                {"recipes_file", paths.recipes},
                {"dft_file", paths.dft},
                {"exp_file", paths.exp}};
  io::write_json(sidecar, j);
  return {false, j};
}

// ---------------------------------------------------------------------------
// ingest

struct IngestStageConfig {
  std::string recipes;
  std::string dft;  // optional energy tables, recorded for train-nre
  std::string exp;
  SplitMode split = SplitMode::random;
  std::uint64_t seed = 0;
};

inline StageResult run_ingest(const Workspace& ws, const IngestStageConfig& cfg,
                              bool force = false) {
  if (cfg.recipes.empty())
    throw std::invalid_argument("ingest: --recipes is required");
  detail::require_artifact(cfg.recipes, "recipe file", "synth");
  if (!cfg.dft.empty())
    detail::require_artifact(cfg.dft, "dft energy table", "synth");
  if (!cfg.exp.empty())
    detail::require_artifact(cfg.exp, "experimental energy table", "synth");

  nlohmann::json config;
  config["recipes"] = cfg.recipes;
  config["dft"] = cfg.dft;
  config["exp"] = cfg.exp;
  config["split"] = split_mode_name(cfg.split);
  config["seed"] = cfg.seed;
  nlohmann::json inputs;
  inputs["recipes"] = io::file_checksum_hex(cfg.recipes);
  if (!cfg.dft.empty()) inputs["dft"] = io::file_checksum_hex(cfg.dft);
  if (!cfg.exp.empty()) inputs["exp"] = io::file_checksum_hex(cfg.exp);

  const auto sidecar = ws.ingest_dir() / "ingest.json";
  const std::vector<std::filesystem::path> outputs = {
      ws.split_file("train"), ws.split_file("valid"), ws.split_file("test"),
      ws.ingest_dir() / "rejects.jsonl"};
  if (!force && detail::stage_current(sidecar, config, inputs, outputs))
    return {true, io::read_json(sidecar)};

  std::filesystem::create_directories(ws.ingest_dir());
  const LoadResult loaded = load_recipes(cfg.recipes);
  write_reject_report(loaded.rejects,
                      (ws.ingest_dir() / "rejects.jsonl").string());
  const Split split = split_dataset(loaded.records, cfg.split, cfg.seed);
  if (split.train.empty())
    throw std::runtime_error(
        "ingest: the split produced an empty training set; "
        "add recipes or change --split");
  detail::write_split(ws.split_file("train"), split.train);
  detail::write_split(ws.split_file("valid"), split.valid);
  detail::write_split(ws.split_file("test"), split.test);

  const KnowledgeBase kb = build_vocab_and_kb(split.train);
  int oov_valid = 0, oov_test = 0;
  for (const auto& r : split.valid)
    oov_valid += labelize(r, kb.vocab).has_oov() ? 1 : 0;
  for (const auto& r : split.test)
    oov_test += labelize(r, kb.vocab).has_oov() ? 1 : 0;

  nlohmann::json j;
  j["config"] = config;
  j["inputs"] = inputs;
  j["stats"] = {{"loaded", loaded.records.size()},
                {"rejected", loaded.rejects.size()},
                {"duplicates", count_duplicates(loaded.records)},
                {"train", split.train.size()},
                {"valid", split.valid.size()},
                {"test", split.test.size()},
                {"vocab", kb.vocab.size()},
                {"oov_valid", oov_valid},
                {"oov_test", oov_test}};
  io::write_json(sidecar, j);
  return {false, j};
}

// ---------------------------------------------------------------------------
// train-mpc

inline StageResult run_train_mpc(const Workspace& ws,
                                 const MpcTrainConfig& cfg,
                                 bool force = false) {
  const auto train_path = ws.split_file("train");
  const auto valid_path = ws.split_file("valid");
  detail::require_artifact(train_path, "ingested training split", "ingest");
  detail::require_artifact(valid_path, "ingested validation split", "ingest");

  nlohmann::json config;
  config["d_prime"] = cfg.d_prime;
  config["epochs"] = cfg.epochs;
  config["patience"] = cfg.patience;
  config["batch_size"] = cfg.batch_size;
  config["lr"] = cfg.lr;
  config["p_mask"] = cfg.p_mask;
  config["seed"] = cfg.seed;
  nlohmann::json inputs;
  inputs["train"] = io::file_checksum_hex(train_path);
  inputs["valid"] = io::file_checksum_hex(valid_path);

  const auto sidecar = ws.mpc_dir() / "mpc.json";
  const auto bin = ws.mpc_dir() / "mpc.bin";
  if (!force && detail::stage_current(sidecar, config, inputs, {bin}))
    return {true, io::read_json(sidecar)};

  const auto train = detail::load_split(train_path);
  const auto valid = detail::load_split(valid_path);
  const KnowledgeBase kb = build_vocab_and_kb(train);
  std::vector<Recipe> valid_recipes;
  for (const auto& r : valid) valid_recipes.push_back(labelize(r, kb.vocab));

  MpcTrainReport report;
  MpcParams params = train_mpc(kb.recipes, valid_recipes, cfg, &report);

  std::filesystem::create_directories(ws.mpc_dir());
  io::save_params(bin, params.params());
  nlohmann::json j;
  j["config"] = config;
  j["inputs"] = inputs;
  j["model"] = {{"vocab_size", kb.vocab.size()}, {"d_prime", cfg.d_prime}};
  j["report"] = {{"epochs_run", report.train_loss.size()},
                 {"best_epoch", report.best_epoch},
                 {"best_valid", report.best_valid}};
  io::write_json(sidecar, j);
  return {false, j};
}

// ---------------------------------------------------------------------------
// train-nre

struct NreStageConfig {
  NreTrainConfig train;
  FeatureSpec feats;
};

inline StageResult run_train_nre(const Workspace& ws, NreStageConfig cfg,
                                 bool force = false) {
  const auto ingest_sidecar = ws.ingest_dir() / "ingest.json";
  detail::require_artifact(ingest_sidecar, "ingested dataset", "ingest");
  std::string dft_path, exp_path;
  detail::with_sidecar(ingest_sidecar, "ingest", [&](const nlohmann::json& j) {
    dft_path = j.at("config").at("dft").get<std::string>();
    exp_path = j.at("config").at("exp").get<std::string>();
    return 0;
  });
  if (cfg.train.pretrain && dft_path.empty())
    throw std::runtime_error(
        "the ingested dataset has no dft energy table; rerun `retro ingest` "
        "with --dft, or pass --no-pretrain");
  if (exp_path.empty())
    throw std::runtime_error(
        "the ingested dataset has no experimental energy table; rerun "
        "`retro ingest` with --exp");
  if (cfg.train.pretrain)
    detail::require_artifact(dft_path, "dft energy table", "ingest");
  detail::require_artifact(exp_path, "experimental energy table", "ingest");

  const ElementFeatureTable feats = cfg.feats.build();
  cfg.train.encoder.feature_dim = feats.dim;

  nlohmann::json config;
  config["encoder"] = detail::encoder_config_json(cfg.train.encoder);
  config["pretrain"] = cfg.train.pretrain;
  config["pretrain_epochs"] = cfg.train.pretrain_epochs;
  config["finetune_epochs"] = cfg.train.finetune_epochs;
  config["patience"] = cfg.train.patience;
  config["batch_size"] = cfg.train.batch_size;
  config["lr"] = cfg.train.lr;
  config["seed"] = cfg.train.seed;
  config["feats"] = cfg.feats.to_json();
  nlohmann::json inputs;
  if (cfg.train.pretrain) inputs["dft"] = io::file_checksum_hex(dft_path);
  inputs["exp"] = io::file_checksum_hex(exp_path);
  if (!cfg.feats.file.empty())
    inputs["features"] = io::file_checksum_hex(cfg.feats.file);

  const auto sidecar = ws.nre_dir() / "nre.json";
  const auto bin = ws.nre_dir() / "nre.bin";
  if (!force && detail::stage_current(sidecar, config, inputs, {bin}))
    return {true, io::read_json(sidecar)};

  EnergyTable dft;
  if (cfg.train.pretrain) dft = load_energy_table(dft_path, EnergyKind::dft);
  const EnergyTable exp =
      load_energy_table(exp_path, EnergyKind::experimental);

  NreTrainReport report;
  NreParams params = pretrain_then_finetune(dft, exp, feats, cfg.train, &report);

  std::filesystem::create_directories(ws.nre_dir());
  io::save_params(bin, params.params());
  nlohmann::json j;
  j["config"] = config;
  j["inputs"] = inputs;
  j["report"] = {{"pretrain", detail::regressor_report_json(report.pretrain)},
                 {"finetune", detail::regressor_report_json(report.finetune)},
                 {"exp_only", detail::regressor_report_json(report.exp_only)},
                 {"finetuned_test_mae", report.finetuned_test_mae},
                 {"exp_only_test_mae", report.exp_only_test_mae}};
  io::write_json(sidecar, j);
  return {false, j};
}

// ---------------------------------------------------------------------------
// precompute-refs

struct RefsStageConfig {
  int k = 3;
  FilterMode mode = FilterMode::subset;
};

inline StageResult run_precompute_refs(const Workspace& ws,
                                       const RefsStageConfig& cfg,
                                       bool force = false) {
  if (cfg.k < 1)
    throw std::invalid_argument("precompute-refs: K must be at least 1");
  const auto train_path = ws.split_file("train");
  const auto valid_path = ws.split_file("valid");
  const auto test_path = ws.split_file("test");
  detail::require_artifact(train_path, "ingested training split", "ingest");
  detail::require_artifact(valid_path, "ingested validation split", "ingest");
  detail::require_artifact(test_path, "ingested test split", "ingest");
  const auto mpc_bin = ws.mpc_dir() / "mpc.bin";
  const auto nre_bin = ws.nre_dir() / "nre.bin";
  detail::require_artifact(mpc_bin, "mpc checkpoint", "train-mpc");
  detail::require_artifact(nre_bin, "nre checkpoint", "train-nre");

  nlohmann::json config;
  config["k"] = cfg.k;
  config["mode"] = filter_mode_name(cfg.mode);
  // Tables are keyed to the exact recipe files and retriever checkpoints.
  nlohmann::json inputs;
  inputs["train"] = io::file_checksum_hex(train_path);
  inputs["valid"] = io::file_checksum_hex(valid_path);
  inputs["test"] = io::file_checksum_hex(test_path);
  inputs["mpc_checkpoint"] = io::file_checksum_hex(mpc_bin);
  inputs["nre_checkpoint"] = io::file_checksum_hex(nre_bin);

  const auto sidecar = ws.refs_dir() / "refs.json";
  if (!force && detail::stage_current(sidecar, config, inputs, {})) {
    nlohmann::json j = io::read_json(sidecar);
    j.erase("refs");
    return {true, j};
  }

  const auto train = detail::load_split(train_path);
  const auto valid = detail::load_split(valid_path);
  const auto test = detail::load_split(test_path);
  const KnowledgeBase kb = build_vocab_and_kb(train);
  MpcParams mpc =
      detail::load_mpc_checkpoint(ws, static_cast<int>(kb.vocab.size()));
  detail::NreCheckpoint nre = detail::load_nre_checkpoint(ws);
  const ElementFeatureTable nre_feats = detail::build_features_checked(
      nre.feats, nre.encoder.feature_dim, "train-nre");
  const MpcIndex index = build_mpc_index(kb, mpc);

  int mpc_short = 0, nre_short = 0;
  // Training recipes exclude themselves: recipe i is knowledge-base row i.
  const auto process = [&](const std::vector<RawRecipe>& records,
                           bool exclude_self) {
    nlohmann::json out = nlohmann::json::object();
    std::vector<Composition> targets;
    for (const auto& r : records) targets.push_back(r.target);
    const DeltaHTable dh =
        precompute_delta_h(targets, kb, nre.params, nre_feats, cfg.mode);
    for (std::size_t i = 0; i < records.size(); ++i) {
      std::optional<int> exclude;
      if (exclude_self) exclude = static_cast<int>(i);
      const RetrievalSet ms =
          retrieve_mpc(records[i].target, mpc, index, cfg.k, exclude);
      const RetrievalSet ns =
          rank_by_delta_h(dh.row(static_cast<int>(i)), cfg.k, exclude);
      mpc_short += ms.short_result ? 1 : 0;
      nre_short += ns.short_result ? 1 : 0;
      out[records[i].id] = {{"mpc", ms.ids}, {"nre", ns.ids}};
    }
    return out;
  };

  nlohmann::json refs;
  refs["train"] = process(train, true);
  refs["valid"] = process(valid, false);
  refs["test"] = process(test, false);

  std::filesystem::create_directories(ws.refs_dir());
  nlohmann::json j;
  j["config"] = config;
  j["inputs"] = inputs;
  j["refs"] = refs;
  j["stats"] = {{"recipes", train.size() + valid.size() + test.size()},
                {"mpc_short", mpc_short},
                {"nre_short", nre_short}};
  io::write_json(sidecar, j);
  j.erase("refs");
  return {false, j};
}

// ---------------------------------------------------------------------------
// train

struct TrainStageConfig {
  FullTrainConfig train;  // batch_size 0 means pick by split mode
  FeatureSpec feats;
};

inline StageResult run_train(const Workspace& ws, TrainStageConfig cfg,
                             bool force = false) {
  const auto train_path = ws.split_file("train");
  const auto valid_path = ws.split_file("valid");
  const auto ingest_sidecar = ws.ingest_dir() / "ingest.json";
  detail::require_artifact(train_path, "ingested training split", "ingest");
  detail::require_artifact(valid_path, "ingested validation split", "ingest");
  detail::require_artifact(ingest_sidecar, "ingested dataset", "ingest");
  const auto refs_path = ws.refs_dir() / "refs.json";
  if (!cfg.train.zero_retrieval)
    detail::require_artifact(refs_path, "retrieval tables", "precompute-refs");

  if (cfg.train.batch_size <= 0) {
    std::string mode;
    detail::with_sidecar(ingest_sidecar, "ingest", [&](const nlohmann::json& j) {
      mode = j.at("config").at("split").get<std::string>();
      return 0;
    });
    cfg.train.batch_size = mode == "year" ? 128 : 32;
  }
  const ElementFeatureTable feats = cfg.feats.build();
  cfg.train.encoder.feature_dim = feats.dim;

  nlohmann::json config;
  config["encoder"] = detail::encoder_config_json(cfg.train.encoder);
  config["fusion"] = detail::fusion_config_json(cfg.train.fusion);
  config["epochs"] = cfg.train.epochs;
  config["patience"] = cfg.train.patience;
  config["batch_size"] = cfg.train.batch_size;
  config["lr"] = cfg.train.lr;
  config["weight_decay"] = cfg.train.weight_decay;
  config["seed"] = cfg.train.seed;
  config["zero_retrieval"] = cfg.train.zero_retrieval;
  config["decode"] = detail::decode_config_json(cfg.train.decode);
  config["feats"] = cfg.feats.to_json();
  nlohmann::json inputs;
  inputs["train"] = io::file_checksum_hex(train_path);
  inputs["valid"] = io::file_checksum_hex(valid_path);
  if (!cfg.train.zero_retrieval)
    inputs["refs"] = io::file_checksum_hex(refs_path);
  if (!cfg.feats.file.empty())
    inputs["features"] = io::file_checksum_hex(cfg.feats.file);

  const auto sidecar = ws.model_dir() / "model.json";
  const auto bin = ws.model_dir() / "model.bin";
  if (!force && detail::stage_current(sidecar, config, inputs, {bin}))
    return {true, io::read_json(sidecar)};

  const auto train = detail::load_split(train_path);
  const auto valid = detail::load_split(valid_path);
  const KnowledgeBase kb = build_vocab_and_kb(train);
  std::vector<Recipe> valid_recipes;
  for (const auto& r : valid) valid_recipes.push_back(labelize(r, kb.vocab));

  RefTable refs;
  nlohmann::json refs_meta = nlohmann::json::object();
  if (!cfg.train.zero_retrieval) {
    detail::with_sidecar(refs_path, "precompute-refs",
                         [&](const nlohmann::json& j) {
                           refs = detail::ref_table_from_json(
                               j.at("refs"), {"train", "valid"});
                           refs_meta = j.at("config");
                           return 0;
                         });
  }

  FullTrainReport report;
  FullModel model = train_full(kb.recipes, valid_recipes, kb, feats, refs,
                               refs, cfg.train, &report);

  std::filesystem::create_directories(ws.model_dir());
  io::save_params(bin, model.params());
  nlohmann::json j;
  j["config"] = config;
  j["inputs"] = inputs;
  j["model"] = {{"vocab_size", kb.vocab.size()}, {"refs", refs_meta}};
  j["report"] = {{"epochs_run", report.epochs_run},
                 {"best_epoch", report.best_epoch},
                 {"best_valid_top5", report.best_valid_top5},
                 {"final_train_loss", report.train_loss.empty()
                                          ? nlohmann::json()
                                          : nlohmann::json(
                                                report.train_loss.back())}};
  io::write_json(sidecar, j);
  return {false, j};
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalStageConfig {
  std::string split = "test";
  CaseMode mode = CaseMode::exact_set;
};

inline StageResult run_evaluate(const Workspace& ws, const EvalStageConfig& cfg,
                                bool force = false) {
  if (cfg.split != "train" && cfg.split != "valid" && cfg.split != "test")
    throw std::invalid_argument("evaluate: unknown split " + cfg.split);
  detail::ModelCheckpoint ckpt = detail::load_model_checkpoint(ws);
  const auto train_path = ws.split_file("train");
  const auto split_path = ws.split_file(cfg.split);
  detail::require_artifact(train_path, "ingested training split", "ingest");
  detail::require_artifact(split_path, "ingested " + cfg.split + " split",
                           "ingest");
  const auto refs_path = ws.refs_dir() / "refs.json";
  if (!ckpt.zero_retrieval)
    detail::require_artifact(refs_path, "retrieval tables", "precompute-refs");

  nlohmann::json config;
  config["split"] = cfg.split;
  config["case_mode"] = case_mode_name(cfg.mode);
  nlohmann::json inputs;
  inputs["model"] = io::file_checksum_hex(ws.model_dir() / "model.bin");
  inputs["train"] = io::file_checksum_hex(train_path);
  inputs["split"] = io::file_checksum_hex(split_path);
  if (!ckpt.zero_retrieval)
    inputs["refs"] = io::file_checksum_hex(refs_path);

  const auto sidecar = ws.eval_dir() / "report.json";
  if (!force && detail::stage_current(sidecar, config, inputs, {}))
    return {true, io::read_json(sidecar)};

  const auto train = detail::load_split(train_path);
  const KnowledgeBase kb = build_vocab_and_kb(train);
  if (static_cast<int>(kb.vocab.size()) != ckpt.model.fusion.vocab_size)
    throw std::runtime_error(
        "the ingested dataset changed since training (vocabulary " +
        std::to_string(kb.vocab.size()) + " vs " +
        std::to_string(ckpt.model.fusion.vocab_size) +
        " precursors); rerun `retro train`");
  const ElementFeatureTable feats = detail::build_features_checked(
      ckpt.feats, ckpt.encoder.feature_dim, "train");
  const SetRegistry registry = build_set_registry(kb.recipes, kb.vocab);

  const auto records = detail::load_split(split_path);
  std::vector<Recipe> recipes;
  std::vector<Composition> targets;
  for (const auto& r : records) {
    recipes.push_back(labelize(r, kb.vocab));
    targets.push_back(r.target);
  }

  std::vector<SampleRefs> refs(records.size());
  if (!ckpt.zero_retrieval) {
    RefTable table;
    detail::with_sidecar(refs_path, "precompute-refs",
                         [&](const nlohmann::json& j) {
                           table = detail::ref_table_from_json(
                               j.at("refs"), {cfg.split.c_str()});
                           return 0;
                         });
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto it = table.find(records[i].id);
      if (it == table.end())
        throw std::runtime_error("retrieval rows missing for recipe " +
                                 records[i].id +
                                 "; rerun `retro precompute-refs`");
      refs[i] = it->second;
    }
  }

  const Matrix probs = predict_probabilities(ckpt.model, targets, refs, kb,
                                             feats, ckpt.zero_retrieval);
  const EvalReport report = evaluate_batch(probs, recipes, kb.vocab, registry,
                                           ckpt.decode, cfg.mode);

  std::filesystem::create_directories(ws.eval_dir());
  nlohmann::json j;
  j["config"] = config;
  j["inputs"] = inputs;
  j["report"] = detail::eval_report_json(report);
  io::write_json(sidecar, j);
  return {false, j};
}

// ---------------------------------------------------------------------------
// predict

struct PredictConfig {
  std::string target;
  int topk = 5;
};

/// Ad hoc prediction for one target formula. Retrieval runs live against
/// the stored checkpoints; nothing is written to the workspace.
inline nlohmann::json run_predict(const Workspace& ws,
                                  const PredictConfig& cfg) {
  if (cfg.target.empty())
    throw std::invalid_argument("predict: --target is required");
  if (cfg.topk < 1)
    throw std::invalid_argument("predict: --topk must be at least 1");
  detail::ModelCheckpoint ckpt = detail::load_model_checkpoint(ws);
  const auto train_path = ws.split_file("train");
  detail::require_artifact(train_path, "ingested training split", "ingest");
  const auto train = detail::load_split(train_path);
  const KnowledgeBase kb = build_vocab_and_kb(train);
  if (static_cast<int>(kb.vocab.size()) != ckpt.model.fusion.vocab_size)
    throw std::runtime_error(
        "the ingested dataset changed since training (vocabulary " +
        std::to_string(kb.vocab.size()) + " vs " +
        std::to_string(ckpt.model.fusion.vocab_size) +
        " precursors); rerun `retro train`");
  const ElementFeatureTable feats = detail::build_features_checked(
      ckpt.feats, ckpt.encoder.feature_dim, "train");

  const Composition target = parse_formula(cfg.target);
  SampleRefs refs;
  nlohmann::json named_refs = nlohmann::json::object();
  if (!ckpt.zero_retrieval) {
    MpcParams mpc =
        detail::load_mpc_checkpoint(ws, static_cast<int>(kb.vocab.size()));
    detail::NreCheckpoint nre = detail::load_nre_checkpoint(ws);
    const ElementFeatureTable nre_feats = detail::build_features_checked(
        nre.feats, nre.encoder.feature_dim, "train-nre");
    const MpcIndex index = build_mpc_index(kb, mpc);
    const RetrievalSet ms = retrieve_mpc(target, mpc, index, ckpt.refs_k, {});
    const RetrievalSet ns = retrieve_nre(target, kb, nre.params, nre_feats,
                                         ckpt.refs_k, {}, ckpt.refs_mode);
    refs.mpc = ms.ids;
    refs.nre = ns.ids;
    named_refs["mpc"] = nlohmann::json::array();
    for (const int id : ms.ids)
      named_refs["mpc"].push_back(kb.recipes[static_cast<std::size_t>(id)].id);
    named_refs["nre"] = nlohmann::json::array();
    for (const int id : ns.ids)
      named_refs["nre"].push_back(kb.recipes[static_cast<std::size_t>(id)].id);
  }

  const Matrix probs = predict_probabilities(ckpt.model, {target}, {refs}, kb,
                                             feats, ckpt.zero_retrieval);
  const Eigen::VectorXd row = probs.row(0);
  const int l = static_cast<int>(kb.vocab.size());
  const SetPrediction decoded =
      enumerate_sets(row, std::min(ckpt.decode.top_n, l), ckpt.decode.max_size,
                     std::max(ckpt.decode.beam, cfg.topk));

  nlohmann::json out;
  out["target"] = canonical_formula(target);
  out["references"] = named_refs;
  out["predictions"] = nlohmann::json::array();
  const int take = std::min<int>(cfg.topk, static_cast<int>(decoded.sets.size()));
  for (int i = 0; i < take; ++i) {
    nlohmann::json entry;
    entry["precursors"] = nlohmann::json::array();
    for (const int id : decoded.sets[static_cast<std::size_t>(i)].ids)
      entry["precursors"].push_back(
          kb.vocab.precursors[static_cast<std::size_t>(id)]);
    entry["score"] = decoded.sets[static_cast<std::size_t>(i)].score;
    out["predictions"].push_back(entry);
  }
  return out;
}

}  // namespace retro
