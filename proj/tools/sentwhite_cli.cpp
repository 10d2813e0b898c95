// sentwhite: command-line front end.
//
//   sentwhite inspect FILE                  header summary of a WHB1 file
//   sentwhite eval HIDDEN PAIRS [flags]     one pipeline config, CSV on stdout
//   sentwhite grid SPEC DATA --out-dir DIR  ablation grid, heatmap, sweep CSVs
//   sentwhite sentences PAIRS --out FILE    sentence table for the exporter
//   sentwhite synth --out-dir DIR           synthetic fixture
//
// Exit codes: 0 success, 1 usage error, 2 data error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "sentwhite/ablation.hpp"
#include "sentwhite/errors.hpp"
#include "sentwhite/evaluation.hpp"
#include "sentwhite/grid_spec.hpp"
#include "sentwhite/hidden_states.hpp"
#include "sentwhite/pipeline.hpp"
#include "sentwhite/synthetic.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace sentwhite;

namespace {

constexpr const char* kToolVersion = "0.1.0";
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

unsigned default_threads() {
  if (const char* env = std::getenv("SENTWHITE_THREADS")) {
    try {
      const auto v = std::stoul(env);
      if (v > 0) return static_cast<unsigned>(v);
    } catch (const std::exception&) {
    }
    throw ConfigError(fmt::format("SENTWHITE_THREADS must be a positive integer, got '{}'", env));
  }
  return 1;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot create '{}'", path.string()));
  out << text;
  if (!out) throw DataError(fmt::format("write failed on '{}'", path.string()));
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json config_json(const PipelineConfig& c) {
  return {{"token", to_string(c.pooling)},
          {"layers", c.layers},
          {"layer", format_layers(c.layers)},
          {"whitening", c.whitening}};
}

// inspect ------------------------------------------------------------------

struct InspectArgs {
  std::string path;
  std::string sidecar;
};

int cmd_inspect(const InspectArgs& a) {
  if (a.path.empty()) throw DataError("no file given");
  std::ifstream in(a.path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open '{}'", a.path));
  HiddenStateReader reader(in);
  const auto& h = reader.header();
  std::uint64_t tokens = 0;
  std::uint32_t min_tokens = 0, max_tokens = 0;
  while (auto rec = reader.next()) {
    tokens += rec->token_count;
    min_tokens = reader.records_read() == 1 ? rec->token_count
                                            : std::min(min_tokens, rec->token_count);
    max_tokens = std::max(max_tokens, rec->token_count);
  }
  std::cout << "file:          " << a.path << '\n'
            << "format:        WHB1 version " << h.version << '\n'
            << "num_layers:    " << h.num_layers << " (layers 0.." << h.num_layers - 1 << ")\n"
            << "hidden_dim:    " << h.hidden_dim << '\n'
            << "record_kind:   " << to_string(h.record_kind) << '\n'
            << "num_sentences: " << h.num_sentences << '\n'
            << "records_read:  " << reader.records_read() << '\n';
  if (reader.records_read() > 0) {
    std::cout << fmt::format("tokens:        min {} / mean {:.2f} / max {}\n", min_tokens,
                             static_cast<double>(tokens) / reader.records_read(), max_tokens);
  }
  if (!a.sidecar.empty()) {
    const auto sentences = read_sentence_sidecar(a.sidecar);
    std::cout << "sidecar:       " << sentences.size() << " sentences\n";
  }
  return 0;
}

// eval ---------------------------------------------------------------------

struct EvalArgs {
  std::string hidden;
  std::string pairs;
  std::string token = "avg";
  std::string layers;
  bool whiten = false;
  double eigen_floor = 1e-10;
  std::string fit_corpus;
  std::string name;
  std::optional<double> threshold;
  std::string manifest = "manifest.json";
  std::string save_transform;
};

int cmd_eval(const EvalArgs& a) {
  PipelineConfig config;
  config.pooling = parse_pooling(a.token);
  config.layers = parse_layers(a.layers);
  config.whitening = a.whiten;
  if (!(a.eigen_floor > 0.0)) throw ConfigError("--eigen-floor must be positive");
  if (!a.fit_corpus.empty() && !a.whiten) throw ConfigError("--fit-corpus requires --whiten");
  if (!a.save_transform.empty() && !a.whiten) {
    throw ConfigError("--save-transform requires --whiten");
  }

  // Validate the layer set against the header before any computation.
  {
    std::ifstream in(a.hidden, std::ios::binary);
    if (!in) throw DataError(fmt::format("cannot open '{}'", a.hidden));
    HiddenStateReader reader(in);
    config.normalize(reader.header().num_layers);
  }

  const auto range = a.threshold ? ScoreRange::Binary : ScoreRange::Sts;
  const auto pairs = load_pairs_file(a.pairs, range);
  const auto name = a.name.empty() ? fs::path(a.pairs).stem().string() : a.name;

  const auto corpus = PooledCorpus::from_file(a.hidden, config.layers, {config.pooling});
  FitCorpus fit;
  fit.options.eigen_floor_ratio = a.eigen_floor;
  EmbeddingMatrix external;
  if (!a.fit_corpus.empty()) {
    const auto fit_pool = PooledCorpus::from_file(a.fit_corpus, config.layers, {config.pooling});
    external = fit_pool.combine(config);
    fit.external = &external;
  }

  EmbeddingMatrix embeddings = corpus.combine(config);
  std::optional<WhiteningTransform> transform;
  if (config.whitening) {
    transform = fit_whitening(fit.external ? *fit.external : embeddings, fit.options);
    embeddings = apply_whitening(embeddings, *transform);
    if (!a.save_transform.empty()) {
      std::ofstream out(a.save_transform, std::ios::binary | std::ios::trunc);
      if (!out) throw DataError(fmt::format("cannot create '{}'", a.save_transform));
      write_whitening(*transform, out);
    }
  }

  json result;
  if (a.threshold) {
    const double acc = threshold_accuracy(embeddings, pairs.pairs, *a.threshold);
    std::cout << "dataset,n_pairs,accuracy_x100\n"
              << name << ',' << pairs.pairs.size() << ',' << format_x100(acc) << '\n';
    result = {{"dataset", name}, {"n_pairs", pairs.pairs.size()}, {"accuracy", acc}};
  } else {
    const auto r = evaluate_sts(embeddings, pairs.pairs, name);
    write_results_csv(std::cout, std::span(&r, 1));
    result = {{"dataset", name}, {"n_pairs", r.n_pairs}, {"spearman_rho", r.spearman_rho}};
  }

  json manifest = {
      {"tool", "sentwhite"},
      {"version", kToolVersion},
      {"command", "eval"},
      {"config", config_json(config)},
      {"inputs", {{"hidden_states", a.hidden}, {"pairs", a.pairs}}},
      {"dataset", name},
      {"eigen_floor_ratio", a.eigen_floor},
      {"fit_corpus", a.fit_corpus.empty() ? "transductive" : a.fit_corpus},
      {"outputs", {{"results", "stdout"}}},
      {"result", result},
  };
  if (a.threshold) manifest["threshold"] = *a.threshold;
  if (transform) {
    manifest["retained_dim"] = transform->retained_dim();
    if (!a.save_transform.empty()) manifest["outputs"]["transform"] = a.save_transform;
  }
  write_json(a.manifest, manifest);
  return 0;
}

// grid ---------------------------------------------------------------------

struct GridArgs {
  std::string spec;
  std::string data;
  std::string out_dir = ".";
};

int cmd_grid(const GridArgs& a, unsigned threads) {
  auto g = parse_grid_spec_file(a.spec);
  const auto entries = parse_data_manifest_file(a.data);
  if (g.grid.datasets.empty()) {
    for (const auto& e : entries) g.grid.datasets.push_back(e.name);
  }
  const auto configs = expand_configs(g.grid);  // empty product fails here, before any I/O
  g.evaluation.threads = threads;

  std::map<std::string, const DataEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  std::vector<DatasetInput> inputs;
  for (const auto& name : g.grid.datasets) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw ConfigError(fmt::format("dataset '{}' is not in the data manifest", name));
    }
    inputs.push_back({name, it->second->hidden_states_path,
                      load_pairs_file(it->second->pairs_path).pairs});
  }

  std::set<std::uint32_t> layers;
  std::set<Pooling> modes(g.grid.pooling_modes.begin(), g.grid.pooling_modes.end());
  for (const auto& c : configs) layers.insert(c.layers.begin(), c.layers.end());
  if (g.sweep_range) {
    for (auto l : g.sweep_range->layers()) layers.insert(l);
  }
  const GridEvaluator evaluator(inputs, {layers.begin(), layers.end()},
                                {modes.begin(), modes.end()}, g.evaluation);
  const auto results = evaluator.evaluate_all(configs);

  fs::create_directories(a.out_dir);
  const fs::path out(a.out_dir);
  std::vector<std::string> written;
  auto emit = [&](const std::string& file, const std::string& text) {
    write_text(out / file, text);
    written.push_back(file);
  };

  std::ostringstream grid_csv;
  write_grid_csv(grid_csv, results);
  emit("grid.csv", grid_csv.str());

  const std::set<bool> flags(g.grid.whitening_flags.begin(), g.grid.whitening_flags.end());
  auto suffix = [](Pooling p, bool w) {
    return fmt::format("{}_{}", p == Pooling::Cls ? "cls" : "avg", w ? "T" : "F");
  };
  if (g.heatmap_range) {
    for (auto p : modes) {
      for (bool w : flags) {
        std::ostringstream csv;
        write_heatmap_csv(csv, two_layer_heatmap(results, *g.heatmap_range, p, w));
        emit(fmt::format("heatmap_{}.csv", suffix(p, w)), csv.str());
      }
    }
  }
  if (g.sweep_range) {
    for (auto p : modes) {
      for (bool w : flags) {
        std::ostringstream csv;
        const auto sweep = search_layer_count_sweep(evaluator, *g.sweep_range, p, w, g.sweep);
        write_sweep_csv(csv, sweep);
        emit(fmt::format("sweep_{}.csv", suffix(p, w)), csv.str());
      }
    }
  }
  if (flags.size() == 2) {
    std::ostringstream csv;
    write_delta_csv(csv, whitening_delta_report(results));
    emit("whitening_delta.csv", csv.str());
  }

  json datasets = json::array();
  for (const auto& in : inputs) {
    const auto* e = by_name.at(in.name);
    datasets.push_back({{"name", e->name},
                        {"hidden_states", e->hidden_states_path},
                        {"pairs", e->pairs_path}});
  }
  json manifest = {
      {"tool", "sentwhite"},
      {"version", kToolVersion},
      {"command", "grid"},
      {"grid_spec", a.spec},
      {"data_manifest", a.data},
      {"datasets", datasets},
      {"num_configs", configs.size()},
      {"eigen_floor_ratio", g.evaluation.whitening.eigen_floor_ratio},
      {"fit_scope", to_string(g.evaluation.fit_scope)},
      {"outputs", written},
  };
  if (!g.evaluation.fit_corpus_path.empty()) manifest["fit_corpus"] = g.evaluation.fit_corpus_path;
  if (g.sweep_range) {
    manifest["sweep"] = {{"range", {g.sweep_range->first, g.sweep_range->last}},
                         {"max_k", g.sweep.max_k},
                         {"exhaustive_max_k", g.sweep.exhaustive_max_k},
                         {"beam_width", g.sweep.beam_width}};
  }
  write_json(out / "manifest.json", manifest);
  std::cout << fmt::format("{} configs x {} datasets -> {}\n", configs.size(), inputs.size(),
                           out.string());
  return 0;
}

// sentences ----------------------------------------------------------------

struct SentencesArgs {
  std::string pairs;
  std::string out;
  std::string sidecar;
  bool binary = false;
};

int cmd_sentences(const SentencesArgs& a) {
  const auto ds = load_pairs_file(a.pairs, a.binary ? ScoreRange::Binary : ScoreRange::Sts);
  std::string text;
  for (const auto& s : ds.sentences) {
    if (s.find('\n') != std::string::npos) throw DataError("sentence contains a newline");
    text += s;
    text += '\n';
  }
  write_text(a.out, text);
  if (!a.sidecar.empty()) {
    std::map<std::uint64_t, std::string> table;
    for (std::size_t i = 0; i < ds.sentences.size(); ++i) table.emplace(i, ds.sentences[i]);
    write_sentence_sidecar(a.sidecar, table);
  }
  std::cout << fmt::format("{} sentences from {} pairs -> {}\n", ds.sentences.size(),
                           ds.pairs.size(), a.out);
  return 0;
}

// synth --------------------------------------------------------------------

struct SynthArgs {
  std::string out_dir;
  std::string name = "synthetic";
  SyntheticOptions options;
  std::string kind = "tokens";
  std::string gold_token = "avg";
};

int cmd_synth(SynthArgs a) {
  if (a.kind == "tokens") {
    a.options.kind = RecordKind::Tokens;
  } else if (a.kind == "pooled") {
    a.options.kind = RecordKind::Pooled;
  } else {
    throw ConfigError(fmt::format("--kind must be tokens or pooled, got '{}'", a.kind));
  }
  a.options.gold_pooling = parse_pooling(a.gold_token);
  const auto fx = make_synthetic_fixture(a.options);
  fs::create_directories(a.out_dir);
  const fs::path out(a.out_dir);
  write_hidden_state_file((out / (a.name + ".whb1")).string(), fx.header, fx.records);
  write_text(out / (a.name + ".tsv"), fx.tsv);
  std::map<std::uint64_t, std::string> table;
  for (std::size_t i = 0; i < fx.pairs.sentences.size(); ++i) {
    table.emplace(i, fx.pairs.sentences[i]);
  }
  write_sentence_sidecar((out / (a.name + ".sentences.json")).string(), table);
  write_text(out / (a.name + ".data"),
             fmt::format("{} {}.whb1 {}.tsv\n", a.name, a.name, a.name));
  std::cout << fmt::format("wrote {}/{}.{{whb1,tsv,sentences.json,data}}\n", out.string(),
                           a.name);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sentence embeddings from transformer hidden states: pooling, layer "
               "combination, whitening and STS evaluation"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);
  unsigned threads = 0;
  app.add_option("--threads", threads,
                 "Worker threads (default: $SENTWHITE_THREADS or 1)")
      ->check(CLI::PositiveNumber);

  InspectArgs inspect;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print the header and record summary of a WHB1 file");
  inspect_cmd->add_option("file", inspect.path, "WHB1 file")->required();
  inspect_cmd->add_option("--sidecar", inspect.sidecar, "Sentence JSON sidecar to check");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Embed one dataset with one config and score it");
  eval_cmd->add_option("hidden_states", eval.hidden, "WHB1 file")->required();
  eval_cmd->add_option("pairs", eval.pairs, "Pairs TSV: gold<TAB>sentence_a<TAB>sentence_b")
      ->required();
  eval_cmd->add_option("--token", eval.token, "Token pooling: cls or avg")
      ->check(CLI::IsMember({"cls", "avg", "CLS", "AVG"}))
      ->capture_default_str();
  eval_cmd->add_option("--layers", eval.layers, "Layers to combine, e.g. 1,12")->required();
  eval_cmd->add_flag("--whiten", eval.whiten, "Apply whitening");
  eval_cmd->add_option("--eigen-floor", eval.eigen_floor,
                       "Drop eigenvalues below this fraction of the largest")
      ->capture_default_str();
  eval_cmd->add_option("--fit-corpus", eval.fit_corpus,
                       "WHB1 file to fit whitening on (default: the evaluated sentences)");
  eval_cmd->add_option("--name", eval.name, "Dataset name (default: pairs file stem)");
  eval_cmd->add_option("--threshold", eval.threshold,
                       "Binary labels: report accuracy of cosine >= threshold");
  eval_cmd->add_option("--manifest", eval.manifest, "Run manifest output path")
      ->capture_default_str();
  eval_cmd->add_option("--save-transform", eval.save_transform,
                       "Write the fitted whitening transform (WHT1)");

  GridArgs grid;
  auto* grid_cmd = app.add_subcommand("grid", "Run an ablation grid");
  grid_cmd->add_option("spec", grid.spec, "Grid spec file")->required();
  grid_cmd->add_option("data", grid.data, "Data manifest: name hidden_states pairs")->required();
  grid_cmd->add_option("--out-dir", grid.out_dir, "Output directory")->capture_default_str();

  SentencesArgs sentences;
  auto* sentences_cmd = app.add_subcommand(
      "sentences", "Write the deduplicated sentence table (line i = sentence id i)");
  sentences_cmd->add_option("pairs", sentences.pairs, "Pairs TSV")->required();
  sentences_cmd->add_option("--out", sentences.out, "Output text file")->required();
  sentences_cmd->add_option("--sidecar", sentences.sidecar, "Also write a JSON sidecar");
  sentences_cmd->add_flag("--binary", sentences.binary, "Gold labels are 0/1");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic fixture");
  synth_cmd->add_option("--out-dir", synth.out_dir, "Output directory")->required();
  synth_cmd->add_option("--name", synth.name)->capture_default_str();
  synth_cmd->add_option("--seed", synth.options.seed)->capture_default_str();
  synth_cmd->add_option("--sentences", synth.options.num_sentences)->capture_default_str();
  synth_cmd->add_option("--pairs", synth.options.num_pairs)->capture_default_str();
  synth_cmd->add_option("--num-layers", synth.options.num_layers)->capture_default_str();
  synth_cmd->add_option("--dim", synth.options.hidden_dim)->capture_default_str();
  synth_cmd->add_option("--max-tokens", synth.options.max_tokens)->capture_default_str();
  synth_cmd->add_option("--kind", synth.kind, "tokens or pooled")->capture_default_str();
  synth_cmd->add_option("--gold-token", synth.gold_token)->capture_default_str();
  synth_cmd->add_option("--gold-layer", synth.options.gold_layer)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (threads == 0) threads = default_threads();
    if (*inspect_cmd) return cmd_inspect(inspect);
    if (*eval_cmd) return cmd_eval(eval);
    if (*grid_cmd) return cmd_grid(grid, threads);
    if (*sentences_cmd) return cmd_sentences(sentences);
    if (*synth_cmd) return cmd_synth(synth);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
