#pragma once

// The `saex` command line: gen, train, explain, steer, eval, report.
//
// Needs CLI11 on the include path (vendor/CLI11.hpp).

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "saex/activation_store.hpp"
#include "saex/error.hpp"
#include "saex/evaluation.hpp"
#include "saex/explainer.hpp"
#include "saex/sae.hpp"
#include "saex/steering.hpp"
#include "saex/topicgen.hpp"
#include "saex/train.hpp"

namespace saex::cli {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kIo = 3,
  kFormat = 4,
  kInvariant = 5,
  kSelection = 6,
  kTraining = 7,
};

inline int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Io: return kIo;
    case ErrorKind::BadMagic:
    case ErrorKind::UnsupportedVersion:
    case ErrorKind::UnsupportedDtype:
    case ErrorKind::TruncatedPayload:
    case ErrorKind::SchemaMismatch: return kFormat;
    case ErrorKind::DimensionMismatch:
    case ErrorKind::NonFinite:
    case ErrorKind::CountMismatch:
    case ErrorKind::DuplicateToken:
    case ErrorKind::IndexOutOfRange:
    case ErrorKind::InvalidArgument: return kInvariant;
    case ErrorKind::EmptySelection:
    case ErrorKind::UnknownFeature:
    case ErrorKind::UnknownTopic:
    case ErrorKind::EmptyResult: return kSelection;
    case ErrorKind::NonFiniteLoss: return kTraining;
  }
  return kInternal;
}

inline constexpr const char* kExitCodeHelp =
    "Exit codes: 0 ok, 1 internal error, 2 usage, 3 I/O, 4 bad file format or schema,\n"
    "5 failed invariant or bad argument, 6 empty or unknown selection, 7 non-finite training loss.\n"
    "Errors are reported on one line: error: kind=<Kind> msg=<text>";

namespace detail {

inline std::uint64_t fnv1a(const std::vector<unsigned char>& bytes, std::uint64_t h = 14695981039346656037ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline nlohmann::json file_identity(const fs::path& path) {
  return {{"file", path.filename().string()}, {"fnv1a", hex64(fnv1a(saex::detail::slurp(path)))}};
}

// Hash of every shard listed in a manifest, in manifest order.
inline nlohmann::json manifest_identity(const fs::path& manifest) {
  std::uint64_t h = 14695981039346656037ULL;
  std::size_t n = 0;
  for (const auto& p : read_manifest(manifest)) {
    h = fnv1a(saex::detail::slurp(p), h);
    ++n;
  }
  return {{"file", manifest.filename().string()}, {"shards", n}, {"fnv1a", hex64(h)}};
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// key=value lines; '#' starts a comment. Keys may use '_' or '-'.
inline std::vector<std::string> config_args(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open config '" + path.string() + "'");
  std::vector<std::string> args;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::SchemaMismatch,
            "config line " + std::to_string(lineno) + " is not key=value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    std::replace(key.begin(), key.end(), '_', '-');
    args.push_back("--" + key);
    args.push_back(value);
  }
  return args;
}

// Moves `--config FILE` out of argv and splices the file's settings in right
// after the subcommand, so explicit flags (which come later) win.
inline std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::optional<std::string> config;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (!config || args.size() < 2) return args;
  auto extra = config_args(*config);
  args.insert(args.begin() + 2, extra.begin(), extra.end());
  return args;
}

inline std::string option_value(const CLI::Option* opt) {
  const auto& results = opt->results();
  if (results.empty()) return opt->get_default_str();
  if (opt->get_expected_max() <= 1) return results.back();  // repeated scalar flag: the last one wins
  std::string joined;
  for (std::size_t i = 0; i < results.size(); ++i) joined += (i ? " " : "") + results[i];
  return joined;
}

// Resolved options as key=value lines; the file is a valid --config input.
inline void write_config_echo(const CLI::App& sub, const fs::path& path,
                              const std::map<std::string, std::string>& overrides = {}) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write config echo '" + path.string() + "'");
  out << "# saex " << sub.get_name() << '\n';
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || opt->get_lnames().empty()) continue;
    const std::string key = opt->get_lnames().front();
    auto it = overrides.find(key);
    const std::string value = it != overrides.end() ? it->second : option_value(opt);
    if (value.empty()) continue;
    out << key << '=' << value << '\n';
  }
}

inline std::uint64_t resolve_seed(const CLI::Option* opt, std::uint64_t seed) {
  if (opt->count() > 0) return seed;
  if (const char* env = std::getenv("SAE_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      require(used == std::string(env).size(), ErrorKind::InvalidArgument, "SAE_SEED is not an integer");
      return v;
    } catch (const std::logic_error&) {
      fail(ErrorKind::InvalidArgument, "SAE_SEED is not an integer");
    }
  }
  return seed;
}

inline void write_json(const nlohmann::json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::SchemaMismatch, "'" + path.filename().string() + "' is not valid JSON: " + e.what());
  }
}

inline std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace detail

// Text or CSV rendering of an EvalReport document.
inline std::string render_report(const nlohmann::json& report, const std::string& format) {
  require(format == "text" || format == "csv", ErrorKind::InvalidArgument, "format must be text or csv");
  if (!report.is_object() || report.value("version", std::string()) != kEvalReportVersion ||
      !report.contains("methods") || !report["methods"].is_array())
    fail(ErrorKind::SchemaMismatch, std::string("not a ") + kEvalReportVersion + " document");
  struct Row {
    std::string method;
    double precision, leakage, distinct;
  };
  std::vector<Row> rows;
  try {
    for (const auto& m : report["methods"])
      rows.push_back({m.at("method").get<std::string>(), m.at("topic_precision").get<double>(),
                      m.at("pattern_leakage").get<double>(), m.at("distinct_ratio").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::SchemaMismatch, std::string("bad method entry: ") + e.what());
  }
  std::ostringstream out;
  char buf[256];
  if (format == "csv") {
    out << "method,topic_precision,pattern_leakage,distinct_ratio\n";
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g\n", r.method.c_str(), r.precision, r.leakage, r.distinct);
      out << buf;
    }
    return out.str();
  }
  std::snprintf(buf, sizeof buf, "%-8s %16s %16s %16s\n", "method", "topic_precision", "pattern_leakage",
                "distinct_ratio");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-8s %16.4f %16.4f %16.4f\n", r.method.c_str(), r.precision, r.leakage,
                  r.distinct);
    out << buf;
  }
  if (report.contains("matched_features") && report.contains("num_features")) {
    std::snprintf(buf, sizeof buf, "matched features: %zu of %zu, dead: %zu, validation loss: %.6g\n",
                  report["matched_features"].get<std::size_t>(), report["num_features"].get<std::size_t>(),
                  report.value("dead_features", std::size_t{0}), report.value("valid_loss", 0.0));
    out << buf;
  }
  return out.str();
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Top-K sparse autoencoders: train, explain, steer, evaluate", "saex"};
  app.footer(kExitCodeHelp);
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // gen
  TopicModelConfig gen_cfg;
  std::size_t gen_vocab = 2000, gen_dim = 32, gen_patterns = 10;
  double gen_scale = 0.5, gen_valid = 0.2;
  std::string gen_out;
  gen_cfg.pattern_rate = 0.3;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic topic corpus with ground truth");
  gen->add_option("--topics,--n-topics", gen_cfg.n_topics, "Number of topics")->capture_default_str();
  gen->add_option("--docs,--docs-per-topic", gen_cfg.docs_per_topic, "Documents per topic")->capture_default_str();
  gen->add_option("--len,--doc-length", gen_cfg.doc_length, "Tokens per document")->capture_default_str();
  gen->add_option("--sigma", gen_cfg.sigma, "Random-walk step std")->capture_default_str();
  gen->add_option("--pattern-rate", gen_cfg.pattern_rate, "Probability of a pattern token")->capture_default_str();
  gen->add_option("--pattern-tokens", gen_patterns, "Number of pattern tokens (ids 0..n-1)")->capture_default_str();
  gen->add_option("--vocab-size", gen_vocab, "Vocabulary size")->capture_default_str();
  gen->add_option("--dim", gen_dim, "Hidden dimension")->capture_default_str();
  gen->add_option("--emb-scale", gen_scale, "Std of the random word embeddings")->capture_default_str();
  gen->add_option("--hidden-noise", gen_cfg.hidden_noise, "Std of the hidden-state noise")->capture_default_str();
  auto* gen_top_g = gen->add_option("--top-g", gen_cfg.top_g, "Ground-truth words per topic (capped at the vocabulary size unless given)")
      ->capture_default_str();
  gen->add_option("--max-topic-dot", gen_cfg.max_topic_dot, "Largest allowed dot between topic seeds")
      ->capture_default_str();
  gen->add_option("--valid-fraction", gen_valid, "Share of each topic's documents held out")->capture_default_str();
  auto* gen_seed = gen->add_option("--seed", gen_cfg.seed, "Seed (falls back to $SAE_SEED)")->capture_default_str();
  gen->add_option("--threads", gen_cfg.threads, "Worker threads")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train
  TrainConfig train_cfg;
  std::string train_manifest, valid_manifest, train_out;
  auto* tr = app.add_subcommand("train", "Train a Top-K sparse autoencoder");
  tr->add_option("--train", train_manifest, "Training manifest")->required();
  tr->add_option("--valid", valid_manifest, "Validation manifest");
  tr->add_option("--num-features", train_cfg.num_features, "Dictionary size C")->capture_default_str();
  tr->add_option("--k-final,--k", train_cfg.k_final, "Active features per token after annealing")
      ->capture_default_str();
  tr->add_option("--k-init", train_cfg.k_init, "Active features per token at the start")->capture_default_str();
  tr->add_option("--k-anneal-fraction", train_cfg.k_anneal_fraction, "Share of epoch 1 spent annealing K")
      ->capture_default_str();
  tr->add_option("--lr", train_cfg.lr, "Adam learning rate")->capture_default_str();
  tr->add_option("--adam-beta1", train_cfg.adam_beta1)->capture_default_str();
  tr->add_option("--adam-beta2", train_cfg.adam_beta2)->capture_default_str();
  tr->add_option("--adam-eps", train_cfg.adam_eps)->capture_default_str();
  tr->add_option("--epochs", train_cfg.epochs)->capture_default_str();
  tr->add_option("--batch-size", train_cfg.batch_size)->capture_default_str();
  auto* tr_seed = tr->add_option("--seed", train_cfg.seed, "Seed (falls back to $SAE_SEED)")->capture_default_str();
  tr->add_option("--threads", train_cfg.threads, "Worker threads")->capture_default_str();
  tr->add_option("--out", train_out, "Output directory")->required();

  // explain
  std::string ex_model, ex_emb, ex_vocab, ex_shards, ex_method = "mi", ex_out;
  MiOptions ex_mi;
  SpanOptions ex_spans;
  double ex_tau = 0.1, ex_q = -1.0;
  std::size_t ex_min_count = 1;
  std::vector<std::uint32_t> ex_features;
  auto* ex = app.add_subcommand("explain", "Explain features as word sets (MI) or spans (TopAct, N2G)");
  ex->add_option("--model", ex_model, "Model file")->required();
  ex->add_option("--embeddings", ex_emb, "Output-embedding matrix (.saes)")->required();
  ex->add_option("--vocab", ex_vocab, "Token strings, one per line")->required();
  ex->add_option("--shards", ex_shards, "Activation manifest (needed for topact and n2g)");
  ex->add_option("--method", ex_method, "mi, topact or n2g")
      ->check(CLI::IsMember({"mi", "topact", "n2g"}))
      ->capture_default_str();
  ex->add_option("--top-m", ex_mi.top_m, "Words per MI explanation")->capture_default_str();
  ex->add_option("--min-emission", ex_q, "Drop words below this quantile of p(w|W_c) (off when < 0)")
      ->capture_default_str();
  ex->add_option("--span-len", ex_spans.span_len)->capture_default_str();
  ex->add_option("--top-n", ex_spans.top_n, "Spans per explanation")->capture_default_str();
  ex->add_option("--tau", ex_tau, "N2G masking threshold")->capture_default_str();
  ex->add_option("--vocab-min-count", ex_min_count, "Minimum corpus count for MI words when --shards is given")
      ->capture_default_str();
  ex->add_option("--features", ex_features, "Feature ids (default: all)");
  ex->add_option("--out", ex_out, "Output JSONL")->required();

  // steer
  std::string st_model, st_labels, st_select, st_mode = "calibrate", st_in, st_out;
  double st_alpha = -1.0, st_beta = 2.5;
  auto* st = app.add_subcommand("steer", "Apply amplify or calibrate steering to activation shards");
  st->add_option("--model", st_model, "Model file")->required();
  st->add_option("--labels", st_labels, "Feature labels (JSONL)")->required();
  st->add_option("--select", st_select, "Label to select")->required();
  st->add_option("--mode", st_mode, "amplify, calibrate, or composite (amplify then calibrate)")
      ->check(CLI::IsMember({"amplify", "calibrate", "composite"}))
      ->capture_default_str();
  st->add_option("--alpha", st_alpha)->capture_default_str();
  st->add_option("--beta", st_beta)->capture_default_str();
  st->add_option("--in", st_in, "Input manifest")->required();
  st->add_option("--out", st_out, "Output directory")->required();

  // eval
  std::string ev_corpus, ev_model, ev_out, ev_explanations;
  EvalConfig ev_cfg;
  double ev_q = -1.0;
  auto* ev = app.add_subcommand("eval", "Score explanation methods against the corpus ground truth");
  ev->add_option("--corpus", ev_corpus, "Directory written by gen")->required();
  ev->add_option("--model", ev_model, "Model file")->required();
  ev->add_option("--top-m", ev_cfg.top_m)->capture_default_str();
  ev->add_option("--min-emission", ev_q, "MI emission quantile filter (off when < 0)")->capture_default_str();
  ev->add_option("--span-len", ev_cfg.spans.span_len)->capture_default_str();
  ev->add_option("--top-n", ev_cfg.spans.top_n)->capture_default_str();
  ev->add_option("--tau", ev_cfg.n2g_tau)->capture_default_str();
  ev->add_option("--features-per-topic", ev_cfg.features_per_topic)->capture_default_str();
  ev->add_option("--vocab-min-count", ev_cfg.vocab_min_count)->capture_default_str();
  ev->add_option("--explanations", ev_explanations, "Also write the evaluated explanations (JSONL)");
  ev->add_option("--out", ev_out, "EvalReport JSON")->required();

  // report
  std::string rp_in, rp_format = "text", rp_out;
  auto* rp = app.add_subcommand("report", "Render an EvalReport as a text table or CSV");
  rp->add_option("--in", rp_in, "EvalReport JSON")->required();
  rp->add_option("--format", rp_format)->check(CLI::IsMember({"text", "csv"}))->capture_default_str();
  rp->add_option("--out", rp_out, "Output file (default: stdout)");

  std::vector<std::string> args(argv, argv + argc);
  try {
    args = detail::expand_config(std::move(args));
  } catch (const Error& e) {
    err << "error: kind=" << to_string(e.kind()) << " msg=" << detail::one_line(e.what()) << '\n';
    return exit_code(e.kind());
  }
  std::vector<const char*> cargs;
  for (const auto& a : args) cargs.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: kind=Usage msg=" << detail::one_line(e.what()) << '\n';
    err << app.help();
    return kUsage;
  }

  try {
    if (*gen) {
      gen_cfg.seed = detail::resolve_seed(gen_seed, gen_cfg.seed);
      require(gen_patterns <= gen_vocab, ErrorKind::InvalidArgument, "more pattern tokens than vocabulary");
      if (gen_top_g->count() == 0) gen_cfg.top_g = std::min(gen_cfg.top_g, gen_vocab);
      gen_cfg.vocab_embeddings = make_vocab_embeddings(gen_vocab, gen_dim, gen_scale, gen_patterns, gen_cfg.seed);
      gen_cfg.pattern_tokens.clear();
      for (std::uint32_t i = 0; i < gen_patterns; ++i) gen_cfg.pattern_tokens.push_back(i);
      auto [corpus, gt] = generate_corpus(gen_cfg);
      write_corpus(corpus, gt, gen_cfg, gen_valid, gen_out);
      detail::write_config_echo(*gen, fs::path(gen_out) / "gen.config",
                                {{"seed", std::to_string(gen_cfg.seed)}, {"top-g", std::to_string(gen_cfg.top_g)}});
    } else if (*tr) {
      train_cfg.seed = detail::resolve_seed(tr_seed, train_cfg.seed);
      const auto train_store = ActivationStore::open(train_manifest);
      const auto valid_store = valid_manifest.empty() ? ActivationStore() : ActivationStore::open(valid_manifest);
      const auto result = train(train_store, valid_store, train_cfg);
      fs::create_directories(train_out);
      write_model(result.model, fs::path(train_out) / "model.saem");
      nlohmann::json report = result.report;
      detail::write_json(report, fs::path(train_out) / "train_report.json");
      detail::write_config_echo(*tr, fs::path(train_out) / "train.config", {{"seed", std::to_string(train_cfg.seed)}});
    } else if (*ex) {
      const auto model = read_model(ex_model);
      const auto emb = load_embeddings(ex_emb, ex_vocab);
      const auto method = parse_method(ex_method == "mi" ? "MI" : ex_method == "topact" ? "TopAct" : "N2G");
      std::vector<std::uint32_t> features = ex_features;
      if (features.empty())
        for (std::uint32_t c = 0; c < model.num_features(); ++c) features.push_back(c);
      for (auto c : features)
        require(c < model.num_features(), ErrorKind::UnknownFeature, "feature " + std::to_string(c) + " out of range");

      std::vector<Explanation> explanations;
      if (method == ExplainMethod::MI) {
        std::vector<std::uint32_t> ids;
        if (!ex_shards.empty()) {
          ids = build_vocab(ActivationStore::open(ex_shards), emb.vocab, ex_min_count).ids;
        } else {
          for (std::uint32_t v = 0; v < emb.vocab_size(); ++v) ids.push_back(v);
        }
        const auto sub = emb.subset(ids);
        const auto table = mi_scores(model, sub);
        MiOptions opts = ex_mi;
        if (ex_q >= 0.0) opts.min_emission_quantile = ex_q;
        for (auto c : features) explanations.push_back(explain_mi(table, c, sub.vocab, opts, ids));
      } else {
        require(!ex_shards.empty(), ErrorKind::InvalidArgument, "--shards is required for span methods");
        const auto store = ActivationStore::open(ex_shards);
        for (auto c : features) {
          auto spans = topact_explain(model, store, c, ex_spans);
          if (method == ExplainMethod::N2G)
            for (auto& s : spans) s = n2g_refine(s, model, c, ex_tau);
          explanations.push_back(spans_to_explanation(c, method, spans, emb.vocab));
        }
      }
      if (fs::path(ex_out).has_parent_path()) fs::create_directories(fs::path(ex_out).parent_path());
      write_explanations(explanations, ex_out);
      detail::write_config_echo(*ex, ex_out + ".config");
    } else if (*st) {
      const auto model = read_model(st_model);
      const auto subset = select_features(read_labels(st_labels), model, st_select);
      SteerMode mode = st_mode == "amplify" ? SteerMode::amplify(st_alpha) : SteerMode::calibrate(st_beta);
      if (st_mode == "composite") mode = SteerMode{{Amplify{st_alpha}, Calibrate{st_beta}}};
      steer_stream(st_in, subset, mode, st_out);
      detail::write_config_echo(*st, fs::path(st_out) / "steer.config");
    } else if (*ev) {
      const auto paths = corpus_paths(ev_corpus);
      const auto model = read_model(ev_model);
      const auto emb = load_embeddings(paths.embeddings, paths.vocab);
      const auto train_store = ActivationStore::open(paths.train_manifest);
      const auto valid_store = ActivationStore::open(paths.valid_manifest);
      const auto gt = read_ground_truth(paths.ground_truth);
      if (ev_q >= 0.0) ev_cfg.min_emission_quantile = ev_q;
      const auto report = evaluate(model, emb, train_store, valid_store, gt, ev_cfg);
      const nlohmann::json provenance = {{"model", detail::file_identity(ev_model)},
                                         {"model_seed", model.seed},
                                         {"model_steps", model.steps_trained},
                                         {"model_k", model.k},
                                         {"embeddings", detail::file_identity(paths.embeddings)},
                                         {"vocab", detail::file_identity(paths.vocab)},
                                         {"ground_truth", detail::file_identity(paths.ground_truth)},
                                         {"train", detail::manifest_identity(paths.train_manifest)},
                                         {"valid", detail::manifest_identity(paths.valid_manifest)}};
      detail::write_json(to_json(report, provenance), ev_out);
      if (!ev_explanations.empty()) write_explanations(report.explanations, ev_explanations);
      detail::write_config_echo(*ev, ev_out + ".config");
    } else if (*rp) {
      const std::string text = render_report(detail::read_json(rp_in), rp_format);
      if (rp_out.empty()) {
        out << text;
      } else {
        std::ofstream f(rp_out, std::ios::trunc | std::ios::binary);
        require(static_cast<bool>(f), ErrorKind::Io, "cannot write '" + rp_out + "'");
        f << text;
      }
    }
  } catch (const Error& e) {
    err << "error: kind=" << to_string(e.kind()) << " msg=" << detail::one_line(e.what()) << '\n';
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: kind=Io msg=" << detail::one_line(e.what()) << '\n';
    return kIo;
  } catch (const std::exception& e) {
    err << "error: kind=Internal msg=" << detail::one_line(e.what()) << '\n';
    return kInternal;
  }
  return kOk;
}

}  // namespace saex::cli
