// Command-line front end. Machine-readable results go to stdout (JSON or
// CSV), human summaries and errors to stderr.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "xprompt.hpp"

namespace fs = std::filesystem;
using namespace xprompt;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << s;
  if (!out) throw IoError("write failed for " + path.string());
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

std::set<TaskKind> kind_set(const std::string& s) {
  const auto v = parse_kind_list(s);
  return {v.begin(), v.end()};
}

InstructionStyle style_from(const std::string& s) {
  if (s == "explicit") return InstructionStyle::Explicit;
  if (s == "generic") return InstructionStyle::Generic;
  throw ConfigError("style must be explicit or generic");
}

// ---- make-data -------------------------------------------------------------

int cmd_make_data(const std::string& spec_path, const std::string& out_dir) {
  const KeyValues kv = read_key_values(spec_path);
  detail::KvReader r(kv);
  DatasetSpec base;
  std::string kinds, holdout, style = "explicit";
  int val_per_kind = 20, test_per_kind = 20;
  r.get("kinds", kinds);
  r.get("examples_per_kind", base.examples_per_kind);
  r.get("val_per_kind", val_per_kind);
  r.get("test_per_kind", test_per_kind);
  r.get("seed", base.seed);
  r.get("reversal", base.reversal);
  r.get("diff_text", base.diff_text);
  r.get("holdout", holdout);
  r.get("width", base.shape.width);
  r.get("height", base.shape.height);
  r.get("palette", base.shape.palette);
  r.get("style", style);
  r.reject_unknown();
  if (!kinds.empty()) base.kinds = parse_kind_list(kinds);
  base.holdout = kind_set(holdout);
  if (style_from(style) != InstructionStyle::Explicit)
    throw ConfigError("dataset files use explicit instructions; generic style is an experiment setting");

  fs::create_directories(out_dir);
  // The holdout applies to the training split only, so val/test still carry
  // the novel kind for evaluation.
  struct Split {
    const char* name;
    int per_kind;
    std::uint64_t seed;
    bool holdout;
  };
  const Split splits[] = {{"train", base.examples_per_kind, base.seed, true},
                          {"val", val_per_kind, mix64(base.seed + 1), false},
                          {"test", test_per_kind, mix64(base.seed + 2), false}};
  json manifest;
  manifest["spec"] = {{"kinds", kind_list(base.kinds)},
                      {"holdout", holdout},
                      {"reversal", base.reversal},
                      {"diff_text", base.diff_text},
                      {"width", base.shape.width},
                      {"height", base.shape.height},
                      {"palette", base.shape.palette},
                      {"seed", base.seed}};
  for (const auto& sp : splits) {
    DatasetSpec ds = base;
    ds.examples_per_kind = sp.per_kind;
    ds.seed = sp.seed;
    if (!sp.holdout) ds.holdout.clear();
    const auto data = make_dataset(ds);
    const fs::path path = fs::path(out_dir) / (std::string(sp.name) + ".jsonl");
    write_jsonl(path.string(), data);
    json counts = json::object();
    for (const auto& ex : data) {
      const std::string key = std::string(task_name(ex.task_kind)) + (ex.is_reversed ? ":reversed" : "");
      counts[key] = counts.value(key, 0) + 1;
    }
    manifest["splits"][sp.name] = {{"file", path.filename().string()},
                                   {"seed", sp.seed},
                                   {"examples", data.size()},
                                   {"holdout_applied", sp.holdout},
                                   {"counts", counts}};
    std::cerr << sp.name << ": " << data.size() << " examples -> " << path.string() << "\n";
  }
  write_text(fs::path(out_dir) / "manifest.json", manifest.dump(2) + "\n");
  std::cout << manifest.dump() << "\n";
  return 0;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& out_override) {
  const KeyValues kv = read_key_values(config_path);
  detail::KvReader r(kv);
  ModelConfig mc;
  TrainConfig tc;
  read_model_config(r, mc);
  read_train_config(r, tc);
  std::string data_path, out_dir = "run", holdout;
  int palette = 16;
  bool cell_embedding = false;
  r.get("train_data", data_path);
  r.get("out_dir", out_dir);
  r.get("holdout", holdout);
  r.get("palette", palette);
  r.get("cell_embedding", cell_embedding);
  r.reject_unknown();
  if (!out_override.empty()) out_dir = out_override;
  if (data_path.empty()) throw ConfigError("config needs train_data");
  if (!fs::path(data_path).is_absolute()) data_path = (fs::path(config_path).parent_path() / data_path).string();

  const VocabSpec vocab = task_vocab(palette);
  mc.vocab = vocab.size();
  const auto raw = read_jsonl(data_path);
  if (raw.empty()) throw ConfigError("training dataset is empty");
  if (cell_embedding) mc.image_span = raw.front().input_image.size() + 2;
  const auto data = prepare_training_set(raw, tc, mc, kind_set(holdout), vocab);
  const DatasetEpisodes episodes(data, uses_context(tc.mode) ? tc.context_k : 0);

  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "train_config.txt", format_train_config(tc));
  json meta = {{"mode", std::string(context_mode_name(tc.mode))}, {"holdout", holdout}, {"train_data", data_path}};
  std::ofstream log_csv(fs::path(out_dir) / "loss.csv");
  log_csv << "step,lr,loss,td_accuracy\n";
  log_csv.precision(9);
  TrainHooks hooks;
  hooks.on_step = [&](const LogRow& row) {
    log_csv << row.step << ',' << row.lr << ',' << row.loss << ',' << row.td_accuracy << '\n';
    if (row.step % 50 == 0 || row.step == 1)
      std::cerr << "step " << row.step << " lr " << row.lr << " loss " << row.loss << " td_acc " << row.td_accuracy
                << "\n";
  };
  hooks.on_checkpoint = [&](int step, const ModelParams<float>& p) {
    json m = meta;
    m["step"] = step;
    Checkpoint ck{p, vocab.words(), vocab.palette_size(), m};
    const std::string name = step == tc.total_steps ? "final.xpck" : "step_" + std::to_string(step) + ".xpck";
    save_checkpoint((fs::path(out_dir) / name).string(), ck);
  };
  const auto res = train_loop(mc, tc, [&](Rng& rng) { return episodes(rng); }, vocab, hooks);
  json out = {{"out_dir", out_dir},
              {"steps", tc.total_steps},
              {"final_loss", res.log.back().loss},
              {"final_td_accuracy", res.log.back().td_accuracy},
              {"checkpoint", (fs::path(out_dir) / "final.xpck").string()}};
  std::cout << out.dump() << "\n";
  return 0;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, bool context, bool no_context,
             const std::string& raie_path, const std::string& pool_path, const std::string& mode_name, bool two_phase,
             bool with_text, std::uint64_t seed) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const VocabSpec vocab = ck.vocab();
  const auto queries = read_jsonl(data_path);
  EvalOptions eo;
  eo.mode = context_mode_from_name(mode_name.empty() ? ck.meta.value("mode", std::string("xprompt")) : mode_name);
  eo.two_phase = two_phase;
  eo.with_text = with_text;
  if (no_context) eo.mode = ContextMode::None;
  std::vector<Episode> episodes;
  std::string pairing = "none";
  if (!raie_path.empty()) {
    if (pool_path.empty()) throw ConfigError("--raie needs --pool with the indexed examples");
    RetrievalIndex idx = RetrievalIndex::load(raie_path);
    for (const auto& ex : read_jsonl(pool_path)) idx.attach(ex);
    episodes = pair_with_retrieval(queries, idx);
    pairing = "raie";
    if (eo.mode == ContextMode::None) throw ConfigError("--raie conflicts with --no-context");
  } else if (eo.mode == ContextMode::None) {
    episodes = pair_with_pool(queries, {}, 0, seed);
  } else {
    if (!context && ck.meta.value("mode", std::string("xprompt")) == "none")
      throw ConfigError("checkpoint was trained without context; pass --no-context or --context");
    if (pool_path.empty()) throw ConfigError("--context needs --pool (a context pool disjoint from the queries)");
    episodes = pair_with_pool(queries, read_jsonl(pool_path), 1, seed);
    pairing = "pool";
  }
  const EvalMetrics m = evaluate_episodes(ck.params, episodes, vocab, eo);
  json out = to_json(m);
  out["mode"] = std::string(context_mode_name(eo.mode));
  out["pairing"] = pairing;
  std::cout << out.dump() << "\n";
  std::cerr << "examples " << m.examples << "  pixel_accuracy " << m.pixel_accuracy << "  exact "
            << m.image_exact_match << "  td_token_accuracy " << m.td_token_accuracy << "\n";
  return 0;
}

// ---- generate --------------------------------------------------------------

int cmd_generate(const std::string& ckpt_path, const std::string& query_path, bool two_phase, bool with_text,
                 double temperature, std::uint64_t seed) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const VocabSpec vocab = ck.vocab();
  const json q = read_json_file(query_path);
  Episode ep;
  try {
    const int w = q.at("width").get<int>();
    const int h = q.at("height").get<int>();
    ep.target.id = q.value("id", std::string("query"));
    ep.target.instruction = q.at("instruction").get<std::string>();
    ep.target.input_image = ToyImage(w, h, q.at("input_cells").get<std::vector<int>>());
    ep.target.output_image = ToyImage(w, h, std::vector<int>(static_cast<std::size_t>(w * h), 0));
    if (with_text) ep.target.diff_text = "";
    for (const auto& c : q.value("context", json::array())) ep.context.push_back(example_from_json(c));
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed query: ") + e.what());
  }
  check_image(ep.target.input_image, vocab.palette_size());
  EvalOptions eo;
  eo.mode = context_mode_from_name(q.value("mode", ck.meta.value("mode", std::string("xprompt"))));
  if (ep.context.empty()) eo.mode = ContextMode::None;
  eo.two_phase = two_phase;
  eo.with_text = with_text;
  eo.sampling = {temperature, seed};
  const Prediction p = predict(ck.params, ep, vocab, eo);
  json out = {{"width", p.image.width},
              {"height", p.image.height},
              {"output_cells", p.image.cells},
              {"two_phase", two_phase},
              {"mode", std::string(context_mode_name(eo.mode))}};
  if (p.text) out["text"] = *p.text;
  std::cout << out.dump() << "\n";
  std::cerr << ascii_grid(p.image);
  return 0;
}

// ---- index / retrieve ------------------------------------------------------

int cmd_build_index(const std::string& data_path, const std::string& out_path, int dim) {
  const auto data = read_jsonl(data_path);
  const RetrievalIndex idx = build_index(data, dim);
  idx.save(out_path);
  std::cout << json{{"index", out_path}, {"entries", idx.size()}, {"dim", idx.dim()}}.dump() << "\n";
  return 0;
}

int cmd_retrieve(const std::string& index_path, const std::string& instruction, const std::string& exclude, int k) {
  if (k <= 0) throw ConfigError("--k must be positive");
  const RetrievalIndex idx = RetrievalIndex::load(index_path);
  const auto q = idx.embed(instruction);
  std::optional<std::string_view> ex;
  if (!exclude.empty()) ex = exclude;
  if (k == 1) {
    const auto hit = idx.retrieve(std::span<const float>(q), ex);
    std::cout << json{{"id", hit.id}, {"similarity", hit.similarity}}.dump() << "\n";
    return 0;
  }
  json arr = json::array();
  for (const auto& h : idx.retrieve_top(q, static_cast<std::size_t>(k), ex))
    arr.push_back({{"id", h.id}, {"similarity", h.similarity}});
  std::cout << arr.dump() << "\n";
  return 0;
}

// ---- novel-task ------------------------------------------------------------

int cmd_novel_task(const std::string& config_path, const std::string& out_dir, bool save_checkpoints) {
  const ExperimentConfig cfg = experiment_config_from(read_key_values(config_path));
  fs::create_directories(out_dir);
  const VocabSpec vocab = experiment_vocab(cfg);
  std::map<std::string, std::ofstream> logs;
  ExperimentHooks hooks;
  hooks.on_step = [&](const std::string& cond, const LogRow& row) {
    auto& f = logs[cond];
    if (!f.is_open()) {
      f.open(fs::path(out_dir) / ("loss_" + cond + ".csv"));
      f.precision(9);
      f << "step,lr,loss,td_accuracy\n";
    }
    f << row.step << ',' << row.lr << ',' << row.loss << ',' << row.td_accuracy << '\n';
    if (row.step % 250 == 0) std::cerr << cond << " step " << row.step << " loss " << row.loss << "\n";
  };
  hooks.on_condition = [&](const ConditionResult& c, const ModelParams<float>& p) {
    std::cerr << c.name << ": holdout pixel_accuracy " << c.holdout.pixel_accuracy << ", held-in exact "
              << c.heldin.image_exact_match << " (" << c.train_seconds << " s)\n";
    if (save_checkpoints) {
      Checkpoint ck{p, vocab.words(), vocab.palette_size(), {{"mode", std::string(context_mode_name(c.train_mode))}}};
      save_checkpoint((fs::path(out_dir) / (c.name + ".xpck")).string(), ck);
    }
  };
  const ExperimentReport rep = novel_task_experiment(cfg, hooks);
  const json j = report_to_json(rep);
  write_text(fs::path(out_dir) / "report.json", j.dump(2) + "\n");
  write_text(fs::path(out_dir) / "summary.csv", report_summary_csv(rep));
  write_text(fs::path(out_dir) / "plot.csv", report_plot_csv(rep));
  std::cout << report_summary_csv(rep);
  const auto ch = check_report(rep);
  std::cerr << "ordering " << (ch.ordering ? "ok" : "violated") << ", gap " << ch.gap << ", xprompt - causal "
            << ch.vs_causal << "\n";
  return 0;
}

// ---- mask-dump -------------------------------------------------------------

int cmd_mask_dump(const std::string& layout_path, bool query_sees_ie, bool causal) {
  const SequenceLayout layout = layout_from_json(read_json_file(layout_path));
  MaskOptions mo;
  mo.query_sees_ie = query_sees_ie;
  mo.isolate_examples = !causal;
  const AttentionMask m = build_mask(layout, mo);
  std::cout << dump_mask(m);
  const auto v = validate_mask(m, layout);
  std::cerr << layout.size() << " positions, " << v.size() << " rule violations\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"X-Prompt toy model: data, training, evaluation, retrieval"};
  app.require_subcommand(1);

  std::string a1, a2, out, pool, raie, mode, exclude;
  bool flag_context = false, flag_no_context = false, two_phase = false, with_text = false, save_ckpt = false;
  bool query_sees_ie = false, causal = false;
  int dim = 256, k = 1;
  double temperature = 0;
  std::uint64_t seed = 0;

  auto* make = app.add_subcommand("make-data", "Write train/val/test JSONL splits and a manifest");
  make->add_option("spec", a1, "Dataset spec (key = value)")->required();
  make->add_option("-o,--out", out, "Output directory")->default_val("data");

  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("config", a1, "Train config (key = value)")->required();
  train->add_option("-o,--out", out, "Output directory (overrides out_dir)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("checkpoint", a1)->required();
  eval->add_option("dataset", a2)->required();
  auto* c1 = eval->add_flag("--context", flag_context, "Pair each query with a same-kind example from --pool");
  auto* c2 = eval->add_flag("--no-context", flag_no_context, "Evaluate without in-context examples");
  c1->excludes(c2);
  eval->add_option("--raie", raie, "Retrieval index; context comes from the nearest instruction")->excludes(c2);
  eval->add_option("--pool", pool, "JSONL context pool");
  eval->add_option("--mode", mode, "xprompt | causal | causal_xp | none (default: from checkpoint)");
  eval->add_flag("--two-phase", two_phase, "Generate through the compressed context path");
  eval->add_flag("--with-text", with_text, "Also score diff_text targets");
  eval->add_option("--seed", seed, "Context pairing seed");

  auto* gen = app.add_subcommand("generate", "Generate the output image for one query");
  gen->add_option("checkpoint", a1)->required();
  gen->add_option("query", a2, "Query JSON")->required();
  gen->add_flag("--two-phase", two_phase);
  gen->add_flag("--with-text", with_text, "Continue with a difference description");
  gen->add_option("--temperature", temperature, "0 is greedy");
  gen->add_option("--seed", seed);

  auto* bidx = app.add_subcommand("build-index", "Embed every instruction of a dataset");
  bidx->add_option("dataset", a1)->required();
  bidx->add_option("-o,--out", out, "Index file")->default_val("index.bin");
  bidx->add_option("--dim", dim, "Embedding dimension")->default_val(256);

  auto* ret = app.add_subcommand("retrieve", "Nearest stored instruction");
  ret->add_option("index", a1)->required();
  ret->add_option("instruction", a2)->required();
  ret->add_option("--exclude", exclude, "Id to skip");
  ret->add_option("--k", k, "Number of results")->default_val(1);

  auto* novel = app.add_subcommand("novel-task", "Four-condition held-out task experiment");
  novel->add_option("config", a1)->required();
  novel->add_option("-o,--out", out, "Output directory")->default_val("novel_task");
  novel->add_flag("--save-checkpoints", save_ckpt);

  auto* md = app.add_subcommand("mask-dump", "Render the attention mask of a layout");
  md->add_option("layout", a1, "Layout JSON")->required();
  md->add_flag("--query-sees-ie", query_sees_ie);
  md->add_flag("--causal", causal, "Plain causal mask");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*make) return cmd_make_data(a1, out);
    if (*train) return cmd_train(a1, out);
    if (*eval) return cmd_eval(a1, a2, flag_context, flag_no_context, raie, pool, mode, two_phase, with_text, seed);
    if (*gen) return cmd_generate(a1, a2, two_phase, with_text, temperature, seed);
    if (*bidx) return cmd_build_index(a1, out, dim);
    if (*ret) return cmd_retrieve(a1, a2, exclude, k);
    if (*novel) return cmd_novel_task(a1, out, save_ckpt);
    if (*md) return cmd_mask_dump(a1, query_sees_ie, causal);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
