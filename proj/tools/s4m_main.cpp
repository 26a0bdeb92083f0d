// s4m command-line entry point: synth | train | generate | evaluate | probe.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "s4m/checkpoint.hpp"
#include "s4m/dataset.hpp"
#include "s4m/generate.hpp"
#include "s4m/metrics.hpp"
#include "s4m/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Relative data paths resolve against S4M_DATA_DIR when not found locally.
std::string resolve_data_path(const std::string& path) {
  if (fs::exists(path)) return path;
  const char* root = std::getenv("S4M_DATA_DIR");
  if (root != nullptr && fs::path(path).is_relative()) {
    fs::path alt = fs::path(root) / path;
    if (fs::exists(alt)) return alt.string();
  }
  return path;
}

std::string default_run_dir(const json& config_json) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", std::gmtime(&tt));
  const std::string hash = s4m::hex64(s4m::fnv1a(config_json.dump())).substr(0, 8);
  return (fs::path("runs") / (std::string(stamp) + "-" + hash)).string();
}

s4m::KnowledgeBase load_kb(const std::string& path) {
  return s4m::KnowledgeBase::load(resolve_data_path(path));
}

int cmd_synth(const std::string& spec_file, const std::string& out_dir, uint64_t seed,
              const std::string& knowledge_path) {
  s4m::SynthSpec spec = spec_file.empty() ? s4m::SynthSpec::defaults() : s4m::SynthSpec::load(spec_file);
  const s4m::KnowledgeBase kb = load_kb(knowledge_path);
  s4m::Dataset ds = s4m::synthesize_dataset(spec, seed, kb);
  s4m::export_dataset(ds, out_dir);
  std::ofstream spec_out(fs::path(out_dir) / "synth_spec.json");
  spec_out << spec.to_json() << "\n";
  std::cout << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
            << " train/val/test examples to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_file, const std::vector<std::string>& overrides,
              const std::string& data_manifest, const std::string& knowledge_path) {
  s4m::TrainConfig cfg = s4m::TrainConfig::load(config_file);
  for (const auto& kv : overrides) cfg.apply_override(kv);

  std::string manifest = data_manifest;
  std::string kb_path = knowledge_path;
  {
    // data/knowledge paths may live in the config file as well.
    std::ifstream in(config_file);
    json j;
    in >> j;
    if (manifest.empty() && j.contains("data")) manifest = j["data"].get<std::string>();
    if (j.contains("knowledge") && knowledge_path == "data/knowledge_s4m.json") {
      kb_path = j["knowledge"].get<std::string>();
    }
  }
  if (manifest.empty()) {
    std::cerr << "train: no dataset; pass --data or put \"data\" in the config\n";
    return 2;
  }
  if (cfg.out_dir.empty()) cfg.out_dir = default_run_dir(cfg.to_json());

  const s4m::KnowledgeBase kb = load_kb(kb_path);
  s4m::Dataset ds = s4m::load_manifest(resolve_data_path(manifest));
  std::vector<std::string> corpus;
  for (const auto& e : ds.train) corpus.push_back(e.report);
  const s4m::Vocab vocab = s4m::Vocab::build(corpus, cfg.min_freq);
  std::cout << "train: " << ds.train.size() << " examples, vocab " << vocab.size() << ", ablation "
            << cfg.ablation << ", out " << cfg.out_dir << "\n";

  const s4m::TrainResult result = s4m::train(cfg, ds, kb, vocab);
  std::cout << "steps: " << result.steps << "  best val BLEU-4: " << result.best_val_bleu4 << "\n";
  std::cout << "best checkpoint: " << result.best_checkpoint << "\n";

  if (!ds.val.empty()) {
    auto loaded = s4m::load_checkpoint<float>(result.best_checkpoint);
    std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>>> per_region;
    for (const auto& e : ds.val) {
      auto& slot = per_region[s4m::region_name(e.tag)];
      slot.first.push_back(s4m::generate_report(loaded.model, loaded.vocab, e));
      slot.second.push_back({e.report});
    }
    s4m::EvalReport rep = s4m::evaluate_regions(per_region);
    std::cout << "validation metrics (best checkpoint):\n" << rep.render_table();
  }
  return 0;
}

int cmd_generate(const std::string& ckpt_path, const std::string& manifest_path,
                 const std::string& out_path, int beam, double alpha, const std::string& default_tag,
                 bool fallback_full) {
  auto loaded = s4m::load_checkpoint<float>(resolve_data_path(ckpt_path));
  const fs::path root = fs::path(resolve_data_path(manifest_path)).parent_path();

  std::ifstream in(resolve_data_path(manifest_path));
  s4m::check(in.good(), "cannot open manifest: " + manifest_path);
  std::ofstream out(out_path);
  s4m::check(out.good(), "cannot open output: " + out_path);

  int errors = 0, lineno = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json row = json::parse(line);
    const std::string id = row.value("id", "row-" + std::to_string(lineno));
    try {
      std::string tag = row.value("tag", default_tag);
      if (tag.empty()) s4m::fail("missing region tag and no --tag fallback");
      auto paths = row.at("image_paths").get<std::vector<std::string>>();
      s4m::check(!paths.empty(), "no image_paths");
      if (paths.size() == 1) paths.push_back(paths[0]);
      paths.resize(2);
      std::array<s4m::Image, 2> views;
      for (int v = 0; v < 2; ++v) {
        fs::path p = fs::path(paths[static_cast<size_t>(v)]);
        if (p.is_relative()) p = root / p;
        s4m::Image im = s4m::read_png(p.string());
        const int target = loaded.model.config().image_size + 32;
        if (im.h != target || im.w != target) im = s4m::resize_bilinear(im, target, target);
        views[static_cast<size_t>(v)] = std::move(im);
      }
      s4m::Example e;
      e.views = std::move(views);
      e.tag = s4m::parse_region(tag);
      const std::string hyp = s4m::generate_report(loaded.model, loaded.vocab, e, beam, alpha, fallback_full);
      json rec = {{"id", id}, {"tag", s4m::region_name(e.tag)}, {"hypothesis", hyp}};
      if (row.contains("report")) rec["reference"] = row["report"];
      out << rec.dump() << "\n";
    } catch (const std::exception& ex) {
      json rec = {{"id", id}, {"error", ex.what()}};
      out << rec.dump() << "\n";
      std::cerr << "generate: " << id << ": " << ex.what() << "\n";
      ++errors;
    }
  }
  return errors == 0 ? 0 : 1;
}

int cmd_evaluate(const std::string& hyps_path, const std::string& refs_manifest,
                 const std::string& out_dir) {
  // Reference text by id from the manifest.
  std::map<std::string, std::pair<std::string, std::string>> refs;  // id -> (tag, report)
  {
    std::ifstream in(resolve_data_path(refs_manifest));
    s4m::check(in.good(), "cannot open manifest: " + refs_manifest);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json row = json::parse(line);
      refs[row.value("id", "row-" + std::to_string(lineno))] = {row.at("tag").get<std::string>(),
                                                                row.at("report").get<std::string>()};
    }
  }

  std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>>> per_region;
  std::ifstream in(resolve_data_path(hyps_path));
  s4m::check(in.good(), "cannot open hypotheses: " + hyps_path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json row = json::parse(line);
    if (row.contains("error")) continue;
    const std::string id = row.at("id").get<std::string>();
    std::string reference, tag;
    if (row.contains("reference")) reference = row["reference"].get<std::string>();
    if (row.contains("tag")) tag = row["tag"].get<std::string>();
    auto it = refs.find(id);
    if (it != refs.end()) {
      tag = it->second.first;
      reference = it->second.second;
    }
    if (reference.empty() || tag.empty()) {
      std::cerr << "evaluate: skipping " << id << " (no reference)\n";
      continue;
    }
    auto& slot = per_region[tag];
    slot.first.push_back(row.at("hypothesis").get<std::string>());
    slot.second.push_back({reference});
  }

  s4m::EvalReport rep = s4m::evaluate_regions(per_region);
  for (const auto& r : rep.missing_regions) {
    std::cerr << "evaluate: warning: no hypotheses for region " << r << "; Ave covers present regions\n";
  }
  fs::create_directories(out_dir);
  {
    std::ofstream j(fs::path(out_dir) / "eval.json");
    j << rep.to_json() << "\n";
    std::ofstream t(fs::path(out_dir) / "eval.txt");
    t << rep.render_table();
  }
  std::cout << rep.render_table();
  return 0;
}

int cmd_probe(const std::string& ckpt_path, const std::string& manifest_path, int epochs,
              const std::string& out_file) {
  auto loaded = s4m::load_checkpoint<float>(resolve_data_path(ckpt_path));
  s4m::Dataset ds = s4m::load_manifest(resolve_data_path(manifest_path));
  s4m::check(!ds.label_names.empty(), "probe: manifest has no findings labels");
  s4m::check(!ds.train.empty() && !ds.test.empty(), "probe: needs train and test splits");

  const s4m::MatD x_train = s4m::extract_pooled_features(loaded.model, ds.train);
  const s4m::MatD x_test = s4m::extract_pooled_features(loaded.model, ds.test);
  auto labels = [&](const std::vector<s4m::Example>& xs) {
    s4m::MatD y(static_cast<Eigen::Index>(xs.size()), static_cast<Eigen::Index>(ds.label_names.size()));
    for (size_t i = 0; i < xs.size(); ++i) {
      auto v = ds.label_vector(xs[i]);
      for (size_t l = 0; l < v.size(); ++l) {
        y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l)) = v[l];
      }
    }
    return y;
  };
  const s4m::ProbeResult res =
      s4m::linear_probe(x_train, labels(ds.train), x_test, labels(ds.test), ds.label_names, epochs);
  std::cout << res.render_table();
  if (!out_file.empty()) {
    json j;
    for (size_t i = 0; i < res.labels.size(); ++i) j["auc"][res.labels[i]] = res.auc_per_label[i];
    j["mean_auc"] = res.mean_auc;
    j["skipped"] = res.skipped;
    std::ofstream out(out_file);
    out << j.dump(1) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"S4M: single-for-multiple radiology report generation"};
  app.require_subcommand(1);

  std::string knowledge_path = "data/knowledge_s4m.json";
  app.add_option("--knowledge", knowledge_path, "knowledge base JSON")->capture_default_str();

  auto* synth = app.add_subcommand("synth", "synthesize a multi-region dataset");
  std::string synth_spec, synth_out = "synth_data";
  uint64_t synth_seed = 0;
  synth->add_option("--spec", synth_spec, "synth spec JSON (defaults used if omitted)");
  synth->add_option("--out", synth_out, "output directory")->capture_default_str();
  synth->add_option("--seed", synth_seed, "rng seed")->capture_default_str();

  auto* train = app.add_subcommand("train", "train a model from a config file");
  std::string train_config, train_data;
  std::vector<std::string> overrides;
  train->add_option("--config", train_config, "train config JSON")->required();
  train->add_option("--data", train_data, "dataset manifest (overrides config \"data\")");
  train->add_option("--override", overrides, "dotted key=value overrides, e.g. model.d=96");

  auto* gen = app.add_subcommand("generate", "generate reports for a manifest");
  std::string gen_ckpt, gen_manifest, gen_out = "hyps.jsonl", gen_tag;
  int gen_beam = 1;
  double gen_alpha = 0.6;
  bool gen_fallback = false;
  gen->add_option("--ckpt", gen_ckpt, "checkpoint path")->required();
  gen->add_option("--manifest", gen_manifest, "input manifest JSONL")->required();
  gen->add_option("--out", gen_out, "output hypotheses JSONL")->capture_default_str();
  gen->add_option("--tag", gen_tag, "fallback region tag for rows without one");
  gen->add_option("--beam", gen_beam, "beam size (1 = greedy)")->capture_default_str();
  gen->add_option("--alpha", gen_alpha, "beam length penalty exponent")->capture_default_str();
  gen->add_flag("--fallback-full-knowledge", gen_fallback, "unknown tags use the full topic set");

  auto* eval = app.add_subcommand("evaluate", "score hypotheses against references");
  std::string eval_hyps, eval_refs, eval_out = "eval_out";
  eval->add_option("--hyps", eval_hyps, "hypotheses JSONL")->required();
  eval->add_option("--refs", eval_refs, "reference manifest JSONL")->required();
  eval->add_option("--out", eval_out, "output directory")->capture_default_str();

  auto* probe = app.add_subcommand("probe", "linear probe of the frozen image encoder");
  std::string probe_ckpt, probe_manifest, probe_out;
  int probe_epochs = 200;
  probe->add_option("--ckpt", probe_ckpt, "checkpoint path")->required();
  probe->add_option("--manifest", probe_manifest, "labeled manifest JSONL")->required();
  probe->add_option("--epochs", probe_epochs, "probe training epochs")->capture_default_str();
  probe->add_option("--out", probe_out, "write probe results JSON here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_spec, synth_out, synth_seed, knowledge_path);
    if (train->parsed()) return cmd_train(train_config, overrides, train_data, knowledge_path);
    if (gen->parsed()) {
      return cmd_generate(gen_ckpt, gen_manifest, gen_out, gen_beam, gen_alpha, gen_tag, gen_fallback);
    }
    if (eval->parsed()) return cmd_evaluate(eval_hyps, eval_refs, eval_out);
    if (probe->parsed()) return cmd_probe(probe_ckpt, probe_manifest, probe_epochs, probe_out);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 2;
}
