#include "s4m/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "s4m/checkpoint.hpp"
#include "s4m/generate.hpp"
#include "s4m/metrics.hpp"

namespace fs = std::filesystem;

namespace s4m {

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["batch_size"] = batch_size;
  j["max_epochs"] = max_epochs;
  j["lr_encoders"] = lr_encoders;
  j["lr_rest"] = lr_rest;
  j["weight_decay"] = weight_decay;
  j["lambda"] = lambda;
  j["ablation"] = ablation;
  j["seed"] = seed;
  j["eval_every"] = eval_every;
  j["augment_train"] = augment_train;
  j["grad_clip"] = grad_clip;
  j["min_freq"] = min_freq;
  j["max_steps"] = max_steps;
  j["fallback_full_knowledge"] = fallback_full_knowledge;
  j["out_dir"] = out_dir;
  j["model"] = model.to_json();
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
  if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<int>();
  if (j.contains("lr_encoders")) c.lr_encoders = j["lr_encoders"].get<double>();
  if (j.contains("lr_rest")) c.lr_rest = j["lr_rest"].get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
  if (j.contains("ablation")) c.ablation = j["ablation"].get<std::string>();
  if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
  if (j.contains("eval_every")) c.eval_every = j["eval_every"].get<int>();
  if (j.contains("augment_train")) c.augment_train = j["augment_train"].get<bool>();
  if (j.contains("grad_clip")) c.grad_clip = j["grad_clip"].get<double>();
  if (j.contains("min_freq")) c.min_freq = j["min_freq"].get<int>();
  if (j.contains("max_steps")) c.max_steps = j["max_steps"].get<int>();
  if (j.contains("fallback_full_knowledge"))
    c.fallback_full_knowledge = j["fallback_full_knowledge"].get<bool>();
  if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
  if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open train config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    fail("malformed train config " + path + ": " + e.what());
  }
  return from_json(j);
}

void TrainConfig::apply_override(const std::string& key_value) {
  const auto eq = key_value.find('=');
  check(eq != std::string::npos, "override must be key=value: " + key_value);
  const std::string key = key_value.substr(0, eq);
  const std::string value = key_value.substr(eq + 1);
  nlohmann::json j = to_json();
  nlohmann::json* slot = &j;
  std::istringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (size_t i = 0; i + 1 < path.size(); ++i) {
    check(slot->contains(path[i]), "unknown config key: " + key);
    slot = &(*slot)[path[i]];
  }
  check(!path.empty() && slot->contains(path.back()), "unknown config key: " + key);
  nlohmann::json& leaf = (*slot)[path.back()];
  if (leaf.is_string()) {
    leaf = value;
  } else if (leaf.is_boolean()) {
    leaf = (value == "true" || value == "1");
  } else if (leaf.is_number_integer() || leaf.is_number_unsigned()) {
    leaf = std::stoll(value);
  } else if (leaf.is_number_float()) {
    leaf = std::stod(value);
  } else {
    leaf = nlohmann::json::parse(value);  // arrays (encoder_channels)
  }
  *this = from_json(j);
}

void TrainConfig::validate() const {
  check(batch_size >= 1, "train config: batch_size must be >= 1");
  check(max_epochs >= 1 || max_steps >= 1, "train config: nothing to train");
  check(ablation == "base" || ablation == "radka_star" || ablation == "radka" || ablation == "s4m",
        "train config: ablation must be one of base|radka_star|radka|s4m");
  check(lambda >= 0.0, "train config: lambda must be >= 0");
  check(eval_every >= 1, "train config: eval_every must be >= 1");
}

namespace {

struct Adam {
  std::vector<MatF> m, v;
  int64_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit Adam(const ParamStore& ps) {
    m.reserve(static_cast<size_t>(ps.count()));
    for (int i = 0; i < ps.count(); ++i) {
      m.push_back(MatF::Zero(ps.value(i).rows(), ps.value(i).cols()));
      v.push_back(MatF::Zero(ps.value(i).rows(), ps.value(i).cols()));
    }
  }

  void step(ParamStore& ps, const GradStore& grads, double lr_encoders, double lr_rest,
            double weight_decay, double grad_clip) {
    ++t;
    double sq_norm = 0.0;
    for (int i = 0; i < ps.count(); ++i) {
      if (grads.has(i)) sq_norm += static_cast<double>(grads.grad(i).squaredNorm());
    }
    const double norm = std::sqrt(sq_norm);
    const float clip_scale =
        (grad_clip > 0.0 && norm > grad_clip) ? static_cast<float>(grad_clip / norm) : 1.0f;

    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (int i = 0; i < ps.count(); ++i) {
      if (!grads.has(i)) continue;
      const ParamGroup group = ps.group(i);
      const double lr = group == ParamGroup::rest ? lr_rest : lr_encoders;
      MatF g = grads.grad(i) * clip_scale;
      if (weight_decay > 0.0) g += static_cast<float>(weight_decay) * ps.value(i);
      auto& mi = m[static_cast<size_t>(i)];
      auto& vi = v[static_cast<size_t>(i)];
      mi = static_cast<float>(beta1) * mi + static_cast<float>(1.0 - beta1) * g;
      vi = static_cast<float>(beta2) * vi + static_cast<float>(1.0 - beta2) * g.cwiseProduct(g);
      ps.value(i).array() -=
          static_cast<float>(lr) *
          (mi.array() / static_cast<float>(c1)) /
          ((vi.array() / static_cast<float>(c2)).sqrt() + static_cast<float>(eps));
    }
  }
};

MatF view_matrix(const Image& im, Rng& rng, bool training) {
  return image_to_matrix(augment(im, rng, training));
}

double val_bleu4(const S4MModel& model, const Vocab& vocab, const std::vector<Example>& examples,
                 bool fallback) {
  if (examples.empty()) return 0.0;
  std::vector<std::string> cands(examples.size());
  std::vector<std::vector<std::string>> refs(examples.size());
#pragma omp parallel for schedule(dynamic)
  for (int64_t i = 0; i < static_cast<int64_t>(examples.size()); ++i) {
    cands[static_cast<size_t>(i)] =
        generate_report(model, vocab, examples[static_cast<size_t>(i)], 1, 0.6, fallback);
    refs[static_cast<size_t>(i)] = {examples[static_cast<size_t>(i)].report};
  }
  return bleu(cands, refs, 4);
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& dataset, const KnowledgeBase& kb,
                  const Vocab& vocab, const StepCallback& on_step) {
  TrainConfig cfg = config;
  cfg.validate();
  check(!dataset.train.empty(), "train: dataset has no train split");

  cfg.model.vocab_size = vocab.size();
  cfg.model.ablation = cfg.ablation;
  cfg.model.lambda = cfg.model.has_ipg() ? cfg.lambda : 0.0;
  const double lambda = cfg.model.lambda;
  const bool use_ipg = cfg.model.has_ipg() && lambda > 0.0;

  S4MModel model(cfg.model, cfg.seed);
  TopicEmbedder embedder(cfg.model.d_k, cfg.model.embedder_seed);
  model.set_topics(kb, embedder);

  const std::string out_dir = cfg.out_dir.empty() ? "runs/untitled" : cfg.out_dir;
  fs::create_directories(out_dir);
  {
    std::ofstream cfg_out(fs::path(out_dir) / "train_config.json");
    cfg_out << cfg.to_json().dump(1) << "\n";
  }
  std::ofstream log(fs::path(out_dir) / "train_log.jsonl");
  check(log.good(), "cannot open training log under " + out_dir);

  // Pre-encoded targets: BOS ... EOS, truncated to max_len.
  std::vector<std::vector<int>> sequences(dataset.train.size());
  for (size_t i = 0; i < dataset.train.size(); ++i) {
    sequences[i] = vocab.encode(dataset.train[i].report, cfg.model.max_len);
    check(sequences[i].size() >= 3, "train: report too short after encoding: " + dataset.train[i].id);
  }

  ParamStore& params = model.params();
  Adam adam(params);

#ifdef _OPENMP
  const int n_threads = std::max(1, omp_get_max_threads());
#else
  const int n_threads = 1;
#endif
  std::vector<std::unique_ptr<GradStore>> thread_grads;
  for (int i = 0; i < n_threads; ++i) thread_grads.push_back(std::make_unique<GradStore>(&params));
  GradStore batch_grads(&params);
  GradStore merged(&params);

  TrainResult result;
  Rng epoch_rng = Rng::child(cfg.seed, "epochs");
  int step = 0;
  bool stop = false;
  double best_val = -1.0;
  const std::string best_path = (fs::path(out_dir) / "best.ckpt").string();
  const std::string last_path = (fs::path(out_dir) / "last.ckpt").string();

  for (int epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    auto batches = epoch_batches(static_cast<int>(dataset.train.size()), cfg.batch_size, epoch_rng,
                                 /*drop_singletons=*/use_ipg);
    for (const auto& batch : batches) {
      const int b = static_cast<int>(batch.size());

      // Per-example forward graphs, parallel over the batch.
      std::vector<std::unique_ptr<Tape>> tapes(static_cast<size_t>(b));
      std::vector<ExampleNodes> nodes(static_cast<size_t>(b));
      for (auto& g : thread_grads) g->clear();
#pragma omp parallel for schedule(static)
      for (int i = 0; i < b; ++i) {
#ifdef _OPENMP
        const int tid = omp_get_thread_num();
#else
        const int tid = 0;
#endif
        const Example& e = dataset.train[static_cast<size_t>(batch[static_cast<size_t>(i)])];
        Rng aug_rng = Rng::child(cfg.seed, "augment",
                                 static_cast<uint64_t>(step) * static_cast<uint64_t>(cfg.batch_size) +
                                     static_cast<uint64_t>(i));
        MatF v1 = view_matrix(e.views[0], aug_rng, cfg.augment_train);
        MatF v2 = view_matrix(e.views[1], aug_rng, cfg.augment_train);
        auto& tape = tapes[static_cast<size_t>(i)];
        tape = std::make_unique<Tape>(&params, thread_grads[static_cast<size_t>(tid)].get());
        ForwardCtx ctx{true, &aug_rng};
        nodes[static_cast<size_t>(i)] = model.example_forward(
            *tape, v1, v2, region_name(e.tag), sequences[static_cast<size_t>(batch[static_cast<size_t>(i)])],
            ctx);
      }

      // Batch-level graph over the per-example outputs.
      batch_grads.clear();
      Tape bt(&params, &batch_grads);
      int64_t total_tokens = 0;
      for (const auto& n : nodes) total_tokens += n.token_count;
      std::vector<int> nll_leaves, img_leaves, txt_leaves;
      for (int i = 0; i < b; ++i) {
        const auto& n = nodes[static_cast<size_t>(i)];
        nll_leaves.push_back(bt.input(tapes[static_cast<size_t>(i)]->val(n.nll_sum)));
        if (use_ipg) {
          img_leaves.push_back(bt.input(tapes[static_cast<size_t>(i)]->val(n.img_vec)));
          txt_leaves.push_back(bt.input(tapes[static_cast<size_t>(i)]->val(n.txt_vec)));
        }
      }
      int gen_node = nll_leaves[0];
      for (size_t i = 1; i < nll_leaves.size(); ++i) gen_node = bt.add(gen_node, nll_leaves[i]);
      gen_node = bt.scale(gen_node, 1.0f / static_cast<float>(total_tokens));
      int joint_node = gen_node;
      double ctr_value = 0.0;
      if (use_ipg && b >= 2) {
        int ctr_node = model.contrastive_loss(bt, bt.concat_rows(img_leaves), bt.concat_rows(txt_leaves));
        ctr_value = static_cast<double>(bt.val(ctr_node)(0, 0));
        joint_node = bt.add(gen_node, bt.scale(ctr_node, static_cast<float>(lambda)));
      }
      const double gen_value = static_cast<double>(bt.val(gen_node)(0, 0));
      const double joint_value = static_cast<double>(bt.val(joint_node)(0, 0));
      if (!std::isfinite(joint_value)) {
        fail("NaN/Inf loss at step " + std::to_string(step) + " (gen=" + std::to_string(gen_value) +
             ", ctr=" + std::to_string(ctr_value) + ")");
      }

      bt.backward(joint_node);

      // Seed per-example backward passes with the batch-graph leaf gradients.
#pragma omp parallel for schedule(static)
      for (int i = 0; i < b; ++i) {
        const auto& n = nodes[static_cast<size_t>(i)];
        std::vector<std::pair<int, MatF>> seeds;
        seeds.emplace_back(n.nll_sum, bt.grad(nll_leaves[static_cast<size_t>(i)]));
        if (use_ipg && b >= 2) {
          seeds.emplace_back(n.img_vec, bt.grad(img_leaves[static_cast<size_t>(i)]));
          seeds.emplace_back(n.txt_vec, bt.grad(txt_leaves[static_cast<size_t>(i)]));
        }
        tapes[static_cast<size_t>(i)]->backward_seeded(seeds);
      }

      merged.clear();
      merged.merge(batch_grads);
      for (const auto& g : thread_grads) merged.merge(*g);

      adam.step(params, merged, cfg.lr_encoders, cfg.lr_rest, cfg.weight_decay, cfg.grad_clip);
      if (use_ipg) {
        // Keep the logit scale 1/tau bounded above by 100.
        const int pid = params.find("ipg.log_tau");
        float& lt = params.value(pid)(0, 0);
        lt = std::max(lt, static_cast<float>(-std::log(100.0)));
      }

      ++step;
      log << "{\"step\":" << step << ",\"gen_loss\":" << gen_value << ",\"ctr_loss\":" << ctr_value
          << ",\"joint\":" << joint_value << ",\"lr\":" << cfg.lr_rest
          << ",\"lr_encoders\":" << cfg.lr_encoders << ",\"epoch\":" << epoch << "}\n";
      result.final_joint = joint_value;

      if (on_step && !on_step(step, gen_value, ctr_value, joint_value)) {
        stop = true;
        break;
      }
      if (cfg.max_steps > 0 && step >= cfg.max_steps) {
        stop = true;
        break;
      }
    }

    const bool last_epoch = stop || epoch + 1 == cfg.max_epochs;
    if (!dataset.val.empty() && ((epoch + 1) % cfg.eval_every == 0 || last_epoch)) {
      const double b4 = val_bleu4(model, vocab, dataset.val, cfg.fallback_full_knowledge);
      log << "{\"step\":" << step << ",\"val_bleu4\":" << b4 << ",\"epoch\":" << epoch << "}\n";
      log.flush();
      if (b4 > best_val) {
        best_val = b4;
        save_checkpoint(model, vocab, best_path);
      }
    }
  }

  save_checkpoint(model, vocab, last_path);
  if (best_val < 0.0) {
    // No validation split: best falls back to the final state.
    save_checkpoint(model, vocab, best_path);
    best_val = 0.0;
  }
  result.best_checkpoint = best_path;
  result.last_checkpoint = last_path;
  result.best_val_bleu4 = best_val;
  result.steps = step;
  return result;
}

MatD extract_pooled_features(const S4MModel& model, const std::vector<Example>& examples) {
  MatD feats(static_cast<Eigen::Index>(examples.size()), model.config().d);
#pragma omp parallel for schedule(dynamic)
  for (int64_t i = 0; i < static_cast<int64_t>(examples.size()); ++i) {
    const Example& e = examples[static_cast<size_t>(i)];
    Rng rng(0);
    MatF v1 = view_matrix(e.views[0], rng, false);
    MatF v2 = view_matrix(e.views[1], rng, false);
    GradStore g(&model.params());
    Tape t(&model.params(), &g, /*grad_enabled=*/false);
    int img = model.encode_image(t, v1, v2);
    feats.row(static_cast<Eigen::Index>(i)) = t.val(img).colwise().mean().cast<double>();
  }
  return feats;
}

}  // namespace s4m
