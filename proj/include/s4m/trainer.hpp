#pragma once

#include <string>

#include "s4m/dataset.hpp"
#include "s4m/model.hpp"

namespace s4m {

struct TrainConfig {
  int batch_size = 16;
  int max_epochs = 100;
  double lr_encoders = 5e-5;  // image encoder + report embedder h
  double lr_rest = 1e-4;
  double weight_decay = 1e-4;
  double lambda = 1.0;
  std::string ablation = "s4m";  // base | radka_star | radka | s4m
  uint64_t seed = 0;
  int eval_every = 5;  // epochs between validation BLEU-4 evaluations
  bool augment_train = true;
  double grad_clip = 5.0;
  int min_freq = 3;
  int max_steps = 0;  // optional hard step cap (0 = epochs only)
  bool fallback_full_knowledge = false;
  std::string out_dir;
  ModelConfig model;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::string& path);
  // Dotted-key override, e.g. "model.d=96" or "lambda=0.5".
  void apply_override(const std::string& key_value);
  void validate() const;
};

struct TrainResult {
  std::string best_checkpoint;
  std::string last_checkpoint;
  double best_val_bleu4 = 0.0;
  int steps = 0;
  double final_joint = 0.0;
};

// Optional per-step observer; return false to stop training early (used by
// the memorization harness).
using StepCallback = std::function<bool(int step, double gen, double ctr, double joint)>;

TrainResult train(const TrainConfig& config, const Dataset& dataset, const KnowledgeBase& kb,
                  const Vocab& vocab, const StepCallback& on_step = {});

// Mean-pooled frozen-encoder features (eval crop), one row per example.
MatD extract_pooled_features(const S4MModel& model, const std::vector<Example>& examples);

}  // namespace s4m
