#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sacnet/competition.hpp"
#include "sacnet/dataset.hpp"

namespace sacnet {

// Architecture plus training hyperparameters. Serializes to canonical
// key-sorted key=value text; unknown keys are an error on parse.
struct ModelConfig {
  std::vector<int64_t> branch_kernel_sizes = {7, 17, 35};  // tiny, middle, large
  int64_t n_orientations = 6;
  int64_t input_hw = 128;
  int64_t msa_heads = 2;
  int64_t msa_embed_dim = 8;
  int64_t embedding_dim = 128;
  int64_t n_classes = 0;  // 0 means inferred from the training set
  bool use_branch_ts = true;
  bool use_branch_ms = true;
  bool use_branch_ls = true;
  bool use_iscm = true;
  bool use_ascm = true;
  bool ascm_grouped = false;
  double softmax_temperature = 1.0;
  double w_ce = 1.0;
  double w_con = 1.0;
  double margin = 0.5;
  double lr = 0.0003;
  int64_t batch_size = 16;
  int64_t epochs = 10;
  uint64_t seed = 1;

  void validate() const;
  std::string serialize() const;
  static ModelConfig parse(const std::string& text);
  static ModelConfig load_file(const std::string& path);

  int64_t n_branches_enabled() const {
    return (use_branch_ts ? 1 : 0) + (use_branch_ms ? 1 : 0) + (use_branch_ls ? 1 : 0);
  }
};

struct Branch {
  std::string tag;  // ts, ms, ls
  GaborBank g1, g2;
  MsaBlock msa;
};

// Three scale branches, head over global-average-pooled competition maps:
// pooled F_across (or the plain concat when the ASCM is off) concatenated
// with the pooled per-branch F_inner maps, then linear embedding and linear
// class logits.
struct SacNet {
  ModelConfig cfg;
  std::vector<Branch> branches;  // enabled branches, tiny to large
  TensorPtr w_embed, b_embed;
  TensorPtr w_logits, b_logits;

  static SacNet init(const ModelConfig& cfg);
  std::vector<std::pair<std::string, TensorPtr>> named_parameters() const;
  std::vector<TensorPtr> parameters() const;
  int64_t feature_dim() const;
};

struct ForwardTrace {
  TensorPtr embeddings;  // [b, d], L2-normalized rows
  TensorPtr logits;      // [b, n_classes]
  std::vector<TensorPtr> f_msa;  // per enabled branch, large to tiny
  TensorPtr fused;               // F_across or plain concat
  TensorPtr pooled;              // head input [b, feature_dim]
};

ForwardTrace forward(const SacNet& model, const FeatureMap& batch);

struct PairPlan {
  struct Pair {
    int64_t i, j;
    bool same;
  };
  std::vector<Pair> pairs;
};

struct LossParts {
  TensorPtr total, ce, contrastive;
};

// w_ce * CE(logits, labels) + w_con * mean over pairs of
// [same: d^2, diff: max(0, margin - d)^2] on the normalized embeddings
LossParts compute_loss(const TensorPtr& embeddings, const TensorPtr& logits,
                       const std::vector<int64_t>& labels, const PairPlan& plan,
                       const ModelConfig& cfg);

// standard Adam, beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected moments
struct AdamState {
  double lr = 0.0003;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;
  std::vector<std::vector<double>> m, v;

  static AdamState init(double lr, const std::vector<TensorPtr>& params);
};

void adam_step(AdamState& st, const std::vector<TensorPtr>& params);

struct Checkpoint {
  uint32_t version = 1;
  ModelConfig config;
  struct Param {
    std::string name;
    Shape shape;
    std::vector<double> values;
  };
  std::vector<Param> params;
  bool has_opt = false;
  int64_t opt_t = 0;
  std::vector<std::vector<double>> opt_m, opt_v;
  int64_t epoch = 0;
  std::string rng_state;
};

Checkpoint snapshot(const SacNet& model, const AdamState* opt, int64_t epoch,
                    const std::string& rng_state);
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
SacNet restore_model(const Checkpoint& ck);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> loss_curve;      // per step
  std::vector<double> accuracy_curve;  // per step
  std::string metrics_path;
};

// Deterministic given cfg.seed: class-balanced batches of consecutive
// same-class pairs, one metrics line per step, a checkpoint per epoch plus
// checkpoint.sacn at the end.
TrainResult train(const ModelConfig& cfg, const Dataset& data, const std::string& out_dir);

// frozen forward in batches; rows are the L2-normalized embeddings
std::vector<std::vector<double>> embed_all(const SacNet& model, const Dataset& data,
                                           const std::vector<int64_t>& indices);

}  // namespace sacnet
