#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>

#include "sacnet/competition.hpp"
#include "sacnet/dataset.hpp"
#include "sacnet/errors.hpp"
#include "sacnet/model.hpp"
#include "sacnet/verification.hpp"

namespace fs = std::filesystem;
using namespace sacnet;

namespace {

Dataset resolve_dataset(const std::string& data, int64_t input_hw, uint64_t synth_seed) {
  if (data == "synthetic") {
    SyntheticSpec spec;
    spec.image_hw = input_hw;
    spec.seed = synth_seed;
    return generate_synthetic(spec);
  }
  return load_dataset(data, input_hw);
}

std::vector<int64_t> subset_labels(const Dataset& ds, const std::vector<int64_t>& idx) {
  std::vector<int64_t> out;
  out.reserve(idx.size());
  for (int64_t i : idx) out.push_back(ds.labels[i]);
  return out;
}

EerResult eval_model(const SacNet& model, const Dataset& ds, const std::string& out_dir) {
  require_verification_split(ds);
  auto embeddings = embed_all(model, ds, ds.eval_idx);
  auto scores = build_score_set(embeddings, subset_labels(ds, ds.eval_idx));
  auto e = eer(scores);
  if (!out_dir.empty()) emit_report(roc(scores), e, scores, out_dir);
  return e;
}

double train_and_eval_eer(const ModelConfig& cfg, const Dataset& ds,
                          const std::string& run_dir) {
  auto result = train(cfg, ds, run_dir);
  auto model = restore_model(result.checkpoint);
  return eval_model(model, ds, "").eer;
}

int run_train(const std::string& config_path, const std::string& data,
              const std::string& out_dir) {
  auto cfg = ModelConfig::load_file(config_path);
  cfg.validate();
  auto ds = resolve_dataset(data, cfg.input_hw, SyntheticSpec{}.seed);
  auto result = train(cfg, ds, out_dir);
  std::printf("trained %lld steps, final loss %.6g\n",
              static_cast<long long>(result.loss_curve.size()),
              result.loss_curve.empty() ? 0.0 : result.loss_curve.back());
  std::printf("checkpoint: %s/checkpoint.sacn\n", out_dir.c_str());
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data,
             const std::string& out_dir) {
  auto ck = load_checkpoint(checkpoint);
  auto model = restore_model(ck);
  auto ds = resolve_dataset(data, model.cfg.input_hw, SyntheticSpec{}.seed);
  auto e = eval_model(model, ds, out_dir);
  std::printf("eer=%.6g threshold=%.6g\n", e.eer, e.threshold);
  std::printf("report: %s/{roc.csv,metrics.txt,roc.svg}\n", out_dir.c_str());
  return 0;
}

int run_baseline(const std::string& data, const std::string& out_dir, int64_t kernel_size,
                 int64_t n_orientations, int64_t input_hw, uint64_t seed) {
  auto ds = resolve_dataset(data, input_hw, SyntheticSpec{}.seed);
  require_verification_split(ds);
  auto bank = init_bank(kernel_size, n_orientations, seed);

  std::vector<CompCodeMap> codes;
  codes.reserve(ds.eval_idx.size());
  for (int64_t i : ds.eval_idx) {
    auto t = Tensor::create({1, 1, ds.image_hw, ds.image_hw}, ds.images[i]);
    codes.push_back(compcode_encode(bank, FeatureMap(t))[0]);
  }
  auto labels = subset_labels(ds, ds.eval_idx);

  VerificationScoreSet scores;
  for (size_t i = 0; i < codes.size(); ++i)
    for (size_t j = i + 1; j < codes.size(); ++j) {
      const double s = compcode_match(codes[i], codes[j]);
      (labels[i] == labels[j] ? scores.genuine : scores.impostor).push_back(s);
    }
  if (scores.genuine.empty() || scores.impostor.empty())
    throw DegenerateLabels("baseline-compcode: eval split lacks genuine or impostor pairs");
  auto e = eer(scores);
  emit_report(roc(scores), e, scores, out_dir);
  std::printf("compcode eer=%.6g threshold=%.6g\n", e.eer, e.threshold);
  return 0;
}

int run_synth(const std::string& spec_path, const std::string& out_dir) {
  auto spec = SyntheticSpec::load_file(spec_path);
  auto ds = generate_synthetic(spec);
  dump_dataset_png(ds, out_dir);
  std::printf("wrote %lld images for %lld subjects under %s\n",
              static_cast<long long>(ds.n_samples()), static_cast<long long>(ds.n_subjects()),
              out_dir.c_str());
  return 0;
}

struct AblationRow {
  std::string name;
  ModelConfig cfg;
};

int run_ablate(const std::string& config_path, const std::string& data,
               const std::string& out_dir, int64_t n_seeds) {
  auto base = ModelConfig::load_file(config_path);
  base.validate();
  if (n_seeds < 1) throw UsageError("--seeds must be >= 1");
  auto ds = resolve_dataset(data, base.input_hw, SyntheticSpec{}.seed);
  require_verification_split(ds);
  fs::create_directories(out_dir);

  // Table-3 style branch combinations
  std::vector<AblationRow> branch_rows;
  const std::vector<std::array<bool, 3>> combos = {
      {true, false, false}, {false, true, false}, {false, false, true},
      {true, true, false},  {false, true, true},  {true, true, true},
  };
  for (const auto& c : combos) {
    ModelConfig cfg = base;
    cfg.use_branch_ts = c[0];
    cfg.use_branch_ms = c[1];
    cfg.use_branch_ls = c[2];
    std::string name;
    if (c[0]) name += name.empty() ? "ts" : "+ts";
    if (c[1]) name += name.empty() ? "ms" : "+ms";
    if (c[2]) name += name.empty() ? "ls" : "+ls";
    branch_rows.push_back({name, cfg});
  }

  // Table-4 style module combinations, all branches enabled
  std::vector<AblationRow> module_rows;
  const std::vector<std::pair<bool, bool>> modules = {
      {false, false}, {false, true}, {true, false}, {true, true}};  // (ascm, iscm)
  for (const auto& [ascm, iscm] : modules) {
    ModelConfig cfg = base;
    cfg.use_branch_ts = cfg.use_branch_ms = cfg.use_branch_ls = true;
    cfg.use_ascm = ascm;
    cfg.use_iscm = iscm;
    std::string name = !ascm && !iscm ? "baseline"
                       : (ascm && iscm ? "iscm+ascm" : (iscm ? "iscm" : "ascm"));
    module_rows.push_back({name, cfg});
  }

  // identical configs share one training run per seed
  std::map<std::string, double> cache;
  auto eer_for = [&](const ModelConfig& cfg, const std::string& run_name) {
    const std::string key = cfg.serialize();
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    const double e = train_and_eval_eer(cfg, ds, out_dir + "/runs/" + run_name);
    cache.emplace(key, e);
    return e;
  };

  auto run_rows = [&](std::vector<AblationRow>& rows,
                      std::vector<std::vector<double>>& eers) {
    for (auto& row : rows) {
      std::vector<double> per_seed;
      for (int64_t s = 0; s < n_seeds; ++s) {
        ModelConfig cfg = row.cfg;
        cfg.seed = base.seed + static_cast<uint64_t>(s);
        char run_name[128];
        std::snprintf(run_name, sizeof(run_name), "%s_seed%llu", row.name.c_str(),
                      static_cast<unsigned long long>(cfg.seed));
        const double e = eer_for(cfg, run_name);
        per_seed.push_back(e);
        std::printf("[ablate] %-10s seed %llu  eer %.4f%%\n", row.name.c_str(),
                    static_cast<unsigned long long>(cfg.seed), 100.0 * e);
        std::fflush(stdout);
      }
      eers.push_back(per_seed);
    }
  };

  std::vector<std::vector<double>> branch_eers, module_eers;
  run_rows(branch_rows, branch_eers);
  run_rows(module_rows, module_eers);

  std::ofstream md(out_dir + "/ablation.md");
  if (!md) throw std::runtime_error("ablate: cannot write " + out_dir + "/ablation.md");
  auto print_seed_header = [&]() {
    for (int64_t s = 0; s < n_seeds; ++s)
      md << " EER% seed " << (base.seed + static_cast<uint64_t>(s)) << " |";
    md << " EER% mean |\n";
  };

  md << "# Ablation results\n\n";
  md << "Dataset: " << (data == "synthetic" ? "synthetic (default spec)" : data) << ", "
     << ds.n_subjects() << " subjects, " << ds.n_samples() << " samples, " << ds.image_hw
     << "x" << ds.image_hw << "\n\n";
  md << "## Branch scales\n\n";
  md << "| Tiny | Middle | Large |";
  print_seed_header();
  md << "|------|--------|-------|";
  for (int64_t s = 0; s < n_seeds; ++s) md << "-----------|";
  md << "-----------|\n";
  char buf[64];
  for (size_t r = 0; r < branch_rows.size(); ++r) {
    const auto& cfg = branch_rows[r].cfg;
    md << "| " << (cfg.use_branch_ts ? "yes" : "-") << " | "
       << (cfg.use_branch_ms ? "yes" : "-") << " | " << (cfg.use_branch_ls ? "yes" : "-")
       << " |";
    double sum = 0;
    for (double e : branch_eers[r]) {
      std::snprintf(buf, sizeof(buf), " %.4f |", 100.0 * e);
      md << buf;
      sum += e;
    }
    std::snprintf(buf, sizeof(buf), " %.4f |\n", 100.0 * sum / branch_eers[r].size());
    md << buf;
  }

  md << "\n## ISCM and ASCM\n\n";
  md << "| ASCM | ISCM |";
  print_seed_header();
  md << "|------|------|";
  for (int64_t s = 0; s < n_seeds; ++s) md << "-----------|";
  md << "-----------|\n";
  for (size_t r = 0; r < module_rows.size(); ++r) {
    const auto& cfg = module_rows[r].cfg;
    md << "| " << (cfg.use_ascm ? "yes" : "-") << " | " << (cfg.use_iscm ? "yes" : "-")
       << " |";
    double sum = 0;
    for (double e : module_eers[r]) {
      std::snprintf(buf, sizeof(buf), " %.4f |", 100.0 * e);
      md << buf;
      sum += e;
    }
    std::snprintf(buf, sizeof(buf), " %.4f |\n", 100.0 * sum / module_eers[r].size());
    md << buf;
  }
  md.close();
  std::printf("wrote %s/ablation.md\n", out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SAC-Net: scale-aware competitive palmprint verification"};
  app.require_subcommand(1);

  std::function<int()> task;

  {
    auto* cmd = app.add_subcommand("train", "Train a model on a dataset");
    auto config = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    cmd->add_option("--config", *config, "model config file (key=value)")->required();
    cmd->add_option("--data", *data, "dataset directory or 'synthetic'")->required();
    cmd->add_option("--out", *out, "output directory")->required();
    cmd->callback([=, &task]() { task = [=]() { return run_train(*config, *data, *out); }; });
  }
  {
    auto* cmd = app.add_subcommand("eval", "Evaluate a checkpoint with the ROC/EER protocol");
    auto ck = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    cmd->add_option("--checkpoint", *ck, "checkpoint file")->required();
    cmd->add_option("--data", *data, "dataset directory or 'synthetic'")->required();
    cmd->add_option("--out", *out, "output directory")->required();
    cmd->callback([=, &task]() { task = [=]() { return run_eval(*ck, *data, *out); }; });
  }
  {
    auto* cmd = app.add_subcommand("ablate", "Retrain the branch and module ablation grids");
    auto config = std::make_shared<std::string>();
    auto data = std::make_shared<std::string>("synthetic");
    auto out = std::make_shared<std::string>();
    auto seeds = std::make_shared<int64_t>(1);
    cmd->add_option("--config", *config, "model config file")->required();
    cmd->add_option("--data", *data, "dataset directory or 'synthetic'");
    cmd->add_option("--out", *out, "output directory")->required();
    cmd->add_option("--seeds", *seeds, "number of seeds per cell");
    cmd->callback([=, &task]() { task = [=]() { return run_ablate(*config, *data, *out, *seeds); }; });
  }
  {
    auto* cmd = app.add_subcommand("baseline-compcode",
                                   "Frozen-bank CompCode encode, match and EER");
    auto data = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto k = std::make_shared<int64_t>(17);
    auto no = std::make_shared<int64_t>(6);
    auto hw = std::make_shared<int64_t>(64);
    auto seed = std::make_shared<uint64_t>(7);
    cmd->add_option("--data", *data, "dataset directory or 'synthetic'")->required();
    cmd->add_option("--out", *out, "output directory")->required();
    cmd->add_option("--kernel-size", *k, "Gabor kernel size (odd)");
    cmd->add_option("--orientations", *no, "bank orientation count");
    cmd->add_option("--input-hw", *hw, "working resolution");
    cmd->add_option("--seed", *seed, "bank init seed");
    cmd->callback(
        [=, &task]() { task = [=]() { return run_baseline(*data, *out, *k, *no, *hw, *seed); }; });
  }
  {
    auto* cmd = app.add_subcommand("synth", "Generate a synthetic dataset tree");
    auto spec = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    cmd->add_option("--spec", *spec, "synthetic spec file (key=value)")->required();
    cmd->add_option("--out", *out, "output directory")->required();
    cmd->callback([=, &task]() { task = [=]() { return run_synth(*spec, *out); }; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    return task ? task() : 1;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
