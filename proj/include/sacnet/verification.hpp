#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sacnet {

// Similarity convention throughout: higher score means more genuine
// (cosine). Distance-based callers must negate before building a set.
struct VerificationScoreSet {
  std::vector<double> genuine;
  std::vector<double> impostor;
};

struct Pairing {
  enum class Mode { all_pairs, sampled } mode = Mode::all_pairs;
  int64_t impostor_per_sample = 0;
  uint64_t seed = 0;

  static Pairing all() { return Pairing{}; }
  static Pairing sampled(int64_t k, uint64_t seed) {
    return Pairing{Mode::sampled, k, seed};
  }
};

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

// genuine = same-label pairs, impostor = different-label pairs; all-pairs is
// exhaustive, sampled keeps all genuine pairs and draws k impostor partners
// per sample
VerificationScoreSet build_score_set(const std::vector<std::vector<double>>& embeddings,
                                     const std::vector<int64_t>& labels,
                                     const Pairing& pairing = Pairing::all());

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// Sweeps every distinct score as a threshold with FAR(t) = P(impostor >= t)
// and FRR(t) = P(genuine < t), then linearly interpolates FAR and FRR
// between the two adjacent thresholds where FAR-FRR changes sign.
EerResult eer(const VerificationScoreSet& scores);

struct RocCurve {
  std::vector<double> threshold;
  std::vector<double> far;
  std::vector<double> gar;  // 1 - FRR
};

// one point per distinct threshold, sorted by increasing FAR
RocCurve roc(const VerificationScoreSet& scores);

double roc_auc(const RocCurve& curve);

// writes roc.csv, metrics.txt (key=value lines) and roc.svg into out_dir
void emit_report(const RocCurve& curve, const EerResult& e, const VerificationScoreSet& scores,
                 const std::string& out_dir);

}  // namespace sacnet
