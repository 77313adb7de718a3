#include "sacnet/verification.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "sacnet/errors.hpp"
#include "sacnet/rng.hpp"

namespace sacnet {

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw ShapeMismatch("cosine_similarity: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0 ? dot / denom : 0.0;
}

VerificationScoreSet build_score_set(const std::vector<std::vector<double>>& embeddings,
                                     const std::vector<int64_t>& labels,
                                     const Pairing& pairing) {
  const int64_t n = static_cast<int64_t>(embeddings.size());
  if (n < 2 || labels.size() != embeddings.size())
    throw DegenerateLabels("build_score_set: need >= 2 labeled samples");
  bool multi_class = false;
  for (int64_t i = 1; i < n; ++i)
    if (labels[i] != labels[0]) multi_class = true;
  if (!multi_class)
    throw DegenerateLabels("build_score_set: only one class present");

  VerificationScoreSet out;
  // genuine pairs are exhaustive in both modes
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j)
      if (labels[i] == labels[j])
        out.genuine.push_back(cosine_similarity(embeddings[i], embeddings[j]));

  if (pairing.mode == Pairing::Mode::all_pairs) {
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = i + 1; j < n; ++j)
        if (labels[i] != labels[j])
          out.impostor.push_back(cosine_similarity(embeddings[i], embeddings[j]));
  } else {
    Rng rng(pairing.seed);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t k = 0; k < pairing.impostor_per_sample; ++k) {
        int64_t j = rng.uniform_int(0, n - 1);
        while (labels[j] == labels[i]) j = rng.uniform_int(0, n - 1);
        out.impostor.push_back(cosine_similarity(embeddings[i], embeddings[j]));
      }
  }
  return out;
}

namespace {

void check_scores(const VerificationScoreSet& s, const char* who) {
  if (s.genuine.empty() || s.impostor.empty())
    throw std::invalid_argument(std::string(who) + ": empty genuine or impostor set");
  for (double v : s.genuine)
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite score");
  for (double v : s.impostor)
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite score");
}

// FAR(t) = fraction of impostor >= t, on sorted scores
double far_at(const std::vector<double>& imp_sorted, double t) {
  auto it = std::lower_bound(imp_sorted.begin(), imp_sorted.end(), t);
  return static_cast<double>(imp_sorted.end() - it) / static_cast<double>(imp_sorted.size());
}

// FRR(t) = fraction of genuine < t, on sorted scores
double frr_at(const std::vector<double>& gen_sorted, double t) {
  auto it = std::lower_bound(gen_sorted.begin(), gen_sorted.end(), t);
  return static_cast<double>(it - gen_sorted.begin()) / static_cast<double>(gen_sorted.size());
}

std::vector<double> distinct_thresholds(const VerificationScoreSet& s) {
  std::vector<double> t;
  t.reserve(s.genuine.size() + s.impostor.size());
  t.insert(t.end(), s.genuine.begin(), s.genuine.end());
  t.insert(t.end(), s.impostor.begin(), s.impostor.end());
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

}  // namespace

EerResult eer(const VerificationScoreSet& scores) {
  check_scores(scores, "eer");
  auto gen = scores.genuine;
  auto imp = scores.impostor;
  std::sort(gen.begin(), gen.end());
  std::sort(imp.begin(), imp.end());

  auto thr = distinct_thresholds(scores);
  // past-the-end sentinel where FAR=0, FRR=1 guarantees a sign flip
  thr.push_back(thr.back() + 1.0);

  double prev_t = thr[0];
  double prev_far = far_at(imp, prev_t), prev_frr = frr_at(gen, prev_t);
  for (size_t i = 1; i < thr.size(); ++i) {
    const bool sentinel = (i + 1 == thr.size());
    const double t = thr[i];
    const double far = sentinel ? 0.0 : far_at(imp, t);
    const double frr = sentinel ? 1.0 : frr_at(gen, t);
    const double prev_diff = prev_far - prev_frr;
    const double diff = far - frr;
    if (prev_diff == 0.0) return EerResult{prev_far, prev_t};
    if (prev_diff > 0.0 && diff < 0.0) {
      const double s = prev_diff / (prev_diff - diff);
      return EerResult{prev_far + (far - prev_far) * s, prev_t + (t - prev_t) * s};
    }
    prev_t = t;
    prev_far = far;
    prev_frr = frr;
  }
  // only reachable when the final point itself balances
  return EerResult{prev_far, prev_t};
}

RocCurve roc(const VerificationScoreSet& scores) {
  check_scores(scores, "roc");
  auto gen = scores.genuine;
  auto imp = scores.impostor;
  std::sort(gen.begin(), gen.end());
  std::sort(imp.begin(), imp.end());

  auto thr = distinct_thresholds(scores);
  RocCurve curve;
  // descending threshold produces FAR ascending
  for (auto it = thr.rbegin(); it != thr.rend(); ++it) {
    curve.threshold.push_back(*it);
    curve.far.push_back(far_at(imp, *it));
    curve.gar.push_back(1.0 - frr_at(gen, *it));
  }
  return curve;
}

double roc_auc(const RocCurve& curve) {
  double auc = 0.0;
  // extend to the (0, gar_first) and (1, 1) corners implied by the sweep
  double px = 0.0, py = curve.gar.empty() ? 0.0 : curve.gar.front();
  for (size_t i = 0; i < curve.far.size(); ++i) {
    auc += (curve.far[i] - px) * 0.5 * (curve.gar[i] + py);
    px = curve.far[i];
    py = curve.gar[i];
  }
  auc += (1.0 - px) * 0.5 * (1.0 + py);
  return auc;
}

namespace {

FILE* open_or_throw(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("emit_report: cannot write " + path);
  return f;
}

}  // namespace

void emit_report(const RocCurve& curve, const EerResult& e, const VerificationScoreSet& scores,
                 const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);

  {
    FILE* f = open_or_throw(out_dir + "/roc.csv");
    std::fprintf(f, "threshold,far,gar\n");
    for (size_t i = 0; i < curve.threshold.size(); ++i)
      std::fprintf(f, "%.12g,%.12g,%.12g\n", curve.threshold[i], curve.far[i], curve.gar[i]);
    std::fclose(f);
  }

  {
    FILE* f = open_or_throw(out_dir + "/metrics.txt");
    std::fprintf(f, "eer=%.12g\n", e.eer);
    std::fprintf(f, "threshold=%.12g\n", e.threshold);
    std::fprintf(f, "genuine_count=%zu\n", scores.genuine.size());
    std::fprintf(f, "impostor_count=%zu\n", scores.impostor.size());
    std::fclose(f);
  }

  {
    FILE* f = open_or_throw(out_dir + "/roc.svg");
    const double x0 = 90, y0 = 60, pw = 650, ph = 460;  // plot box inside 800x600
    std::fprintf(f, "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 800 600\">\n");
    std::fprintf(f, "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n");
    std::fprintf(f,
                 "<rect x=\"%.12g\" y=\"%.12g\" width=\"%.12g\" height=\"%.12g\" fill=\"none\" "
                 "stroke=\"black\"/>\n",
                 x0, y0, pw, ph);
    std::fprintf(f, "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"2\" points=\"");
    for (size_t i = 0; i < curve.far.size(); ++i)
      std::fprintf(f, "%.12g,%.12g ", x0 + curve.far[i] * pw, y0 + ph - curve.gar[i] * ph);
    std::fprintf(f, "\"/>\n");
    for (int tick = 0; tick <= 5; ++tick) {
      const double frac = tick / 5.0;
      std::fprintf(f,
                   "<text x=\"%.12g\" y=\"%.12g\" font-size=\"14\" "
                   "text-anchor=\"middle\">%.1f</text>\n",
                   x0 + frac * pw, y0 + ph + 22, frac);
      std::fprintf(f,
                   "<text x=\"%.12g\" y=\"%.12g\" font-size=\"14\" "
                   "text-anchor=\"end\">%.1f</text>\n",
                   x0 - 8, y0 + ph - frac * ph + 5, frac);
    }
    std::fprintf(f,
                 "<text x=\"%.12g\" y=\"%.12g\" font-size=\"18\" "
                 "text-anchor=\"middle\">FAR</text>\n",
                 x0 + pw / 2, y0 + ph + 50);
    std::fprintf(f,
                 "<text x=\"20\" y=\"%.12g\" font-size=\"18\" transform=\"rotate(-90 20 %.12g)\" "
                 "text-anchor=\"middle\">GAR</text>\n",
                 y0 + ph / 2, y0 + ph / 2);
    std::fprintf(f, "<text x=\"%.12g\" y=\"40\" font-size=\"18\">ROC, EER=%.6g</text>\n", x0,
                 e.eer);
    std::fprintf(f, "</svg>\n");
    std::fclose(f);
  }
}

}  // namespace sacnet
