#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "sacnet/errors.hpp"
#include "sacnet/rng.hpp"
#include "sacnet/verification.hpp"

using namespace sacnet;

namespace {

// dense-threshold brute force: EER as the balanced error at the threshold
// minimizing |FAR - FRR|
double eer_bruteforce(const VerificationScoreSet& s, int64_t n_thresholds) {
  double lo = 1e300, hi = -1e300;
  for (double v : s.genuine) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (double v : s.impostor) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  auto gen = s.genuine;
  auto imp = s.impostor;
  std::sort(gen.begin(), gen.end());
  std::sort(imp.begin(), imp.end());
  const double span = hi - lo;
  double best_gap = 1e300, best_eer = 0.0;
  for (int64_t i = 0; i <= n_thresholds; ++i) {
    const double t = lo - 0.5 * span / n_thresholds +
                     (span + span / n_thresholds) * i / static_cast<double>(n_thresholds);
    const double far =
        static_cast<double>(imp.end() - std::lower_bound(imp.begin(), imp.end(), t)) /
        imp.size();
    const double frr =
        static_cast<double>(std::lower_bound(gen.begin(), gen.end(), t) - gen.begin()) /
        gen.size();
    const double gap = std::fabs(far - frr);
    if (gap < best_gap) {
      best_gap = gap;
      best_eer = 0.5 * (far + frr);
    }
  }
  return best_eer;
}

}  // namespace

TEST_CASE("build_score_set pair counting") {
  std::vector<std::vector<double>> emb = {{1, 0}, {0.9, 0.1}, {0, 1}, {0.1, 0.9}};
  std::vector<int64_t> labels = {0, 0, 1, 1};
  auto s = build_score_set(emb, labels);
  CHECK(s.genuine.size() == 2);
  CHECK(s.impostor.size() == 4);

  SUBCASE("identical embeddings score 1 everywhere") {
    std::vector<std::vector<double>> same(4, {0.3, 0.4});
    auto t = build_score_set(same, labels);
    for (double v : t.genuine) CHECK(v == doctest::Approx(1.0));
    for (double v : t.impostor) CHECK(v == doctest::Approx(1.0));
  }
  SUBCASE("sampled mode is deterministic") {
    auto a = build_score_set(emb, labels, Pairing::sampled(3, 77));
    auto b = build_score_set(emb, labels, Pairing::sampled(3, 77));
    CHECK(a.impostor == b.impostor);
    CHECK(a.impostor.size() == 12);
    CHECK(a.genuine.size() == 2);
  }
  SUBCASE("single class rejected") {
    std::vector<int64_t> mono = {0, 0, 0, 0};
    CHECK_THROWS_AS(build_score_set(emb, mono), DegenerateLabels);
  }
}

TEST_CASE("eer on separable sets is zero") {
  VerificationScoreSet s{{0.9, 0.8}, {0.1, 0.2}};
  auto r = eer(s);
  CHECK(r.eer == doctest::Approx(0.0));
  CHECK(r.threshold > 0.2);
  CHECK(r.threshold <= 0.8);
}

TEST_CASE("eer at chance level for identical distributions") {
  Rng rng(5);
  VerificationScoreSet s;
  for (int i = 0; i < 10000; ++i) {
    s.genuine.push_back(rng.normal());
    s.impostor.push_back(rng.normal());
  }
  CHECK(std::fabs(eer(s).eer - 0.5) < 0.02);
}

TEST_CASE("eer matches the dense sweep on the four-score example") {
  VerificationScoreSet s{{0.9, 0.7, 0.6, 0.4}, {0.8, 0.5, 0.3, 0.2}};
  const double bf = eer_bruteforce(s, 1000000);
  CHECK(std::fabs(eer(s).eer - bf) <= 1.0 / (2.0 * 4.0));
}

TEST_CASE("eer matches the dense sweep on 200 random score sets") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    VerificationScoreSet s;
    const int64_t ng = rng.uniform_int(3, 40), ni = rng.uniform_int(3, 40);
    const double sep = rng.uniform(0.0, 2.0);
    for (int64_t i = 0; i < ng; ++i) s.genuine.push_back(rng.normal() + sep);
    for (int64_t i = 0; i < ni; ++i) s.impostor.push_back(rng.normal());
    const double bf = eer_bruteforce(s, 100000);
    const double tol = 1.0 / (2.0 * std::min(ng, ni));
    CHECK(std::fabs(eer(s).eer - bf) <= tol);
  }
}

TEST_CASE("eer invariant under strictly increasing transforms") {
  Rng rng(13);
  VerificationScoreSet s;
  for (int i = 0; i < 25; ++i) s.genuine.push_back(rng.normal() + 0.8);
  for (int i = 0; i < 30; ++i) s.impostor.push_back(rng.normal());
  const double base = eer(s).eer;

  auto apply = [&](double (*f)(double)) {
    VerificationScoreSet t;
    for (double v : s.genuine) t.genuine.push_back(f(v));
    for (double v : s.impostor) t.impostor.push_back(f(v));
    return t;
  };
  CHECK(eer(apply([](double x) { return std::tanh(x); })).eer == base);
  CHECK(eer(apply([](double x) { return 3.0 * x + 11.0; })).eer == base);
  CHECK(eer(apply([](double x) { return std::exp(x); })).eer == base);
}

TEST_CASE("swapping sign and roles maps eer to itself within resolution") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    VerificationScoreSet s;
    const int64_t ng = 20 + rng.uniform_int(0, 20), ni = 20 + rng.uniform_int(0, 20);
    for (int64_t i = 0; i < ng; ++i) s.genuine.push_back(rng.normal() + 1.0);
    for (int64_t i = 0; i < ni; ++i) s.impostor.push_back(rng.normal());
    VerificationScoreSet flipped;
    for (double v : s.impostor) flipped.genuine.push_back(-v);
    for (double v : s.genuine) flipped.impostor.push_back(-v);
    const double tol = 1.0 / (2.0 * std::min(ng, ni)) + 1e-12;
    CHECK(std::fabs(eer(s).eer - eer(flipped).eer) <= tol);
  }
}

TEST_CASE("roc curve contracts") {
  SUBCASE("separable curve passes through (0,1)") {
    VerificationScoreSet s{{0.9, 0.8}, {0.1, 0.2}};
    auto c = roc(s);
    bool hit = false;
    for (size_t i = 0; i < c.far.size(); ++i)
      if (c.far[i] == 0.0 && c.gar[i] == 1.0) hit = true;
    CHECK(hit);
  }
  SUBCASE("monotone in both coordinates, ends at (1,1)") {
    Rng rng(19);
    VerificationScoreSet s;
    for (int i = 0; i < 200; ++i) {
      s.genuine.push_back(rng.normal() + 0.5);
      s.impostor.push_back(rng.normal());
    }
    auto c = roc(s);
    for (size_t i = 1; i < c.far.size(); ++i) {
      CHECK(c.far[i] >= c.far[i - 1]);
      CHECK(c.gar[i] >= c.gar[i - 1]);
    }
    CHECK(c.far.back() == doctest::Approx(1.0));
    CHECK(c.gar.back() == doctest::Approx(1.0));
  }
  SUBCASE("chance-level area under curve is one half") {
    Rng rng(23);
    VerificationScoreSet s;
    for (int i = 0; i < 10000; ++i) {
      s.genuine.push_back(rng.normal());
      s.impostor.push_back(rng.normal());
    }
    CHECK(std::fabs(roc_auc(roc(s)) - 0.5) < 0.02);
  }
}

TEST_CASE("emit_report outputs") {
  Rng rng(29);
  VerificationScoreSet s;
  for (int i = 0; i < 40; ++i) s.genuine.push_back(rng.normal() + 1.2);
  for (int i = 0; i < 60; ++i) s.impostor.push_back(rng.normal());
  auto curve = roc(s);
  auto e = eer(s);
  const std::string dir = "/tmp/sacnet_test_report";
  emit_report(curve, e, s, dir);

  SUBCASE("csv row count equals distinct threshold count") {
    std::ifstream f(dir + "/roc.csv");
    std::string line;
    int64_t rows = -1;  // header
    while (std::getline(f, line))
      if (!line.empty()) ++rows;
    CHECK(rows == static_cast<int64_t>(curve.threshold.size()));
  }

  SUBCASE("re-emit is byte identical") {
    auto read_all = [](const std::string& p) {
      std::ifstream f(p, std::ios::binary);
      std::stringstream ss;
      ss << f.rdbuf();
      return ss.str();
    };
    auto csv1 = read_all(dir + "/roc.csv");
    auto met1 = read_all(dir + "/metrics.txt");
    auto svg1 = read_all(dir + "/roc.svg");
    emit_report(curve, e, s, dir);
    CHECK(read_all(dir + "/roc.csv") == csv1);
    CHECK(read_all(dir + "/metrics.txt") == met1);
    CHECK(read_all(dir + "/roc.svg") == svg1);
    CHECK(svg1.find("viewBox=\"0 0 800 600\"") != std::string::npos);
    CHECK(svg1.find(">FAR<") != std::string::npos);
    CHECK(svg1.find(">GAR<") != std::string::npos);
  }

  SUBCASE("metrics round-trip to 12 significant digits") {
    std::ifstream f(dir + "/metrics.txt");
    std::string line;
    double read_eer = -1;
    while (std::getline(f, line))
      if (line.rfind("eer=", 0) == 0) read_eer = std::stod(line.substr(4));
    CHECK(std::fabs(read_eer - e.eer) <= 1e-12 * std::max(1.0, std::fabs(e.eer)));
  }
}
