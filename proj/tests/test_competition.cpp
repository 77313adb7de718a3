#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "gradcheck.hpp"
#include "sacnet/competition.hpp"
#include "sacnet/errors.hpp"

using namespace sacnet;

namespace {

double gabor_scalar(double x, double y, double lambda, double theta, double psi, double sigma,
                    double gamma) {
  const double xp = x * std::cos(theta) + y * std::sin(theta);
  const double yp = -x * std::sin(theta) + y * std::cos(theta);
  return std::exp(-(xp * xp + gamma * gamma * yp * yp) / (2.0 * sigma * sigma)) *
         std::cos(2.0 * M_PI * xp / lambda + psi);
}

// direct-evaluation convolution of one plane with one scalar-evaluated kernel
std::vector<double> conv_plane(const std::vector<double>& img, int64_t h, int64_t w,
                               const std::vector<double>& ker, int64_t k, int64_t stride,
                               int64_t& oh, int64_t& ow) {
  const int64_t pad = (k - 1) / 2;
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (w + 2 * pad - k) / stride + 1;
  std::vector<double> out(oh * ow, 0.0);
  for (int64_t oy = 0; oy < oh; ++oy)
    for (int64_t ox = 0; ox < ow; ++ox) {
      double acc = 0;
      for (int64_t ky = 0; ky < k; ++ky)
        for (int64_t kx = 0; kx < k; ++kx) {
          const int64_t iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
          acc += img[iy * w + ix] * ker[ky * k + kx];
        }
      out[oy * ow + ox] = acc;
    }
  return out;
}

GaborBank grid_bank(int64_t k, int64_t no, double lambda, double sigma, bool requires_grad) {
  const double pi = 3.14159265358979323846;
  GaborBank bank;
  bank.kernel_size = k;
  bank.n_orientations = no;
  for (int64_t j = 0; j < no; ++j)
    bank.params.push_back(
        GaborParams::from_effective(lambda, pi * j / no, 0.0, sigma, 1.0, requires_grad));
  return bank;
}

std::vector<double> eval_kernel(const GaborParams& p, int64_t k) {
  std::vector<double> out(k * k);
  const double el = p.effective_lambda(), es = p.effective_sigma(), eg = p.effective_gamma();
  const double th = p.theta->value(), ps = p.psi->value();
  const int64_t r = (k - 1) / 2;
  for (int64_t iy = 0; iy < k; ++iy)
    for (int64_t ix = 0; ix < k; ++ix)
      out[iy * k + ix] = gabor_scalar(ix - r, iy - r, el, th, ps, es, eg);
  return out;
}

MsaBlock identity_msa_block(int64_t channels) {
  MsaConfig cfg{2, channels};
  MsaBlock blk = init_msa_block(channels, cfg, 99);
  std::fill(blk.lift->data.begin(), blk.lift->data.end(), 0.0);
  std::fill(blk.drop->data.begin(), blk.drop->data.end(), 0.0);
  for (int64_t c = 0; c < channels; ++c) {
    blk.lift->data[c * channels + c] = 1.0;
    blk.drop->data[c * channels + c] = 1.0;
  }
  std::fill(blk.msa.wo->data.begin(), blk.msa.wo->data.end(), 0.0);
  return blk;
}

std::vector<double> stripe_image(int64_t hw, double theta, double period) {
  std::vector<double> img(hw * hw);
  for (int64_t row = 0; row < hw; ++row)
    for (int64_t col = 0; col < hw; ++col) {
      const double u = col * std::cos(theta) + row * std::sin(theta);
      img[row * hw + col] = 0.5 + 0.5 * std::cos(2.0 * M_PI * u / period);
    }
  return img;
}

}  // namespace

TEST_CASE("orientation softmax contracts") {
  Rng rng(1);
  auto t = gradcheck::random_tensor({2, 5, 4, 4}, rng, -2, 2, false);
  // plant identical responses at one pixel
  for (int64_t c = 0; c < 5; ++c) t->data[(0 * 5 + c) * 16 + 3] = 0.7;
  auto f = orientation_softmax(FeatureMap(t));
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t p = 0; p < 16; ++p) {
      double s = 0;
      for (int64_t c = 0; c < 5; ++c) s += f.tensor->data[(b * 5 + c) * 16 + p];
      CHECK(std::fabs(s - 1.0) < 1e-9);
    }
  for (int64_t c = 0; c < 5; ++c)
    CHECK(f.tensor->data[c * 16 + 3] == doctest::Approx(0.2).epsilon(1e-9));
}

TEST_CASE("softmax preserves the per-pixel argmax") {
  Rng rng(2);
  auto t = gradcheck::random_tensor({2, 6, 5, 5}, rng, -3, 3, false);
  auto f = orientation_softmax(FeatureMap(t));
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t p = 0; p < 25; ++p) {
      int64_t am_in = 0, am_out = 0;
      for (int64_t c = 1; c < 6; ++c) {
        if (t->data[(b * 6 + c) * 25 + p] > t->data[(b * 6 + am_in) * 25 + p]) am_in = c;
        if (f.tensor->data[(b * 6 + c) * 25 + p] > f.tensor->data[(b * 6 + am_out) * 25 + p])
          am_out = c;
      }
      CHECK(am_in == am_out);
    }
}

TEST_CASE("iscm forward shapes and normalization") {
  auto g1 = init_bank(5, 6, 11);
  auto g2 = init_bank(5, 6, 12);
  auto msa = init_msa_block(6, MsaConfig{2, 8}, 13);
  Rng rng(14);
  auto img = gradcheck::random_tensor({2, 1, 16, 16}, rng, 0, 1, false);
  auto out = iscm_forward(g1, g2, msa, FeatureMap(img));
  CHECK(out.f_msa.tensor->shape == Shape{2, 6, 8, 8});
  CHECK(out.f_inner.tensor->shape == Shape{2, 6, 8, 8});
  CHECK(out.f_inner.channel_semantics == ChannelSemantics::orientation);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t p = 0; p < 64; ++p) {
      double s = 0;
      for (int64_t c = 0; c < 6; ++c) s += out.f_inner.tensor->data[(b * 6 + c) * 64 + p];
      CHECK(std::fabs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("iscm winners on a matched stripe agree with the direct oracle") {
  const int64_t no = 6, k = 9, hw = 36;
  const double lambda = 4.5, sigma = 2.25;
  const double pi = 3.14159265358979323846;
  auto g1 = grid_bank(k, no, lambda, sigma, false);
  auto g2 = grid_bank(k, no, lambda, sigma, false);
  auto msa = identity_msa_block(no);

  for (int64_t target : {0L, 2L, 3L}) {
    auto img = stripe_image(hw, pi * target / no, lambda);
    auto out = iscm_forward(g1, g2, msa, FeatureMap(Tensor::create({1, 1, hw, hw}, img)));

    // oracle: scalar-evaluated kernels pushed through nested-loop convolution
    std::vector<std::vector<double>> layer1(no);
    int64_t oh = 0, ow = 0;
    for (int64_t c = 0; c < no; ++c)
      layer1[c] = conv_plane(img, hw, hw, eval_kernel(g1.params[c], k), k, 1, oh, ow);
    std::vector<std::vector<double>> layer2(no);
    int64_t oh2 = 0, ow2 = 0;
    for (int64_t c = 0; c < no; ++c) {
      auto ker = eval_kernel(g2.params[c], k);
      std::vector<double> acc;
      for (int64_t ic = 0; ic < no; ++ic) {
        auto part = conv_plane(layer1[ic], oh, ow, ker, k, 2, oh2, ow2);
        if (acc.empty())
          acc = part;
        else
          for (size_t i = 0; i < acc.size(); ++i) acc[i] += part[i];
      }
      layer2[c] = acc;
    }
    REQUIRE(out.f_inner.tensor->shape == Shape{1, no, oh2, ow2});

    // range of oracle responses, for the decisive-margin threshold
    double lo = layer2[0][0], hi = layer2[0][0];
    for (const auto& plane : layer2)
      for (double v : plane) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    const double margin = 1e-6 * (hi - lo);

    const int64_t border = 3;
    int64_t decisive = 0, agree = 0, target_wins = 0;
    for (int64_t row = border; row < oh2 - border; ++row)
      for (int64_t col = border; col < ow2 - border; ++col) {
        const int64_t p = row * ow2 + col;
        int64_t best = 0;
        double bv = layer2[0][p], second = -1e300;
        for (int64_t c = 1; c < no; ++c) {
          if (layer2[c][p] > bv) {
            second = bv;
            bv = layer2[c][p];
            best = c;
          } else {
            second = std::max(second, layer2[c][p]);
          }
        }
        if (bv - second < margin) continue;
        ++decisive;
        int64_t impl = 0;
        for (int64_t c = 1; c < no; ++c)
          if (out.f_inner.tensor->data[c * oh2 * ow2 + p] >
              out.f_inner.tensor->data[impl * oh2 * ow2 + p])
            impl = c;
        if (impl == best) ++agree;
        if (impl == target) ++target_wins;
      }
    REQUIRE(decisive > 0);
    CHECK(agree == decisive);  // implementation matches the oracle exactly
    // the matched orientation dominates the decisive interior
    CHECK(static_cast<double>(target_wins) / decisive > 0.3);
  }
}

TEST_CASE("ascm contracts") {
  Rng rng(5);
  auto a = FeatureMap(gradcheck::random_tensor({2, 4, 3, 3}, rng, -2, 2, false));
  auto b = FeatureMap(gradcheck::random_tensor({2, 4, 3, 3}, rng, -2, 2, false));
  auto c = FeatureMap(gradcheck::random_tensor({2, 4, 3, 3}, rng, -2, 2, false));

  auto joint = ascm_forward({a, b, c});
  CHECK(joint.tensor->shape == Shape{2, 12, 3, 3});
  CHECK(joint.channel_semantics == ChannelSemantics::scale_group);
  for (int64_t bi = 0; bi < 2; ++bi)
    for (int64_t p = 0; p < 9; ++p) {
      double s = 0;
      for (int64_t ch = 0; ch < 12; ++ch) s += joint.tensor->data[(bi * 12 + ch) * 9 + p];
      CHECK(std::fabs(s - 1.0) < 1e-9);
    }

  SUBCASE("permuting branch order permutes channel blocks") {
    auto swapped = ascm_forward({b, a, c});
    for (int64_t bi = 0; bi < 2; ++bi)
      for (int64_t ch = 0; ch < 4; ++ch)
        for (int64_t p = 0; p < 9; ++p) {
          const double orig_a = joint.tensor->data[(bi * 12 + ch) * 9 + p];
          const double swap_a = swapped.tensor->data[(bi * 12 + 4 + ch) * 9 + p];
          CHECK(std::fabs(orig_a - swap_a) < 1e-12);
        }
  }

  SUBCASE("shift invariance across all channels of a pixel") {
    auto shifted_a = FeatureMap(add(a.tensor, 3.25));
    auto shifted_b = FeatureMap(add(b.tensor, 3.25));
    auto shifted_c = FeatureMap(add(c.tensor, 3.25));
    auto shifted = ascm_forward({shifted_a, shifted_b, shifted_c});
    for (int64_t i = 0; i < joint.tensor->size(); ++i)
      CHECK(std::fabs(shifted.tensor->data[i] - joint.tensor->data[i]) < 1e-9);
  }

  SUBCASE("grouped form normalizes each orientation triple") {
    auto grouped = ascm_forward({a, b, c}, true);
    CHECK(grouped.tensor->shape == Shape{2, 12, 3, 3});
    for (int64_t bi = 0; bi < 2; ++bi)
      for (int64_t ori = 0; ori < 4; ++ori)
        for (int64_t p = 0; p < 9; ++p) {
          double s = 0;
          for (int64_t g = 0; g < 3; ++g)
            s += grouped.tensor->data[(bi * 12 + g * 4 + ori) * 9 + p];
          CHECK(std::fabs(s - 1.0) < 1e-9);
        }
  }

  SUBCASE("spatial disagreement rejected") {
    auto bad = FeatureMap(Tensor::zeros({2, 4, 5, 5}));
    CHECK_THROWS_AS(ascm_forward({a, bad}), ShapeMismatch);
  }
}

TEST_CASE("ascm favors the scale matched to the texture period") {
  const int64_t no = 6, hw = 48;
  struct Scale {
    int64_t k;
    double lambda;
  };
  // large, middle, tiny ordering to mirror the concat convention
  std::vector<Scale> scales = {{21, 10.0}, {11, 5.0}, {5, 2.5}};
  std::vector<GaborBank> banks;
  for (auto s : scales) banks.push_back(grid_bank(s.k, no, s.lambda, s.lambda / 2.0, false));

  auto img = stripe_image(hw, 0.0, scales[1].lambda);  // middle-scale period
  FeatureMap in(Tensor::create({1, 1, hw, hw}, img));

  // oracle: direct response energy per bank, computed from scalar kernels
  std::vector<double> oracle_energy(3, 0.0);
  for (int64_t bi = 0; bi < 3; ++bi) {
    for (int64_t c = 0; c < no; ++c) {
      int64_t oh = 0, ow = 0;
      auto resp =
          conv_plane(img, hw, hw, eval_kernel(banks[bi].params[c], scales[bi].k), scales[bi].k,
                     1, oh, ow);
      for (int64_t row = 12; row < oh - 12; ++row)
        for (int64_t col = 12; col < ow - 12; ++col) {
          const double v = resp[row * ow + col];
          oracle_energy[bi] += v * v;
        }
    }
  }
  CHECK(oracle_energy[1] > oracle_energy[0]);
  CHECK(oracle_energy[1] > oracle_energy[2]);

  std::vector<FeatureMap> f_msa;
  for (int64_t bi = 0; bi < 3; ++bi) f_msa.push_back(bank_forward(banks[bi], in));
  auto across = ascm_forward(f_msa);

  std::vector<double> block_mean(3, 0.0);
  const int64_t plane = hw * hw;
  for (int64_t bi = 0; bi < 3; ++bi) {
    for (int64_t c = 0; c < no; ++c)
      for (int64_t row = 12; row < hw - 12; ++row)
        for (int64_t col = 12; col < hw - 12; ++col)
          block_mean[bi] += across.tensor->data[(bi * no + c) * plane + row * hw + col];
  }
  CHECK(block_mean[1] > block_mean[0]);
  CHECK(block_mean[1] > block_mean[2]);
}

TEST_CASE("compcode winner rules") {
  auto bank = grid_bank(9, 6, 4.5, 2.25, false);

  SUBCASE("constant input ties resolve to index 0") {
    FeatureMap in(Tensor::full({1, 1, 20, 20}, 0.6));
    auto maps = compcode_encode(bank, in);
    REQUIRE(maps.size() == 1);
    // interior only: border pixels see asymmetric padding and need not tie
    for (int64_t row = 8; row < 12; ++row)
      for (int64_t col = 8; col < 12; ++col) CHECK(maps[0].winner_index[row * 20 + col] == 0);
  }

  SUBCASE("positive scaling leaves winners unchanged") {
    Rng rng(7);
    auto img = gradcheck::random_tensor({1, 1, 24, 24}, rng, 0, 1, false);
    auto base = compcode_encode(bank, FeatureMap(img));
    for (double c : {2.0, 0.5, 4.0, 1.7}) {
      auto scaled = Tensor::create(img->shape, img->data);
      for (auto& v : scaled->data) v *= c;
      auto m = compcode_encode(bank, FeatureMap(scaled));
      CHECK(m[0].winner_index == base[0].winner_index);
    }
  }

  SUBCASE("dark stripe winners match the direct oracle") {
    const int64_t no = 6, k = 9, hw = 36;
    const double pi = 3.14159265358979323846;
    for (int64_t target : {1L, 4L}) {
      std::vector<double> img(hw * hw);
      for (int64_t row = 0; row < hw; ++row)
        for (int64_t col = 0; col < hw; ++col) {
          const double u = col * std::cos(pi * target / no) + row * std::sin(pi * target / no);
          img[row * hw + col] = 0.5 - 0.5 * std::cos(2.0 * M_PI * u / 4.5);
        }
      auto maps = compcode_encode(bank, FeatureMap(Tensor::create({1, 1, hw, hw}, img)));

      std::vector<std::vector<double>> resp(no);
      int64_t oh = 0, ow = 0;
      for (int64_t c = 0; c < no; ++c)
        resp[c] = conv_plane(img, hw, hw, eval_kernel(bank.params[c], k), k, 1, oh, ow);
      double lo = resp[0][0], hi = resp[0][0];
      for (auto& plane : resp)
        for (double v : plane) {
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      const double margin = 1e-6 * (hi - lo);
      int64_t decisive = 0, agree = 0, target_wins = 0;
      for (int64_t row = 6; row < hw - 6; ++row)
        for (int64_t col = 6; col < hw - 6; ++col) {
          const int64_t p = row * hw + col;
          int64_t best = 0;
          double bv = resp[0][p], second = 1e300;
          for (int64_t c = 1; c < no; ++c) {
            if (resp[c][p] < bv) {
              second = bv;
              bv = resp[c][p];
              best = c;
            } else {
              second = std::min(second, resp[c][p]);
            }
          }
          if (second - bv < margin) continue;
          ++decisive;
          if (maps[0].winner_index[p] == best) ++agree;
          if (maps[0].winner_index[p] == target) ++target_wins;
        }
      REQUIRE(decisive > 0);
      CHECK(agree == decisive);
      CHECK(static_cast<double>(target_wins) / decisive > 0.3);
    }
  }
}

TEST_CASE("compcode match scores") {
  CompCodeMap a{6, 4, 4, std::vector<uint8_t>(16, 2)};
  CompCodeMap b{6, 4, 4, std::vector<uint8_t>(16, 2)};
  CHECK(compcode_match(a, b) == doctest::Approx(1.0));

  CompCodeMap c{6, 4, 4, std::vector<uint8_t>(16, 5)};  // offset by N_o/2
  CHECK(compcode_match(a, c) == doctest::Approx(0.0));

  CompCodeMap d{6, 4, 4, std::vector<uint8_t>(16, 2)};
  d.h = 5;
  d.winner_index.resize(20, 2);
  CHECK_THROWS_AS(compcode_match(a, d), ShapeMismatch);

  SUBCASE("random maps match the enumerated expectation") {
    // exact expectation from the 36 index pairs under the score formula
    double expected = 0.0;
    for (int64_t i = 0; i < 6; ++i)
      for (int64_t j = 0; j < 6; ++j) {
        const int64_t gap = std::min(std::abs(i - j), 6 - std::abs(i - j));
        expected += (1.0 - gap / 3.0) / 36.0;
      }
    Rng rng(9);
    CompCodeMap x{6, 64, 64, {}}, y{6, 64, 64, {}};
    for (int64_t i = 0; i < 64 * 64; ++i) {
      x.winner_index.push_back(static_cast<uint8_t>(rng.uniform_int(0, 5)));
      y.winner_index.push_back(static_cast<uint8_t>(rng.uniform_int(0, 5)));
    }
    CHECK(std::fabs(compcode_match(x, y) - expected) < 0.02);
  }
}

TEST_CASE("compcode serialization round trip") {
  Rng rng(13);
  CompCodeMap m{6, 9, 7, {}};
  for (int64_t i = 0; i < 63; ++i)
    m.winner_index.push_back(static_cast<uint8_t>(rng.uniform_int(0, 5)));
  const std::string path = "/tmp/sacnet_test_code.ccmp";
  save_compcode(m, path);
  auto back = load_compcode(path);
  CHECK(back.n_orientations == m.n_orientations);
  CHECK(back.h == m.h);
  CHECK(back.w == m.w);
  CHECK(back.winner_index == m.winner_index);
  std::remove(path.c_str());
}

TEST_CASE("gradients reach every learnable leaf through iscm and ascm") {
  auto g1a = init_bank(3, 4, 21);
  auto g2a = init_bank(3, 4, 22);
  auto msa_a = init_msa_block(4, MsaConfig{2, 4}, 23);
  auto g1b = init_bank(5, 4, 24);
  auto g2b = init_bank(5, 4, 25);
  auto msa_b = init_msa_block(4, MsaConfig{2, 4}, 26);

  Rng rng(27);
  auto img = gradcheck::random_tensor({2, 1, 12, 12}, rng, 0, 1, false);
  auto out_a = iscm_forward(g1a, g2a, msa_a, FeatureMap(img));
  auto out_b = iscm_forward(g1b, g2b, msa_b, FeatureMap(img));
  auto across = ascm_forward({out_a.f_msa, out_b.f_msa});
  auto loss = add(sum_all(across.tensor),
                  add(sum_all(mul(out_a.f_inner.tensor, out_a.f_inner.tensor)),
                      sum_all(mul(out_b.f_inner.tensor, out_b.f_inner.tensor))));
  backward(loss);

  auto has_nonzero = [](const TensorPtr& t) {
    t->ensure_grad();
    for (double g : t->grad)
      if (g != 0.0) return true;
    return false;
  };
  for (auto* bank : {&g1a, &g2a, &g1b, &g2b})
    for (auto& p : bank->params) {
      CHECK(has_nonzero(p.lambda_raw));
      CHECK(has_nonzero(p.theta));
      CHECK(has_nonzero(p.psi));
      CHECK(has_nonzero(p.sigma_raw));
      CHECK(has_nonzero(p.gamma_raw));
    }
  for (auto* blk : {&msa_a, &msa_b}) {
    CHECK(has_nonzero(blk->lift));
    CHECK(has_nonzero(blk->drop));
    CHECK(has_nonzero(blk->msa.wo));
    for (int64_t h = 0; h < 2; ++h) {
      CHECK(has_nonzero(blk->msa.wq[h]));
      CHECK(has_nonzero(blk->msa.wk[h]));
      CHECK(has_nonzero(blk->msa.wv[h]));
    }
  }
}
