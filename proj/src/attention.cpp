#include "sacnet/attention.hpp"

#include <cmath>

#include "fast_math.hpp"
#include "parallel.hpp"
#include "sacnet/errors.hpp"
#include "sacnet/rng.hpp"

namespace sacnet {

void MsaConfig::validate() const {
  if (n_heads < 1 || embed_dim < 1)
    throw ShapeMismatch("MsaConfig: dims must be >= 1");
  if (embed_dim % n_heads != 0)
    throw ShapeMismatch("MsaConfig: embed_dim " + std::to_string(embed_dim) +
                        " not divisible by n_heads " + std::to_string(n_heads));
}

namespace {

TensorPtr uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::create(std::move(shape), std::move(data), true);
}

// one row of softmax(q_i K^T * inv_scale) into attn_row
void attention_row(const double* q_i, const double* k_b, int64_t t, int64_t hd,
                   double inv_scale, double* attn_row) {
  double mx = -1e300;
  for (int64_t j = 0; j < t; ++j) {
    const double* krow = k_b + j * hd;
    double dot = 0;
    for (int64_t d = 0; d < hd; ++d) dot += q_i[d] * krow[d];
    attn_row[j] = dot * inv_scale;
    mx = std::max(mx, attn_row[j]);
  }
  double sum = 0;
  for (int64_t j = 0; j < t; ++j) {
    attn_row[j] = detail::fast_exp(attn_row[j] - mx);
    sum += attn_row[j];
  }
  const double inv = 1.0 / sum;
  for (int64_t j = 0; j < t; ++j) attn_row[j] *= inv;
}

// Fused softmax(Q K^T / sqrt(hd)) V over [b,t,hd] operands. Attention rows
// stream one at a time and are recomputed in the backward pass, so the
// [t,t] weight matrix never lives in the graph. When capture is given the
// weights are materialized once as a constant tensor for inspection.
TensorPtr scaled_dot_attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                               double inv_scale, TensorPtr* capture) {
  const int64_t b = q->shape[0], t = q->shape[1], hd = q->shape[2];
  if (k->shape != q->shape || v->shape != q->shape)
    throw ShapeMismatch("attention: q/k/v shapes disagree");

  std::vector<double> out(b * t * hd, 0.0);
  std::vector<double> attn_data(capture ? b * t * t : 0);
  detail::parallel_for(b, b * t * t * hd, [&](int64_t lo, int64_t hi) {
    std::vector<double> row(t);
    for (int64_t bi = lo; bi < hi; ++bi) {
      const double* q_b = q->data.data() + bi * t * hd;
      const double* k_b = k->data.data() + bi * t * hd;
      const double* v_b = v->data.data() + bi * t * hd;
      double* out_b = out.data() + bi * t * hd;
      for (int64_t i = 0; i < t; ++i) {
        attention_row(q_b + i * hd, k_b, t, hd, inv_scale, row.data());
        double* out_i = out_b + i * hd;
        for (int64_t j = 0; j < t; ++j) {
          const double a = row[j];
          const double* vrow = v_b + j * hd;
          for (int64_t d = 0; d < hd; ++d) out_i[d] += a * vrow[d];
        }
        if (capture)
          std::copy(row.begin(), row.end(), attn_data.begin() + (bi * t + i) * t);
      }
    }
  });
  if (capture) *capture = Tensor::create({b, t, t}, std::move(attn_data));

  auto r = Tensor::create(q->shape, std::move(out));
  attach_op(r, "attention", {q, k, v}, [self = r.get(), q, k, v, b, t, hd, inv_scale]() {
    if (q->requires_grad) q->ensure_grad();
    if (k->requires_grad) k->ensure_grad();
    if (v->requires_grad) v->ensure_grad();
    detail::parallel_for(b, b * t * t * hd * 3, [&](int64_t lo, int64_t hi) {
      std::vector<double> row(t), dattn(t), dscore(t);
      for (int64_t bi = lo; bi < hi; ++bi) {
        const double* q_b = q->data.data() + bi * t * hd;
        const double* k_b = k->data.data() + bi * t * hd;
        const double* v_b = v->data.data() + bi * t * hd;
        const double* g_b = self->grad.data() + bi * t * hd;
        double* dq_b = q->requires_grad ? q->grad.data() + bi * t * hd : nullptr;
        double* dk_b = k->requires_grad ? k->grad.data() + bi * t * hd : nullptr;
        double* dv_b = v->requires_grad ? v->grad.data() + bi * t * hd : nullptr;
        for (int64_t i = 0; i < t; ++i) {
          attention_row(q_b + i * hd, k_b, t, hd, inv_scale, row.data());
          const double* g_i = g_b + i * hd;
          double dot = 0;
          for (int64_t j = 0; j < t; ++j) {
            const double* vrow = v_b + j * hd;
            double gv = 0;
            for (int64_t d = 0; d < hd; ++d) gv += g_i[d] * vrow[d];
            dattn[j] = gv;
            dot += gv * row[j];
          }
          for (int64_t j = 0; j < t; ++j) dscore[j] = row[j] * (dattn[j] - dot) * inv_scale;
          if (dv_b)
            for (int64_t j = 0; j < t; ++j) {
              const double a = row[j];
              double* dvrow = dv_b + j * hd;
              for (int64_t d = 0; d < hd; ++d) dvrow[d] += a * g_i[d];
            }
          if (dq_b) {
            double* dq_i = dq_b + i * hd;
            for (int64_t j = 0; j < t; ++j) {
              const double s = dscore[j];
              const double* krow = k_b + j * hd;
              for (int64_t d = 0; d < hd; ++d) dq_i[d] += s * krow[d];
            }
          }
          if (dk_b) {
            const double* q_i = q_b + i * hd;
            for (int64_t j = 0; j < t; ++j) {
              const double s = dscore[j];
              double* dkrow = dk_b + j * hd;
              for (int64_t d = 0; d < hd; ++d) dkrow[d] += s * q_i[d];
            }
          }
        }
      }
    });
  });
  return r;
}

}  // namespace

MsaWeights init_msa(const MsaConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  MsaWeights w;
  for (int64_t h = 0; h < cfg.n_heads; ++h) {
    w.wq.push_back(uniform_tensor({cfg.embed_dim, cfg.head_dim()}, bound, rng));
    w.wk.push_back(uniform_tensor({cfg.embed_dim, cfg.head_dim()}, bound, rng));
    w.wv.push_back(uniform_tensor({cfg.embed_dim, cfg.head_dim()}, bound, rng));
  }
  w.wo = uniform_tensor({cfg.embed_dim, cfg.embed_dim}, bound, rng);
  return w;
}

TensorPtr msa_forward(const MsaConfig& cfg, const MsaWeights& w, const TensorPtr& input,
                      std::vector<TensorPtr>* attn_out) {
  cfg.validate();
  if (input->shape.size() != 4)
    throw ShapeMismatch("msa_forward: input must be [b,c,h,w], got " + shape_str(input->shape));
  const int64_t b = input->shape[0], c = input->shape[1];
  const int64_t h = input->shape[2], wd = input->shape[3];
  if (c != cfg.embed_dim)
    throw ShapeMismatch("msa_forward: input channels " + std::to_string(c) +
                        " do not match embed_dim " + std::to_string(cfg.embed_dim));
  const int64_t t = h * wd;

  auto tokens = permute(reshape(input, {b, c, t}), {0, 2, 1});  // [b, t, c]
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

  if (attn_out) attn_out->clear();
  std::vector<TensorPtr> heads;
  for (int64_t i = 0; i < cfg.n_heads; ++i) {
    auto q = matmul(tokens, w.wq[i]);  // [b, t, hd]
    auto k = matmul(tokens, w.wk[i]);
    auto v = matmul(tokens, w.wv[i]);
    TensorPtr attn;
    heads.push_back(scaled_dot_attention(q, k, v, inv_scale, attn_out ? &attn : nullptr));
    if (attn_out) attn_out->push_back(attn);
  }
  auto merged = (heads.size() == 1) ? heads[0] : concat(heads, 2);  // [b, t, c]
  auto projected = matmul(merged, w.wo);
  auto normed = layer_normalize(add(tokens, projected), 2);
  return reshape(permute(normed, {0, 2, 1}), {b, c, h, wd});
}

MsaBlock init_msa_block(int64_t channels, const MsaConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (channels < 1) throw ShapeMismatch("init_msa_block: channels must be >= 1");
  Rng rng(seed);
  MsaBlock blk;
  blk.cfg = cfg;
  blk.lift = uniform_tensor({cfg.embed_dim, channels, 1, 1},
                            1.0 / std::sqrt(static_cast<double>(channels)), rng);
  blk.msa = init_msa(cfg, rng.next_u64());
  blk.drop = uniform_tensor({channels, cfg.embed_dim, 1, 1},
                            1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)), rng);
  return blk;
}

FeatureMap msa_block_forward(const MsaBlock& blk, const FeatureMap& input) {
  auto lifted = conv2d(input.tensor, blk.lift, 1, 0);
  auto attended = msa_forward(blk.cfg, blk.msa, lifted);
  auto dropped = conv2d(attended, blk.drop, 1, 0);
  return FeatureMap(dropped, input.channel_semantics);
}

}  // namespace sacnet
