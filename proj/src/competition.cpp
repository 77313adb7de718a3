#include "sacnet/competition.hpp"

#include <cstdio>
#include <cstring>

#include "sacnet/errors.hpp"

namespace sacnet {

namespace {

TensorPtr tempered(const TensorPtr& t, double temperature) {
  return temperature == 1.0 ? t : scale(t, 1.0 / temperature);
}

}  // namespace

FeatureMap orientation_softmax(const FeatureMap& f_msa, double temperature) {
  return FeatureMap(softmax(tempered(f_msa.tensor, temperature), 1),
                    ChannelSemantics::orientation);
}

IscmOutput iscm_forward(const GaborBank& g1, const GaborBank& g2, const MsaBlock& msa,
                        const FeatureMap& input, double temperature) {
  auto f1 = bank_forward(g1, input, 1);
  auto f2 = bank_forward(g2, f1, 2);
  auto f_msa = msa_block_forward(msa, f2);
  f_msa.channel_semantics = ChannelSemantics::orientation;
  return IscmOutput{f_msa, orientation_softmax(f_msa, temperature)};
}

FeatureMap ascm_forward(const std::vector<FeatureMap>& f_msa_branches, bool grouped,
                        double temperature) {
  if (f_msa_branches.empty()) throw ShapeMismatch("ascm_forward: no branches");
  const auto& first = f_msa_branches[0];
  std::vector<TensorPtr> tensors;
  for (const auto& fm : f_msa_branches) {
    if (fm.batch() != first.batch() || fm.height() != first.height() ||
        fm.width() != first.width())
      throw ShapeMismatch("ascm_forward: branch maps disagree on batch or spatial dims: " +
                          shape_str(fm.tensor->shape) + " vs " + shape_str(first.tensor->shape));
    if (fm.channels() != first.channels())
      throw ShapeMismatch("ascm_forward: branch maps disagree on orientation count");
    tensors.push_back(fm.tensor);
  }
  auto stacked = (tensors.size() == 1) ? tensors[0] : concat(tensors, 1);
  TensorPtr competed;
  if (grouped) {
    const int64_t nb = static_cast<int64_t>(tensors.size());
    const int64_t b = first.batch(), no = first.channels();
    const int64_t h = first.height(), w = first.width();
    auto regrouped = reshape(tempered(stacked, temperature), {b, nb, no, h, w});
    competed = reshape(softmax(regrouped, 1), {b, nb * no, h, w});
  } else {
    competed = softmax(tempered(stacked, temperature), 1);
  }
  return FeatureMap(competed, ChannelSemantics::scale_group);
}

std::vector<CompCodeMap> compcode_encode(const GaborBank& bank, const FeatureMap& input) {
  if (input.channels() != 1)
    throw ShapeMismatch("compcode_encode: expected grayscale [b,1,h,w], got " +
                        shape_str(input.tensor->shape));
  NoGradGuard freeze;
  auto kernels = bank_kernels(bank, 1);
  auto resp = conv2d(input.tensor, kernels, 1, (bank.kernel_size - 1) / 2);
  const int64_t b = resp->shape[0], no = resp->shape[1];
  const int64_t h = resp->shape[2], w = resp->shape[3];
  std::vector<CompCodeMap> maps;
  maps.reserve(b);
  for (int64_t bi = 0; bi < b; ++bi) {
    CompCodeMap m;
    m.n_orientations = no;
    m.h = h;
    m.w = w;
    m.winner_index.resize(h * w);
    for (int64_t p = 0; p < h * w; ++p) {
      int64_t best = 0;
      double bv = resp->data[(bi * no) * h * w + p];
      for (int64_t c = 1; c < no; ++c) {
        const double v = resp->data[(bi * no + c) * h * w + p];
        if (v < bv) {
          bv = v;
          best = c;
        }
      }
      m.winner_index[p] = static_cast<uint8_t>(best);
    }
    maps.push_back(std::move(m));
  }
  return maps;
}

double compcode_match(const CompCodeMap& a, const CompCodeMap& b) {
  if (a.h != b.h || a.w != b.w)
    throw ShapeMismatch("compcode_match: map dims disagree");
  if (a.n_orientations != b.n_orientations)
    throw ShapeMismatch("compcode_match: orientation counts disagree");
  const double half = static_cast<double>(a.n_orientations) / 2.0;
  double acc = 0.0;
  const int64_t n = a.h * a.w;
  for (int64_t i = 0; i < n; ++i) {
    const int64_t d = std::abs(static_cast<int64_t>(a.winner_index[i]) -
                               static_cast<int64_t>(b.winner_index[i]));
    const int64_t gap = std::min(d, a.n_orientations - d);
    acc += 1.0 - static_cast<double>(gap) / half;
  }
  return acc / static_cast<double>(n);
}

namespace {

void put_u16(FILE* f, uint16_t v) {
  uint8_t b[2] = {static_cast<uint8_t>(v & 0xff), static_cast<uint8_t>(v >> 8)};
  std::fwrite(b, 1, 2, f);
}

void put_u32(FILE* f, uint32_t v) {
  uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>((v >> (8 * i)) & 0xff);
  std::fwrite(b, 1, 4, f);
}

uint16_t get_u16(FILE* f) {
  uint8_t b[2];
  if (std::fread(b, 1, 2, f) != 2) throw std::runtime_error("compcode: truncated file");
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(FILE* f) {
  uint8_t b[4];
  if (std::fread(b, 1, 4, f) != 4) throw std::runtime_error("compcode: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_compcode(const CompCodeMap& m, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("save_compcode: cannot open " + path);
  std::fwrite("CCMP", 1, 4, f);
  put_u16(f, static_cast<uint16_t>(m.n_orientations));
  put_u32(f, static_cast<uint32_t>(m.h));
  put_u32(f, static_cast<uint32_t>(m.w));
  std::fwrite(m.winner_index.data(), 1, m.winner_index.size(), f);
  std::fclose(f);
}

CompCodeMap load_compcode(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("load_compcode: cannot open " + path);
  char magic[4];
  if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, "CCMP", 4) != 0) {
    std::fclose(f);
    throw std::runtime_error("load_compcode: bad magic in " + path);
  }
  CompCodeMap m;
  m.n_orientations = get_u16(f);
  m.h = get_u32(f);
  m.w = get_u32(f);
  m.winner_index.resize(m.h * m.w);
  if (std::fread(m.winner_index.data(), 1, m.winner_index.size(), f) != m.winner_index.size()) {
    std::fclose(f);
    throw std::runtime_error("load_compcode: truncated payload in " + path);
  }
  std::fclose(f);
  return m;
}

}  // namespace sacnet
