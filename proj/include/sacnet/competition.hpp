#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sacnet/attention.hpp"
#include "sacnet/feature_map.hpp"
#include "sacnet/gabor.hpp"

namespace sacnet {

// Eq.-4 piece of the ISCM: softmax over the orientation channels at every
// spatial location, retaining the full ordinal response instead of just the
// winner index.
FeatureMap orientation_softmax(const FeatureMap& f_msa, double temperature = 1.0);

struct IscmOutput {
  FeatureMap f_msa;    // post-attention orientation features, feeds the ASCM
  FeatureMap f_inner;  // softmax competition along orientations
};

// Two stacked LGF layers (stride 1, then stride 2 to halve the token count),
// attention with channel lift/drop, then orientation competition.
IscmOutput iscm_forward(const GaborBank& g1, const GaborBank& g2, const MsaBlock& msa,
                        const FeatureMap& input, double temperature = 1.0);

// Concatenates the per-branch attention features along channels and applies
// softmax competition across the stacked scales. The joint form runs one
// softmax over all branches*N_o channels; the grouped form competes the
// scales separately within each orientation.
FeatureMap ascm_forward(const std::vector<FeatureMap>& f_msa_branches, bool grouped = false,
                        double temperature = 1.0);

// Classical competitive code: per-pixel winner index over a frozen bank's
// responses. Palm lines are dark, so the minimum response wins; ties break
// to the lowest index.
struct CompCodeMap {
  int64_t n_orientations = 0;
  int64_t h = 0;
  int64_t w = 0;
  std::vector<uint8_t> winner_index;  // row-major h*w
};

// one map per batch item of a [b,1,h,w] input
std::vector<CompCodeMap> compcode_encode(const GaborBank& bank, const FeatureMap& input);

// mean over pixels of 1 - angular_gap/(N_o/2), angular_gap circular
double compcode_match(const CompCodeMap& a, const CompCodeMap& b);

// binary format: magic "CCMP", u16 N_o, u32 h, u32 w, then h*w index bytes
void save_compcode(const CompCodeMap& m, const std::string& path);
CompCodeMap load_compcode(const std::string& path);

}  // namespace sacnet
