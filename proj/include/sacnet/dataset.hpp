#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sacnet {

// Decoded samples with per-subject labels and the train/eval split. Images
// live in [0,1] at a fixed square resolution.
struct Dataset {
  int64_t image_hw = 0;
  std::vector<std::string> subject_ids;      // label -> id
  std::vector<int64_t> labels;               // per sample
  std::vector<std::string> paths;            // per sample, ordering key
  std::vector<std::vector<double>> images;   // per sample
  std::vector<int64_t> train_idx, eval_idx;  // disjoint, per-subject split

  int64_t n_subjects() const { return static_cast<int64_t>(subject_ids.size()); }
  int64_t n_samples() const { return static_cast<int64_t>(images.size()); }
};

// <root>/<subject_id>/<sample>.png|.pgm, decoded and bilinearly resized to
// input_hw, sorted by subject then filename. Per subject the first half of
// its samples (rounded up) trains and the rest evaluates.
Dataset load_dataset(const std::string& root, int64_t input_hw);

// throws unless every subject has at least one train and one eval sample
void require_verification_split(const Dataset& ds);

struct SyntheticSpec {
  int64_t n_subjects = 10;
  int64_t samples_per_subject = 20;
  int64_t image_hw = 64;
  uint64_t seed = 1234;

  // flat key=value text mirroring the field names; unknown keys error
  static SyntheticSpec parse(const std::string& text);
  static SyntheticSpec load_file(const std::string& path);
};

// Subject identity lives in stroke geometry plus a stripe field with
// subject-specific orientation and period; samples within a subject differ
// only by small translation, contrast jitter and pixel noise.
Dataset generate_synthetic(const SyntheticSpec& spec);

// writes <out>/<subject_id>/<sample>.png; round-trips through load_dataset
void dump_dataset_png(const Dataset& ds, const std::string& out_dir);

}  // namespace sacnet
