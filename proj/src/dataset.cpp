#include "sacnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sacnet/errors.hpp"
#include "sacnet/image_io.hpp"
#include "sacnet/kv.hpp"
#include "sacnet/rng.hpp"

namespace fs = std::filesystem;

namespace sacnet {

std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    if (line[start] == '#') continue;
    size_t eq = line.find('=', start);
    if (eq == std::string::npos)
      throw UsageError("config line missing '=': " + line);
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t");
      size_t b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot read file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError("config key '" + key + "': expected true/false, got '" + v + "'");
}

int64_t parse_int(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw UsageError("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

uint64_t parse_uint(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw UsageError("config key '" + key + "': expected unsigned integer, got '" + v + "'");
  }
}

double parse_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    throw UsageError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

std::vector<int64_t> parse_int_list(const std::string& v, const std::string& key) {
  std::vector<int64_t> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ','))
    out.push_back(parse_int(item, key));
  if (out.empty()) throw UsageError("config key '" + key + "': empty list");
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

void split_per_subject(Dataset& ds) {
  ds.train_idx.clear();
  ds.eval_idx.clear();
  for (int64_t s = 0; s < ds.n_subjects(); ++s) {
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < ds.n_samples(); ++i)
      if (ds.labels[i] == s) idx.push_back(i);
    const int64_t n_train = (static_cast<int64_t>(idx.size()) + 1) / 2;
    for (size_t i = 0; i < idx.size(); ++i)
      (static_cast<int64_t>(i) < n_train ? ds.train_idx : ds.eval_idx).push_back(idx[i]);
  }
}

}  // namespace

Dataset load_dataset(const std::string& root, int64_t input_hw) {
  if (!fs::is_directory(root)) throw EmptyDataset("load_dataset: no such directory: " + root);
  std::vector<std::string> subjects;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) subjects.push_back(entry.path().filename().string());
  std::sort(subjects.begin(), subjects.end());

  Dataset ds;
  ds.image_hw = input_hw;
  for (const auto& subject : subjects) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(fs::path(root) / subject))
      if (entry.is_regular_file()) files.push_back(entry.path().filename().string());
    if (files.empty()) continue;
    std::sort(files.begin(), files.end());
    ds.subject_ids.push_back(subject);
    const int64_t label = ds.n_subjects() - 1;
    for (const auto& file : files) {
      const std::string path = (fs::path(root) / subject / file).string();
      auto img = read_image_gray8(path);
      ds.images.push_back(bilinear_resize(to_unit(img), img.h, img.w, input_hw, input_hw));
      ds.labels.push_back(label);
      ds.paths.push_back(subject + "/" + file);
    }
  }
  if (ds.n_samples() == 0) throw EmptyDataset("load_dataset: no images under " + root);
  split_per_subject(ds);
  return ds;
}

void require_verification_split(const Dataset& ds) {
  std::vector<int64_t> train_count(ds.n_subjects(), 0), eval_count(ds.n_subjects(), 0);
  for (int64_t i : ds.train_idx) train_count[ds.labels[i]]++;
  for (int64_t i : ds.eval_idx) eval_count[ds.labels[i]]++;
  for (int64_t s = 0; s < ds.n_subjects(); ++s)
    if (train_count[s] < 1 || eval_count[s] < 1)
      throw EmptyDataset("subject " + ds.subject_ids[s] +
                         " lacks a train or eval sample; verification needs both");
}

SyntheticSpec SyntheticSpec::parse(const std::string& text) {
  SyntheticSpec spec;
  for (const auto& [key, value] : parse_kv_text(text)) {
    if (key == "n_subjects")
      spec.n_subjects = parse_int(value, key);
    else if (key == "samples_per_subject")
      spec.samples_per_subject = parse_int(value, key);
    else if (key == "image_hw")
      spec.image_hw = parse_int(value, key);
    else if (key == "seed")
      spec.seed = parse_uint(value, key);
    else
      throw UsageError("unknown synthetic spec key: '" + key + "'");
  }
  if (spec.n_subjects < 1 || spec.samples_per_subject < 1 || spec.image_hw < 8)
    throw UsageError("synthetic spec out of range");
  return spec;
}

SyntheticSpec SyntheticSpec::load_file(const std::string& path) {
  return parse(read_text_file(path));
}

namespace {

struct Stroke {
  double x0, y0, x1, y1;
  double width, depth;
};

double segment_dist2(double px, double py, const Stroke& s) {
  const double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - s.x0) * vx + (py - s.y0) * vy) / len2 : 0.0;
  t = std::min(1.0, std::max(0.0, t));
  const double dx = px - (s.x0 + t * vx), dy = py - (s.y0 + t * vy);
  return dx * dx + dy * dy;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  const int64_t hw = spec.image_hw;
  Dataset ds;
  ds.image_hw = hw;
  Rng rng(spec.seed);

  const double pi = 3.14159265358979323846;
  for (int64_t s = 0; s < spec.n_subjects; ++s) {
    char sid[16];
    std::snprintf(sid, sizeof(sid), "s%03lld", static_cast<long long>(s));
    ds.subject_ids.push_back(sid);

    // Subject latent: wide principal-line strokes plus an oriented stripe
    // field. Two strokes perturb shared anatomical anchors, the way
    // principal lines sit in similar places on every palm, so impostor
    // pairs share coarse structure; the remaining strokes and the stripe
    // field are fully subject-specific and carry the identity signal.
    static constexpr double kAnchors[2][4] = {
        {0.15, 0.28, 0.85, 0.42},
        {0.20, 0.80, 0.75, 0.52},
    };
    std::vector<Stroke> strokes;
    for (const auto& a : kAnchors) {
      Stroke st;
      st.x0 = (a[0] + rng.uniform(-0.05, 0.05)) * hw;
      st.y0 = (a[1] + rng.uniform(-0.05, 0.05)) * hw;
      st.x1 = (a[2] + rng.uniform(-0.05, 0.05)) * hw;
      st.y1 = (a[3] + rng.uniform(-0.05, 0.05)) * hw;
      st.width = rng.uniform(0.055, 0.075) * hw;
      st.depth = rng.uniform(0.35, 0.50);
      strokes.push_back(st);
    }
    const int64_t n_free = rng.uniform_int(1, 2);
    for (int64_t l = 0; l < n_free; ++l) {
      Stroke st;
      st.x0 = rng.uniform(0.05, 0.95) * hw;
      st.y0 = rng.uniform(0.05, 0.95) * hw;
      const double ang = rng.uniform(0, pi);
      const double len = rng.uniform(0.5, 0.95) * hw;
      st.x1 = st.x0 + len * std::cos(ang);
      st.y1 = st.y0 + len * std::sin(ang);
      st.width = rng.uniform(0.08, 0.11) * hw;
      st.depth = rng.uniform(0.45, 0.60);
      strokes.push_back(st);
    }
    // Stripe orientations sit near a coarse grid, so distinct subjects can
    // share a dominant orientation and identity also hangs on stripe period
    // and stroke layout. Periods stay short, in the band oriented filters
    // respond to, while the wide strokes carry most of the pixel variance.
    const double stripe_theta =
        (pi / 6.0) * rng.uniform_int(0, 5) + rng.uniform(-0.08, 0.08);
    const double stripe_period = rng.uniform(0.16, 0.24) * hw;
    const double stripe_amp = rng.uniform(0.10, 0.14);
    const double stripe_phase = rng.uniform(0, 2 * pi);

    std::vector<double> base(hw * hw);
    const double cs = std::cos(stripe_theta), sn = std::sin(stripe_theta);
    for (int64_t r = 0; r < hw; ++r)
      for (int64_t c = 0; c < hw; ++c) {
        double v = 0.62 + stripe_amp * std::cos(2 * pi * (c * cs + r * sn) / stripe_period +
                                                stripe_phase);
        for (const auto& st : strokes)
          v -= st.depth * std::exp(-segment_dist2(c, r, st) / (2 * st.width * st.width));
        base[r * hw + c] = v;
      }

    const int64_t label = ds.n_subjects() - 1;
    for (int64_t m = 0; m < spec.samples_per_subject; ++m) {
      // subpixel shift, well inside the <=3 px budget
      const double dx = rng.uniform(-0.7, 0.7);
      const double dy = rng.uniform(-0.7, 0.7);
      const double contrast = rng.uniform(0.9, 1.1);
      std::vector<double> img(hw * hw);
      auto sample_base = [&](double fr, double fc) {
        fr = std::min(static_cast<double>(hw - 1), std::max(0.0, fr));
        fc = std::min(static_cast<double>(hw - 1), std::max(0.0, fc));
        const int64_t r0 = static_cast<int64_t>(fr), c0 = static_cast<int64_t>(fc);
        const int64_t r1 = std::min(hw - 1, r0 + 1), c1 = std::min(hw - 1, c0 + 1);
        const double wr = fr - r0, wc = fc - c0;
        return (1 - wr) * ((1 - wc) * base[r0 * hw + c0] + wc * base[r0 * hw + c1]) +
               wr * ((1 - wc) * base[r1 * hw + c0] + wc * base[r1 * hw + c1]);
      };
      for (int64_t r = 0; r < hw; ++r)
        for (int64_t c = 0; c < hw; ++c) {
          double v = 0.5 + contrast * (sample_base(r + dy, c + dx) - 0.5) + 0.02 * rng.normal();
          img[r * hw + c] = std::min(1.0, std::max(0.0, v));
        }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(label);
      char name[32];
      std::snprintf(name, sizeof(name), "sample_%03lld.png", static_cast<long long>(m));
      ds.paths.push_back(std::string(sid) + "/" + name);
    }
  }
  split_per_subject(ds);
  return ds;
}

void dump_dataset_png(const Dataset& ds, const std::string& out_dir) {
  for (int64_t i = 0; i < ds.n_samples(); ++i) {
    const fs::path dest = fs::path(out_dir) / ds.paths[i];
    fs::create_directories(dest.parent_path());
    write_png_gray8(from_unit(ds.image_hw, ds.image_hw, ds.images[i]), dest.string());
  }
}

}  // namespace sacnet
