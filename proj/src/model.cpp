#include "sacnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "sacnet/errors.hpp"
#include "sacnet/kv.hpp"
#include "sacnet/rng.hpp"

namespace fs = std::filesystem;

namespace sacnet {

void ModelConfig::validate() const {
  if (branch_kernel_sizes.size() != 3)
    throw UsageError("branch_kernel_sizes must list exactly [ts,ms,ls]");
  for (int64_t k : branch_kernel_sizes)
    if (k < 1 || k % 2 == 0)
      throw UsageError("branch kernel sizes must be odd, got " + std::to_string(k));
  if (!(branch_kernel_sizes[0] < branch_kernel_sizes[1] &&
        branch_kernel_sizes[1] < branch_kernel_sizes[2]))
    throw UsageError("branch kernel sizes must be strictly increasing");
  if (n_orientations < 1) throw UsageError("n_orientations must be >= 1");
  if (input_hw < 8) throw UsageError("input_hw must be >= 8");
  if (msa_heads < 1 || msa_embed_dim < 1 || msa_embed_dim % msa_heads != 0)
    throw UsageError("msa_embed_dim must be a positive multiple of msa_heads");
  if (embedding_dim < 1) throw UsageError("embedding_dim must be >= 1");
  if (n_classes < 0) throw UsageError("n_classes must be >= 0");
  if (n_branches_enabled() < 1) throw UsageError("at least one branch must be enabled");
  if (softmax_temperature <= 0) throw UsageError("softmax_temperature must be > 0");
  if (w_ce < 0 || w_con < 0 || w_ce + w_con <= 0)
    throw UsageError("loss weights must be >= 0 and not both zero");
  if (margin < 0) throw UsageError("margin must be >= 0");
  if (lr <= 0) throw UsageError("lr must be > 0");
  if (batch_size < 2 || batch_size % 2 != 0)
    throw UsageError("batch_size must be an even number >= 2");
  if (epochs < 1) throw UsageError("epochs must be >= 1");
}

std::string ModelConfig::serialize() const {
  std::map<std::string, std::string> kv;
  kv["ascm_grouped"] = ascm_grouped ? "true" : "false";
  kv["batch_size"] = std::to_string(batch_size);
  {
    std::ostringstream os;
    os << branch_kernel_sizes[0] << "," << branch_kernel_sizes[1] << ","
       << branch_kernel_sizes[2];
    kv["branch_kernel_sizes"] = os.str();
  }
  kv["embedding_dim"] = std::to_string(embedding_dim);
  kv["epochs"] = std::to_string(epochs);
  kv["input_hw"] = std::to_string(input_hw);
  kv["lr"] = format_double(lr);
  kv["margin"] = format_double(margin);
  kv["msa_embed_dim"] = std::to_string(msa_embed_dim);
  kv["msa_heads"] = std::to_string(msa_heads);
  kv["n_classes"] = std::to_string(n_classes);
  kv["n_orientations"] = std::to_string(n_orientations);
  kv["seed"] = std::to_string(seed);
  kv["softmax_temperature"] = format_double(softmax_temperature);
  kv["use_ascm"] = use_ascm ? "true" : "false";
  kv["use_branch_ls"] = use_branch_ls ? "true" : "false";
  kv["use_branch_ms"] = use_branch_ms ? "true" : "false";
  kv["use_branch_ts"] = use_branch_ts ? "true" : "false";
  kv["use_iscm"] = use_iscm ? "true" : "false";
  kv["w_ce"] = format_double(w_ce);
  kv["w_con"] = format_double(w_con);
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  for (const auto& [key, value] : parse_kv_text(text)) {
    if (key == "ascm_grouped")
      cfg.ascm_grouped = parse_bool(value, key);
    else if (key == "batch_size")
      cfg.batch_size = parse_int(value, key);
    else if (key == "branch_kernel_sizes")
      cfg.branch_kernel_sizes = parse_int_list(value, key);
    else if (key == "embedding_dim")
      cfg.embedding_dim = parse_int(value, key);
    else if (key == "epochs")
      cfg.epochs = parse_int(value, key);
    else if (key == "input_hw")
      cfg.input_hw = parse_int(value, key);
    else if (key == "lr")
      cfg.lr = parse_double(value, key);
    else if (key == "margin")
      cfg.margin = parse_double(value, key);
    else if (key == "msa_embed_dim")
      cfg.msa_embed_dim = parse_int(value, key);
    else if (key == "msa_heads")
      cfg.msa_heads = parse_int(value, key);
    else if (key == "n_classes")
      cfg.n_classes = parse_int(value, key);
    else if (key == "n_orientations")
      cfg.n_orientations = parse_int(value, key);
    else if (key == "seed")
      cfg.seed = parse_uint(value, key);
    else if (key == "softmax_temperature")
      cfg.softmax_temperature = parse_double(value, key);
    else if (key == "use_ascm")
      cfg.use_ascm = parse_bool(value, key);
    else if (key == "use_branch_ls")
      cfg.use_branch_ls = parse_bool(value, key);
    else if (key == "use_branch_ms")
      cfg.use_branch_ms = parse_bool(value, key);
    else if (key == "use_branch_ts")
      cfg.use_branch_ts = parse_bool(value, key);
    else if (key == "use_iscm")
      cfg.use_iscm = parse_bool(value, key);
    else if (key == "w_ce")
      cfg.w_ce = parse_double(value, key);
    else if (key == "w_con")
      cfg.w_con = parse_double(value, key);
    else
      throw UsageError("unknown config key: '" + key + "'");
  }
  return cfg;
}

ModelConfig ModelConfig::load_file(const std::string& path) {
  return parse(read_text_file(path));
}

namespace {

TensorPtr uniform_init(Shape shape, double bound, Rng& rng) {
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::create(std::move(shape), std::move(data), true);
}

}  // namespace

int64_t SacNet::feature_dim() const {
  const int64_t nb = static_cast<int64_t>(branches.size());
  return 2 * nb * cfg.n_orientations;
}

SacNet SacNet::init(const ModelConfig& cfg) {
  cfg.validate();
  if (cfg.n_classes < 1)
    throw ConfigMismatch("SacNet::init needs a resolved n_classes, got " +
                         std::to_string(cfg.n_classes));
  SacNet model;
  model.cfg = cfg;
  Rng seeder(cfg.seed);
  const char* tags[3] = {"ts", "ms", "ls"};
  const bool enabled[3] = {cfg.use_branch_ts, cfg.use_branch_ms, cfg.use_branch_ls};
  for (int64_t b = 0; b < 3; ++b) {
    // burn the same seed count whether or not the branch is enabled, so
    // ablations keep the surviving branches' initialization
    const uint64_t s1 = seeder.next_u64(), s2 = seeder.next_u64(), s3 = seeder.next_u64();
    if (!enabled[b]) continue;
    Branch br;
    br.tag = tags[b];
    br.g1 = init_bank(cfg.branch_kernel_sizes[b], cfg.n_orientations, s1);
    br.g2 = init_bank(cfg.branch_kernel_sizes[b], cfg.n_orientations, s2);
    br.msa = init_msa_block(cfg.n_orientations, MsaConfig{cfg.msa_heads, cfg.msa_embed_dim}, s3);
    model.branches.push_back(std::move(br));
  }
  const int64_t feat = model.feature_dim();
  Rng head_rng(seeder.next_u64());
  model.w_embed = uniform_init({feat, cfg.embedding_dim},
                               1.0 / std::sqrt(static_cast<double>(feat)), head_rng);
  model.b_embed = Tensor::zeros({cfg.embedding_dim}, true);
  model.w_logits = uniform_init({cfg.embedding_dim, cfg.n_classes},
                                1.0 / std::sqrt(static_cast<double>(cfg.embedding_dim)),
                                head_rng);
  model.b_logits = Tensor::zeros({cfg.n_classes}, true);
  return model;
}

std::vector<std::pair<std::string, TensorPtr>> SacNet::named_parameters() const {
  std::vector<std::pair<std::string, TensorPtr>> out;
  auto add_bank = [&](const std::string& prefix, const GaborBank& bank) {
    for (size_t j = 0; j < bank.params.size(); ++j) {
      const std::string p = prefix + "." + std::to_string(j) + ".";
      out.emplace_back(p + "lambda_raw", bank.params[j].lambda_raw);
      out.emplace_back(p + "theta", bank.params[j].theta);
      out.emplace_back(p + "psi", bank.params[j].psi);
      out.emplace_back(p + "sigma_raw", bank.params[j].sigma_raw);
      out.emplace_back(p + "gamma_raw", bank.params[j].gamma_raw);
    }
  };
  for (const auto& br : branches) {
    add_bank("branch_" + br.tag + ".g1", br.g1);
    add_bank("branch_" + br.tag + ".g2", br.g2);
    const std::string m = "branch_" + br.tag + ".msa.";
    out.emplace_back(m + "lift", br.msa.lift);
    for (int64_t h = 0; h < br.msa.cfg.n_heads; ++h) {
      out.emplace_back(m + "wq" + std::to_string(h), br.msa.msa.wq[h]);
      out.emplace_back(m + "wk" + std::to_string(h), br.msa.msa.wk[h]);
      out.emplace_back(m + "wv" + std::to_string(h), br.msa.msa.wv[h]);
    }
    out.emplace_back(m + "wo", br.msa.msa.wo);
    out.emplace_back(m + "drop", br.msa.drop);
  }
  out.emplace_back("head.w_embed", w_embed);
  out.emplace_back("head.b_embed", b_embed);
  out.emplace_back("head.w_logits", w_logits);
  out.emplace_back("head.b_logits", b_logits);
  return out;
}

std::vector<TensorPtr> SacNet::parameters() const {
  std::vector<TensorPtr> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

namespace {

TensorPtr global_average_pool(const TensorPtr& t) {
  return reduce_mean(reduce_mean(t, 3), 2);  // [b,c,h,w] -> [b,c]
}

}  // namespace

ForwardTrace forward(const SacNet& model, const FeatureMap& batch) {
  const auto& cfg = model.cfg;
  if (batch.channels() != 1)
    throw ConfigMismatch("forward: expected grayscale [b,1,h,w], got " +
                         shape_str(batch.tensor->shape));
  if (batch.height() != cfg.input_hw || batch.width() != cfg.input_hw)
    throw ConfigMismatch("forward: batch is " + std::to_string(batch.height()) + "x" +
                         std::to_string(batch.width()) + " but the model expects " +
                         std::to_string(cfg.input_hw) + "x" + std::to_string(cfg.input_hw));

  std::vector<IscmOutput> outs;
  for (const auto& br : model.branches)
    outs.push_back(iscm_forward(br.g1, br.g2, br.msa, batch, cfg.softmax_temperature));

  // large to tiny, matching the across-scale concat convention
  std::vector<int64_t> order;
  for (int64_t i = static_cast<int64_t>(outs.size()) - 1; i >= 0; --i) order.push_back(i);

  ForwardTrace trace;
  std::vector<FeatureMap> msa_maps;
  for (int64_t i : order) {
    msa_maps.push_back(outs[i].f_msa);
    trace.f_msa.push_back(outs[i].f_msa.tensor);
  }

  FeatureMap fused;
  if (cfg.use_ascm) {
    fused = ascm_forward(msa_maps, cfg.ascm_grouped, cfg.softmax_temperature);
  } else {
    std::vector<TensorPtr> raw;
    for (auto& fm : msa_maps) raw.push_back(fm.tensor);
    fused = FeatureMap(raw.size() == 1 ? raw[0] : concat(raw, 1),
                       ChannelSemantics::scale_group);
  }
  trace.fused = fused.tensor;

  std::vector<TensorPtr> pooled_parts;
  pooled_parts.push_back(global_average_pool(fused.tensor));
  for (int64_t i : order)
    pooled_parts.push_back(
        global_average_pool(cfg.use_iscm ? outs[i].f_inner.tensor : outs[i].f_msa.tensor));
  trace.pooled = concat(pooled_parts, 1);

  auto embedding_pre = add(matmul(trace.pooled, model.w_embed), model.b_embed);
  trace.embeddings = l2_normalize_rows(embedding_pre);
  trace.logits = add(matmul(embedding_pre, model.w_logits), model.b_logits);
  return trace;
}

LossParts compute_loss(const TensorPtr& embeddings, const TensorPtr& logits,
                       const std::vector<int64_t>& labels, const PairPlan& plan,
                       const ModelConfig& cfg) {
  const int64_t b = logits->shape[0];
  if (static_cast<int64_t>(labels.size()) != b)
    throw ShapeMismatch("compute_loss: label count does not match batch");

  LossParts parts;
  parts.ce = neg(reduce_mean(select_index(log_softmax(logits, 1), labels), 0));

  if (cfg.w_con > 0 && plan.pairs.empty())
    throw EmptyPairPlan("compute_loss: contrastive weight is positive but no pairs given");

  if (plan.pairs.empty()) {
    parts.contrastive = Tensor::scalar(0.0);
  } else {
    TensorPtr acc;
    for (const auto& pr : plan.pairs) {
      if (pr.i < 0 || pr.i >= b || pr.j < 0 || pr.j >= b)
        throw ShapeMismatch("compute_loss: pair index out of batch range");
      auto diff = sub(slice(embeddings, 0, pr.i, 1), slice(embeddings, 0, pr.j, 1));
      auto d2 = reduce_sum(mul(diff, diff), 1);  // [1]
      TensorPtr term;
      if (pr.same) {
        term = d2;
      } else {
        auto hinge = relu(add(neg(sqrt(d2)), cfg.margin));
        term = mul(hinge, hinge);
      }
      acc = acc ? add(acc, term) : term;
    }
    parts.contrastive = scale(acc, 1.0 / static_cast<double>(plan.pairs.size()));
  }
  parts.total = add(scale(parts.ce, cfg.w_ce), scale(parts.contrastive, cfg.w_con));
  return parts;
}

AdamState AdamState::init(double lr, const std::vector<TensorPtr>& params) {
  AdamState st;
  st.lr = lr;
  for (const auto& p : params) {
    st.m.emplace_back(p->data.size(), 0.0);
    st.v.emplace_back(p->data.size(), 0.0);
  }
  return st;
}

void adam_step(AdamState& st, const std::vector<TensorPtr>& params) {
  if (st.m.size() != params.size())
    throw ConfigMismatch("adam_step: optimizer state does not match parameter count");
  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = st.m[i];
    auto& v = st.v[i];
    const bool has_grad = p.grad.size() == p.data.size();
    for (size_t j = 0; j < p.data.size(); ++j) {
      const double g = has_grad ? p.grad[j] : 0.0;
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g;
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g * g;
      p.data[j] -= st.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + st.eps);
    }
  }
}

Checkpoint snapshot(const SacNet& model, const AdamState* opt, int64_t epoch,
                    const std::string& rng_state) {
  Checkpoint ck;
  ck.config = model.cfg;
  for (const auto& [name, t] : model.named_parameters())
    ck.params.push_back({name, t->shape, t->data});
  if (opt) {
    ck.has_opt = true;
    ck.opt_t = opt->t;
    ck.opt_m = opt->m;
    ck.opt_v = opt->v;
  }
  ck.epoch = epoch;
  ck.rng_state = rng_state;
  return ck;
}

namespace {

void put_u32(FILE* f, uint32_t v) {
  uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>((v >> (8 * i)) & 0xff);
  std::fwrite(b, 1, 4, f);
}

void put_u64(FILE* f, uint64_t v) {
  uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>((v >> (8 * i)) & 0xff);
  std::fwrite(b, 1, 8, f);
}

uint32_t get_u32(FILE* f) {
  uint8_t b[4];
  if (std::fread(b, 1, 4, f) != 4) throw std::runtime_error("checkpoint: truncated file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t get_u64(FILE* f) {
  uint8_t b[8];
  if (std::fread(b, 1, 8, f) != 8) throw std::runtime_error("checkpoint: truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_doubles(FILE* f, const std::vector<double>& v) {
  static_assert(sizeof(double) == 8);
  std::fwrite(v.data(), sizeof(double), v.size(), f);
}

void get_doubles(FILE* f, std::vector<double>& v, size_t n) {
  v.resize(n);
  if (std::fread(v.data(), sizeof(double), n, f) != n)
    throw std::runtime_error("checkpoint: truncated values");
}

void put_string(FILE* f, const std::string& s) {
  put_u32(f, static_cast<uint32_t>(s.size()));
  std::fwrite(s.data(), 1, s.size(), f);
}

std::string get_string(FILE* f) {
  const uint32_t n = get_u32(f);
  std::string s(n, '\0');
  if (n && std::fread(s.data(), 1, n, f) != n)
    throw std::runtime_error("checkpoint: truncated string");
  return s;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  std::fwrite("SACN", 1, 4, f);
  put_u32(f, ck.version);
  const std::string cfg = ck.config.serialize();
  put_u64(f, cfg.size());
  std::fwrite(cfg.data(), 1, cfg.size(), f);
  put_u32(f, static_cast<uint32_t>(ck.params.size()));
  for (const auto& p : ck.params) {
    put_string(f, p.name);
    std::fputc(0, f);  // dtype tag: f64
    put_u32(f, static_cast<uint32_t>(p.shape.size()));
    for (int64_t d : p.shape) put_u64(f, static_cast<uint64_t>(d));
    put_doubles(f, p.values);
  }
  std::fputc(ck.has_opt ? 1 : 0, f);
  if (ck.has_opt) {
    put_u64(f, static_cast<uint64_t>(ck.opt_t));
    for (const auto& m : ck.opt_m) put_doubles(f, m);
    for (const auto& v : ck.opt_v) put_doubles(f, v);
  }
  put_u64(f, static_cast<uint64_t>(ck.epoch));
  put_string(f, ck.rng_state);
  std::fclose(f);
}

Checkpoint load_checkpoint(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  struct Closer {
    FILE* f;
    ~Closer() { std::fclose(f); }
  } closer{f};

  char magic[4];
  if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, "SACN", 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  Checkpoint ck;
  ck.version = get_u32(f);
  if (ck.version != 1)
    throw std::runtime_error("load_checkpoint: unsupported version " +
                             std::to_string(ck.version));
  const uint64_t cfg_len = get_u64(f);
  std::string cfg_text(cfg_len, '\0');
  if (cfg_len && std::fread(cfg_text.data(), 1, cfg_len, f) != cfg_len)
    throw std::runtime_error("load_checkpoint: truncated config");
  ck.config = ModelConfig::parse(cfg_text);
  const uint32_t n_params = get_u32(f);
  for (uint32_t i = 0; i < n_params; ++i) {
    Checkpoint::Param p;
    p.name = get_string(f);
    const int dtype = std::fgetc(f);
    if (dtype != 0) throw std::runtime_error("load_checkpoint: unknown dtype tag");
    const uint32_t ndim = get_u32(f);
    int64_t n = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      p.shape.push_back(static_cast<int64_t>(get_u64(f)));
      n *= p.shape.back();
    }
    get_doubles(f, p.values, n);
    ck.params.push_back(std::move(p));
  }
  ck.has_opt = std::fgetc(f) == 1;
  if (ck.has_opt) {
    ck.opt_t = static_cast<int64_t>(get_u64(f));
    ck.opt_m.resize(ck.params.size());
    ck.opt_v.resize(ck.params.size());
    for (size_t i = 0; i < ck.params.size(); ++i)
      get_doubles(f, ck.opt_m[i], ck.params[i].values.size());
    for (size_t i = 0; i < ck.params.size(); ++i)
      get_doubles(f, ck.opt_v[i], ck.params[i].values.size());
  }
  ck.epoch = static_cast<int64_t>(get_u64(f));
  ck.rng_state = get_string(f);
  return ck;
}

SacNet restore_model(const Checkpoint& ck) {
  SacNet model = SacNet::init(ck.config);
  auto named = model.named_parameters();
  if (named.size() != ck.params.size())
    throw ConfigMismatch("restore_model: parameter count mismatch");
  std::map<std::string, TensorPtr> by_name(named.begin(), named.end());
  for (const auto& p : ck.params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end())
      throw ConfigMismatch("restore_model: unexpected parameter " + p.name);
    if (it->second->shape != p.shape)
      throw ConfigMismatch("restore_model: shape mismatch for " + p.name);
    it->second->data = p.values;
  }
  return model;
}

namespace {

TensorPtr make_batch_tensor(const Dataset& data, const std::vector<int64_t>& idx) {
  const int64_t hw = data.image_hw;
  std::vector<double> buf;
  buf.reserve(idx.size() * hw * hw);
  for (int64_t i : idx) buf.insert(buf.end(), data.images[i].begin(), data.images[i].end());
  return Tensor::create({static_cast<int64_t>(idx.size()), 1, hw, hw}, std::move(buf));
}

// consecutive same-class pairs from the balanced batch plus cross-class
// pairs between neighbors
PairPlan make_pair_plan(const std::vector<int64_t>& labels) {
  PairPlan plan;
  const int64_t b = static_cast<int64_t>(labels.size());
  for (int64_t i = 0; i + 1 < b; i += 2)
    plan.pairs.push_back({i, i + 1, labels[i] == labels[i + 1]});
  for (int64_t i = 1; i + 1 < b; i += 2)
    plan.pairs.push_back({i, i + 1, labels[i] == labels[i + 1]});
  if (b > 2) plan.pairs.push_back({b - 1, 0, labels[b - 1] == labels[0]});
  return plan;
}

}  // namespace

TrainResult train(const ModelConfig& cfg_in, const Dataset& data, const std::string& out_dir) {
  ModelConfig cfg = cfg_in;
  cfg.validate();
  if (data.train_idx.empty()) throw EmptyDataset("train: dataset has no training split");
  if (data.image_hw != cfg.input_hw)
    throw ConfigMismatch("train: dataset resolution " + std::to_string(data.image_hw) +
                         " does not match config input_hw " + std::to_string(cfg.input_hw));
  int64_t max_label = 0;
  for (int64_t i : data.train_idx) max_label = std::max(max_label, data.labels[i]);
  if (cfg.n_classes == 0)
    cfg.n_classes = data.n_subjects();
  else if (cfg.n_classes <= max_label)
    throw ConfigMismatch("train: n_classes smaller than the labels present");

  fs::create_directories(out_dir);
  SacNet model = SacNet::init(cfg);
  auto params = model.parameters();
  AdamState opt = AdamState::init(cfg.lr, params);

  // per-class queues under a dedicated sampler stream
  Rng sampler(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::vector<int64_t>> by_class(cfg.n_classes);
  for (int64_t i : data.train_idx) by_class[data.labels[i]].push_back(i);
  std::vector<int64_t> class_ids;
  for (int64_t c = 0; c < cfg.n_classes; ++c)
    if (!by_class[c].empty()) class_ids.push_back(c);
  if (class_ids.empty()) throw EmptyDataset("train: no classes with training samples");

  std::vector<std::vector<int64_t>> queues(cfg.n_classes);
  auto draw_from_class = [&](int64_t c) {
    auto& q = queues[c];
    if (q.empty()) {
      q = by_class[c];
      sampler.shuffle(q);
    }
    int64_t idx = q.back();
    q.pop_back();
    return idx;
  };

  std::vector<int64_t> class_cycle = class_ids;
  sampler.shuffle(class_cycle);
  size_t class_cursor = 0;
  auto next_class = [&]() {
    if (class_cursor >= class_cycle.size()) {
      sampler.shuffle(class_cycle);
      class_cursor = 0;
    }
    return class_cycle[class_cursor++];
  };

  const int64_t steps_per_epoch =
      std::max<int64_t>(1, static_cast<int64_t>(data.train_idx.size()) / cfg.batch_size);

  const std::string metrics_path = out_dir + "/metrics.csv";
  FILE* metrics = std::fopen(metrics_path.c_str(), "wb");
  if (!metrics) throw std::runtime_error("train: cannot write " + metrics_path);

  TrainResult result;
  int64_t step = 0;
  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (int64_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<int64_t> batch_idx;
      std::vector<int64_t> batch_labels;
      for (int64_t pair = 0; pair < cfg.batch_size / 2; ++pair) {
        const int64_t c = next_class();
        for (int rep = 0; rep < 2; ++rep) {
          const int64_t i = draw_from_class(c);
          batch_idx.push_back(i);
          batch_labels.push_back(data.labels[i]);
        }
      }
      auto batch = FeatureMap(make_batch_tensor(data, batch_idx));
      auto trace = forward(model, batch);
      auto plan = make_pair_plan(batch_labels);
      auto loss = compute_loss(trace.embeddings, trace.logits, batch_labels, plan, cfg);

      double correct = 0;
      const int64_t bsz = cfg.batch_size, nc = cfg.n_classes;
      for (int64_t i = 0; i < bsz; ++i) {
        int64_t am = 0;
        for (int64_t c = 1; c < nc; ++c)
          if (trace.logits->data[i * nc + c] > trace.logits->data[i * nc + am]) am = c;
        if (am == batch_labels[i]) correct += 1;
      }
      const double acc = correct / static_cast<double>(bsz);

      for (auto& p : params) p->zero_grad();
      backward(loss.total);
      adam_step(opt, params);

      ++step;
      std::fprintf(metrics, "%lld,%lld,%.17g,%.17g,%.17g,%.17g\n",
                   static_cast<long long>(step), static_cast<long long>(epoch),
                   loss.total->value(), loss.ce->value(), loss.contrastive->value(), acc);
      result.loss_curve.push_back(loss.total->value());
      result.accuracy_curve.push_back(acc);
    }
    char name[64];
    std::snprintf(name, sizeof(name), "/checkpoint_epoch_%04lld.sacn",
                  static_cast<long long>(epoch));
    save_checkpoint(snapshot(model, &opt, epoch, sampler.state()), out_dir + name);
  }
  std::fclose(metrics);

  result.checkpoint = snapshot(model, &opt, cfg.epochs, sampler.state());
  save_checkpoint(result.checkpoint, out_dir + "/checkpoint.sacn");
  result.metrics_path = metrics_path;
  return result;
}

std::vector<std::vector<double>> embed_all(const SacNet& model, const Dataset& data,
                                           const std::vector<int64_t>& indices) {
  NoGradGuard freeze;
  std::vector<std::vector<double>> out;
  const int64_t chunk = 16;
  for (size_t start = 0; start < indices.size(); start += chunk) {
    std::vector<int64_t> idx(indices.begin() + start,
                             indices.begin() + std::min(indices.size(), start + chunk));
    auto trace = forward(model, FeatureMap(make_batch_tensor(data, idx)));
    const int64_t d = trace.embeddings->shape[1];
    for (size_t r = 0; r < idx.size(); ++r)
      out.emplace_back(trace.embeddings->data.begin() + r * d,
                       trace.embeddings->data.begin() + (r + 1) * d);
  }
  return out;
}

}  // namespace sacnet
