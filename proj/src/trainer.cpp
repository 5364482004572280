#include "qure/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "byte_io.hpp"
#include "qure/error.hpp"
#include "qure/parallel.hpp"
#include "qure/rng.hpp"

namespace qure {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void TrainingConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::Config, what); };
  if (n_epoch < 1) fail("n_epoch must be positive");
  if (n_def < 1) fail("n_def must be positive");
  if (n_def > n_epoch) {
    fail("n_def <= n_epoch violated (n_def=" + std::to_string(n_def) +
         ", n_epoch=" + std::to_string(n_epoch) + ")");
  }
  if (batch_size < 1) fail("batch_size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) fail("weight_decay must be non-negative");
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) fail("adam_beta1 must lie in (0,1)");
  if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) fail("adam_beta2 must lie in (0,1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(inv_tau_init > 0.0) || !std::isfinite(inv_tau_init)) fail("inv_tau_init must be positive");
  if (k < 1) fail("k must be positive");
  if (eval_every < 0) fail("eval_every must be non-negative");
}

std::vector<std::int64_t> TrainingConfig::mining_epochs() const {
  std::vector<std::int64_t> out;
  for (std::int64_t e = 0; e < n_epoch; ++e) {
    if (is_mining_epoch(e)) out.push_back(e);
  }
  return out;
}

json to_json(const TrainingConfig& c) {
  return json{{"n_epoch", c.n_epoch},
              {"n_def", c.n_def},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},
              {"seed", c.seed},
              {"inv_tau_init", c.inv_tau_init},
              {"strategy", std::string(to_string(c.strategy))},
              {"k", c.k},
              {"d_out", c.d_out},
              {"eval_every", c.eval_every}};
}

std::uint64_t TrainingConfig::hash() const {
  const std::string canonical = to_json(*this).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

TrainingConfig training_config_from_json(const json& j, TrainingConfig c) {
  if (!j.is_object()) throw Error(ErrorKind::Config, "training config must be an object");
  auto number = [](const json& v, const std::string& key) {
    if (!v.is_number()) throw Error(ErrorKind::Config, "'" + key + "' must be a number");
    return v.get<double>();
  };
  auto integer = [](const json& v, const std::string& key) -> std::int64_t {
    if (!v.is_number_integer()) throw Error(ErrorKind::Config, "'" + key + "' must be an integer");
    return v.get<std::int64_t>();
  };
  auto count = [&](const json& v, const std::string& key) -> std::size_t {
    const auto x = integer(v, key);
    if (x < 0) throw Error(ErrorKind::Config, "'" + key + "' must be non-negative");
    return static_cast<std::size_t>(x);
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "n_epoch") c.n_epoch = integer(v, key);
    else if (key == "n_def") c.n_def = integer(v, key);
    else if (key == "batch_size") c.batch_size = count(v, key);
    else if (key == "learning_rate") c.learning_rate = number(v, key);
    else if (key == "weight_decay") c.weight_decay = number(v, key);
    else if (key == "adam_beta1") c.adam_beta1 = number(v, key);
    else if (key == "adam_beta2") c.adam_beta2 = number(v, key);
    else if (key == "adam_eps") c.adam_eps = number(v, key);
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(integer(v, key));
    else if (key == "inv_tau_init") c.inv_tau_init = number(v, key);
    else if (key == "k") c.k = count(v, key);
    else if (key == "d_out") c.d_out = count(v, key);
    else if (key == "eval_every") c.eval_every = integer(v, key);
    else if (key == "strategy") {
      if (!v.is_string()) throw Error(ErrorKind::Config, "'strategy' must be a string");
      c.strategy = parse_strategy(v.get<std::string>());
    } else {
      throw Error(ErrorKind::Config, "unknown training config key '" + key + "'");
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Bradley-Terry objective

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double bt_probability(double s_pos, double s_neg) {
  const double m = s_pos - s_neg;
  if (m >= 0.0) return 1.0 / (1.0 + std::exp(-m));
  const double e = std::exp(m);
  return e / (1.0 + e);
}

double nll_loss(double s_pos, double s_neg) { return softplus(s_neg - s_pos); }

double nll_loss(double p) { return -std::log(p); }

namespace {

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// z = W x + b for a row-major d_out x n matrix.
void affine(const std::vector<double>& w, const std::vector<double>& b, const double* x,
            std::size_t n, std::vector<double>& z) {
  for (std::size_t r = 0; r < b.size(); ++r) z[r] = b[r] + dot(w.data() + r * n, x, n);
}

// Gradient through y = z/|z| given dL/dy; overwrites g with dL/dz.
void backprop_normalize(const std::vector<double>& y, double norm, std::vector<double>& g) {
  const double proj = dot(y.data(), g.data(), y.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = (g[i] - y[i] * proj) / norm;
}

// Adds one example's loss and gradients (unnormalized by batch size).
double accumulate_example(const AdapterParams& p, const TrainingExample& ex, AdapterParams& g) {
  const std::size_t d_in = p.d_in, d_out = p.d_out;
  auto check = [&](std::span<const float> v, const char* what) {
    if (v.size() != d_in) {
      throw Error(ErrorKind::Validation, "query '" + std::string(ex.query_id) + "': " + what +
                                             " has dimension " + std::to_string(v.size()));
    }
  };
  check(ex.x_img, "reference image");
  check(ex.x_txt, "text");
  check(ex.positive, "positive image");
  check(ex.negative, "negative image");

  std::vector<double> cat(2 * d_in), pos(d_in), neg(d_in);
  for (std::size_t i = 0; i < d_in; ++i) {
    cat[i] = ex.x_img[i];
    cat[d_in + i] = ex.x_txt[i];
    pos[i] = ex.positive[i];
    neg[i] = ex.negative[i];
  }

  auto unit = [&](std::vector<double>& z, const char* what) {
    const double norm = std::sqrt(dot(z.data(), z.data(), z.size()));
    if (!(norm >= 1e-12)) {
      throw Error(ErrorKind::DegenerateQuery, "query '" + std::string(ex.query_id) + "': " + what +
                                                  " projection has norm < 1e-12");
    }
    for (auto& x : z) x /= norm;
    return norm;
  };

  std::vector<double> q(d_out), ep(d_out), en(d_out);
  affine(p.w_fuse, p.b_fuse, cat.data(), 2 * d_in, q);
  const double q_norm = unit(q, "fused query");
  affine(p.w_img, p.b_img, pos.data(), d_in, ep);
  const double p_norm = unit(ep, "positive image");
  affine(p.w_img, p.b_img, neg.data(), d_in, en);
  const double n_norm = unit(en, "negative image");

  const double c = p.inv_tau();
  const double margin = c * (dot(q.data(), ep.data(), d_out) - dot(q.data(), en.data(), d_out));
  const double loss = softplus(-margin);
  // dloss/dmargin = -sigmoid(-margin)
  const double gm = -bt_probability(0.0, margin);

  g.log_inv_tau += gm * margin;

  std::vector<double> gq(d_out), gp(d_out), gn(d_out);
  for (std::size_t i = 0; i < d_out; ++i) {
    gq[i] = gm * c * (ep[i] - en[i]);
    gp[i] = gm * c * q[i];
    gn[i] = -gm * c * q[i];
  }
  backprop_normalize(q, q_norm, gq);
  backprop_normalize(ep, p_norm, gp);
  backprop_normalize(en, n_norm, gn);

  for (std::size_t r = 0; r < d_out; ++r) {
    double* wf = g.w_fuse.data() + r * 2 * d_in;
    for (std::size_t col = 0; col < 2 * d_in; ++col) wf[col] += gq[r] * cat[col];
    g.b_fuse[r] += gq[r];
    double* wi = g.w_img.data() + r * d_in;
    for (std::size_t col = 0; col < d_in; ++col) wi[col] += gp[r] * pos[col] + gn[r] * neg[col];
    g.b_img[r] += gp[r] + gn[r];
  }
  return loss;
}

void add_into(AdapterParams& into, const AdapterParams& from) {
  auto add = [](std::vector<double>& a, const std::vector<double>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  };
  add(into.w_fuse, from.w_fuse);
  add(into.b_fuse, from.b_fuse);
  add(into.w_img, from.w_img);
  add(into.b_img, from.b_img);
  into.log_inv_tau += from.log_inv_tau;
}

}  // namespace

LossAndGradients loss_and_gradients(const AdapterParams& params,
                                    std::span<const TrainingExample> batch, std::size_t threads) {
  if (batch.empty()) throw Error(ErrorKind::Validation, "empty training batch");
  const std::size_t n_shards = (batch.size() + kGradientShard - 1) / kGradientShard;
  std::vector<AdapterParams> shard_grads(n_shards);
  std::vector<double> shard_loss(n_shards, 0.0);
  parallel_for(n_shards, threads, [&](std::size_t s) {
    AdapterParams g = AdapterParams::zeros(params.d_in, params.d_out);
    const std::size_t end = std::min(batch.size(), (s + 1) * kGradientShard);
    double loss = 0.0;
    for (std::size_t i = s * kGradientShard; i < end; ++i) loss += accumulate_example(params, batch[i], g);
    shard_grads[s] = std::move(g);
    shard_loss[s] = loss;
  });

  LossAndGradients out;
  out.grads = AdapterParams::zeros(params.d_in, params.d_out);
  double loss = 0.0;
  for (std::size_t s = 0; s < n_shards; ++s) {
    add_into(out.grads, shard_grads[s]);
    loss += shard_loss[s];
  }
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  out.loss = loss * inv_n;
  out.grads.for_each_block([&](std::string_view, std::span<double> block) {
    for (auto& x : block) x *= inv_n;
  });
  return out;
}

// ---------------------------------------------------------------------------
// AdamW

OptimizerState OptimizerState::zeros_like(const AdapterParams& params) {
  OptimizerState s;
  s.first_moment = AdapterParams::zeros(params.d_in, params.d_out);
  s.second_moment = AdapterParams::zeros(params.d_in, params.d_out);
  return s;
}

void adamw_step(AdapterParams& params, const AdapterParams& grads, OptimizerState& state,
                const TrainingConfig& config) {
  if (!params.shape_matches(grads) || !params.shape_matches(state.first_moment) ||
      !params.shape_matches(state.second_moment)) {
    throw Error(ErrorKind::Validation, "optimizer shapes do not match the parameters");
  }
  grads.for_each_block([](std::string_view name, std::span<const double> block) {
    for (std::size_t i = 0; i < block.size(); ++i) {
      if (!std::isfinite(block[i])) {
        throw Error(ErrorKind::NonFinite, "non-finite gradient in block " + std::string(name) +
                                              " at index " + std::to_string(i));
      }
    }
  });

  state.step += 1;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(b1, t);
  const double bias2 = 1.0 - std::pow(b2, t);
  const double lr = config.learning_rate;

  // Blocks are visited in the same order on all four structures.
  std::vector<std::span<const double>> g_blocks;
  std::vector<std::span<double>> m_blocks, v_blocks;
  grads.for_each_block([&](std::string_view, std::span<const double> b) { g_blocks.push_back(b); });
  state.first_moment.for_each_block([&](std::string_view, std::span<double> b) { m_blocks.push_back(b); });
  state.second_moment.for_each_block([&](std::string_view, std::span<double> b) { v_blocks.push_back(b); });

  std::size_t bi = 0;
  params.for_each_block([&](std::string_view name, std::span<double> w) {
    auto g = g_blocks[bi];
    auto m = m_blocks[bi];
    auto v = v_blocks[bi];
    ++bi;
    const bool decay = name == "w_fuse" || name == "w_img";
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + config.adam_eps);
      if (decay) w[i] -= lr * config.weight_decay * w[i];
    }
  });
  params.log_inv_tau = std::clamp(params.log_inv_tau, kMinLogInvTau, kMaxLogInvTau);
}

AdapterParams initial_params(std::size_t d_in, const TrainingConfig& config) {
  const std::size_t d_out = config.d_out == 0 ? d_in : config.d_out;
  AdapterParams p = AdapterParams::zeros(d_in, d_out);
  SplitMix64 rng(derive_seed(config.seed, 0x494E4954));  // "INIT"
  auto noise = [&] { return (2.0 * rng.unit() - 1.0) * 1e-3; };
  const double half = 1.0 / std::sqrt(2.0);
  for (std::size_t r = 0; r < d_out; ++r) {
    for (std::size_t c = 0; c < 2 * d_in; ++c) {
      const bool diag = (c < d_in ? c : c - d_in) == r;
      p.w_fuse[r * 2 * d_in + c] = (diag ? half : 0.0) + noise();
    }
  }
  for (std::size_t r = 0; r < d_out; ++r) {
    for (std::size_t c = 0; c < d_in; ++c) p.w_img[r * d_in + c] = (c == r ? 1.0 : 0.0) + noise();
  }
  p.log_inv_tau = std::clamp(std::log(config.inv_tau_init), kMinLogInvTau, kMaxLogInvTau);
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

void put_params(detail::ByteWriter& w, const AdapterParams& p) {
  p.for_each_block([&](std::string_view, std::span<const double> b) {
    for (double x : b) w.f64(x);
  });
}

void get_params(detail::ByteReader& r, AdapterParams& p) {
  p.for_each_block([&](std::string_view, std::span<double> b) {
    for (double& x : b) x = r.f64();
  });
}

constexpr std::uint32_t kWarmupMarker = 0xFFFFFFFFu;

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(std::string_view(kMagic, 4));
  w.u8(kFormatVersion);
  w.u8(kDtypeCheckpoint);
  w.u8(0);
  w.u8(0);
  w.u32(static_cast<std::uint32_t>(ck.params.d_in));
  w.u64(ck.params.d_out);
  put_params(w, ck.params);
  put_params(w, ck.optimizer.first_moment);
  put_params(w, ck.optimizer.second_moment);
  w.u64(ck.optimizer.step);
  w.u64(static_cast<std::uint64_t>(ck.epoch));
  w.u64(ck.rng_seed);
  w.u64(ck.config_hash);
  w.u32(static_cast<std::uint32_t>(ck.negatives.size()));
  for (const auto& n : ck.negatives) {
    if (n.warmup) {
      w.u32(kWarmupMarker);
      continue;
    }
    w.u32(static_cast<std::uint32_t>(n.rows.size()));
    for (auto row : n.rows) w.u32(row);
  }
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) throw Error(ErrorKind::Format, "file shorter than the 20-byte header");
  detail::ByteReader r(bytes);
  if (r.str(4) != std::string_view(kMagic, 4)) throw Error(ErrorKind::Format, "bad magic");
  if (const auto v = r.u8(); v != kFormatVersion) {
    throw Error(ErrorKind::Format, "unsupported version " + std::to_string(v));
  }
  if (const auto dt = r.u8(); dt != kDtypeCheckpoint) {
    throw Error(ErrorKind::Format, "not a checkpoint (dtype code " + std::to_string(dt) + ")");
  }
  if (r.u8() != 0 || r.u8() != 0) throw Error(ErrorKind::Format, "reserved header bytes not zero");
  const std::uint32_t d_in = r.u32();
  const std::uint64_t d_out = r.u64();
  if (d_in == 0 || d_out == 0 || d_out > (1u << 20)) {
    throw Error(ErrorKind::Format, "implausible adapter shape");
  }
  const std::uint64_t n_params = d_out * (3ull * d_in + 2) + 1;
  r.need(static_cast<std::size_t>(n_params * 8 * 3));

  Checkpoint ck;
  ck.params = AdapterParams::zeros(d_in, d_out);
  ck.optimizer = OptimizerState::zeros_like(ck.params);
  get_params(r, ck.params);
  get_params(r, ck.optimizer.first_moment);
  get_params(r, ck.optimizer.second_moment);
  ck.optimizer.step = r.u64();
  ck.epoch = static_cast<std::int64_t>(r.u64());
  ck.rng_seed = r.u64();
  ck.config_hash = r.u64();
  const std::uint32_t n_queries = r.u32();
  ck.negatives.resize(n_queries);
  for (auto& n : ck.negatives) {
    const std::uint32_t count = r.u32();
    if (count == kWarmupMarker) {
      n.warmup = true;
      continue;
    }
    r.need(std::size_t{count} * 4);
    n.rows.resize(count);
    for (auto& row : n.rows) row = r.u32();
  }
  if (r.remaining() != 0) throw Error(ErrorKind::Corruption, "trailing bytes after checkpoint payload");
  return ck;
}

void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& destination) {
  detail::write_file(destination, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& source) {
  return decode_checkpoint(detail::read_file(source));
}

// ---------------------------------------------------------------------------
// Log

json to_json(const MinerStats& s) {
  return json{{"epoch", s.epoch},
              {"strategy", std::string(to_string(s.strategy))},
              {"warmup", s.warmup},
              {"queries", s.queries},
              {"mean_size", s.mean_size},
              {"median_size", s.median_size},
              {"min_size", s.min_size},
              {"max_size", s.max_size},
              {"fallback_count", s.fallback_count},
              {"fallback_below_target", s.fallback_below_target},
              {"fallback_warmup", s.fallback_warmup}};
}

json to_json(const EpochLog& e) {
  json j{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"steps", e.steps}, {"inv_tau", e.inv_tau}};
  if (e.mining) j["mining"] = to_json(*e.mining);
  if (!e.eval.empty()) {
    json ev = json::object();
    for (const auto& [name, v] : e.eval) ev[name] = v;
    j["eval"] = ev;
  }
  return j;
}

std::string format_training_log(const TrainingLog& log) {
  std::string out;
  for (const auto& e : log.epochs) {
    out += to_json(e).dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

StoredNegatives store(const HardNegativeSet& set, const EmbeddingMatrix& corpus) {
  StoredNegatives s;
  if (set.strategy == Strategy::AllCorpus && set.fallback == Fallback::None &&
      set.negative_ids.size() + 1 == corpus.count()) {
    s.warmup = true;
    return s;
  }
  s.rows.reserve(set.negative_ids.size());
  for (const auto& id : set.negative_ids) s.rows.push_back(static_cast<std::uint32_t>(corpus.index_of(id)));
  return s;
}

HardNegativeSet restore(const StoredNegatives& s, const Dataset& data, std::size_t query,
                        Strategy strategy) {
  HardNegativeSet set;
  set.query_id = data.manifest().queries[query].query_id;
  set.strategy = s.warmup ? Strategy::AllCorpus : strategy;
  const auto& corpus = data.corpus();
  if (s.warmup) {
    const std::size_t target = data.resolved()[query].target_row;
    for (std::size_t r = 0; r < corpus.count(); ++r) {
      if (r != target) set.negative_ids.push_back(corpus.id(r));
    }
  } else {
    for (auto row : s.rows) {
      if (row >= corpus.count()) throw Error(ErrorKind::Validation, "checkpoint negative row out of range");
      set.negative_ids.push_back(corpus.id(row));
    }
  }
  return set;
}

std::vector<std::size_t> shuffled_queries(std::size_t n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(derive_seed(seed, 0x53485546, static_cast<std::uint64_t>(epoch)));  // "SHUF"
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

}  // namespace

TrainResult train(const TrainingConfig& config, const Dataset& data,
                  const std::optional<Checkpoint>& init, const TrainOptions& options) {
  config.validate();
  const std::size_t n_queries = data.query_count();
  const std::size_t d_in = data.corpus().dim();

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  std::vector<HardNegativeSet> sets;

  if (init) {
    ck = *init;
    if (ck.config_hash != config.hash()) {
      throw Error(ErrorKind::Validation, "checkpoint was produced with a different training config");
    }
    if (ck.params.d_in != d_in) throw Error(ErrorKind::Validation, "checkpoint input dimension mismatch");
    if (ck.negatives.size() != n_queries && ck.epoch > 0) {
      throw Error(ErrorKind::Validation, "checkpoint negative sets do not match the manifest");
    }
    for (std::size_t i = 0; i < ck.negatives.size(); ++i) {
      sets.push_back(restore(ck.negatives[i], data, i, config.strategy));
    }
  } else {
    ck.params = initial_params(d_in, config);
    ck.optimizer = OptimizerState::zeros_like(ck.params);
    ck.epoch = 0;
    ck.rng_seed = config.seed;
    ck.config_hash = config.hash();
  }

  const auto& corpus = data.corpus();
  std::vector<TrainingExample> batch;
  batch.reserve(config.batch_size);

  for (std::int64_t epoch = ck.epoch; epoch < config.n_epoch; ++epoch) {
    EpochLog entry;
    entry.epoch = epoch;

    try {
      if (config.is_mining_epoch(epoch)) {
        MiningResult mined = mine_all(ck.params, data, config.strategy, config.k, epoch, options.threads);
        sets = std::move(mined.sets);
        entry.mining = mined.stats;
        ck.negatives.clear();
        ck.negatives.reserve(sets.size());
        for (const auto& s : sets) ck.negatives.push_back(store(s, corpus));
      }

      // One negative per query per epoch, from a per-query stream.
      const std::uint64_t draw_seed = derive_seed(ck.rng_seed, 0x4E454753, static_cast<std::uint64_t>(epoch));
      std::vector<std::size_t> negative_row(n_queries);
      for (std::size_t i = 0; i < n_queries; ++i) {
        negative_row[i] = corpus.index_of(sample_negative(sets[i], draw_seed, i));
      }

      const auto order = shuffled_queries(n_queries, ck.rng_seed, epoch);
      double loss_sum = 0.0;
      for (std::size_t start = 0; start < n_queries; start += config.batch_size) {
        const std::size_t end = std::min(n_queries, start + config.batch_size);
        batch.clear();
        for (std::size_t b = start; b < end; ++b) {
          const std::size_t qi = order[b];
          const auto& rq = data.resolved()[qi];
          batch.push_back({data.manifest().queries[qi].query_id, data.query_img().row(rq.ref_row),
                           data.query_txt().row(rq.text_row), corpus.row(rq.target_row),
                           corpus.row(negative_row[qi])});
        }
        auto lg = loss_and_gradients(ck.params, batch, options.threads);
        adamw_step(ck.params, lg.grads, ck.optimizer, config);
        loss_sum += lg.loss * static_cast<double>(batch.size());
        ++entry.steps;
      }
      entry.mean_loss = loss_sum / static_cast<double>(n_queries);
      entry.inv_tau = ck.params.inv_tau();
    } catch (const Error& e) {
      throw Error(e.kind(), "epoch " + std::to_string(epoch) + ": " + e.what());
    }

    ck.epoch = epoch + 1;
    const bool last = epoch + 1 == config.n_epoch;
    const bool periodic = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
    if (options.eval_data && (last || periodic)) {
      const auto rankings = rank_all(ck.params, *options.eval_data, false, options.threads);
      for (std::size_t k : options.eval_ks) {
        std::size_t hits = 0;
        for (const auto& r : rankings) {
          if (r.target_rank && *r.target_rank <= k) ++hits;
        }
        entry.eval.emplace_back("recall@" + std::to_string(k),
                                100.0 * static_cast<double>(hits) / static_cast<double>(rankings.size()));
      }
    }
    if (options.on_epoch_end) options.on_epoch_end(ck, entry);
    result.log.epochs.push_back(std::move(entry));
  }
  return result;
}

}  // namespace qure
