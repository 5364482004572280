#include "qure/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "qure/error.hpp"
#include "qure/rng.hpp"

namespace qure {

using json = nlohmann::json;

namespace {

// Box-Muller on SplitMix64 uniforms; std::normal_distribution is not
// specified bit-for-bit across standard libraries.
class Gaussian {
 public:
  explicit Gaussian(std::uint64_t seed) : rng_(seed) {}
  double operator()() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = rng_.unit();
    } while (u1 <= 0.0);
    const double u2 = rng_.unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

 private:
  SplitMix64 rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

using Signature = std::vector<std::uint32_t>;

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu", prefix, i);
  return buf;
}

// Orthonormal dim x dim matrix (row-major) from Gram-Schmidt on Gaussian rows.
std::vector<double> random_rotation(std::size_t dim, Gaussian& gauss) {
  std::vector<double> m(dim * dim);
  for (auto& x : m) x = gauss();
  for (std::size_t i = 0; i < dim; ++i) {
    double* row = m.data() + i * dim;
    for (std::size_t j = 0; j < i; ++j) {
      const double* prev = m.data() + j * dim;
      double d = 0.0;
      for (std::size_t c = 0; c < dim; ++c) d += row[c] * prev[c];
      for (std::size_t c = 0; c < dim; ++c) row[c] -= d * prev[c];
    }
    double norm = 0.0;
    for (std::size_t c = 0; c < dim; ++c) norm += row[c] * row[c];
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < dim; ++c) row[c] /= norm;
  }
  return m;
}

}  // namespace

std::size_t SynthConfig::attribute_values() const {
  if (values_per_attribute != 0) return values_per_attribute;
  return std::min<std::size_t>(4, dim / std::max<std::size_t>(1, n_attributes));
}

std::size_t SynthConfig::duplicates_per_signature() const {
  return static_cast<std::size_t>(std::llround(false_negative_rate * static_cast<double>(n_corpus)));
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::Config, what); };
  if (n_attributes < 1) fail("n_attributes must be positive");
  if (dim < 2 * n_attributes) fail("dim must be at least 2 * n_attributes");
  if (n_corpus < 10) fail("n_corpus must be at least 10");
  if (n_queries < 1) fail("n_queries must be positive");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) fail("noise_sigma must be non-negative");
  if (!(false_negative_rate >= 0.0 && false_negative_rate < 1.0)) {
    fail("false_negative_rate must lie in [0, 1)");
  }
  const std::size_t values = attribute_values();
  if (values < 2) fail("each attribute needs at least 2 values");
  if (values > dim / n_attributes) fail("values_per_attribute exceeds the attribute block width");
}

json to_json(const SynthConfig& c) {
  return json{{"n_attributes", c.n_attributes},
              {"dim", c.dim},
              {"n_corpus", c.n_corpus},
              {"n_queries", c.n_queries},
              {"n_eval_queries", c.n_eval_queries},
              {"noise_sigma", c.noise_sigma},
              {"false_negative_rate", c.false_negative_rate},
              {"seed", c.seed},
              {"values_per_attribute", c.values_per_attribute},
              {"rotate_text", c.rotate_text}};
}

SynthConfig synth_config_from_json(const json& j, SynthConfig c) {
  if (!j.is_object()) throw Error(ErrorKind::Config, "synth config must be an object");
  auto count = [](const json& v, const std::string& key) -> std::size_t {
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw Error(ErrorKind::Config, "'" + key + "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
  };
  auto number = [](const json& v, const std::string& key) {
    if (!v.is_number()) throw Error(ErrorKind::Config, "'" + key + "' must be a number");
    return v.get<double>();
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "n_attributes") c.n_attributes = count(v, key);
    else if (key == "dim") c.dim = count(v, key);
    else if (key == "n_corpus") c.n_corpus = count(v, key);
    else if (key == "n_queries") c.n_queries = count(v, key);
    else if (key == "n_eval_queries") c.n_eval_queries = count(v, key);
    else if (key == "noise_sigma") c.noise_sigma = number(v, key);
    else if (key == "false_negative_rate") c.false_negative_rate = number(v, key);
    else if (key == "seed") c.seed = count(v, key);
    else if (key == "values_per_attribute") c.values_per_attribute = count(v, key);
    else if (key == "rotate_text") {
      if (!v.is_boolean()) throw Error(ErrorKind::Config, "'rotate_text' must be a boolean");
      c.rotate_text = v.get<bool>();
    } else {
      throw Error(ErrorKind::Config, "unknown synth config key '" + key + "'");
    }
  }
  return c;
}

SynthDataset generate(const SynthConfig& config) {
  config.validate();
  const std::size_t n_attr = config.n_attributes;
  const std::size_t dim = config.dim;
  const std::size_t block = dim / n_attr;
  const std::size_t values = config.attribute_values();
  const std::size_t n_dup = config.duplicates_per_signature();
  const std::size_t group_size = n_dup + 1;
  const std::size_t n_total_queries = config.n_queries + config.n_eval_queries;

  // Signature space size, saturated to avoid overflow.
  double space = 1.0;
  for (std::size_t a = 0; a < n_attr; ++a) space *= static_cast<double>(values);

  if (n_total_queries >= config.n_corpus) {
    throw Error(ErrorKind::Config, "n_corpus must exceed the number of queries");
  }
  const std::size_t max_groups = (config.n_corpus - n_total_queries) / group_size;
  const std::size_t min_groups = (n_total_queries + group_size - 1) / group_size;
  const std::size_t sig_budget = static_cast<std::size_t>(std::min(space / 4.0, 1e9));
  const std::size_t n_groups = std::min(max_groups, std::max(min_groups, sig_budget));
  if (n_groups < min_groups || n_groups > max_groups) {
    throw Error(ErrorKind::Config,
                "cannot place " + std::to_string(n_total_queries) + " queries with " +
                    std::to_string(n_dup) + " false negatives each in a corpus of " +
                    std::to_string(config.n_corpus));
  }

  SplitMix64 rng(derive_seed(config.seed, 0x53594E54));  // "SYNT"
  Gaussian gauss(derive_seed(config.seed, 0x4E4F4953));   // "NOIS"

  auto random_signature = [&] {
    Signature s(n_attr);
    for (auto& v : s) v = static_cast<std::uint32_t>(rng.below(values));
    return s;
  };

  // Target signature pool.
  std::set<Signature> pool_set;
  std::vector<Signature> pool;
  while (pool.size() < n_groups) {
    auto s = random_signature();
    if (pool_set.insert(s).second) pool.push_back(std::move(s));
  }

  struct Item {
    Signature sig;
    std::vector<double> vec;
  };
  std::vector<Item> items;
  items.reserve(config.n_corpus);

  auto noisy = [&](const Signature& sig) {
    std::vector<double> v(dim, 0.0);
    for (std::size_t a = 0; a < n_attr; ++a) v[a * block + sig[a]] = 1.0;
    for (auto& x : v) x += config.noise_sigma * gauss();
    return v;
  };

  struct PlantedQuery {
    std::size_t ref_item, target_item, group;
    std::size_t attribute;
    std::uint32_t from_value, to_value;
  };
  std::vector<PlantedQuery> planted(n_total_queries);
  std::vector<std::vector<std::size_t>> group_members(n_groups);

  for (std::size_t qi = 0; qi < n_total_queries; ++qi) {
    auto& pq = planted[qi];
    pq.group = qi % n_groups;
    const Signature& target_sig = pool[pq.group];
    Signature ref_sig;
    bool found = false;
    for (int attempt = 0; attempt < 1000 && !found; ++attempt) {
      pq.attribute = rng.below(n_attr);
      pq.to_value = target_sig[pq.attribute];
      pq.from_value = static_cast<std::uint32_t>(rng.below(values - 1));
      if (pq.from_value >= pq.to_value) ++pq.from_value;
      ref_sig = target_sig;
      ref_sig[pq.attribute] = pq.from_value;
      found = pool_set.count(ref_sig) == 0;
    }
    if (!found) throw Error(ErrorKind::Config, "attribute space too small for the requested queries");

    Item ref{ref_sig, noisy(ref_sig)};
    Item target{target_sig, ref.vec};
    target.vec[pq.attribute * block + pq.from_value] -= 1.0;
    target.vec[pq.attribute * block + pq.to_value] += 1.0;
    pq.ref_item = items.size();
    items.push_back(std::move(ref));
    pq.target_item = items.size();
    group_members[pq.group].push_back(items.size());
    items.push_back(std::move(target));
  }

  for (std::size_t g = 0; g < n_groups; ++g) {
    while (group_members[g].size() < group_size) {
      group_members[g].push_back(items.size());
      items.push_back({pool[g], noisy(pool[g])});
    }
  }
  while (items.size() < config.n_corpus) {
    Signature s;
    do {
      s = random_signature();
    } while (pool_set.count(s));
    auto v = noisy(s);
    items.push_back({std::move(s), std::move(v)});
  }

  // Corpus rows in shuffled order so ids carry no structure.
  std::vector<std::size_t> row_of(items.size());
  std::iota(row_of.begin(), row_of.end(), std::size_t{0});
  for (std::size_t i = row_of.size(); i > 1; --i) std::swap(row_of[i - 1], row_of[rng.below(i)]);
  std::vector<std::size_t> item_at(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) item_at[row_of[i]] = i;

  SynthDataset out;
  {
    std::vector<std::string> ids;
    std::vector<float> values_f;
    values_f.reserve(items.size() * dim);
    out.corpus_signatures.reserve(items.size() * n_attr);
    for (std::size_t row = 0; row < items.size(); ++row) {
      const auto& item = items[item_at[row]];
      ids.push_back(numbered("img", row));
      for (double x : item.vec) values_f.push_back(static_cast<float>(x));
      out.corpus_signatures.insert(out.corpus_signatures.end(), item.sig.begin(), item.sig.end());
    }
    out.corpus = EmbeddingMatrix(static_cast<std::uint32_t>(dim), std::move(ids), std::move(values_f));
  }

  if (config.rotate_text) {
    Gaussian rot_gauss(derive_seed(config.seed, 0x524F5441));  // "ROTA"
    out.text_rotation = random_rotation(dim, rot_gauss);
  } else {
    out.text_rotation.assign(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i) out.text_rotation[i * dim + i] = 1.0;
  }

  std::vector<std::string> img_ids, txt_ids;
  std::vector<float> img_vals, txt_vals;
  out.manifest.split = "train";
  out.eval_manifest.split = "test";
  for (std::size_t qi = 0; qi < n_total_queries; ++qi) {
    const auto& pq = planted[qi];
    const std::string ref_id = out.corpus.id(row_of[pq.ref_item]);
    const std::string target_id = out.corpus.id(row_of[pq.target_item]);

    img_ids.push_back(ref_id);
    for (double x : items[pq.ref_item].vec) img_vals.push_back(static_cast<float>(x));

    std::vector<double> delta(dim, 0.0);
    delta[pq.attribute * block + pq.to_value] = 1.0;
    delta[pq.attribute * block + pq.from_value] = -1.0;
    txt_ids.push_back(numbered("txt", qi));
    for (std::size_t r = 0; r < dim; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < dim; ++c) s += out.text_rotation[r * dim + c] * delta[c];
      txt_vals.push_back(static_cast<float>(s + config.noise_sigma * gauss()));
    }

    QueryRecord rec{numbered("q", qi), ref_id, txt_ids.back(), target_id, std::nullopt};
    (qi < config.n_queries ? out.manifest : out.eval_manifest).queries.push_back(rec);

    GroundTruth gt;
    gt.query_id = rec.query_id;
    gt.target_id = target_id;
    std::vector<std::string> others;
    for (std::size_t member : group_members[pq.group]) {
      if (member != pq.target_item) others.push_back(out.corpus.id(row_of[member]));
    }
    std::sort(others.begin(), others.end());
    gt.relevant_ids.push_back(target_id);
    gt.relevant_ids.insert(gt.relevant_ids.end(), others.begin(), others.end());
    out.truth.push_back(std::move(gt));
  }
  out.query_img = EmbeddingMatrix(static_cast<std::uint32_t>(dim), std::move(img_ids), std::move(img_vals));
  out.query_txt = EmbeddingMatrix(static_cast<std::uint32_t>(dim), std::move(txt_ids), std::move(txt_vals));
  out.manifest.corpus_ids = out.corpus.ids();
  out.eval_manifest.corpus_ids = out.corpus.ids();
  return out;
}

void write_synth_dataset(const SynthDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_embeddings(data.corpus, dir / "corpus.qure");
  write_embeddings(data.query_img, dir / "query_img.qure");
  write_embeddings(data.query_txt, dir / "query_txt.qure");
  write_manifest(data.manifest, dir / "manifest.jsonl");
  if (!data.eval_manifest.queries.empty()) write_manifest(data.eval_manifest, dir / "eval_manifest.jsonl");
  write_truth(data.truth, dir / "truth.jsonl");
}

}  // namespace qure
