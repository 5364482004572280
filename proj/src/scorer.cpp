#include "qure/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "qure/error.hpp"
#include "qure/parallel.hpp"

namespace qure {

namespace {

constexpr double kDegenerateNorm = 1e-12;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void normalize_or_throw(std::vector<double>& v, const char* what) {
  const double norm = std::sqrt(dot(v, v));
  if (!(norm >= kDegenerateNorm)) {
    throw Error(ErrorKind::DegenerateQuery,
                std::string(what) + " projection has norm " + std::to_string(norm) + " < 1e-12");
  }
  for (auto& x : v) x /= norm;
}

void check_dim(std::span<const float> v, std::size_t d_in, const char* what) {
  if (v.size() != d_in) {
    throw Error(ErrorKind::Validation, std::string(what) + " has dimension " +
                                           std::to_string(v.size()) + ", adapter expects " +
                                           std::to_string(d_in));
  }
}

}  // namespace

AdapterParams AdapterParams::zeros(std::size_t d_in, std::size_t d_out) {
  AdapterParams p;
  p.d_in = d_in;
  p.d_out = d_out;
  p.w_fuse.assign(d_out * 2 * d_in, 0.0);
  p.b_fuse.assign(d_out, 0.0);
  p.w_img.assign(d_out * d_in, 0.0);
  p.b_img.assign(d_out, 0.0);
  return p;
}

double AdapterParams::inv_tau() const { return std::exp(log_inv_tau); }

std::vector<double> fuse_query(const AdapterParams& params, std::span<const float> x_img,
                               std::span<const float> x_txt) {
  check_dim(x_img, params.d_in, "reference image embedding");
  check_dim(x_txt, params.d_in, "text embedding");
  const std::size_t d_in = params.d_in;
  std::vector<double> out(params.d_out);
  for (std::size_t r = 0; r < params.d_out; ++r) {
    const double* w = params.w_fuse.data() + r * 2 * d_in;
    double s = params.b_fuse[r];
    for (std::size_t c = 0; c < d_in; ++c) s += w[c] * x_img[c];
    for (std::size_t c = 0; c < d_in; ++c) s += w[d_in + c] * x_txt[c];
    out[r] = s;
  }
  normalize_or_throw(out, "fused query");
  return out;
}

std::vector<double> embed_image(const AdapterParams& params, std::span<const float> v) {
  check_dim(v, params.d_in, "image embedding");
  std::vector<double> out(params.d_out);
  for (std::size_t r = 0; r < params.d_out; ++r) {
    const double* w = params.w_img.data() + r * params.d_in;
    double s = params.b_img[r];
    for (std::size_t c = 0; c < params.d_in; ++c) s += w[c] * v[c];
    out[r] = s;
  }
  normalize_or_throw(out, "image");
  return out;
}

double relevance_score(const AdapterParams& params, std::span<const double> q,
                       std::span<const double> v) {
  return dot(q, v) * params.inv_tau();
}

// ---------------------------------------------------------------------------

CorpusScorer::CorpusScorer(const AdapterParams& params, const EmbeddingMatrix& corpus,
                           std::size_t chunk_rows, std::size_t threads)
    : params_(params),
      corpus_(&corpus),
      chunk_rows_(std::max<std::size_t>(1, chunk_rows)),
      n_rows_(corpus.count()) {
  const std::size_t n_chunks = (n_rows_ + chunk_rows_ - 1) / chunk_rows_;
  chunks_.resize(n_chunks);
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * chunk_rows_;
    const std::size_t end = std::min(n_rows_, begin + chunk_rows_);
    auto& chunk = chunks_[c];
    chunk.resize((end - begin) * params_.d_out);
    for (std::size_t row = begin; row < end; ++row) {
      std::vector<double> e;
      try {
        e = embed_image(params_, corpus.row(row));
      } catch (const Error& err) {
        throw Error(err.kind(), "corpus image '" + corpus.id(row) + "': " + err.what());
      }
      std::copy(e.begin(), e.end(), chunk.begin() + (row - begin) * params_.d_out);
    }
  });
}

std::span<const double> CorpusScorer::embedding(std::size_t row) const {
  const auto& chunk = chunks_[row / chunk_rows_];
  return {chunk.data() + (row % chunk_rows_) * params_.d_out, params_.d_out};
}

std::vector<double> CorpusScorer::score_all(std::span<const double> query) const {
  std::vector<double> scores(n_rows_);
  const double inv_tau = params_.inv_tau();
  const std::size_t d = params_.d_out;
  for (std::size_t c = 0; c < chunks_.size(); ++c) {
    const auto& chunk = chunks_[c];
    const std::size_t rows = chunk.size() / std::max<std::size_t>(1, d);
    double* out = scores.data() + c * chunk_rows_;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* e = chunk.data() + r * d;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += query[k] * e[k];
      out[r] = s * inv_tau;
    }
  }
  return scores;
}

void sort_by_score(std::vector<std::size_t>& rows, std::span<const double> scores,
                   const std::vector<std::string>& ids) {
  std::sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
}

std::vector<std::size_t> CorpusScorer::order(std::span<const double> scores,
                                             std::optional<std::span<const std::size_t>> rows) const {
  std::vector<std::size_t> out;
  if (rows) {
    out.assign(rows->begin(), rows->end());
  } else {
    out.resize(n_rows_);
    std::iota(out.begin(), out.end(), std::size_t{0});
  }
  sort_by_score(out, scores, corpus_->ids());
  return out;
}

RankedList rank_query(const CorpusScorer& scorer, const QueryRecord& query, const Dataset& data,
                      const std::optional<std::vector<std::string>>& restrict_to) {
  const auto& corpus = scorer.corpus();
  const std::size_t ref = data.query_img().index_of(query.ref_image_id);
  const std::size_t txt = data.query_txt().index_of(query.text_embed_id);
  const std::size_t target = corpus.index_of(query.target_id);
  std::vector<double> q;
  try {
    q = fuse_query(scorer.params(), data.query_img().row(ref), data.query_txt().row(txt));
  } catch (const Error& e) {
    throw Error(e.kind(), "query '" + query.query_id + "': " + e.what());
  }
  const auto scores = scorer.score_all(q);

  std::vector<std::size_t> order;
  if (restrict_to) {
    std::vector<std::size_t> rows;
    std::unordered_set<std::size_t> seen;
    rows.reserve(restrict_to->size());
    for (const auto& id : *restrict_to) {
      const auto row = corpus.index_of(id);
      if (seen.insert(row).second) rows.push_back(row);
    }
    order = scorer.order(scores, std::span<const std::size_t>(rows));
  } else {
    order = scorer.order(scores);
  }

  RankedList out;
  out.query_id = query.query_id;
  out.entries.reserve(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.entries.push_back({corpus.id(order[i]), scores[order[i]]});
    if (order[i] == target) out.target_rank = i + 1;
  }
  return out;
}

RankedList rank_corpus(const AdapterParams& params, const QueryRecord& query, const Dataset& data,
                       const std::optional<std::vector<std::string>>& restrict_to) {
  CorpusScorer scorer(params, data.corpus());
  return rank_query(scorer, query, data, restrict_to);
}

std::vector<RankedList> rank_all(const AdapterParams& params, const Dataset& data,
                                 bool restrict_to_subsets, std::size_t threads,
                                 std::size_t chunk_rows) {
  CorpusScorer scorer(params, data.corpus(), chunk_rows, threads);
  const auto& queries = data.manifest().queries;
  std::vector<RankedList> out(queries.size());
  parallel_for(queries.size(), threads, [&](std::size_t i) {
    const auto& q = queries[i];
    if (restrict_to_subsets) {
      if (!q.subset_ids) {
        throw Error(ErrorKind::Validation, "query '" + q.query_id + "' has no subset_ids");
      }
      out[i] = rank_query(scorer, q, data, q.subset_ids);
    } else {
      out[i] = rank_query(scorer, q, data);
    }
  });
  return out;
}

std::vector<std::string> top_k(const RankedList& ranked, std::size_t k) {
  if (k == 0) throw Error(ErrorKind::Validation, "k must be at least 1");
  const std::size_t n = std::min(k, ranked.entries.size());
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(ranked.entries[i].image_id);
  return out;
}

}  // namespace qure
