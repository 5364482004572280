#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qure/embedding_store.hpp"

namespace qure {

inline constexpr double kMinLogInvTau = 0.0;                 // 1/tau >= 1
inline constexpr double kMaxLogInvTau = 4.605170185988092;   // ln 100
inline constexpr std::size_t kDefaultChunkRows = 8192;

// Trainable fusion head and image projection standing in for the pretrained
// query transformer. Weight matrices are row-major; w_fuse acts on the
// concatenation [x_img ; x_txt].
struct AdapterParams {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  std::vector<double> w_fuse;  // d_out x 2*d_in
  std::vector<double> b_fuse;  // d_out
  std::vector<double> w_img;   // d_out x d_in
  std::vector<double> b_img;   // d_out
  double log_inv_tau = 0.0;    // tau = exp(-log_inv_tau)

  static AdapterParams zeros(std::size_t d_in, std::size_t d_out);

  double inv_tau() const;
  bool shape_matches(const AdapterParams& other) const noexcept {
    return d_in == other.d_in && d_out == other.d_out;
  }

  // Visits the five parameter blocks in a fixed order with their names.
  template <typename F>
  void for_each_block(F&& f) {
    f(std::string_view("w_fuse"), std::span<double>(w_fuse));
    f(std::string_view("b_fuse"), std::span<double>(b_fuse));
    f(std::string_view("w_img"), std::span<double>(w_img));
    f(std::string_view("b_img"), std::span<double>(b_img));
    f(std::string_view("log_inv_tau"), std::span<double>(&log_inv_tau, 1));
  }
  template <typename F>
  void for_each_block(F&& f) const {
    f(std::string_view("w_fuse"), std::span<const double>(w_fuse));
    f(std::string_view("b_fuse"), std::span<const double>(b_fuse));
    f(std::string_view("w_img"), std::span<const double>(w_img));
    f(std::string_view("b_img"), std::span<const double>(b_img));
    f(std::string_view("log_inv_tau"), std::span<const double>(&log_inv_tau, 1));
  }

  friend bool operator==(const AdapterParams&, const AdapterParams&) = default;
};

// Normalized w_fuse * [x_img ; x_txt] + b_fuse. Throws DegenerateQuery when the
// projection has norm below 1e-12.
std::vector<double> fuse_query(const AdapterParams& params, std::span<const float> x_img,
                               std::span<const float> x_txt);

// Normalized w_img * v + b_img, with the same degenerate check.
std::vector<double> embed_image(const AdapterParams& params, std::span<const float> v);

// (q . v) / tau for unit vectors q and v.
double relevance_score(const AdapterParams& params, std::span<const double> q,
                       std::span<const double> v);

struct RankedEntry {
  std::string image_id;
  double score = 0.0;
  friend bool operator==(const RankedEntry&, const RankedEntry&) = default;
};

struct RankedList {
  std::string query_id;
  std::vector<RankedEntry> entries;       // descending score, ties by ascending id
  std::optional<std::size_t> target_rank;  // 1-based
  friend bool operator==(const RankedList&, const RankedList&) = default;
};

// Corpus rows projected and normalized once under a parameter snapshot, stored
// in chunks of `chunk_rows` rows. Scoring a query is a chunked dense
// matrix-vector product; each score is one fixed-order dot product, so the
// output does not depend on the chunk size.
class CorpusScorer {
 public:
  CorpusScorer(const AdapterParams& params, const EmbeddingMatrix& corpus,
               std::size_t chunk_rows = kDefaultChunkRows, std::size_t threads = 1);

  std::size_t size() const noexcept { return n_rows_; }
  const AdapterParams& params() const noexcept { return params_; }
  const EmbeddingMatrix& corpus() const noexcept { return *corpus_; }

  // Unit image embedding of a corpus row.
  std::span<const double> embedding(std::size_t row) const;

  // Relevance score of every corpus row for a unit query vector.
  std::vector<double> score_all(std::span<const double> query) const;

  // Row indices ordered by descending score, ties broken by ascending image id.
  // When `rows` is given only those rows are ranked.
  std::vector<std::size_t> order(std::span<const double> scores,
                                 std::optional<std::span<const std::size_t>> rows = std::nullopt) const;

 private:
  AdapterParams params_;
  const EmbeddingMatrix* corpus_;
  std::size_t chunk_rows_;
  std::size_t n_rows_;
  std::vector<std::vector<double>> chunks_;  // each chunk: rows x d_out
};

// Sorts `rows` by descending score with ascending-id tie break.
void sort_by_score(std::vector<std::size_t>& rows, std::span<const double> scores,
                   const std::vector<std::string>& ids);

// Ranks the corpus (or `restrict_to`, a subset of corpus ids) for one query.
RankedList rank_corpus(const AdapterParams& params, const QueryRecord& query,
                       const Dataset& data,
                       const std::optional<std::vector<std::string>>& restrict_to = std::nullopt);

// Same as rank_corpus but reusing precomputed corpus embeddings.
RankedList rank_query(const CorpusScorer& scorer, const QueryRecord& query, const Dataset& data,
                      const std::optional<std::vector<std::string>>& restrict_to = std::nullopt);

// Ranks every manifest query in parallel; output order follows the manifest.
std::vector<RankedList> rank_all(const AdapterParams& params, const Dataset& data,
                                 bool restrict_to_subsets, std::size_t threads,
                                 std::size_t chunk_rows = kDefaultChunkRows);

// First min(k, |entries|) ids; k must be positive.
std::vector<std::string> top_k(const RankedList& ranked, std::size_t k);

}  // namespace qure
