#include "qure/embedding_store.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <unordered_set>

#include <json.hpp>

#include "byte_io.hpp"
#include "qure/error.hpp"

namespace qure {

using json = nlohmann::json;

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io: return "io";
    case ErrorKind::Format: return "format";
    case ErrorKind::Corruption: return "corruption";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Lookup: return "lookup";
    case ErrorKind::DegenerateQuery: return "degenerate_query";
    case ErrorKind::FallbackRequired: return "fallback_required";
    case ErrorKind::NonFinite: return "non_finite";
    case ErrorKind::Config: return "config";
    case ErrorKind::UndefinedRate: return "undefined_rate";
  }
  return "unknown";
}

namespace detail {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::Io, "read failed: " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open for writing " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// EmbeddingMatrix

EmbeddingMatrix::EmbeddingMatrix(std::uint32_t dim, std::vector<std::string> ids,
                                 std::vector<float> values)
    : dim_(dim), ids_(std::move(ids)), values_(std::move(values)) {
  if (values_.size() != ids_.size() * static_cast<std::size_t>(dim_)) {
    throw Error(ErrorKind::Validation,
                "matrix shape mismatch: " + std::to_string(ids_.size()) + " ids x dim " +
                    std::to_string(dim_) + " != " + std::to_string(values_.size()) + " values");
  }
  index_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) index_.emplace(ids_[i], i);  // first wins
}

std::optional<std::size_t> EmbeddingMatrix::find(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t EmbeddingMatrix::index_of(const std::string& id) const {
  if (auto i = find(id)) return *i;
  throw Error(ErrorKind::Lookup, "unknown id '" + id + "'");
}

std::string EmbeddingMatrix::check_invariants() const {
  if (dim_ == 0) return "dimension must be positive";
  if (index_.size() != ids_.size()) {
    std::unordered_set<std::string> seen;
    for (const auto& id : ids_) {
      if (!seen.insert(id).second) return "duplicate id '" + id + "'";
    }
  }
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (ids_[i].empty()) return "empty id at row " + std::to_string(i);
    if (ids_[i].size() > 0xFFFF) return "id longer than 65535 bytes at row " + std::to_string(i);
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      return "non-finite value at row " + std::to_string(i / dim_) + ", column " +
             std::to_string(i % dim_);
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Binary codec

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& matrix) {
  if (auto problem = matrix.check_invariants(); !problem.empty()) {
    throw Error(ErrorKind::Validation, problem);
  }
  detail::ByteWriter w;
  w.raw(std::string_view(kMagic, 4));
  w.u8(kFormatVersion);
  w.u8(kDtypeF32);
  w.u8(0);
  w.u8(0);
  w.u32(matrix.dim());
  w.u64(matrix.count());
  for (float v : matrix.values()) w.f32(v);
  for (const auto& id : matrix.ids()) {
    w.u16(static_cast<std::uint16_t>(id.size()));
    w.raw(id);
  }
  return std::move(w.bytes());
}

namespace {

struct Header {
  std::uint8_t dtype;
  std::uint32_t dim;
  std::uint64_t count;
};

Header read_header(detail::ByteReader& r, std::size_t total_size) {
  if (total_size < kHeaderSize) {
    throw Error(ErrorKind::Format, "file shorter than the 20-byte header");
  }
  if (r.str(4) != std::string_view(kMagic, 4)) throw Error(ErrorKind::Format, "bad magic");
  const auto version = r.u8();
  if (version != kFormatVersion) {
    throw Error(ErrorKind::Format, "unsupported version " + std::to_string(version));
  }
  Header h{};
  h.dtype = r.u8();
  if (r.u8() != 0 || r.u8() != 0) throw Error(ErrorKind::Format, "reserved header bytes not zero");
  h.dim = r.u32();
  h.count = r.u64();
  return h;
}

}  // namespace

EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const Header h = read_header(r, bytes.size());
  if (h.dtype != kDtypeF32) {
    throw Error(ErrorKind::Format, "unsupported dtype code " + std::to_string(h.dtype));
  }
  if (h.dim == 0) throw Error(ErrorKind::Format, "dimension must be positive");
  // count * dim * 4 must fit in what is left; checked without overflow.
  const std::uint64_t row_bytes = std::uint64_t{h.dim} * 4;
  if (h.count > r.remaining() / row_bytes) {
    throw Error(ErrorKind::Corruption, "declared " + std::to_string(h.count) + " rows of dim " +
                                           std::to_string(h.dim) + " exceed the payload");
  }
  const std::size_t n_values = static_cast<std::size_t>(h.count) * h.dim;
  std::vector<float> values(n_values);
  for (auto& v : values) v = r.f32();
  std::vector<std::string> ids;
  ids.reserve(static_cast<std::size_t>(h.count));
  for (std::uint64_t i = 0; i < h.count; ++i) {
    const auto len = r.u16();
    ids.push_back(r.str(len));
  }
  if (r.remaining() != 0) {
    throw Error(ErrorKind::Corruption, std::to_string(r.remaining()) + " trailing bytes after id table");
  }
  EmbeddingMatrix m(h.dim, std::move(ids), std::move(values));
  if (auto problem = m.check_invariants(); !problem.empty()) {
    throw Error(ErrorKind::Validation, problem);
  }
  return m;
}

void write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& destination) {
  const auto bytes = encode_embeddings(matrix);  // validates before touching the file
  detail::write_file(destination, bytes);
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& source) {
  const auto bytes = detail::read_file(source);
  return decode_embeddings(bytes);
}

// ---------------------------------------------------------------------------
// Manifest

QueryRecord parse_query_record(const std::string& json_line) {
  json j;
  try {
    j = json::parse(json_line);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Format, std::string("manifest line is not JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::Format, "manifest line is not a JSON object");
  auto field = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_string()) {
      throw Error(ErrorKind::Format, std::string("manifest record missing string field '") + key + "'");
    }
    return j[key].get<std::string>();
  };
  QueryRecord q;
  q.query_id = field("query_id");
  q.ref_image_id = field("ref_image_id");
  q.text_embed_id = field("text_embed_id");
  q.target_id = field("target_id");
  if (j.contains("subset_ids") && !j["subset_ids"].is_null()) {
    const auto& s = j["subset_ids"];
    if (!s.is_array()) throw Error(ErrorKind::Format, "subset_ids must be an array");
    std::vector<std::string> ids;
    for (const auto& e : s) {
      if (!e.is_string()) throw Error(ErrorKind::Format, "subset_ids entries must be strings");
      ids.push_back(e.get<std::string>());
    }
    q.subset_ids = std::move(ids);
  }
  return q;
}

std::string format_query_record(const QueryRecord& record) {
  json j;
  j["query_id"] = record.query_id;
  j["ref_image_id"] = record.ref_image_id;
  j["text_embed_id"] = record.text_embed_id;
  j["target_id"] = record.target_id;
  if (record.subset_ids) j["subset_ids"] = *record.subset_ids;
  return j.dump();
}

DatasetManifest load_manifest(const std::filesystem::path& source, std::string split) {
  std::ifstream in(source);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + source.string());
  DatasetManifest m;
  m.split = std::move(split);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      m.queries.push_back(parse_query_record(line));
    } catch (const Error& e) {
      throw Error(e.kind(), source.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return m;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& destination) {
  std::ofstream out(destination, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open for writing " + destination.string());
  for (const auto& q : manifest.queries) out << format_query_record(q) << '\n';
  if (!out) throw Error(ErrorKind::Io, "write failed: " + destination.string());
}

ValidationReport validate_manifest(const DatasetManifest& manifest, const EmbeddingMatrix& corpus,
                                   const EmbeddingMatrix& queries_img,
                                   const EmbeddingMatrix& queries_txt) {
  ValidationReport report;
  auto add = [&](std::string kind, std::string qid, std::string detail) {
    report.issues.push_back({std::move(kind), std::move(qid), std::move(detail)});
  };

  const std::pair<const char*, const EmbeddingMatrix*> matrices[] = {
      {"corpus", &corpus}, {"query images", &queries_img}, {"query texts", &queries_txt}};
  for (const auto& [name, m] : matrices) {
    if (auto problem = m->check_invariants(); !problem.empty()) {
      add("invalid matrix", "", std::string(name) + ": " + problem);
    }
  }
  if (queries_img.dim() != corpus.dim()) {
    add("dimension mismatch", "", "query image dim " + std::to_string(queries_img.dim()) +
                                      " != corpus dim " + std::to_string(corpus.dim()));
  }
  if (queries_txt.dim() != corpus.dim()) {
    add("dimension mismatch", "", "query text dim " + std::to_string(queries_txt.dim()) +
                                      " != corpus dim " + std::to_string(corpus.dim()));
  }
  if (corpus.count() < 2) {
    add("corpus too small", "", "need at least 2 corpus images, have " + std::to_string(corpus.count()));
  }
  if (manifest.queries.empty()) add("no queries", "", "manifest has no query records");

  std::unordered_set<std::string> corpus_listing(manifest.corpus_ids.begin(), manifest.corpus_ids.end());
  const bool has_listing = !manifest.corpus_ids.empty();
  if (has_listing) {
    for (const auto& id : manifest.corpus_ids) {
      if (!corpus.find(id)) add("dangling corpus id", "", "'" + id + "' listed but not in corpus file");
    }
  }
  auto in_corpus = [&](const std::string& id) {
    return corpus.find(id).has_value() && (!has_listing || corpus_listing.count(id) > 0);
  };

  std::unordered_set<std::string> seen_queries;
  for (const auto& q : manifest.queries) {
    if (q.query_id.empty()) add("empty query id", "", "");
    if (!seen_queries.insert(q.query_id).second) add("duplicate query id", q.query_id, "");
    if (!queries_img.find(q.ref_image_id)) {
      add("dangling reference", q.query_id, "'" + q.ref_image_id + "' not in query image file");
    }
    if (!queries_txt.find(q.text_embed_id)) {
      add("dangling text", q.query_id, "'" + q.text_embed_id + "' not in query text file");
    }
    if (!in_corpus(q.target_id)) {
      add("dangling target", q.query_id, "'" + q.target_id + "' not in corpus");
    }
    if (q.subset_ids) {
      bool has_target = false;
      for (const auto& s : *q.subset_ids) {
        if (s == q.target_id) has_target = true;
        if (!in_corpus(s)) add("dangling subset id", q.query_id, "'" + s + "' not in corpus");
      }
      if (!has_target) add("target outside subset", q.query_id, "'" + q.target_id + "'");
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(DatasetManifest manifest, EmbeddingMatrix corpus, EmbeddingMatrix query_img,
                 EmbeddingMatrix query_txt)
    : manifest_(std::move(manifest)),
      corpus_(std::move(corpus)),
      query_img_(std::move(query_img)),
      query_txt_(std::move(query_txt)) {
  if (manifest_.corpus_ids.empty()) manifest_.corpus_ids = corpus_.ids();
  const auto report = validate_manifest(manifest_, corpus_, query_img_, query_txt_);
  if (!report.empty()) {
    const auto& first = report.issues.front();
    std::string msg = first.kind;
    if (!first.query_id.empty()) msg += " (query " + first.query_id + ")";
    if (!first.detail.empty()) msg += ": " + first.detail;
    if (report.issues.size() > 1) msg += " [+" + std::to_string(report.issues.size() - 1) + " more]";
    throw Error(ErrorKind::Validation, msg);
  }
  resolved_.reserve(manifest_.queries.size());
  for (std::size_t i = 0; i < manifest_.queries.size(); ++i) {
    const auto& q = manifest_.queries[i];
    ResolvedQuery r;
    r.ref_row = query_img_.index_of(q.ref_image_id);
    r.text_row = query_txt_.index_of(q.text_embed_id);
    r.target_row = corpus_.index_of(q.target_id);
    if (q.subset_ids) {
      std::vector<std::size_t> rows;
      rows.reserve(q.subset_ids->size());
      for (const auto& s : *q.subset_ids) rows.push_back(corpus_.index_of(s));
      r.subset_rows = std::move(rows);
    }
    resolved_.push_back(std::move(r));
    query_index_.emplace(q.query_id, i);
  }
}

std::size_t Dataset::query_index(const std::string& query_id) const {
  auto it = query_index_.find(query_id);
  if (it == query_index_.end()) throw Error(ErrorKind::Lookup, "unknown query '" + query_id + "'");
  return it->second;
}

}  // namespace qure
