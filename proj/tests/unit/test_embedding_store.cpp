#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "qure/embedding_store.hpp"
#include "qure/error.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace qure;

namespace {

EmbeddingMatrix two_by_three() { return EmbeddingMatrix(3, {"a", "b"}, {1, 0, 0, 0, 1, 0}); }

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::Io;
}

}  // namespace

TEST_CASE("embedding file round trip") {
  testing::TempDir dir;
  const auto m = two_by_three();
  write_embeddings(m, dir / "m.qure");
  const auto back = load_embeddings(dir / "m.qure");
  CHECK(back == m);
  CHECK(back.index_of("b") == 1);
  CHECK(back.row(1)[1] == 1.0f);
}

TEST_CASE("round trip is bit exact for awkward floats") {
  const float denorm = std::numeric_limits<float>::denorm_min();
  EmbeddingMatrix m(4, {"x", "y"}, {denorm, -0.0f, 1e38f, 0.1f, -3.25f, 7e-39f, 1.0f / 3.0f, 2.0f});
  const auto bytes = encode_embeddings(m);
  const auto back = decode_embeddings(bytes);
  REQUIRE(back.values().size() == m.values().size());
  for (std::size_t i = 0; i < m.values().size(); ++i) {
    CHECK(std::memcmp(&back.values()[i], &m.values()[i], sizeof(float)) == 0);
  }
  CHECK(encode_embeddings(back) == bytes);
}

TEST_CASE("random matrices round trip") {
  SplitMix64 rng(11);
  for (int t = 0; t < 20; ++t) {
    const auto m = testing::random_matrix(rng, 1 + rng.below(16), rng.below(30), "id_");
    CHECK(decode_embeddings(encode_embeddings(m)) == m);
  }
}

TEST_CASE("empty matrix is a valid file") {
  testing::TempDir dir;
  EmbeddingMatrix m(8, {}, {});
  write_embeddings(m, dir / "e.qure");
  const auto back = load_embeddings(dir / "e.qure");
  CHECK(back.count() == 0);
  CHECK(back.dim() == 8);
  CHECK(std::filesystem::file_size(dir / "e.qure") == kHeaderSize);
}

TEST_CASE("header layout") {
  const auto bytes = encode_embeddings(two_by_three());
  REQUIRE(bytes.size() >= kHeaderSize);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "QURE");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == kDtypeF32);
  CHECK(bytes[8] == 3);
  CHECK(bytes[12] == 2);
  // first value 1.0f little endian
  CHECK(bytes[20] == 0x00);
  CHECK(bytes[23] == 0x3f);
}

TEST_CASE("NaN is rejected before anything is written") {
  testing::TempDir dir;
  EmbeddingMatrix m(3, {"a", "b"}, {std::nanf(""), 0, 0, 0, 1, 0});
  try {
    write_embeddings(m, dir / "nan.qure");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Validation);
    CHECK(std::string(e.what()).find("non-finite value") != std::string::npos);
  }
  CHECK_FALSE(std::filesystem::exists(dir / "nan.qure"));
}

TEST_CASE("duplicate ids are rejected") {
  EmbeddingMatrix m(1, {"a", "a"}, {1, 2});
  CHECK_FALSE(m.check_invariants().empty());
  CHECK(kind_of([&] { encode_embeddings(m); }) == ErrorKind::Validation);
}

TEST_CASE("bad magic is a format error") {
  auto bytes = encode_embeddings(two_by_three());
  bytes[0] = bytes[1] = bytes[2] = bytes[3] = 'X';
  CHECK(kind_of([&] { decode_embeddings(bytes); }) == ErrorKind::Format);
}

TEST_CASE("unsupported version is a format error") {
  auto bytes = encode_embeddings(two_by_three());
  bytes[4] = 9;
  CHECK(kind_of([&] { decode_embeddings(bytes); }) == ErrorKind::Format);
}

TEST_CASE("declared count larger than payload is corruption") {
  SplitMix64 rng(3);
  const auto m = testing::random_matrix(rng, 4, 9, "r");
  auto bytes = encode_embeddings(m);
  bytes[12] = 10;  // claim ten rows, payload holds nine
  CHECK(kind_of([&] { decode_embeddings(bytes); }) == ErrorKind::Corruption);
}

TEST_CASE("every truncation is detected") {
  const auto bytes = encode_embeddings(two_by_three());
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + n);
    const auto k = kind_of([&] { decode_embeddings(cut); });
    CHECK((k == ErrorKind::Corruption || k == ErrorKind::Format));
  }
}

TEST_CASE("trailing bytes are corruption") {
  auto bytes = encode_embeddings(two_by_three());
  bytes.push_back(0);
  CHECK(kind_of([&] { decode_embeddings(bytes); }) == ErrorKind::Corruption);
}

TEST_CASE("missing file is an io error") {
  CHECK(kind_of([] { load_embeddings("/nonexistent/dir/x.qure"); }) == ErrorKind::Io);
}

TEST_CASE("query record json") {
  QueryRecord r{"q1", "r1", "t1", "i1", std::vector<std::string>{"i1", "i2"}};
  CHECK(parse_query_record(format_query_record(r)) == r);
  QueryRecord bare{"q2", "r2", "t2", "i2", std::nullopt};
  CHECK(parse_query_record(format_query_record(bare)) == bare);
  CHECK(kind_of([] { parse_query_record(R"({"query_id":"q"})"); }) == ErrorKind::Format);
  CHECK(kind_of([] { parse_query_record("not json"); }) == ErrorKind::Format);
}

TEST_CASE("manifest file round trip") {
  testing::TempDir dir;
  DatasetManifest m;
  m.queries.push_back({"q1", "r1", "t1", "a", std::nullopt});
  m.queries.push_back({"q2", "r2", "t2", "b", std::vector<std::string>{"a", "b"}});
  write_manifest(m, dir / "m.jsonl");
  const auto back = load_manifest(dir / "m.jsonl");
  CHECK(back.queries == m.queries);
}

namespace {

struct Fixture {
  EmbeddingMatrix corpus{2, {"a", "b", "c"}, {1, 0, 0, 1, 1, 1}};
  EmbeddingMatrix qimg{2, {"r1"}, {1, 0}};
  EmbeddingMatrix qtxt{2, {"t1"}, {0, 1}};
  DatasetManifest manifest() const {
    DatasetManifest m;
    m.corpus_ids = corpus.ids();
    m.queries.push_back({"q1", "r1", "t1", "a", std::nullopt});
    return m;
  }
  bool has(const ValidationReport& r, const std::string& kind) const {
    for (const auto& i : r.issues) {
      if (i.kind == kind) return true;
    }
    return false;
  }
};

}  // namespace

TEST_CASE("validate_manifest") {
  Fixture f;
  SUBCASE("consistent") { CHECK(validate_manifest(f.manifest(), f.corpus, f.qimg, f.qtxt).empty()); }
  SUBCASE("dangling target") {
    auto m = f.manifest();
    m.queries[0].target_id = "zzz";
    CHECK(f.has(validate_manifest(m, f.corpus, f.qimg, f.qtxt), "dangling target"));
  }
  SUBCASE("target outside subset") {
    auto m = f.manifest();
    m.queries[0].subset_ids = std::vector<std::string>{"b", "c"};
    CHECK(f.has(validate_manifest(m, f.corpus, f.qimg, f.qtxt), "target outside subset"));
  }
  SUBCASE("dangling subset id") {
    auto m = f.manifest();
    m.queries[0].subset_ids = std::vector<std::string>{"a", "nope"};
    CHECK(f.has(validate_manifest(m, f.corpus, f.qimg, f.qtxt), "dangling subset id"));
  }
  SUBCASE("dangling reference and text") {
    auto m = f.manifest();
    m.queries[0].ref_image_id = "x";
    m.queries[0].text_embed_id = "y";
    const auto r = validate_manifest(m, f.corpus, f.qimg, f.qtxt);
    CHECK(f.has(r, "dangling reference"));
    CHECK(f.has(r, "dangling text"));
  }
  SUBCASE("duplicate query id") {
    auto m = f.manifest();
    m.queries.push_back(m.queries[0]);
    CHECK(f.has(validate_manifest(m, f.corpus, f.qimg, f.qtxt), "duplicate query id"));
  }
  SUBCASE("corpus too small") {
    EmbeddingMatrix one(2, {"a"}, {1, 0});
    auto m = f.manifest();
    m.corpus_ids = one.ids();
    CHECK(f.has(validate_manifest(m, one, f.qimg, f.qtxt), "corpus too small"));
  }
  SUBCASE("dimension mismatch") {
    EmbeddingMatrix wide(3, {"t1"}, {0, 1, 0});
    CHECK(f.has(validate_manifest(f.manifest(), f.corpus, f.qimg, wide), "dimension mismatch"));
  }
  SUBCASE("dangling corpus id listed in manifest") {
    auto m = f.manifest();
    m.corpus_ids.push_back("ghost");
    CHECK(f.has(validate_manifest(m, f.corpus, f.qimg, f.qtxt), "dangling corpus id"));
  }
}

TEST_CASE("an empty report means every lookup succeeds") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto data = testing::random_dataset(seed, 4, 12, 6);
    for (const auto& q : data.manifest().queries) {
      CHECK_NOTHROW(data.corpus().index_of(q.target_id));
      CHECK_NOTHROW(data.query_img().index_of(q.ref_image_id));
      CHECK_NOTHROW(data.query_txt().index_of(q.text_embed_id));
    }
  }
}

TEST_CASE("dataset rejects an invalid manifest") {
  Fixture f;
  auto m = f.manifest();
  m.queries[0].target_id = "zzz";
  CHECK(kind_of([&] { Dataset d(m, f.corpus, f.qimg, f.qtxt); }) == ErrorKind::Validation);
}
