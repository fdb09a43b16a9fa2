// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <cstring>
#include <random>

#include <unistd.h>

#include "decap/error.hpp"
#include "decap/memory.hpp"
#include "decap/toy.hpp"
#include "oracles.hpp"

using namespace decap;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected decap::Error");
  return ErrorCode::kInvalidArgument;
}

// Encoder whose pre-normalization norm equals the sentence's word count.
class WordCountEncoder final : public TextEncoder {
 public:
  std::size_t dim() const override { return 4; }
  RawEmbedding encode(std::string_view text) const override {
    const double n = static_cast<double>(split_words(text).size());
    return {{n, 0.0, 0.0, 0.0}, n};
  }
};

std::string words(std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (i ? " w" : "w") + std::to_string(i);
  return s;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("decap_test_" + std::to_string(::getpid()) + "_" + name);
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("build_memory keeps corpus order and duplicates") {
  const ToyWorld world(16, 1);
  const ToyTextEncoder enc(world);
  const auto corpus = make_corpus({"a red cube", "a cube", "a red cube"});
  const auto m = build_memory(corpus, enc);
  REQUIRE(m.size() == 3);
  CHECK(m.dim() == 16);
  CHECK(m.text(0) == "a red cube");
  CHECK(m.text(1) == "a cube");
  CHECK(std::equal(m.row(0).begin(), m.row(0).end(), m.row(2).begin()));
  CHECK(m.prenorm(1) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(code_of([&] { build_memory(std::vector<CorpusEntry>{}, enc); }) == ErrorCode::kEmptyCorpus);
  CHECK(code_of([] { make_entry("   "); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("10k toy sentences are unit norm") {
  const ToyWorld world(16, 2);
  const ToyTextEncoder enc(world);
  const auto all = world.captions();
  std::mt19937_64 g(1);
  std::vector<std::string> texts;
  for (int i = 0; i < 10000; ++i) texts.push_back(all[g() % all.size()]);
  const auto m = build_memory(make_corpus(texts), enc);
  REQUIRE(m.size() == 10000);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto r = m.row(i);
    CHECK(std::abs(static_cast<double>(oracle::norm(oracle::Vec(r.begin(), r.end()))) - 1.0) < 1e-5);
  }
}

TEST_CASE("PrecomputedEncoder") {
  PrecomputedEncoder enc(2);
  enc.insert("x", {3.0, 4.0});
  CHECK(enc.encode("x").prenorm == 5.0);
  CHECK(code_of([&] { enc.encode("y"); }) == ErrorCode::kEncoderFailure);

  enc.insert("z", {0.0, 0.0});
  const auto corpus = make_corpus(std::vector<std::string>{"x", "z"});
  try {
    build_memory(corpus, enc);
    FAIL("expected decap::Error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEncoderFailure);
    CHECK(e.cause() == ErrorCode::kZeroVector);
  }
  try {
    build_memory(make_corpus(std::vector<std::string>{"y"}), enc);
  } catch (const Error& e) {
    CHECK(e.cause() == ErrorCode::kEncoderFailure);
  }
}

TEST_CASE("norm and length filter") {
  const WordCountEncoder enc;
  std::vector<CorpusEntry> corpus;
  for (std::size_t n = 1; n <= 20; ++n) corpus.push_back(make_entry(words(n)));

  SUBCASE("max_len 15 drops a 20-word sentence") {
    const auto kept = filter_by_norm_and_length(corpus, enc, 15, 1e9);
    CHECK(kept.size() == 14);
    for (const auto& e : kept) CHECK(e.length < 15);
  }
  SUBCASE("prenorm equals word count: max_prenorm 10 keeps up to 9 words") {
    const auto kept = filter_by_norm_and_length(corpus, enc, 100, 10.0);
    REQUIRE(kept.size() == 9);
    for (std::size_t i = 0; i < kept.size(); ++i) CHECK(kept[i].length == i + 1);
  }
  SUBCASE("empty corpus") { CHECK(filter_by_norm_and_length({}, enc, 15, 10.0).empty()); }
  SUBCASE("memory-level filter agrees") {
    const auto m = build_memory(corpus, enc);
    const auto fm = filter_memory_by_norm_and_length(m, 15, 10.0);
    CHECK(fm.size() == 9);
  }
  SUBCASE("bad parameters") {
    CHECK(code_of([&] { filter_by_norm_and_length(corpus, enc, 0, 10.0); }) == ErrorCode::kInvalidArgument);
    CHECK(code_of([&] { filter_by_norm_and_length(corpus, enc, 15, 0.0); }) == ErrorCode::kInvalidArgument);
  }
}

TEST_CASE("compaction trivial cases") {
  SupportMemory same(5);
  const auto e = normalize(std::vector<double>{1, 2, 3, 4, 5}).embedding;
  for (int i = 0; i < 10; ++i) same.add(e, 1.0, "s" + std::to_string(i));
  const auto [kept, rep] = compact_by_similarity(same, 0.8);
  CHECK(kept.size() == 1);
  CHECK(rep.retained == std::vector<std::size_t>{0});
  CHECK(rep.removed_cover.size() == 9);

  SupportMemory ortho(6);
  for (std::size_t i = 0; i < 6; ++i) {
    std::vector<double> v(6, 0.0);
    v[i] = 1.0;
    ortho.add(normalize(v).embedding, 1.0, "");
  }
  CHECK(compact_by_similarity(ortho, 0.8).first.size() == 6);
  CHECK(compact_by_similarity(same, 1.0).first.size() == 10);
  CHECK(code_of([&] { compact_by_similarity(same, 0.0); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([&] { compact_by_similarity(same, 1.5); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("compaction contract against brute force") {
  std::mt19937_64 g(4);
  // Low dimension so that many pairs exceed the threshold.
  const auto m = oracle::random_memory(g, 600, 4);
  const auto rows = oracle::rows_of(m);
  const double th = 0.9;
  const auto [kept, rep] = compact_by_similarity(m, th);
  CHECK(rep.input_count == 600);
  CHECK(rep.retained_count == kept.size());
  CHECK(rep.retained.size() + rep.removed_cover.size() == 600);
  for (std::size_t a = 0; a < rep.retained.size(); ++a) {
    for (std::size_t b = a + 1; b < rep.retained.size(); ++b) {
      CHECK(oracle::dot(rows[rep.retained[a]], rows[rep.retained[b]]) <= th);
    }
  }
  for (const auto& [removed, witness] : rep.removed_cover) {
    CHECK(witness < removed);
    CHECK(std::binary_search(rep.retained.begin(), rep.retained.end(), witness));
    CHECK(oracle::dot(rows[removed], rows[witness]) > th);
  }
  const auto again = compact_by_similarity(kept, th);
  CHECK(again.first == kept);
}

TEST_CASE("compaction of a clustered corpus lands near the cluster count") {
  std::mt19937_64 g(12);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t d = 64, centers = 200, copies = 20;
  SupportMemory m(d);
  for (std::size_t c = 0; c < centers; ++c) {
    const auto center = oracle::random_unit(g, d);
    for (std::size_t k = 0; k < copies; ++k) {
      std::vector<double> v(center);
      for (double& x : v) x += 0.05 * nd(g);
      m.add(normalize(v).embedding, 1.0, "");
    }
  }
  const auto kept = compact_by_similarity(m, 0.8).first;
  CHECK(kept.size() >= centers);
  CHECK(kept.size() <= 2 * centers);
}

TEST_CASE("sampling") {
  std::mt19937_64 g(13);
  const auto m = oracle::random_memory(g, 10000, 4);
  CHECK(sample_memory(m, 1.0, 5) == m);
  const auto a = sample_memory(m, 0.01, 5);
  CHECK(a.size() == 100);
  CHECK(sample_memory(m, 0.01, 5) == a);
  CHECK_FALSE(sample_memory(m, 0.01, 6) == a);
  CHECK(sample_memory(m, 0.00001, 1).size() == 1);
  CHECK(sample_memory(oracle::random_memory(g, 7, 4), 0.5, 1).size() == 4);
  CHECK(code_of([&] { sample_memory(m, 0.0, 1); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([&] { sample_memory(m, 1.1, 1); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("memory file round trip and errors") {
  std::mt19937_64 g(14);
  SupportMemory m(5);
  m.add(oracle::unit_embedding(g, 5), 2.5, "a red cube");
  m.add(oracle::unit_embedding(g, 5), 0.75, "");
  m.add(oracle::unit_embedding(g, 5), 1.0, "ein grüner Würfel \xF0\x9F\x8E\xB2");
  const auto path = temp_path("mem.dcap");
  save_memory(m, path);
  CHECK_FALSE(fs::exists(path.string() + ".tmp"));
  const auto back = load_memory(path);
  CHECK(back == m);
  CHECK(back.text(2) == m.text(2));
  CHECK(encode_memory(back) == file_bytes(path));
  CHECK(code_of([&] { load_memory(path, 6); }) == ErrorCode::kDimensionMismatch);

  auto bytes = file_bytes(path);
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    CHECK(code_of([&] { decode_memory(bytes); }) == ErrorCode::kBadMagic);
  }
  SUBCASE("unsupported version") {
    bytes[4] = 9;
    CHECK(code_of([&] { decode_memory(bytes); }) == ErrorCode::kVersionUnsupported);
  }
  SUBCASE("truncated mid-embedding") {
    bytes.resize(4 + 2 + 2 + 4 + 8 + 7 * 4);
    write_bytes(path, bytes);
    CHECK(code_of([&] { load_memory(path); }) == ErrorCode::kTruncated);
  }
  SUBCASE("truncated text") {
    bytes.pop_back();
    CHECK(code_of([&] { decode_memory(bytes); }) == ErrorCode::kTruncated);
  }
  SUBCASE("trailing bytes") {
    bytes.push_back(0);
    CHECK(code_of([&] { decode_memory(bytes); }) == ErrorCode::kCorruptData);
  }
  SUBCASE("missing file") {
    CHECK(code_of([&] { load_memory(temp_path("nope.dcap")); }) == ErrorCode::kIo);
  }
  fs::remove(path);
}

TEST_CASE("memory header layout is little-endian") {
  SupportMemory m(3);
  m.add(normalize(std::vector<double>{1.0, 0.0, 0.0}).embedding, 1.0, "ab");
  const auto b = encode_memory(m);
  REQUIRE(b.size() == 4 + 2 + 2 + 4 + 8 + 3 * 4 + 4 + 4 + 2);
  CHECK(std::string(b.begin(), b.begin() + 4) == "DCAP");
  CHECK(b[4] == 1);
  CHECK(b[5] == 0);
  CHECK(b[8] == 3);
  CHECK(b[12] == 1);
  // 1.0f = 0x3F800000
  CHECK(b[20] == 0x00);
  CHECK(b[23] == 0x3F);
  CHECK(b[b.size() - 6] == 2);
  CHECK(b[b.size() - 2] == 'a');
}

TEST_CASE("JSONL interchange") {
  const auto path = temp_path("recs.jsonl");
  std::vector<JsonlRecord> recs{{"a cube", std::vector<double>{3.0, 4.0}, std::nullopt},
                                {"ü", std::vector<double>{0.0, 2.0}, 2.0}};
  write_jsonl(recs, path);
  const auto back = read_jsonl(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].text == "a cube");
  CHECK(*back[0].embedding == std::vector<double>{3.0, 4.0});
  CHECK_FALSE(back[0].prenorm.has_value());
  CHECK(*back[1].prenorm == 2.0);

  const auto m = memory_from_jsonl(back);
  CHECK(m.size() == 2);
  CHECK(m.prenorm(0) == 5.0f);
  CHECK(m.row(0)[0] == doctest::Approx(0.6));
  CHECK(load_embeddings(path) == m);

  const auto dcap = temp_path("recs.dcap");
  save_memory(m, dcap);
  CHECK(load_embeddings(dcap) == m);

  CHECK(code_of([] { memory_from_jsonl({{"x", std::nullopt, std::nullopt}}); }) == ErrorCode::kCorruptData);
  {
    std::ofstream out(path);
    out << "{\"text\": 1}\n";
  }
  CHECK(code_of([&] { read_jsonl(path); }) == ErrorCode::kCorruptData);
  fs::remove(path);
  fs::remove(dcap);
}

TEST_CASE("rows near unit norm are renormalized on load, others rejected") {
  SupportMemory m(2);
  m.add(normalize(std::vector<double>{1.0, 0.0}).embedding, 1.0, "");
  auto b = encode_memory(m);
  // First float of the row: 1.0005f is within the loader's tolerance.
  const float near = 1.0005f, far = 1.1f;
  std::memcpy(b.data() + 20, &near, 4);
  const auto ok = decode_memory(b);
  CHECK(ok.row(0)[0] == 1.0f);
  std::memcpy(b.data() + 20, &far, 4);
  CHECK(code_of([&] { decode_memory(b); }) == ErrorCode::kCorruptData);
}
