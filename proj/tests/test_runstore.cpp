#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "xmodel/mock_backend.hpp"
#include "xmodel/runstore.hpp"

using namespace xmodel;
using namespace xmodel::store;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("xmodel-runstore-" + name);
  fs::remove_all(dir);
  return dir;
}

ScoredSequence sample_scored() {
  ScoredSequence s;
  s.prompt_text = "Q:";
  s.answer_text = " é 0.1";
  s.scorer_id = "v";
  s.token_scores = {{" é", -0.1234567890123456789, 0.6931471805599453, {2, 5}},
                    {" 0.1", -1e-300, std::nullopt, {5, 9}}};
  s.answer_token_count = 2;
  s.entropy_support = EntropySupport::top_k(5);
  return s;
}

RunManifest manifest(std::string id, std::string created) {
  RunManifest m;
  m.run_id = std::move(id);
  m.created_at = std::move(created);
  m.preset = "mmlu";
  m.signals = {"cmp"};
  return m;
}

}  // namespace

TEST(Digest, KnownSha256) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Digest, CanonicalFieldsAreUnambiguous) {
  EXPECT_NE(Canonical().field("ab").field("c").digest(), Canonical().field("a").field("bc").digest());
}

TEST(CacheKeyTest, StableAndContentAddressed) {
  const DecodeParams p{5, {"\n"}, 0.0};
  EXPECT_EQ(CacheKey::for_generate("m", "P", p).digest(), CacheKey::for_generate("m", "P", p).digest());
  EXPECT_NE(CacheKey::for_generate("m", "P", p).digest(), CacheKey::for_generate("m", "P", {6, {"\n"}, 0.0}).digest());
  EXPECT_NE(CacheKey::for_score("m", "P", "A").digest(), CacheKey::for_ptrue("m", "P", "A").digest());
  // Frozen value: keys must not change across builds or processes.
  EXPECT_EQ(CacheKey::for_score("m", "P", "A").digest().size(), 64u);
  CacheKey bad{"m", EntryKind::score, sha256_hex("P"), std::nullopt, "x"};
  EXPECT_THROW(bad.digest(), Error);
}

TEST(Store, RoundTripIsBitIdentical) {
  RunStore store(fresh_dir("roundtrip"));
  const auto key_s = CacheKey::for_score("v", "Q:", " é 0.1");
  EXPECT_FALSE(store.get(key_s));
  store.put(key_s, sample_scored());
  EXPECT_EQ(std::get<ScoredSequence>(*store.get(key_s)), sample_scored());

  GeneratedAnswer g{" B", FinishReason::length, std::vector<TokenScore>{{" B", -0.5, 1.25, {2, 4}}}};
  const auto key_g = CacheKey::for_generate("g", "Q:", {5, {}, 0.0});
  store.put(key_g, g);
  EXPECT_EQ(std::get<GeneratedAnswer>(*store.get(key_g)), g);

  const auto key_p = CacheKey::for_ptrue("v", "Q:", " B");
  store.put(key_p, 0.1 + 0.2);
  EXPECT_EQ(std::get<double>(*store.get(key_p)), 0.1 + 0.2);
}

TEST(Store, FlippedByteIsCorruptAndQuarantined) {
  RunStore store(fresh_dir("corrupt"));
  const auto key = CacheKey::for_score("v", "Q:", " é 0.1");
  store.put(key, sample_scored());
  const auto path = store.entry_path(key);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    char c;
    f.seekg(10);
    f.get(c);
    f.seekp(10);
    f.put(static_cast<char>(c ^ 0x01));
  }
  try {
    store.get(key);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::corrupt_entry);
  }
  EXPECT_FALSE(fs::exists(path));
  EXPECT_TRUE(fs::exists(fs::path(path).replace_extension(".corrupt")));
  EXPECT_FALSE(store.get(key));
}

TEST(Store, EntryFormatHasVersionByteAndFooter) {
  RunStore store(fresh_dir("format"));
  const auto key = CacheKey::for_ptrue("v", "Q", "A");
  store.put(key, 0.25);
  std::ifstream in(store.entry_path(key), std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(bytes[0], '\x01');
  EXPECT_EQ(bytes[bytes.size() - 65], '\n');
  EXPECT_EQ(bytes.substr(bytes.size() - 64), sha256_hex(std::string_view(bytes).substr(0, bytes.size() - 65)));
}

TEST(Store, ConcurrentIdenticalPutsAreIdempotent) {
  RunStore store(fresh_dir("concurrent"));
  const auto key = CacheKey::for_score("v", "Q:", " é 0.1");
  {
    std::vector<std::jthread> threads;
    for (int t = 0; t < 8; ++t) threads.emplace_back([&] {
      for (int i = 0; i < 20; ++i) store.put(key, sample_scored());
    });
  }
  EXPECT_EQ(std::get<ScoredSequence>(*store.get(key)), sample_scored());
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(store.entry_path(key).parent_path())) ++files;
  EXPECT_EQ(files, 1u);
}

TEST(Manifests, ListSortedAndAppendOnly) {
  RunStore store(fresh_dir("manifests"));
  EXPECT_TRUE(store.list_runs().empty());
  store.write_manifest(manifest("later", "2026-01-02T00:00:00.000Z"));
  store.write_manifest(manifest("earlier", "2026-01-01T00:00:00.000Z"));
  const auto runs = store.list_runs();
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_EQ(runs[0].run_id, "earlier");
  EXPECT_EQ(runs[1].run_id, "later");
  try {
    store.write_manifest(manifest("later", "2026-01-03T00:00:00.000Z"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::duplicate_run);
  }
  EXPECT_EQ(store.find_run("later")->created_at, "2026-01-02T00:00:00.000Z");
}

TEST(CachedBackendTest, SecondCallServedFromStore) {
  mock::Script s;
  s.answer_fn = [](std::string_view) { return std::string(" yes"); };
  s.distribution = mock::uniform(4);
  mock::ScriptedBackend inner(s);
  RunStore store(fresh_dir("cached"));
  CachedBackend cached(inner, store);
  const auto a = cached.score_sequence("Q:", " yes");
  const auto g = cached.generate("Q:", {5, {}, 0.0});
  EXPECT_EQ(inner.call_count(), 2u);

  CachedBackend again(inner, store);
  EXPECT_EQ(again.score_sequence("Q:", " yes"), a);
  EXPECT_EQ(again.generate("Q:", {5, {}, 0.0}), g);
  EXPECT_EQ(inner.call_count(), 2u);
  EXPECT_EQ(again.misses(), 0u);
}
