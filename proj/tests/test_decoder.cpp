// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include <unistd.h>

#include "decap/decoder.hpp"
#include "decap/error.hpp"
#include "decap/strategies.hpp"
#include "decap/toy.hpp"

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

using Mat = std::vector<std::vector<double>>;

// Straightforward forward pass written from the architecture description:
// rows are [adapter(prefix), tok(bos), tok(w1), ...] plus learned positions;
// each block is x += attn(LN(x)); x += mlp(LN(x)); logits = LN(x) W + b.
struct Naive {
  const DecoderModel& m;
  std::size_t w, ffn, heads;

  explicit Naive(const DecoderModel& model)
      : m(model), w(model.shape().width), ffn(model.shape().ffn), heads(model.shape().heads) {}

  double at(const std::string& name, std::size_t i) const { return m.tensor(name)[i]; }

  Mat layer_norm(const Mat& x, const std::string& p) const {
    Mat y = x;
    for (auto& row : y) {
      double mean = 0, var = 0;
      for (double v : row) mean += v;
      mean /= static_cast<double>(row.size());
      for (double v : row) var += (v - mean) * (v - mean);
      var /= static_cast<double>(row.size());
      for (std::size_t j = 0; j < row.size(); ++j) {
        row[j] = (row[j] - mean) / std::sqrt(var + 1e-5) * at(p + ".g", j) + at(p + ".b", j);
      }
    }
    return y;
  }

  Mat affine(const Mat& x, const std::string& p, std::size_t in, std::size_t out) const {
    Mat y(x.size(), std::vector<double>(out, 0.0));
    for (std::size_t r = 0; r < x.size(); ++r) {
      for (std::size_t o = 0; o < out; ++o) {
        double s = at(p + ".b", o);
        for (std::size_t i = 0; i < in; ++i) s += x[r][i] * at(p + ".w", i * out + o);
        y[r][o] = s;
      }
    }
    return y;
  }

  static double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
  }

  Mat logits(std::span<const double> prefix, const std::vector<int>& input) const {
    const std::size_t rows = input.size() + 1, d = prefix.size();
    Mat x(rows, std::vector<double>(w, 0.0));
    for (std::size_t j = 0; j < w; ++j) {
      double s = at("prefix.b", j);
      for (std::size_t i = 0; i < d; ++i) s += prefix[i] * at("prefix.w", i * w + j);
      x[0][j] = s;
    }
    for (std::size_t r = 1; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) x[r][j] = at("tok_emb", static_cast<std::size_t>(input[r - 1]) * w + j);
    }
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) x[r][j] += at("pos_emb", r * w + j);
    }
    const std::size_t dh = w / heads;
    for (std::size_t l = 0; l < m.shape().layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      const Mat qkv = affine(layer_norm(x, p + "ln1"), p + "attn.qkv", w, 3 * w);
      Mat o(rows, std::vector<double>(w, 0.0));
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < rows; ++i) {
          std::vector<double> s(i + 1);
          double mx = -1e300;
          for (std::size_t j = 0; j <= i; ++j) {
            double dotp = 0;
            for (std::size_t k = 0; k < dh; ++k) dotp += qkv[i][h * dh + k] * qkv[j][w + h * dh + k];
            s[j] = dotp / std::sqrt(static_cast<double>(dh));
            mx = std::max(mx, s[j]);
          }
          double z = 0;
          for (double& v : s) z += v = std::exp(v - mx);
          for (std::size_t j = 0; j <= i; ++j) {
            for (std::size_t k = 0; k < dh; ++k) o[i][h * dh + k] += s[j] / z * qkv[j][2 * w + h * dh + k];
          }
        }
      }
      const Mat a = affine(o, p + "attn.out", w, w);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) x[r][j] += a[r][j];
      }
      Mat u = affine(layer_norm(x, p + "ln2"), p + "mlp.fc", w, ffn);
      for (auto& row : u) {
        for (double& v : row) v = gelu(v);
      }
      const Mat f = affine(u, p + "mlp.proj", ffn, w);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) x[r][j] += f[r][j];
      }
    }
    return affine(layer_norm(x, "lnf"), "head", w, m.vocab().size());
  }

  // Mean over positions of the smoothed cross-entropy.
  double loss(std::span<const double> prefix, const std::vector<int>& tokens, double eps) const {
    std::vector<int> input{Vocab::kBos};
    input.insert(input.end(), tokens.begin(), tokens.end());
    const Mat lg = logits(prefix, input);
    const double v = static_cast<double>(m.vocab().size());
    double total = 0;
    for (std::size_t t = 0; t <= tokens.size(); ++t) {
      const auto& row = lg[t + 1];
      double mx = -1e300;
      for (double x : row) mx = std::max(mx, x);
      double z = 0;
      for (double x : row) z += std::exp(x - mx);
      const double lse = mx + std::log(z);
      const int target = t < tokens.size() ? tokens[t] : Vocab::kEos;
      double sum_logp = 0;
      for (double x : row) sum_logp += x - lse;
      total += -(1 - eps) * (row[static_cast<std::size_t>(target)] - lse) - eps / v * sum_logp;
    }
    return total / static_cast<double>(tokens.size() + 1);
  }
};

Vocab numbered_vocab(std::size_t words) {
  std::vector<std::string> w;
  for (std::size_t i = 0; i < words; ++i) w.push_back("w" + std::string(1, static_cast<char>('a' + i)));
  return Vocab(w);
}

std::vector<double> random_prefix(std::mt19937_64& g, std::size_t d) {
  std::normal_distribution<double> n(0, 1);
  std::vector<double> v(d);
  for (double& x : v) x = n(g);
  const auto e = normalize(v).embedding;
  return {e.values().begin(), e.values().end()};
}

DecoderModel tiny_model(std::uint64_t seed, double scale) {
  DecoderShape s{8, 16, 2, 2, 32, 8};
  DecoderModel m(numbered_vocab(17), s, seed);
  // Larger weights than the default init so every gradient is well above
  // finite-difference noise.
  std::mt19937_64 g(seed);
  std::normal_distribution<double> n(0, scale);
  for (double& p : m.parameters()) p += n(g);
  return m;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("decap_dec_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST_CASE("vocabulary") {
  const Vocab v({"the", "a", "cube", "a"});
  CHECK(v.size() == 6);
  CHECK(v.token(0) == kPadToken);
  CHECK(v.token(1) == kBosToken);
  CHECK(v.token(2) == kEosToken);
  CHECK(v.id("a") == 3);
  CHECK(v.id("cube") == 4);
  CHECK(v.encode("a cube") == std::vector<int>{3, 4});
  CHECK(v.decode(std::vector<int>{1, 3, 4, 2, 0}) == "a cube");
  CHECK_FALSE(v.find("sphere").has_value());
  CHECK(code_of([&] { v.id("sphere"); }) == ErrorCode::kUnknownToken);
  CHECK(Vocab::from_pairs(v.pairs()) == v);
  CHECK(code_of([] { Vocab::from_pairs({{"x", 0}, {"y", 1}, {"z", 2}}); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("a model with zero output weights scores ln V per position") {
  DecoderModel m(numbered_vocab(10), DecoderShape{6, 16, 1, 2, 32, 8}, 1);
  for (double& x : m.tensor("head.w")) x = 0.0;
  std::mt19937_64 g(1);
  const auto p = normalize(random_prefix(g, 6)).embedding;
  const std::vector<int> toks{3, 4, 5};
  for (double eps : {0.0, 0.1, 0.5}) {
    CHECK(recons_loss(m, p, toks, eps) == doctest::Approx(std::log(13.0)).epsilon(1e-12));
  }
}

TEST_CASE("loss matches the naive forward pass") {
  std::mt19937_64 g(2);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto m = tiny_model(seed, 0.2);
    const Naive naive(m);
    for (int trial = 0; trial < 3; ++trial) {
      const auto prefix = random_prefix(g, 8);
      std::vector<int> toks;
      for (std::size_t k = 0; k < 1 + g() % 8; ++k) toks.push_back(3 + static_cast<int>(g() % 17));
      for (double eps : {0.0, 0.1}) {
        const double got = recons_loss(m, normalize(prefix).embedding, toks, eps);
        CHECK(got == doctest::Approx(naive.loss(prefix, toks, eps)).epsilon(1e-9));
        CHECK(std::abs(got - naive.loss(prefix, toks, eps)) < 1e-6);
      }
      // Next-token distribution is the softmax of the same logits.
      std::vector<int> input{Vocab::kBos};
      input.insert(input.end(), toks.begin(), toks.end() - 1);
      const auto lg = naive.logits(prefix, input).back();
      const auto p = m.next_token_distribution(prefix, std::vector<int>(toks.begin(), toks.end() - 1));
      double mx = *std::max_element(lg.begin(), lg.end()), z = 0, sum = 0;
      for (double x : lg) z += std::exp(x - mx);
      for (std::size_t k = 0; k < p.size(); ++k) {
        CHECK(std::abs(p[k] - std::exp(lg[k] - mx) / z) < 1e-12);
        sum += p[k];
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("analytic gradient matches central differences") {
  auto m = tiny_model(7, 0.3);
  std::mt19937_64 g(3);
  std::vector<std::vector<double>> prefixes;
  std::vector<std::vector<int>> toks{{3, 4, 5, 6}, {7}, {8, 9, 10, 11, 12, 13}};
  for (std::size_t i = 0; i < toks.size(); ++i) prefixes.push_back(random_prefix(g, 8));
  std::vector<Example> batch;
  for (std::size_t i = 0; i < toks.size(); ++i) batch.push_back({prefixes[i], toks[i]});
  const double eps = 0.1;
  std::vector<double> grad;
  m.loss_and_gradient(batch, eps, &grad);

  const double h = 1e-4;
  auto params = m.parameters();
  std::size_t checked = 0, failed = 0;
  for (const auto& t : m.tensors()) {
    for (std::size_t i = 0; i < t.size; ++i) {
      const std::size_t k = t.offset + i;
      const double orig = params[k];
      params[k] = orig + h;
      const double up = m.loss_and_gradient(batch, eps, nullptr);
      params[k] = orig - h;
      const double down = m.loss_and_gradient(batch, eps, nullptr);
      params[k] = orig;
      const double fd = (up - down) / (2 * h);
      const double scale = std::max({std::abs(fd), std::abs(grad[k]), 1e-6});
      ++checked;
      if (std::abs(fd - grad[k]) / scale > 1e-3) {
        ++failed;
        MESSAGE(t.name << "[" << i << "] analytic " << grad[k] << " numeric " << fd);
      }
    }
  }
  CHECK(checked == m.parameters().size());
  CHECK(failed == 0);
}

TEST_CASE("example validation") {
  const auto m = tiny_model(1, 0.01);
  std::mt19937_64 g(4);
  const auto p = normalize(random_prefix(g, 8)).embedding;
  CHECK(code_of([&] { recons_loss(m, p, std::vector<int>(9, 3)); }) == ErrorCode::kSequenceTooLong);
  CHECK(code_of([&] { recons_loss(m, p, std::vector<int>{99}); }) == ErrorCode::kUnknownToken);
  CHECK(code_of([&] { recons_loss(m, p, std::vector<int>{}); }) == ErrorCode::kEmptyInput);
  const auto wrong = normalize(std::vector<double>{1.0, 0.0}).embedding;
  CHECK(code_of([&] { recons_loss(m, wrong, std::vector<int>{3}); }) == ErrorCode::kDimensionMismatch);
  CHECK(code_of([&] { m.tensor("nope"); }) == ErrorCode::kInvalidArgument);
  CHECK(code_of([] { DecoderShape{8, 15, 1, 2, 8, 8}.validate(); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("zero training steps leave parameters unchanged") {
  const ToyWorld world(16, 1);
  const ToyTextEncoder enc(world);
  const DecoderModel m(Vocab(world.words()), DecoderShape::toy(16), 3);
  TrainConfig cfg = TrainConfig::toy();
  cfg.steps = 0;
  CHECK(train(m, make_corpus(world.captions()), enc, cfg) == m);
  CHECK(code_of([&] { train(m, {}, enc, cfg); }) == ErrorCode::kEmptyCorpus);
  const ToyWorld other(8, 1);
  const ToyTextEncoder wrong(other);
  CHECK(code_of([&] { train(m, make_corpus({"a cube"}), wrong, cfg); }) == ErrorCode::kDimensionMismatch);
}

TEST_CASE("untrained decoding rules") {
  const auto m = tiny_model(5, 0.5);
  std::mt19937_64 g(6);
  const auto p = normalize(random_prefix(g, 8)).embedding;
  CHECK(decode_greedy(m, p, {}, 0).empty());
  const auto a = decode_greedy(m, p);
  CHECK(a == decode_greedy(m, p));
  CHECK(a.size() <= m.shape().max_len);
  for (int t : a) {
    CHECK(t != Vocab::kPad);
    CHECK(t != Vocab::kBos);
    CHECK(t != Vocab::kEos);
  }
  CHECK(decode_greedy(m, p, {}, 3).size() <= 3);
  const std::vector<int> prompt{4, 5};
  const auto b = decode_greedy(m, p, prompt);
  REQUIRE(b.size() >= 2);
  CHECK(b[0] == 4);
  CHECK(b[1] == 5);
  CHECK(decode_greedy(m, p, prompt, 1) == std::vector<int>{4});
  CHECK(code_of([&] { decode_greedy(m, p, std::vector<int>{99}); }) == ErrorCode::kUnknownToken);
}

TEST_CASE("next-token distributions sum to one") {
  std::mt19937_64 g(12);
  for (double scale : {0.01, 0.5, 3.0}) {
    const auto m = tiny_model(13, scale);
    const auto p = normalize(random_prefix(g, 8)).embedding;
    std::vector<int> ctx;
    for (int step = 0; step < 6; ++step) {
      const auto dist = m.next_token_distribution(p.values(), ctx);
      REQUIRE(dist.size() == m.vocab().size());
      long double sum = 0;
      for (double x : dist) {
        CHECK(x >= 0.0);
        sum += x;
      }
      CHECK(std::abs(static_cast<double>(sum) - 1.0) <= 1e-6);
      ctx.push_back(4 + step);
    }
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto m = tiny_model(9, 0.1);
  auto rounded = m;
  rounded.round_to_f32();
  const auto path = temp_path("model.dcpm");
  save_model(rounded, path);
  CHECK_FALSE(fs::exists(path.string() + ".tmp"));
  const auto back = load_model(path);
  CHECK(back == rounded);
  CHECK(encode_model(back) == encode_model(rounded));

  auto bytes = encode_model(rounded);
  SUBCASE("bad magic") {
    bytes[1] = 'X';
    CHECK(code_of([&] { decode_model(bytes); }) == ErrorCode::kBadMagic);
  }
  SUBCASE("version") {
    bytes[4] = 2;
    CHECK(code_of([&] { decode_model(bytes); }) == ErrorCode::kVersionUnsupported);
  }
  SUBCASE("truncated") {
    bytes.resize(bytes.size() / 2);
    CHECK(code_of([&] { decode_model(bytes); }) == ErrorCode::kTruncated);
  }
  SUBCASE("trailing") {
    bytes.push_back(1);
    CHECK(code_of([&] { decode_model(bytes); }) == ErrorCode::kCorruptData);
  }
  fs::remove(path);
}

// One trained model shared by the remaining cases.
struct Trained {
  ToyWorld world{16, 21};
  ToyTextEncoder enc{world};
  std::vector<std::string> captions;
  TrainLog log;
  DecoderModel model;

  static std::vector<std::string> pick() {
    const ToyWorld w(16, 21);
    auto all = w.captions();
    std::vector<std::string> out{"a red cube"};
    std::mt19937_64 g(21);
    std::shuffle(all.begin(), all.end(), g);
    for (const auto& c : all) {
      if (out.size() == 100) break;
      if (c != "a red cube") out.push_back(c);
    }
    return out;
  }

  Trained() : captions(pick()), model(Vocab(world.words()), DecoderShape::toy(16), 21) {
    TrainConfig cfg = TrainConfig::toy();
    cfg.steps = 2000;
    cfg.seed = 21;
    model = train(model, make_corpus(captions), enc, cfg, &log);
  }

  Embedding text(const std::string& c) const { return normalize(world.encode_text(c).values).embedding; }
};

const Trained& trained() {
  static const Trained t;
  return t;
}

TEST_CASE("training on 100 templated captions reconstructs at least 95") {
  const auto& t = trained();
  std::size_t ok = 0;
  for (const auto& c : t.captions) ok += t.model.vocab().decode(decode_greedy(t.model, t.text(c))) == c ? 1 : 0;
  MESSAGE("exact reconstructions: " << ok << "/100");
  CHECK(ok >= 95);
  CHECK(t.model.vocab().decode(decode_greedy(t.model, t.text("a red cube"))) == "a red cube");
}

TEST_CASE("epoch losses decrease and stay above the smoothing floor") {
  const auto& t = trained();
  const auto& e = t.log.epoch_loss;
  REQUIRE(e.size() > 10);
  double best = e.front();
  std::size_t rises = 0;
  for (double x : e) {
    if (x > best + 0.02) ++rises;
    best = std::min(best, x);
  }
  CHECK(rises == 0);
  CHECK(e.back() < e.front());

  const double eps = 0.1, v = static_cast<double>(t.model.vocab().size());
  const double hi = 1 - eps + eps / v, lo = eps / v;
  const double floor = -hi * std::log(hi) - (v - 1) * lo * std::log(lo);
  for (const auto& c : t.captions) {
    CHECK(recons_loss(t.model, t.text(c), t.model.vocab().encode(c), eps) >= floor - 1e-9);
  }
  CHECK(e.back() < floor + 0.05);
}

TEST_CASE("trained decoding: determinism, prefix sensitivity, prompts") {
  const auto& t = trained();
  const auto p = t.text("a red cube");
  CHECK(decode_greedy(t.model, p) == decode_greedy(t.model, p));
  CHECK_FALSE(decode_greedy(t.model, p) == decode_greedy(t.model, t.text("a blue ring")));

  // Well-separated prefixes: every training pair with cosine below 0.2.
  std::size_t pairs = 0, differ = 0;
  for (std::size_t i = 0; i < t.captions.size(); ++i) {
    for (std::size_t j = i + 1; j < t.captions.size(); j += 7) {
      const auto a = t.text(t.captions[i]), b = t.text(t.captions[j]);
      if (cosine(a, b) >= 0.2) continue;
      ++pairs;
      differ += decode_greedy(t.model, a) != decode_greedy(t.model, b) ? 1 : 0;
    }
  }
  REQUIRE(pairs > 50);
  CHECK(differ == pairs);

  // Forcing what greedy decoding would emit anyway changes nothing.
  const auto free = decode_greedy(t.model, p);
  const std::vector<int> head(free.begin(), free.begin() + 2);
  CHECK(decode_greedy(t.model, p, head) == free);

  // A different prompt changes the continuation but the prefix stays the same.
  const auto before = p.values();
  const auto prompted = decode_greedy(t.model, p, t.model.vocab().encode("a blue"));
  CHECK(std::vector<int>(prompted.begin(), prompted.begin() + 2) == t.model.vocab().encode("a blue"));
  CHECK(prompted != free);
  CHECK(std::equal(before.begin(), before.end(), p.values().begin()));
}

TEST_CASE("reconstruct_corpus inverts the memory") {
  const auto& t = trained();
  const auto memory = build_memory(make_corpus(t.captions), t.enc);
  const auto rec = reconstruct_corpus(t.model, memory);
  REQUIRE(rec.size() == memory.size());
  std::size_t same = 0;
  for (std::size_t i = 0; i < rec.size(); ++i) {
    same += rec[i].text == memory.text(i) ? 1 : 0;
    CHECK(rec[i].length == rec[i].tokens.size());
  }
  CHECK(same >= 95);
  const auto prompt = t.model.vocab().encode("a");
  const auto rp = reconstruct_corpus(t.model, memory, prompt);
  for (const auto& e : rp) CHECK(e.tokens.front() == prompt.front());
}

TEST_CASE("rebuilding the memory from reconstructions changes nearest-neighbour captions") {
  const auto& t = trained();
  DecoderModel weak(Vocab(t.world.words()), DecoderShape::toy(16), 3);
  TrainConfig cfg = TrainConfig::toy();
  cfg.steps = 60;
  cfg.seed = 3;
  weak = train(weak, make_corpus(t.captions), t.enc, cfg);

  const auto memory = build_memory(make_corpus(t.captions), t.enc);
  const auto rec = reconstruct_corpus(weak, memory);
  std::size_t exact = 0;
  std::vector<std::string> rebuilt;
  for (std::size_t i = 0; i < rec.size(); ++i) {
    exact += rec[i].text == memory.text(i) ? 1 : 0;
    try {
      t.world.parse(rec[i].text);
      rebuilt.push_back(rec[i].text);
    } catch (const Error&) {
    }
  }
  MESSAGE("reconstruction exact match: " << exact << "/" << rec.size() << ", parseable " << rebuilt.size());
  REQUIRE_FALSE(rebuilt.empty());
  CHECK(exact < rec.size());
  const auto memory_star = build_memory(make_corpus(rebuilt), t.enc);

  const ToyImageEncoder images(t.world, GapSpec{0.5, 0.3, 0.05, 1});
  const StrategyChoice nnd{Strategy::kNearestNeighbor};
  std::size_t changed = 0;
  for (const auto& c : t.captions) {
    const auto q = images.encode(c).embedding;
    changed += caption(q, nnd, &t.model, &memory) != caption(q, nnd, &t.model, &memory_star) ? 1 : 0;
  }
  MESSAGE("NND captions changed: " << changed << "/" << t.captions.size());
  CHECK(changed > 0);
}

TEST_CASE("trained checkpoint round trip") {
  const auto& t = trained();
  const auto path = temp_path("trained.dcpm");
  save_model(t.model, path);
  const auto back = load_model(path);
  CHECK(back == t.model);
  const auto p = t.text("a green cone under the chair");
  CHECK(decode_greedy(back, p) == decode_greedy(t.model, p));
  fs::remove(path);
}
