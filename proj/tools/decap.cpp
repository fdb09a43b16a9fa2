// SPDX-License-Identifier: Apache-2.0
//
// decap: command-line front end.
//
//   simulate      toy corpus + text and image embedding clouds
//   build-memory  corpus -> support memory file
//   compact       similarity compaction of a memory file
//   sample        random subset of a memory file
//   train         fit a decoder to a frozen encoder
//   decode        caption query embeddings
//   eval          exact match and BLEU of hypotheses against references
//   bench         per-stage timings
//
// Exit codes: 0 ok, 2 usage, 3 data/format, 4 numeric failure.
#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "decap/decoder.hpp"
#include "decap/embedding.hpp"
#include "decap/error.hpp"
#include "decap/memory.hpp"
#include "decap/metrics.hpp"
#include "decap/strategies.hpp"
#include "decap/toy.hpp"

namespace fs = std::filesystem;
using namespace decap;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kKOutOfRange:
      return kExitUsage;
    case ErrorCode::kZeroVector:
    case ErrorCode::kDegenerateCombination:
    case ErrorCode::kNonFinite:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

unsigned default_thread_count() { return std::max(1u, std::thread::hardware_concurrency()); }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool looks_like_jsonl(const fs::path& path) {
  if (path.extension() == ".jsonl" || path.extension() == ".json") return true;
  const std::string body = read_text(path);
  const auto p = body.find_first_not_of(" \t\r\n");
  return p != std::string::npos && body[p] == '{';
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(line);
  }
  return out;
}

// Captions from either a plain text file (one per line) or JSONL records.
std::vector<std::string> read_captions(const fs::path& path) {
  if (!looks_like_jsonl(path)) return read_lines(path);
  std::vector<std::string> out;
  for (auto& r : read_jsonl(path)) out.push_back(std::move(r.text));
  return out;
}

// Text output to a file (atomically) or stdout when the path is empty or "-".
void emit(const std::string& body, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << body;
    return;
  }
  const fs::path tmp = fs::path(path).string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + tmp.string());
    out << body;
    if (!out.flush()) throw Error(ErrorCode::kIo, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot rename to " + path + ": " + ec.message());
}

GapSpec parse_gap(const std::string& s, std::uint64_t seed) {
  GapSpec g;
  g.seed = seed;
  char c1 = 0, c2 = 0;
  std::istringstream in(s);
  if (!(in >> g.rotation_angle >> c1 >> g.offset_scale >> c2 >> g.noise_sigma) || c1 != ',' || c2 != ',' ||
      !(in >> std::ws).eof()) {
    throw UsageError("--gap expects ROTATION,OFFSET,NOISE, got '" + s + "'");
  }
  g.validate();
  return g;
}

// Encoder selection shared by build-memory and train.
struct EncoderSetup {
  std::unique_ptr<ToyWorld> world;
  std::unique_ptr<TextEncoder> encoder;
  std::vector<std::string> captions;
};

EncoderSetup make_encoder(const std::string& kind, const fs::path& input, std::size_t dim,
                          std::uint64_t world_seed) {
  EncoderSetup s;
  if (kind == "toy") {
    s.world = std::make_unique<ToyWorld>(dim, world_seed);
    s.encoder = std::make_unique<ToyTextEncoder>(*s.world);
    s.captions = read_captions(input);
    return s;
  }
  if (kind == "file") {
    if (!looks_like_jsonl(input)) {
      throw UsageError("--encoder file needs JSONL input carrying embeddings");
    }
    const auto records = read_jsonl(input);
    if (records.empty()) throw Error(ErrorCode::kEmptyCorpus, input.string() + " has no records");
    if (!records.front().embedding) throw Error(ErrorCode::kCorruptData, "JSONL record lacks embedding");
    auto enc = std::make_unique<PrecomputedEncoder>(records.front().embedding->size());
    for (const auto& r : records) {
      if (!r.embedding) throw Error(ErrorCode::kCorruptData, "JSONL record lacks embedding");
      enc->insert(r.text, *r.embedding);
      s.captions.push_back(r.text);
    }
    s.encoder = std::move(enc);
    return s;
  }
  throw UsageError("--encoder must be toy or file");
}

std::vector<std::string> all_words(const std::vector<std::string>& captions) {
  std::vector<std::string> words;
  for (const auto& c : captions) {
    for (auto& w : split_words(c)) words.push_back(std::move(w));
  }
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return words;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decap: text-only trained caption decoding"};
  app.require_subcommand(1);
  unsigned threads = default_thread_count();
  app.add_option("--threads", threads, "worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber);

  // simulate
  auto* sim = app.add_subcommand("simulate", "toy corpus with text and image embedding clouds");
  std::size_t sim_dim = 16;
  std::uint64_t sim_seed = 7;
  std::string sim_gap = "0.5,0.3,0.05";
  std::string sim_out;
  bool sim_full = false;
  sim->add_option("--dim", sim_dim, "embedding dimension")->check(CLI::PositiveNumber);
  sim->add_option("--seed", sim_seed, "world and gap seed");
  sim->add_option("--gap", sim_gap, "ROTATION,OFFSET,NOISE (radians, scale, noise norm)");
  sim->add_option("--out", sim_out, "output directory")->required();
  sim->add_flag("--full-only", sim_full, "only captions carrying color, shape and place");

  // build-memory
  auto* bm = app.add_subcommand("build-memory", "encode a corpus into a support memory file");
  std::string bm_input, bm_encoder = "toy", bm_output;
  std::optional<std::size_t> bm_max_len;
  std::optional<double> bm_max_prenorm;
  std::size_t bm_dim = 16;
  std::uint64_t bm_seed = 7;
  bm->add_option("--input", bm_input, "JSONL or text file, one caption per line")->required()->check(CLI::ExistingFile);
  bm->add_option("--encoder", bm_encoder, "toy | file")->check(CLI::IsMember({"toy", "file"}));
  bm->add_option("--output", bm_output, "memory file to write")->required();
  bm->add_option("--max-len", bm_max_len, "keep captions with fewer words than this")->check(CLI::PositiveNumber);
  bm->add_option("--max-prenorm", bm_max_prenorm, "keep captions whose encoder norm is below this")
      ->check(CLI::PositiveNumber);
  bm->add_option("--dim", bm_dim, "toy encoder dimension")->check(CLI::PositiveNumber);
  bm->add_option("--seed", bm_seed, "toy world seed");

  // compact
  auto* cp = app.add_subcommand("compact", "drop entries too similar to an earlier kept entry");
  std::string cp_memory, cp_output, cp_report;
  double cp_threshold = 0.8;
  cp->add_option("--memory", cp_memory, "input memory file")->required()->check(CLI::ExistingFile);
  cp->add_option("--threshold", cp_threshold, "cosine threshold in (0, 1]");
  cp->add_option("--output", cp_output, "compacted memory file")->required();
  cp->add_option("--report", cp_report, "JSON report path");

  // sample
  auto* sp = app.add_subcommand("sample", "keep a random fraction of a memory file");
  std::string sp_memory, sp_output;
  double sp_fraction = 1.0;
  std::uint64_t sp_seed = 0;
  sp->add_option("--memory", sp_memory, "input memory file")->required()->check(CLI::ExistingFile);
  sp->add_option("--fraction", sp_fraction, "fraction in (0, 1]")->required();
  sp->add_option("--seed", sp_seed, "sampling seed");
  sp->add_option("--output", sp_output, "output memory file")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a decoder to invert the text encoder");
  std::string tr_corpus, tr_encoder = "toy", tr_out, tr_log;
  std::size_t tr_steps = TrainConfig::toy().steps, tr_dim = 16, tr_batch = TrainConfig::toy().batch_size;
  std::uint64_t tr_seed = 0, tr_world_seed = 7;
  double tr_lr = TrainConfig::toy().learning_rate, tr_smoothing = TrainConfig::toy().label_smoothing;
  std::string tr_shape = "toy";
  tr->add_option("--corpus", tr_corpus, "JSONL or text corpus")->required()->check(CLI::ExistingFile);
  tr->add_option("--encoder", tr_encoder, "toy | file")->check(CLI::IsMember({"toy", "file"}));
  tr->add_option("--steps", tr_steps, "optimizer steps");
  tr->add_option("--seed", tr_seed, "initialization and batching seed");
  tr->add_option("--out", tr_out, "checkpoint path")->required();
  tr->add_option("--dim", tr_dim, "toy encoder dimension")->check(CLI::PositiveNumber);
  tr->add_option("--world-seed", tr_world_seed, "toy world seed");
  tr->add_option("--batch", tr_batch, "batch size")->check(CLI::PositiveNumber);
  tr->add_option("--lr", tr_lr, "peak learning rate")->check(CLI::PositiveNumber);
  tr->add_option("--smoothing", tr_smoothing, "label smoothing in [0, 1)");
  tr->add_option("--shape", tr_shape, "toy | reference")->check(CLI::IsMember({"toy", "reference"}));
  tr->add_option("--log", tr_log, "write per-epoch losses (JSON) here");

  // decode
  auto* dc = app.add_subcommand("decode", "caption query embeddings");
  std::string dc_model, dc_memory, dc_strategy = "pd", dc_prompt, dc_queries, dc_output;
  double dc_tau = kImageTemperature;
  dc->add_option("--model", dc_model, "decoder checkpoint")->check(CLI::ExistingFile);
  dc->add_option("--memory", dc_memory, "support memory (memory file or JSONL)")->check(CLI::ExistingFile);
  dc->add_option("--strategy", dc_strategy, "pd | nnd | vd | retrieve")
      ->check(CLI::IsMember({"pd", "nnd", "vd", "retrieve"}));
  dc->add_option("--tau", dc_tau, "softmax temperature (0.01 images, 1/150 video)")->check(CLI::PositiveNumber);
  dc->add_option("--prompt", dc_prompt, "text forced after the prefix");
  dc->add_option("--query-file", dc_queries, "query embeddings (memory file or JSONL)")
      ->required()
      ->check(CLI::ExistingFile);
  dc->add_option("--output", dc_output, "captions, one per line (default stdout)");

  // eval
  auto* ev = app.add_subcommand("eval", "score captions against references");
  std::string ev_hyp, ev_ref, ev_report;
  std::size_t ev_n = 4;
  ev->add_option("--hyp", ev_hyp, "hypothesis captions, one per line")->required()->check(CLI::ExistingFile);
  ev->add_option("--ref", ev_ref, "reference captions (text or JSONL), aligned")->required()->check(CLI::ExistingFile);
  ev->add_option("--max-n", ev_n, "BLEU order")->check(CLI::PositiveNumber);
  ev->add_option("--report", ev_report, "JSON report path");

  // bench
  auto* bn = app.add_subcommand("bench", "per-stage timings over random memories");
  BenchConfig bc;
  std::string bn_model, bn_json;
  bn->add_option("--model", bn_model, "decoder checkpoint (default: fresh toy decoder)")->check(CLI::ExistingFile);
  bn->add_option("--sizes", bc.memory_sizes, "memory sizes")->delimiter(',');
  bn->add_option("--dim", bc.dim, "embedding dimension")->check(CLI::PositiveNumber);
  bn->add_option("--trials", bc.trials, "timed trials per size")->check(CLI::PositiveNumber);
  bn->add_option("--seed", bc.seed, "seed");
  bn->add_option("--tau", bc.temperature, "softmax temperature")->check(CLI::PositiveNumber);
  bn->add_option("--json", bn_json, "write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*sim) {
      const GapSpec gap = parse_gap(sim_gap, sim_seed);
      const ToyWorld world(sim_dim, sim_seed);
      const ToyImageEncoder images(world, gap);
      const auto captions = world.captions(sim_full);
      std::vector<JsonlRecord> records;
      SupportMemory text(sim_dim), image(sim_dim);
      for (const auto& c : captions) {
        const auto raw = world.encode_text(c);
        const auto t = normalize(raw.values);
        records.push_back({c, raw.values, raw.prenorm});
        text.add(t.embedding, t.prenorm, c);
        const auto v = images.encode(c);
        image.add(v.embedding, v.prenorm, c);
      }
      fs::create_directories(sim_out);
      write_jsonl(records, fs::path(sim_out) / "corpus.jsonl");
      save_memory(text, fs::path(sim_out) / "text.dcap");
      save_memory(image, fs::path(sim_out) / "image.dcap");
      std::string body;
      for (const auto& c : captions) body += c + "\n";
      emit(body, (fs::path(sim_out) / "captions.txt").string());
      const auto gr = gap_metrics(embeddings_of(text), embeddings_of(image));
      std::cout << "count=" << captions.size() << " dim=" << sim_dim << " centroid_distance=" << gr.centroid_distance
                << " mean_paired_cosine=" << gr.mean_paired_cosine << "\n";
    } else if (*bm) {
      auto setup = make_encoder(bm_encoder, bm_input, bm_dim, bm_seed);
      auto corpus = make_corpus(setup.captions);
      if (bm_max_len || bm_max_prenorm) {
        corpus = filter_by_norm_and_length(corpus, *setup.encoder, bm_max_len.value_or(SIZE_MAX),
                                           bm_max_prenorm.value_or(std::numeric_limits<double>::infinity()));
      }
      const auto memory = build_memory(corpus, *setup.encoder);
      save_memory(memory, bm_output);
      std::cout << "count=" << memory.size() << " dim=" << memory.dim() << "\n";
    } else if (*cp) {
      const auto memory = load_memory(cp_memory);
      const auto [kept, report] = compact_by_similarity(memory, cp_threshold);
      save_memory(kept, cp_output);
      std::cout << "input=" << report.input_count << " retained=" << report.retained_count
                << " threshold=" << report.threshold << "\n";
      if (!cp_report.empty()) {
        nlohmann::json j{{"input_count", report.input_count},
                         {"retained_count", report.retained_count},
                         {"threshold", report.threshold},
                         {"retained", report.retained}};
        nlohmann::json cover = nlohmann::json::object();
        for (const auto& [removed, witness] : report.removed_cover) cover[std::to_string(removed)] = witness;
        j["removed_cover"] = cover;
        emit(j.dump(2) + "\n", cp_report);
      }
    } else if (*sp) {
      const auto memory = load_memory(sp_memory);
      const auto kept = sample_memory(memory, sp_fraction, sp_seed);
      save_memory(kept, sp_output);
      std::cout << "count=" << kept.size() << " dim=" << kept.dim() << "\n";
    } else if (*tr) {
      auto setup = make_encoder(tr_encoder, tr_corpus, tr_dim, tr_world_seed);
      const auto corpus = make_corpus(setup.captions);
      const std::size_t d = setup.encoder->dim();
      const DecoderShape shape = tr_shape == "toy" ? DecoderShape::toy(d) : DecoderShape::reference(d);
      TrainConfig cfg = TrainConfig::toy();
      cfg.steps = tr_steps;
      cfg.seed = tr_seed;
      cfg.batch_size = tr_batch;
      cfg.learning_rate = tr_lr;
      cfg.label_smoothing = tr_smoothing;
      cfg.warmup_steps = std::min(cfg.warmup_steps, tr_steps);
      TrainLog log;
      const auto model = train(DecoderModel(Vocab(all_words(setup.captions)), shape, tr_seed), corpus,
                               *setup.encoder, cfg, &log);
      save_model(model, tr_out);
      std::cout << "steps=" << tr_steps << " vocab=" << model.vocab().size()
                << " final_epoch_loss=" << (log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back()) << "\n";
      if (!tr_log.empty()) emit(nlohmann::json{{"epoch_loss", log.epoch_loss}}.dump() + "\n", tr_log);
    } else if (*dc) {
      const StrategyChoice choice{parse_strategy(dc_strategy), ProjectionConfig{dc_tau, true}};
      choice.config.validate();
      std::optional<DecoderModel> model;
      if (choice.kind != Strategy::kRetrieval) {
        if (dc_model.empty()) throw UsageError("--strategy " + dc_strategy + " needs --model");
        model = load_model(dc_model);
      }
      std::optional<SupportMemory> memory;
      if (choice.kind == Strategy::kProjection || choice.kind == Strategy::kNearestNeighbor ||
          choice.kind == Strategy::kRetrieval) {
        if (dc_memory.empty()) throw UsageError("--strategy " + dc_strategy + " needs --memory");
        memory = load_embeddings(dc_memory);
      }
      const std::size_t d = model ? model->shape().prefix_dim : memory->dim();
      if (memory && memory->dim() != d) throw Error(ErrorCode::kDimensionMismatch, "memory dim vs model dim");
      const auto queries = load_embeddings(dc_queries, d);
      std::vector<int> prompt;
      if (!dc_prompt.empty()) prompt = apply_prompt({dc_prompt}, model->vocab());
      std::string body;
      for (std::size_t i = 0; i < queries.size(); ++i) {
        body += caption(queries.embedding(i), choice, model ? &*model : nullptr, memory ? &*memory : nullptr, prompt,
                        threads);
        body += '\n';
      }
      emit(body, dc_output);
    } else if (*ev) {
      const auto hyps = read_lines(ev_hyp);
      const auto refs = read_captions(ev_ref);
      if (hyps.size() != refs.size()) {
        throw Error(ErrorCode::kLengthMismatch,
                    std::to_string(hyps.size()) + " hypotheses vs " + std::to_string(refs.size()) + " references");
      }
      const double em = exact_match_rate(std::span<const std::string>(hyps), std::span<const std::string>(refs));
      std::vector<Tokens> h;
      std::vector<std::vector<Tokens>> r;
      for (std::size_t i = 0; i < hyps.size(); ++i) {
        h.push_back(split_words(hyps[i]));
        r.push_back({split_words(refs[i])});
      }
      const double b = corpus_bleu(h, r, ev_n);
      std::cout << "count=" << hyps.size() << " exact_match=" << em << " bleu" << ev_n << "=" << b << "\n";
      if (!ev_report.empty()) {
        emit(nlohmann::json{{"count", hyps.size()}, {"exact_match", em}, {"bleu", b}, {"max_n", ev_n}}.dump(2) + "\n",
             ev_report);
      }
    } else if (*bn) {
      bc.threads = threads;
      std::optional<DecoderModel> model;
      if (!bn_model.empty()) {
        model = load_model(bn_model);
        bc.dim = model->shape().prefix_dim;
      } else {
        const ToyWorld world(bc.dim, bc.seed);
        model.emplace(Vocab(world.words()), DecoderShape::toy(bc.dim), bc.seed);
      }
      const auto reports = benchmark_pipeline(bc, *model);
      for (const auto& rep : reports) std::cout << to_key_value(rep) << "\n";
      if (!bn_json.empty()) emit(to_json(reports) + "\n", bn_json);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.cause());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
