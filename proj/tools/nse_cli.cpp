// Command-line tool around the nse library: synthetic dataset generation,
// training, evaluation, and per-example trace export.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nse/data.hpp"
#include "nse/trace.hpp"
#include "nse/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitError = 1;      // missing files, parse failures
constexpr int kExitBadSpec = 2;    // infeasible generation spec

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  char buf[65536];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char hex[24];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(h));
  return hex;
}

std::string utc_now() {
  std::time_t t =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<nse::Example> load_split(const std::string& path,
                                     const nse::Vocabulary& vocab) {
  std::vector<nse::Example> out;
  for (const nse::TokenizedExample& ex : nse::parse_cbt_file(path))
    out.push_back(nse::to_ids(ex, vocab));
  return out;
}

void require_dataset(const std::string& path) {
  if (!fs::exists(path))
    throw std::runtime_error("dataset not found: " + path);
}

// Applies `key=value` lines from a config file to every option the user did
// not pass explicitly, so precedence is flags > config file > defaults.
void apply_config_file(CLI::App* cmd, const std::string& path) {
  if (path.empty()) return;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (!opt)
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": unknown option '" + key + "'");
    if (opt->count() > 0) continue;  // explicit flag wins
    opt->add_result(value);
    opt->run_callback();
  }
}

// Shared model/optimizer flags. Defaults live in TrainConfig; a config file
// named by --config supplies overrides, and explicit flags beat both.
void add_train_flags(CLI::App* cmd, nse::TrainConfig& config,
                     std::string& mode, std::string& config_path) {
  cmd->add_option("--config", config_path, "key=value config file");
  cmd->add_option("--seed", config.seed, "random seed");
  cmd->add_option("--mode", mode, "halting strategy: gating or adaptive")
      ->check(CLI::IsMember({"gating", "adaptive"}));
  cmd->add_option("--steps", config.steps, "loop steps T")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--k", config.k, "hidden width")->check(CLI::PositiveNumber);
  cmd->add_option("--embed", config.embed_dim, "embedding width")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--lr", config.lr, "Adam learning rate")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--batch", config.batch_size, "batch size")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--pool", config.pool_factor, "pool size in batches")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--clip", config.clip_threshold, "gradient norm clip")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--dropout", config.dropout, "embedding dropout rate")
      ->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--patience", config.patience,
                  "early-stopping patience (0 disables)")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--epochs", config.max_epochs, "epoch limit")
      ->check(CLI::PositiveNumber);
}

nse::HaltingVariant variant_of(const std::string& mode) {
  return mode == "adaptive" ? nse::HaltingVariant::AdaptiveComputation
                            : nse::HaltingVariant::QueryGating;
}

json config_json(const nse::TrainConfig& c) {
  return {{"k", c.k},
          {"embed", c.embed_dim},
          {"steps", c.steps},
          {"mode", c.mode == nse::HaltingVariant::QueryGating ? "gating"
                                                              : "adaptive"},
          {"lr", c.lr},
          {"batch", c.batch_size},
          {"pool", c.pool_factor},
          {"clip", c.clip_threshold},
          {"dropout", c.dropout},
          {"patience", c.patience},
          {"epochs", c.max_epochs},
          {"seed", c.seed}};
}

// ---- gen --------------------------------------------------------------------

int cmd_gen(const nse::SyntheticSpec& spec, const std::string& out_dir) {
  nse::SyntheticData data;
  try {
    data = nse::generate_synthetic(spec);
  } catch (const nse::ParseError& e) {
    std::cerr << "error: infeasible spec: " << e.what() << '\n';
    return kExitBadSpec;
  }
  fs::create_directories(out_dir);
  write_file(out_dir + "/train.txt", nse::serialize_cbt(data.train));
  write_file(out_dir + "/dev.txt", nse::serialize_cbt(data.dev));
  write_file(out_dir + "/test.txt", nse::serialize_cbt(data.test));

  json manifest = {{"entities", spec.vocab_entities},
                   {"relations", spec.relations},
                   {"sentences", spec.sentences},
                   {"candidates", spec.candidates},
                   {"train", spec.train_examples},
                   {"dev", spec.dev_examples},
                   {"test", spec.test_examples},
                   {"seed", spec.seed}};
  write_file(out_dir + "/spec.json", manifest.dump(2) + "\n");
  std::cerr << "wrote " << data.train.size() << "/" << data.dev.size() << "/"
            << data.test.size() << " examples to " << out_dir << '\n';
  return 0;
}

// ---- train ------------------------------------------------------------------

int cmd_train(const nse::TrainConfig& config, const std::string& train_path,
              const std::string& dev_path, const std::string& out_dir) {
  require_dataset(train_path);
  require_dataset(dev_path);
  fs::create_directories(out_dir);

  auto train_tokens = nse::parse_cbt_file(train_path);
  nse::Vocabulary vocab = nse::build_vocab(train_tokens);
  vocab.save(out_dir + "/vocab.tsv");

  std::vector<nse::Example> train_split;
  for (const nse::TokenizedExample& ex : train_tokens)
    train_split.push_back(nse::to_ids(ex, vocab));
  std::vector<nse::Example> dev_split = load_split(dev_path, vocab);

  json manifest = {{"config", config_json(config)},
                   {"datasets",
                    {{"train", {{"path", train_path},
                                {"hash", file_hash(train_path)}}},
                     {"dev", {{"path", dev_path},
                              {"hash", file_hash(dev_path)}}}}},
                   {"out", out_dir},
                   {"started", utc_now()}};
  write_file(out_dir + "/manifest.json", manifest.dump(2) + "\n");

  std::ofstream log(out_dir + "/train.log", std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + out_dir + "/train.log");
  nse::Checkpoint best = nse::train(config, train_split, dev_split, &log);
  nse::save_checkpoint(best, out_dir + "/checkpoint.bin");
  std::cout << "best epoch " << best.epoch << ", dev accuracy "
            << best.dev_accuracy << '\n';
  return 0;
}

// ---- eval -------------------------------------------------------------------

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& vocab_path, const std::string& out_path) {
  require_dataset(data_path);
  nse::Checkpoint ckpt = nse::load_checkpoint(ckpt_path);
  nse::Vocabulary vocab = nse::Vocabulary::load(vocab_path);
  std::vector<nse::Example> split = load_split(data_path, vocab);

  nse::EvalResult result = nse::evaluate(
      ckpt.params, split, ckpt.config.halting(), ckpt.config.batch_size);

  std::ostringstream records;
  records << "example_id,predicted,gold,gold_prob\n";
  char buf[32];
  for (const nse::EvalRecord& r : result.records) {
    std::snprintf(buf, sizeof buf, "%.12g", r.gold_prob);
    records << r.example_id << ',' << r.predicted << ',' << r.gold << ','
            << buf << '\n';
  }
  if (!out_path.empty()) write_file(out_path, records.str());
  std::cout << "accuracy " << result.accuracy << " on " << split.size()
            << " examples\n";
  return 0;
}

// ---- trace ------------------------------------------------------------------

int cmd_trace(const std::string& ckpt_path, const std::string& data_path,
              const std::string& vocab_path, int example_index,
              const std::string& out_dir, std::string stem) {
  require_dataset(data_path);
  nse::Checkpoint ckpt = nse::load_checkpoint(ckpt_path);
  nse::Vocabulary vocab = nse::Vocabulary::load(vocab_path);
  std::vector<nse::Example> split = load_split(data_path, vocab);
  if (example_index < 0 || example_index >= static_cast<int>(split.size()))
    throw std::runtime_error("example index " + std::to_string(example_index) +
                             " out of range (split has " +
                             std::to_string(split.size()) + " examples)");

  nse::Batch batch = nse::make_batch(split, {example_index});
  nse::ForwardResult result;
  nse::example_pass(ckpt.params, batch.inputs[0], batch.candidate_masks[0],
                    batch.answers[0], ckpt.config.halting(),
                    nse::DropoutSpec{0.0, false}, nullptr, nullptr, nullptr,
                    &result);

  std::vector<std::string> query_tokens, doc_tokens;
  for (int id : split[example_index].query)
    query_tokens.push_back(vocab.token_of(id));
  for (int id : split[example_index].document)
    doc_tokens.push_back(vocab.token_of(id));

  fs::create_directories(out_dir);
  if (stem.empty()) stem = "example" + std::to_string(example_index);
  nse::TraceFiles files = nse::write_trace(
      out_dir, stem, result, ckpt.config.halting(), query_tokens, doc_tokens);
  std::cerr << "wrote " << files.memory_key_csv << " and companions\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hypothesis-test reading comprehension toolkit"};
  app.require_subcommand(1);

  // gen
  nse::SyntheticSpec spec;
  std::string gen_out = "data";
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--entities", spec.vocab_entities, "distinct entities")
      ->check(CLI::PositiveNumber);
  gen->add_option("--relations", spec.relations, "distinct relations")
      ->check(CLI::PositiveNumber);
  gen->add_option("--sentences", spec.sentences, "facts per document")
      ->check(CLI::PositiveNumber);
  gen->add_option("--candidates", spec.candidates, "candidate set size")
      ->check(CLI::PositiveNumber);
  gen->add_option("--docs", spec.train_examples, "training examples")
      ->check(CLI::PositiveNumber);
  gen->add_option("--dev-docs", spec.dev_examples, "dev examples")
      ->check(CLI::NonNegativeNumber);
  gen->add_option("--test-docs", spec.test_examples, "test examples")
      ->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", spec.seed, "random seed");
  gen->add_option("--out", gen_out, "output directory");

  // train
  nse::TrainConfig config;
  std::string mode = "gating", train_path, dev_path, train_out = "run";
  std::string config_path;
  CLI::App* train = app.add_subcommand("train", "train a model");
  add_train_flags(train, config, mode, config_path);
  train->add_option("--train", train_path, "training set (CBT layout)")
      ->required();
  train->add_option("--dev", dev_path, "dev set (CBT layout)")->required();
  train->add_option("--out", train_out, "artifact directory");

  // eval
  std::string eval_ckpt, eval_data, eval_vocab, eval_out;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "split to evaluate")->required();
  eval->add_option("--vocab", eval_vocab, "vocabulary file")->required();
  eval->add_option("--out", eval_out, "per-example prediction records (CSV)");

  // trace
  std::string trace_ckpt, trace_data, trace_vocab, trace_out = "trace";
  std::string trace_stem;
  int trace_example = 0;
  CLI::App* trace = app.add_subcommand("trace", "export loop traces");
  trace->add_option("--checkpoint", trace_ckpt, "checkpoint file")->required();
  trace->add_option("--data", trace_data, "split holding the example")
      ->required();
  trace->add_option("--vocab", trace_vocab, "vocabulary file")->required();
  trace->add_option("--example", trace_example, "example index in the split")
      ->check(CLI::NonNegativeNumber);
  trace->add_option("--out", trace_out, "output directory");
  trace->add_option("--stem", trace_stem, "artifact filename stem");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen(spec, gen_out);
    if (train->parsed()) {
      apply_config_file(train, config_path);
      config.mode = variant_of(mode);
      return cmd_train(config, train_path, dev_path, train_out);
    }
    if (eval->parsed())
      return cmd_eval(eval_ckpt, eval_data, eval_vocab, eval_out);
    if (trace->parsed())
      return cmd_trace(trace_ckpt, trace_data, trace_vocab, trace_example,
                       trace_out, trace_stem);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
