#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "nse/model.hpp"
#include "nse/random.hpp"

namespace nse {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One cloze tuple, token-level. Tokens stay as strings until a Vocabulary
// maps a TokenizedExample to ids.
struct TokenizedExample {
  std::vector<std::string> document;
  std::vector<int> sentence_lengths;  // context-line boundaries, for re-serialization
  std::vector<std::string> query;  // contains the placeholder exactly once
  std::vector<std::string> candidates;
  std::string answer;
  std::string source;  // file/record provenance, for diagnostics
};

constexpr const char* kPadToken = "<pad>";
constexpr const char* kPlaceholderToken = "XXXXX";
constexpr const char* kUnkToken = "<unk>";

class Vocabulary {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kPlaceholderId = 1;
  static constexpr int kUnkId = 2;

  Vocabulary();

  int id_of(const std::string& token) const;  // kUnkId if absent
  const std::string& token_of(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  bool contains(const std::string& token) const;

  // Registers a token if new; returns its id.
  int add(const std::string& token);

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Frequency-descending then lexicographic; reserved symbols keep their
// fixed ids; tokens below min_count fall through to <unk>.
Vocabulary build_vocab(const std::vector<TokenizedExample>& examples,
                       int min_count = 1);

// Id-level example plus candidate occurrence masks.
struct Example {
  std::vector<int> document;
  std::vector<int> query;
  std::vector<int> candidates;
  int answer_index = -1;  // into candidates
  std::string source;
};

Example to_ids(const TokenizedExample& ex, const Vocabulary& vocab);

// ---- CBT-format files -------------------------------------------------------

// Numbered context lines (1..N) then a final numbered line
// "query<TAB>answer<TAB><TAB>cand1|cand2|...". Records separated by blank
// lines. Candidate count != 10 is kept with a warning on stderr.
std::vector<TokenizedExample> parse_cbt_file(const std::string& path);
std::vector<TokenizedExample> parse_cbt_text(const std::string& text,
                                             const std::string& source);
std::string serialize_cbt(const std::vector<TokenizedExample>& examples);

// ---- synthetic cloze generator ----------------------------------------------

struct SyntheticSpec {
  int vocab_entities = 20;    // distinct entity tokens
  int relations = 8;          // distinct relation tokens
  int sentences = 12;         // sentences per document (3 tokens each)
  int candidates = 10;        // candidate set size, gold included
  int train_examples = 2000;
  int dev_examples = 200;
  int test_examples = 200;
  std::uint64_t seed = 1;
};

struct SyntheticData {
  std::vector<TokenizedExample> train, dev, test;
};

// Entity-relation fact documents; the query is one document sentence with
// its object entity replaced by the placeholder. Pure function of the spec.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

// ---- batching ---------------------------------------------------------------

struct Batch {
  std::vector<ModelInput> inputs;          // padded to shared lengths
  std::vector<std::vector<Vec>> candidate_masks;  // per example, per candidate
  std::vector<int> answers;                // gold candidate index
  std::vector<int> example_ids;            // indices into the source split
};

Batch make_batch(const std::vector<Example>& split,
                 const std::vector<int>& ids);

// Pool-sort heuristic: sample pool_size examples without replacement, sort
// by document length, batch the shortest n, return the rest to the pool
// source. Stops when fewer than pool_size examples remain. Regenerated per
// epoch (composition depends on both seed and epoch).
std::vector<Batch> make_epoch_batches(const std::vector<Example>& split,
                                      int n, int pool_size,
                                      std::uint64_t seed, int epoch);

// Deterministic length-sorted batches for dev/test evaluation.
std::vector<Batch> make_eval_batches(const std::vector<Example>& split, int n);

}  // namespace nse
