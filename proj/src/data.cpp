#include "nse/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace nse {

Vocabulary::Vocabulary() {
  add(kPadToken);
  add(kPlaceholderToken);
  add(kUnkToken);
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size())
    throw std::out_of_range("Vocabulary: id out of range");
  return tokens_[id];
}

bool Vocabulary::contains(const std::string& token) const {
  return index_.count(token) != 0;
}

int Vocabulary::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  int id = size();
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write vocabulary: " + path);
  for (int i = 0; i < size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot read vocabulary: " + path);
  Vocabulary v;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw ParseError(path + ":" + std::to_string(line_no) +
                       ": expected token<TAB>id");
    std::string token = line.substr(0, tab);
    int id = std::stoi(line.substr(tab + 1));
    if (id < 3) {
      if (v.token_of(id) != token)
        throw ParseError(path + ": reserved id mismatch at line " +
                         std::to_string(line_no));
      continue;
    }
    if (v.add(token) != id)
      throw ParseError(path + ": non-contiguous ids at line " +
                       std::to_string(line_no));
  }
  return v;
}

Vocabulary build_vocab(const std::vector<TokenizedExample>& examples,
                       int min_count) {
  if (examples.empty()) throw ParseError("build_vocab: empty corpus");
  std::map<std::string, long> counts;
  auto tally = [&counts](const std::vector<std::string>& tokens) {
    for (const std::string& t : tokens)
      if (t != kPadToken && t != kPlaceholderToken && t != kUnkToken)
        ++counts[t];
  };
  for (const TokenizedExample& ex : examples) {
    tally(ex.document);
    tally(ex.query);
    tally(ex.candidates);
  }
  std::vector<std::pair<std::string, long>> ordered(counts.begin(),
                                                    counts.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second > b.second;
                     return a.first < b.first;
                   });
  Vocabulary v;
  for (const auto& [token, count] : ordered)
    if (count >= min_count) v.add(token);
  return v;
}

namespace {

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream ss(s);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

bool is_placeholder(const std::string& tok) {
  if (tok.size() < 3) return false;
  for (char c : tok)
    if (c != 'X' && c != 'x') return false;
  return true;
}

}  // namespace

Example to_ids(const TokenizedExample& ex, const Vocabulary& vocab) {
  Example out;
  out.source = ex.source;
  for (const std::string& t : ex.document)
    out.document.push_back(vocab.id_of(t));
  int placeholders = 0;
  for (const std::string& t : ex.query) {
    if (is_placeholder(t)) {
      ++placeholders;
      out.query.push_back(Vocabulary::kPlaceholderId);
    } else {
      out.query.push_back(vocab.id_of(t));
    }
  }
  if (placeholders != 1)
    throw ParseError("example " + ex.source +
                     ": query must contain the placeholder exactly once");
  for (const std::string& c : ex.candidates) {
    int id = vocab.id_of(c);
    out.candidates.push_back(id);
    if (std::find(out.document.begin(), out.document.end(), id) ==
        out.document.end())
      std::cerr << "warning: candidate '" << c << "' absent from document ("
                << ex.source << ")\n";
    if (c == ex.answer && out.answer_index < 0)
      out.answer_index = static_cast<int>(out.candidates.size()) - 1;
  }
  if (out.answer_index < 0)
    throw ParseError("example " + ex.source +
                     ": answer is not in the candidate set");
  return out;
}

// ---- CBT format -------------------------------------------------------------

std::vector<TokenizedExample> parse_cbt_text(const std::string& text,
                                             const std::string& source) {
  std::vector<TokenizedExample> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;

  TokenizedExample cur;
  int expected_no = 1;
  bool in_record = false;
  int record_start = 0;

  auto fail = [&](int at, const std::string& msg) {
    throw ParseError(source + ":" + std::to_string(at) + ": " + msg);
  };
  auto finish = [&]() {
    if (!in_record) return;
    if (cur.query.empty())
      fail(record_start, "record missing the final query line");
    out.push_back(std::move(cur));
    cur = TokenizedExample{};
    expected_no = 1;
    in_record = false;
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      finish();
      continue;
    }
    if (!in_record) {
      in_record = true;
      record_start = line_no;
      cur.source = source + ":" + std::to_string(line_no);
    }
    if (!cur.query.empty())
      fail(line_no, "content after the query line without a blank separator");

    auto space = line.find(' ');
    if (space == std::string::npos) fail(line_no, "missing line number");
    int num = 0;
    try {
      num = std::stoi(line.substr(0, space));
    } catch (const std::exception&) {
      fail(line_no, "malformed line number");
    }
    if (num != expected_no)
      fail(line_no, "expected line number " + std::to_string(expected_no));
    ++expected_no;
    std::string rest = line.substr(space + 1);

    if (rest.find('\t') == std::string::npos) {
      // Context line.
      std::vector<std::string> toks = split_ws(rest);
      if (toks.empty()) fail(line_no, "empty context line");
      cur.sentence_lengths.push_back(static_cast<int>(toks.size()));
      cur.document.insert(cur.document.end(), toks.begin(), toks.end());
    } else {
      // Query line: query<TAB>answer<TAB><TAB>cand1|cand2|...
      std::vector<std::string> fields;
      std::size_t pos = 0;
      while (true) {
        auto tab = rest.find('\t', pos);
        if (tab == std::string::npos) {
          fields.push_back(rest.substr(pos));
          break;
        }
        fields.push_back(rest.substr(pos, tab - pos));
        pos = tab + 1;
      }
      if (fields.size() != 4 || !fields[2].empty())
        fail(line_no, "query line must be query<TAB>answer<TAB><TAB>cands");
      cur.query = split_ws(fields[0]);
      if (cur.query.empty()) fail(line_no, "empty query");
      int placeholders = 0;
      for (std::string& t : cur.query)
        if (is_placeholder(t)) {
          t = kPlaceholderToken;
          ++placeholders;
        }
      if (placeholders != 1)
        fail(line_no, "query must contain the placeholder exactly once");
      cur.answer = fields[1];
      if (cur.answer.empty()) fail(line_no, "empty answer");
      std::istringstream cands(fields[3]);
      std::string c;
      while (std::getline(cands, c, '|'))
        if (!c.empty()) cur.candidates.push_back(c);
      if (cur.candidates.empty()) fail(line_no, "empty candidate list");
      if (cur.candidates.size() != 10)
        std::cerr << "warning: " << source << ":" << line_no << ": "
                  << cur.candidates.size() << " candidates (expected 10)\n";
      if (std::find(cur.candidates.begin(), cur.candidates.end(),
                    cur.answer) == cur.candidates.end())
        fail(line_no, "answer not among candidates");
      if (cur.document.empty()) fail(line_no, "record has no context lines");
    }
  }
  finish();
  return out;
}

std::vector<TokenizedExample> parse_cbt_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_cbt_text(buf.str(), path);
}

std::string serialize_cbt(const std::vector<TokenizedExample>& examples) {
  std::ostringstream out;
  for (const TokenizedExample& ex : examples) {
    std::vector<int> lens = ex.sentence_lengths;
    if (lens.empty()) lens.push_back(static_cast<int>(ex.document.size()));
    int line = 1;
    std::size_t pos = 0;
    for (int len : lens) {
      out << line++;
      for (int i = 0; i < len && pos < ex.document.size(); ++i)
        out << ' ' << ex.document[pos++];
      out << '\n';
    }
    out << line;
    for (const std::string& t : ex.query) out << ' ' << t;
    out << '\t' << ex.answer << "\t\t";
    for (std::size_t i = 0; i < ex.candidates.size(); ++i) {
      if (i) out << '|';
      out << ex.candidates[i];
    }
    out << "\n\n";
  }
  return out.str();
}

// ---- synthetic generator ----------------------------------------------------

namespace {

std::string entity_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "ent%02d", i);
  return buf;
}

std::string relation_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "rel%02d", i);
  return buf;
}

TokenizedExample synth_example(Rng& rng, const SyntheticSpec& spec,
                               const std::string& source) {
  const int ne = spec.vocab_entities;
  const int nr = spec.relations;
  const int ns = spec.sentences;

  // Distinct (subject, relation) pairs make the query resolvable; objects
  // are drawn without replacement while entities last, so no candidate is
  // more frequent than another.
  std::vector<int> pair_ids(ne * nr);
  for (int i = 0; i < ne * nr; ++i) pair_ids[i] = i;
  rng.shuffle(pair_ids.begin(), pair_ids.end());

  std::vector<int> objects(ne);
  for (int i = 0; i < ne; ++i) objects[i] = i;
  rng.shuffle(objects.begin(), objects.end());

  struct Fact {
    int subj, rel, obj;
  };
  std::vector<Fact> facts;
  for (int s = 0; s < ns; ++s) {
    int pair = pair_ids[s];
    int obj = s < ne ? objects[s]
                     : static_cast<int>(rng.below(ne));
    facts.push_back({pair / nr, pair % nr, obj});
  }

  TokenizedExample ex;
  ex.source = source;
  for (const Fact& f : facts) {
    ex.document.push_back(entity_name(f.subj));
    ex.document.push_back(relation_name(f.rel));
    ex.document.push_back(entity_name(f.obj));
    ex.sentence_lengths.push_back(3);
  }

  const Fact& gold = facts[rng.below(facts.size())];
  ex.query = {entity_name(gold.subj), relation_name(gold.rel),
              kPlaceholderToken};
  ex.answer = entity_name(gold.obj);

  std::set<int> doc_objects;
  for (const Fact& f : facts) doc_objects.insert(f.obj);
  std::vector<int> distractors;
  for (int o : doc_objects)
    if (o != gold.obj) distractors.push_back(o);
  rng.shuffle(distractors.begin(), distractors.end());

  std::vector<std::string> cands = {ex.answer};
  for (int i = 0; i < spec.candidates - 1 &&
                  i < static_cast<int>(distractors.size()); ++i)
    cands.push_back(entity_name(distractors[i]));
  rng.shuffle(cands.begin(), cands.end());
  ex.candidates = std::move(cands);
  return ex;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  if (spec.candidates > spec.vocab_entities)
    throw ParseError("generate_synthetic: candidates > entities");
  if (spec.sentences < spec.candidates)
    throw ParseError("generate_synthetic: document shorter than candidate set");
  if (spec.sentences > spec.vocab_entities * spec.relations)
    throw ParseError("generate_synthetic: not enough (subject, relation) pairs");

  Rng rng(spec.seed);
  SyntheticData data;
  auto fill = [&](std::vector<TokenizedExample>& out, int n,
                  const std::string& split) {
    for (int i = 0; i < n; ++i)
      out.push_back(
          synth_example(rng, spec, split + "#" + std::to_string(i)));
  };
  fill(data.train, spec.train_examples, "train");
  fill(data.dev, spec.dev_examples, "dev");
  fill(data.test, spec.test_examples, "test");
  return data;
}

// ---- batching ---------------------------------------------------------------

Batch make_batch(const std::vector<Example>& split,
                 const std::vector<int>& ids) {
  if (ids.empty()) throw ParseError("make_batch: empty id list");
  std::size_t max_doc = 0, max_query = 0;
  for (int id : ids) {
    max_doc = std::max(max_doc, split[id].document.size());
    max_query = std::max(max_query, split[id].query.size());
  }
  Batch batch;
  for (int id : ids) {
    const Example& ex = split[id];
    ModelInput in;
    in.doc_ids = ex.document;
    in.doc_ids.resize(max_doc, Vocabulary::kPadId);
    in.query_ids = ex.query;
    in.query_ids.resize(max_query, Vocabulary::kPadId);
    in.doc_mask = Vec::Zero(static_cast<Eigen::Index>(max_doc));
    in.doc_mask.head(static_cast<Eigen::Index>(ex.document.size())).setOnes();
    in.query_mask = Vec::Zero(static_cast<Eigen::Index>(max_query));
    in.query_mask.head(static_cast<Eigen::Index>(ex.query.size())).setOnes();

    std::vector<Vec> masks;
    for (int cand : ex.candidates) {
      Vec m = Vec::Zero(static_cast<Eigen::Index>(max_doc));
      for (std::size_t j = 0; j < ex.document.size(); ++j)
        if (ex.document[j] == cand) m(static_cast<Eigen::Index>(j)) = 1.0;
      masks.push_back(std::move(m));
    }
    batch.inputs.push_back(std::move(in));
    batch.candidate_masks.push_back(std::move(masks));
    batch.answers.push_back(ex.answer_index);
    batch.example_ids.push_back(id);
  }
  return batch;
}

std::vector<Batch> make_epoch_batches(const std::vector<Example>& split,
                                      int n, int pool_size,
                                      std::uint64_t seed, int epoch) {
  if (n < 1) throw ParseError("make_epoch_batches: n must be >= 1");
  if (pool_size < n) throw ParseError("make_epoch_batches: pool smaller than n");
  if (n > static_cast<int>(split.size()))
    throw ParseError("make_epoch_batches: n exceeds split size");

  Rng rng(seed + 0x9E3779B97F4A7C15ull *
                     static_cast<std::uint64_t>(epoch + 1));
  std::vector<int> remaining(split.size());
  for (std::size_t i = 0; i < split.size(); ++i)
    remaining[i] = static_cast<int>(i);

  std::vector<Batch> batches;
  while (static_cast<int>(remaining.size()) >= pool_size) {
    rng.shuffle(remaining.begin(), remaining.end());
    std::vector<int> pool(remaining.begin(), remaining.begin() + pool_size);
    remaining.erase(remaining.begin(), remaining.begin() + pool_size);
    std::stable_sort(pool.begin(), pool.end(), [&split](int a, int b) {
      return split[a].document.size() < split[b].document.size();
    });
    std::vector<int> batch_ids(pool.begin(), pool.begin() + n);
    remaining.insert(remaining.end(), pool.begin() + n, pool.end());
    batches.push_back(make_batch(split, batch_ids));
  }
  return batches;
}

std::vector<Batch> make_eval_batches(const std::vector<Example>& split,
                                     int n) {
  if (split.empty()) throw ParseError("make_eval_batches: empty split");
  if (n < 1) throw ParseError("make_eval_batches: n must be >= 1");
  std::vector<int> ids(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) ids[i] = static_cast<int>(i);
  std::stable_sort(ids.begin(), ids.end(), [&split](int a, int b) {
    return split[a].document.size() < split[b].document.size();
  });
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < ids.size(); start += n) {
    std::vector<int> chunk(
        ids.begin() + start,
        ids.begin() + std::min(ids.size(), start + n));
    batches.push_back(make_batch(split, chunk));
  }
  return batches;
}

}  // namespace nse
