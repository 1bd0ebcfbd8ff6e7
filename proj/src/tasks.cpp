#include "icla/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace icla {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

void require(bool ok, const std::string& message) {
  if (!ok) {
    throw std::invalid_argument(message);
  }
}

// Distinct draws from [lo, lo + n) in random order (partial Fisher-Yates).
std::vector<int> distinct_draws(SeededRng& rng, int lo, int n, int count) {
  std::vector<int> pool(sz(n));
  std::iota(pool.begin(), pool.end(), lo);
  for (int i = 0; i < count; ++i) {
    const auto j = sz(i) + rng.uniform_int(static_cast<std::uint64_t>(n - i));
    std::swap(pool[sz(i)], pool[j]);
  }
  pool.resize(sz(count));
  return pool;
}

constexpr std::uint64_t kPriorMapSeed = 0x9d1f3c5a7b2e4d60ULL;

}  // namespace

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy:
      return "copy";
    case TaskKind::KvRecall:
      return "kv_recall";
    case TaskKind::PriorConflict:
      return "prior_conflict";
    case TaskKind::TextCorpus:
      return "text_corpus";
  }
  return "unknown";
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "copy") return TaskKind::Copy;
  if (name == "kv_recall") return TaskKind::KvRecall;
  if (name == "prior_conflict") return TaskKind::PriorConflict;
  if (name == "text_corpus") return TaskKind::TextCorpus;
  throw std::invalid_argument("unknown task kind '" + name +
                              "' (expected copy, kv_recall, prior_conflict or text_corpus)");
}

void TaskSpec::validate(int max_seq_len) const {
  require(vocab_size > SpecialTokens::kReserved,
          "task.vocab_size leaves no room for content tokens after the 3 special tokens");
  require(seq_len >= 3, "task.seq_len must be >= 3");
  require(seq_len <= max_seq_len, "task.seq_len exceeds model.max_seq_len");
  require(conflict_rate >= 0.0 && conflict_rate <= 1.0, "task.conflict_rate must lie in [0, 1]");
  const int half = content_size() / 2;
  switch (kind) {
    case TaskKind::Copy:
      break;
    case TaskKind::KvRecall:
    case TaskKind::PriorConflict:
      require(num_pairs >= 1, "task.num_pairs must be >= 1");
      require(half >= 1, "task.vocab_size too small for disjoint key and value alphabets");
      require(num_pairs <= half, "task.num_pairs exceeds the number of distinct keys");
      require(2 * num_pairs + 3 <= seq_len, "task.num_pairs does not fit in task.seq_len");
      if (kind == TaskKind::PriorConflict) {
        require(content_size() - half >= 2, "task.vocab_size too small for conflicting answers");
      }
      break;
    case TaskKind::TextCorpus:
      require(!corpus_path.empty(), "task.corpus_path is required for text_corpus");
      break;
  }
}

Example make_example(const TokenSequence& full, std::vector<bool> target_mask) {
  if (full.size() < 2 || target_mask.size() + 1 != full.size()) {
    throw std::invalid_argument("make_example: mask length must be sequence length - 1");
  }
  Example ex;
  ex.input.assign(full.begin(), full.end() - 1);
  ex.target.assign(full.begin() + 1, full.end());
  ex.mask = std::move(target_mask);
  ex.conflict.assign(ex.mask.size(), false);
  return ex;
}

Example gen_copy_example(const TaskSpec& spec, SeededRng& rng) {
  require(spec.vocab_size > SpecialTokens::kReserved,
          "copy task: vocabulary too small for special tokens");
  require(spec.seq_len >= 3, "copy task: seq_len must be >= 3");
  const auto special = SpecialTokens::for_vocab(spec.vocab_size);
  const int n = (spec.seq_len - 1) / 2;
  TokenSequence payload(sz(n));
  for (int& tok : payload) {
    tok = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.content_size())));
  }
  TokenSequence full{special.bos};
  full.insert(full.end(), payload.begin(), payload.end());
  full.push_back(special.sep);
  full.insert(full.end(), payload.begin(), payload.end());
  std::vector<bool> mask(full.size() - 1, false);
  for (std::size_t j = sz(n + 1); j < mask.size(); ++j) {
    mask[j] = true;
  }
  return make_example(full, std::move(mask));
}

Example gen_kv_recall_example(const TaskSpec& spec, SeededRng& rng) {
  spec.validate(spec.seq_len);
  const auto special = SpecialTokens::for_vocab(spec.vocab_size);
  const int half = spec.content_size() / 2;
  const int num_values = spec.content_size() - half;
  const auto keys = distinct_draws(rng, 0, half, spec.num_pairs);
  TokenSequence full{special.bos};
  std::vector<int> values;
  for (int key : keys) {
    const int value = half + static_cast<int>(rng.uniform_int(sz(num_values)));
    values.push_back(value);
    full.push_back(key);
    full.push_back(value);
  }
  const auto j = sz(rng.uniform_int(sz(spec.num_pairs)));
  full.push_back(special.query);
  full.push_back(keys[j]);
  full.push_back(values[j]);
  std::vector<bool> mask(full.size() - 1, false);
  mask.back() = true;
  return make_example(full, std::move(mask));
}

int num_triggers(int vocab_size) { return (vocab_size - SpecialTokens::kReserved) / 2; }

std::vector<int> prior_map(int vocab_size) {
  const int content = vocab_size - SpecialTokens::kReserved;
  const int triggers = num_triggers(vocab_size);
  const int answers = content - triggers;
  SeededRng rng(kPriorMapSeed);
  std::vector<int> perm = distinct_draws(rng, triggers, answers, answers);
  std::vector<int> map(sz(triggers));
  for (int i = 0; i < triggers; ++i) {
    map[sz(i)] = perm[sz(i % answers)];
  }
  return map;
}

Example gen_prior_conflict_example(const TaskSpec& spec, SeededRng& rng) {
  spec.validate(spec.seq_len);
  const auto special = SpecialTokens::for_vocab(spec.vocab_size);
  const int triggers = num_triggers(spec.vocab_size);
  const int answers = spec.content_size() - triggers;
  const auto prior = prior_map(spec.vocab_size);

  const auto keys = distinct_draws(rng, 0, triggers, spec.num_pairs);
  const auto j = sz(rng.uniform_int(sz(spec.num_pairs)));
  const bool conflict = rng.uniform() < spec.conflict_rate;
  int evidence = prior[sz(keys[j])];
  if (conflict) {
    // Uniform over answers other than the habitual one.
    const int habitual_idx = evidence - triggers;
    int idx = static_cast<int>(rng.uniform_int(sz(answers - 1)));
    if (idx >= habitual_idx) {
      ++idx;
    }
    evidence = triggers + idx;
  }
  TokenSequence full{special.bos};
  for (std::size_t i = 0; i < keys.size(); ++i) {
    full.push_back(keys[i]);
    full.push_back(i == j ? evidence : prior[sz(keys[i])]);
  }
  full.push_back(special.query);
  full.push_back(keys[j]);
  full.push_back(evidence);
  std::vector<bool> mask(full.size() - 1, false);
  mask.back() = true;
  Example ex = make_example(full, std::move(mask));
  ex.conflict.back() = conflict;
  return ex;
}

TaskStream::TaskStream(TaskSpec spec) : spec_(std::move(spec)), rng_(spec_.seed) {
  if (spec_.kind == TaskKind::TextCorpus) {
    throw std::invalid_argument("TaskStream: text corpora are loaded with load_text_corpus");
  }
}

Example TaskStream::next() {
  switch (spec_.kind) {
    case TaskKind::Copy:
      return gen_copy_example(spec_, rng_);
    case TaskKind::KvRecall:
      return gen_kv_recall_example(spec_, rng_);
    case TaskKind::PriorConflict:
      return gen_prior_conflict_example(spec_, rng_);
    case TaskKind::TextCorpus:
      break;
  }
  throw std::logic_error("TaskStream: unsupported task kind");
}

Batch TaskStream::next_batch(int n) {
  Batch b;
  b.examples.reserve(sz(n));
  for (int i = 0; i < n; ++i) {
    b.examples.push_back(next());
  }
  return b;
}

CharVocab CharVocab::from_text(const std::string& text, int capacity) {
  std::array<bool, 256> seen{};
  for (unsigned char c : text) {
    seen[c] = true;
  }
  CharVocab v;
  v.index_.fill(-1);
  for (int b = 0; b < 256; ++b) {
    if (seen[sz(b)]) {
      v.index_[sz(b)] = static_cast<int>(v.bytes_.size());
      v.bytes_.push_back(static_cast<unsigned char>(b));
    }
  }
  if (v.size() > capacity) {
    throw std::invalid_argument("corpus uses " + std::to_string(v.size()) +
                                " distinct bytes but only " + std::to_string(capacity) +
                                " content tokens are available");
  }
  return v;
}

std::vector<int> CharVocab::encode(const std::string& text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const int id = index_[static_cast<unsigned char>(text[i])];
    if (id < 0) {
      throw std::invalid_argument("byte at offset " + std::to_string(i) + " is not in the vocabulary");
    }
    ids.push_back(id);
  }
  return ids;
}

std::string CharVocab::decode(const std::vector<int>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= size()) {
      throw std::invalid_argument("token id " + std::to_string(id) + " is not a byte token");
    }
    out.push_back(static_cast<char>(bytes_[sz(id)]));
  }
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot read corpus file " + path.string());
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<Example> text_windows(const std::vector<int>& tokens, int window, int stride) {
  require(window >= 2, "text window must hold at least 2 tokens");
  require(stride >= 1, "text window stride must be >= 1");
  if (tokens.size() < sz(window)) {
    throw std::invalid_argument("corpus of " + std::to_string(tokens.size()) +
                                " tokens is shorter than one window of " +
                                std::to_string(window));
  }
  std::vector<Example> out;
  for (std::size_t start = 0; start + sz(window) <= tokens.size(); start += sz(stride)) {
    TokenSequence full(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                       tokens.begin() + static_cast<std::ptrdiff_t>(start + sz(window)));
    out.push_back(make_example(full, std::vector<bool>(sz(window - 1), true)));
  }
  return out;
}

std::vector<Example> load_text_corpus(const std::filesystem::path& path, const CharVocab& vocab,
                                      int window, int stride) {
  const std::string text = read_text_file(path);
  if (text.empty()) {
    throw std::invalid_argument("corpus file " + path.string() + " is empty");
  }
  return text_windows(vocab.encode(text), window, stride);
}

std::vector<Example> make_dataset(const TaskSpec& spec, int count) {
  if (spec.kind == TaskKind::TextCorpus) {
    const std::string text = read_text_file(spec.corpus_path);
    if (text.empty()) {
      throw std::invalid_argument("corpus file " + spec.corpus_path + " is empty");
    }
    const auto vocab = CharVocab::from_text(text, spec.content_size());
    return text_windows(vocab.encode(text), spec.seq_len + 1, spec.seq_len + 1);
  }
  TaskStream stream(spec);
  std::vector<Example> out;
  out.reserve(sz(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(stream.next());
  }
  return out;
}

void write_jsonl(std::ostream& os, const std::vector<Example>& examples) {
  for (const Example& ex : examples) {
    nlohmann::json rec;
    rec["input_ids"] = ex.input;
    rec["target_ids"] = ex.target;
    rec["mask"] = ex.mask;
    os << rec.dump() << '\n';
  }
}

}  // namespace icla
