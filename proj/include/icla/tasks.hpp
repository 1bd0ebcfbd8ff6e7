#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "icla/model.hpp"
#include "icla/numerics.hpp"

namespace icla {

enum class TaskKind { Copy, KvRecall, PriorConflict, TextCorpus };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

/// Special token ids sit at the top of the vocabulary.
struct SpecialTokens {
  int bos;
  int sep;
  int query;
  static constexpr int kReserved = 3;
  static SpecialTokens for_vocab(int vocab_size) {
    return {vocab_size - 1, vocab_size - 2, vocab_size - 3};
  }
};

struct TaskSpec {
  TaskKind kind = TaskKind::PriorConflict;
  int vocab_size = 64;
  int seq_len = 16;  // upper bound on the model input length
  int num_pairs = 4;
  double conflict_rate = 0.2;
  std::uint64_t seed = 0;
  std::string corpus_path;  // TextCorpus only

  int content_size() const { return vocab_size - SpecialTokens::kReserved; }
  /// Throws std::invalid_argument naming the offending field.
  void validate(int max_seq_len) const;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

/// One training sequence: next-token targets aligned with the input.
struct Example {
  TokenSequence input;
  TokenSequence target;
  std::vector<bool> mask;      // loss positions
  std::vector<bool> conflict;  // PriorConflict: masked position where evidence overrides the prior
};

struct Batch {
  std::vector<Example> examples;
};

/// Builds an Example from a full sequence and a mask over target positions.
Example make_example(const TokenSequence& full, std::vector<bool> target_mask);

/// [BOS, payload, SEP, payload]; loss on the second payload copy.
Example gen_copy_example(const TaskSpec& spec, SeededRng& rng);
/// [(k v) pairs..., QUERY, k_j] -> v_j, keys distinct, keys/values from disjoint alphabets.
Example gen_kv_recall_example(const TaskSpec& spec, SeededRng& rng);
/// Like kv recall, but every trigger has a habitual answer; the queried pair's evidence
/// contradicts it with probability conflict_rate.
Example gen_prior_conflict_example(const TaskSpec& spec, SeededRng& rng);

/// Habitual answer for each trigger token (fixed for a given vocabulary size).
std::vector<int> prior_map(int vocab_size);
int num_triggers(int vocab_size);

/// Deterministic example stream for the synthetic tasks.
class TaskStream {
 public:
  explicit TaskStream(TaskSpec spec);
  Example next();
  Batch next_batch(int n);
  const TaskSpec& spec() const { return spec_; }

 private:
  TaskSpec spec_;
  SeededRng rng_;
};

/// Byte-level vocabulary over the bytes observed in a corpus.
class CharVocab {
 public:
  static CharVocab from_text(const std::string& text, int capacity);
  int size() const { return static_cast<int>(bytes_.size()); }
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  std::vector<unsigned char> bytes_;
  std::array<int, 256> index_{};
};

std::string read_text_file(const std::filesystem::path& path);

/// Fixed-length windows of `window` tokens (input = window - 1 tokens) every `stride` tokens.
std::vector<Example> load_text_corpus(const std::filesystem::path& path, const CharVocab& vocab,
                                      int window, int stride);
std::vector<Example> text_windows(const std::vector<int>& tokens, int window, int stride);

/// `count` examples from the stream, or every window for TextCorpus.
std::vector<Example> make_dataset(const TaskSpec& spec, int count);

/// One JSON object per line: {"input_ids", "target_ids", "mask"}.
void write_jsonl(std::ostream& os, const std::vector<Example>& examples);

}  // namespace icla
