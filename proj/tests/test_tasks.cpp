#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "helpers.hpp"
#include "icla/tasks.hpp"
#include "icla/training.hpp"

using namespace icla;

namespace {

TaskSpec spec_of(TaskKind kind, int vocab, int seq_len, int pairs = 2, double rate = 0.5,
                 std::uint64_t seed = 1) {
  TaskSpec s;
  s.kind = kind;
  s.vocab_size = vocab;
  s.seq_len = seq_len;
  s.num_pairs = pairs;
  s.conflict_rate = rate;
  s.seed = seed;
  return s;
}

// Predicts the masked token from the input alone, by lookup.
int lookup_answer(const Example& ex, std::size_t t) {
  const int key = ex.input[t];
  for (std::size_t i = 1; i + 1 < t; i += 2) {
    if (ex.input[i] == key) return ex.input[i + 1];
  }
  return -1;
}

Tensor one_hot_logits(const Example& ex, int vocab, const std::vector<int>& predictions) {
  Tensor lg({ex.input.size(), static_cast<std::size_t>(vocab)});
  for (std::size_t t = 0; t < ex.input.size(); ++t) {
    lg(t, static_cast<std::size_t>(std::max(0, predictions[t]))) = 1000.0;
  }
  return lg;
}

}  // namespace

TEST(TaskKind, ParseRoundTrip) {
  for (TaskKind k : {TaskKind::Copy, TaskKind::KvRecall, TaskKind::PriorConflict, TaskKind::TextCorpus}) {
    EXPECT_EQ(parse_task_kind(to_string(k)), k);
  }
  EXPECT_THROW(parse_task_kind("sort"), std::invalid_argument);
}

TEST(TaskSpec, Validation) {
  EXPECT_NO_THROW(spec_of(TaskKind::KvRecall, 16, 8, 2).validate(8));
  EXPECT_THROW(spec_of(TaskKind::KvRecall, 16, 8, 3).validate(8), std::invalid_argument);
  EXPECT_THROW(spec_of(TaskKind::KvRecall, 16, 9, 2).validate(8), std::invalid_argument);
  EXPECT_THROW(spec_of(TaskKind::Copy, 3, 8).validate(8), std::invalid_argument);
  EXPECT_THROW(spec_of(TaskKind::PriorConflict, 16, 8, 2, 1.5).validate(8), std::invalid_argument);
  EXPECT_THROW(spec_of(TaskKind::TextCorpus, 16, 8).validate(8), std::invalid_argument);
}

TEST(Copy, PayloadOfOne) {
  SeededRng rng(1);
  const Example ex = gen_copy_example(spec_of(TaskKind::Copy, 10, 3), rng);
  const auto sp = SpecialTokens::for_vocab(10);
  ASSERT_EQ(ex.input.size(), 3u);
  EXPECT_EQ(ex.input[0], sp.bos);
  EXPECT_EQ(ex.input[2], sp.sep);
  EXPECT_EQ(ex.mask, (std::vector<bool>{false, false, true}));
  EXPECT_EQ(ex.target[2], ex.input[1]);
}

TEST(Copy, SecondHalfRepeatsFirst) {
  TaskStream stream(spec_of(TaskKind::Copy, 20, 11));
  for (int i = 0; i < 20; ++i) {
    const Example ex = stream.next();
    ASSERT_EQ(ex.input.size(), 11u);
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_EQ(ex.target[6 + j], ex.input[1 + j]);
      EXPECT_TRUE(ex.mask[6 + j]);
      EXPECT_LT(ex.input[1 + j], 17);
    }
    EXPECT_EQ(std::count(ex.mask.begin(), ex.mask.end(), true), 5);
  }
}

TEST(Copy, OptimalAndUniformPredictorBounds) {
  const int vocab = 12;
  const Batch b = TaskStream(spec_of(TaskKind::Copy, vocab, 9)).next_batch(10);
  for (const Example& ex : b.examples) {
    std::vector<int> pred(ex.input.size(), 0);
    for (std::size_t t = 0; t < ex.input.size(); ++t) {
      if (ex.mask[t]) pred[t] = ex.input[t - 4];
    }
    EXPECT_LT(lm_loss(one_hot_logits(ex, vocab, pred), ex.target, ex.mask), 1e-300);

    Tensor uniform({ex.input.size(), static_cast<std::size_t>(vocab)});
    for (std::size_t t = 0; t < ex.input.size(); ++t)
      for (int s = vocab - SpecialTokens::kReserved; s < vocab; ++s)
        uniform(t, static_cast<std::size_t>(s)) = -1e4;
    EXPECT_NEAR(lm_loss(uniform, ex.target, ex.mask), std::log(vocab - SpecialTokens::kReserved),
                1e-12);
  }
}

TEST(Streams, SameSeedSameBatches) {
  for (TaskKind k : {TaskKind::Copy, TaskKind::KvRecall, TaskKind::PriorConflict}) {
    const TaskSpec s = spec_of(k, 24, 9, 3, 0.5, 42);
    const Batch a = TaskStream(s).next_batch(30);
    const Batch b = TaskStream(s).next_batch(30);
    for (std::size_t i = 0; i < 30; ++i) {
      EXPECT_EQ(a.examples[i].input, b.examples[i].input);
      EXPECT_EQ(a.examples[i].target, b.examples[i].target);
      EXPECT_EQ(a.examples[i].mask, b.examples[i].mask);
    }
    const Batch c = TaskStream(spec_of(k, 24, 9, 3, 0.5, 43)).next_batch(30);
    bool differs = false;
    for (std::size_t i = 0; i < 30; ++i) differs = differs || c.examples[i].input != a.examples[i].input;
    EXPECT_TRUE(differs);
  }
}

TEST(KvRecall, SinglePairIsCopyOfLastValue) {
  TaskStream stream(spec_of(TaskKind::KvRecall, 16, 5, 1));
  for (int i = 0; i < 10; ++i) {
    const Example ex = stream.next();
    ASSERT_EQ(ex.input.size(), 5u);
    EXPECT_EQ(ex.input[4], ex.input[1]);
    EXPECT_EQ(ex.target[4], ex.input[2]);
  }
}

TEST(KvRecall, QueriedKeyOnceAndLookupOracleIsExact) {
  const int vocab = 30;
  TaskStream stream(spec_of(TaskKind::KvRecall, vocab, 13, 5));
  const int half = (vocab - SpecialTokens::kReserved) / 2;
  for (int i = 0; i < 200; ++i) {
    const Example ex = stream.next();
    const std::size_t q = ex.input.size() - 1;
    const int key = ex.input[q];
    int occurrences = 0;
    for (std::size_t p = 1; p < q - 1; p += 2) {
      occurrences += ex.input[p] == key;
      EXPECT_LT(ex.input[p], half);
      EXPECT_GE(ex.input[p + 1], half);
    }
    EXPECT_EQ(occurrences, 1);
    std::vector<int> pred(ex.input.size(), 0);
    pred[q] = lookup_answer(ex, q);
    EXPECT_EQ(pred[q], ex.target[q]);
    EXPECT_LT(lm_loss(one_hot_logits(ex, vocab, pred), ex.target, ex.mask), 1e-300);
  }
}

TEST(PriorConflict, ZeroRateFollowsPrior) {
  const auto prior = prior_map(24);
  TaskStream stream(spec_of(TaskKind::PriorConflict, 24, 9, 3, 0.0));
  for (int i = 0; i < 100; ++i) {
    const Example ex = stream.next();
    const std::size_t q = ex.input.size() - 1;
    EXPECT_EQ(ex.target[q], prior[static_cast<std::size_t>(ex.input[q])]);
    EXPECT_FALSE(ex.conflict[q]);
  }
}

TEST(PriorConflict, FullRateAlwaysContradictsPriorAndFollowsEvidence) {
  const auto prior = prior_map(24);
  TaskStream stream(spec_of(TaskKind::PriorConflict, 24, 9, 3, 1.0));
  for (int i = 0; i < 100; ++i) {
    const Example ex = stream.next();
    const std::size_t q = ex.input.size() - 1;
    EXPECT_TRUE(ex.conflict[q]);
    EXPECT_NE(ex.target[q], prior[static_cast<std::size_t>(ex.input[q])]);
    EXPECT_EQ(lookup_answer(ex, q), ex.target[q]);
  }
}

TEST(PriorConflict, ConflictFractionConverges) {
  TaskStream stream(spec_of(TaskKind::PriorConflict, 32, 7, 2, 0.3, 9));
  int conflicts = 0, evidence_hits = 0;
  for (int i = 0; i < 10000; ++i) {
    const Example ex = stream.next();
    const std::size_t q = ex.input.size() - 1;
    conflicts += ex.conflict[q];
    evidence_hits += ex.conflict[q] && lookup_answer(ex, q) == ex.target[q];
  }
  EXPECT_NEAR(conflicts / 10000.0, 0.3, 0.02);
  EXPECT_EQ(evidence_hits, conflicts);
}

TEST(PriorConflict, PriorMapIsFixed) {
  EXPECT_EQ(prior_map(32), prior_map(32));
  const auto m = prior_map(32);
  EXPECT_EQ(static_cast<int>(m.size()), num_triggers(32));
  for (int a : m) {
    EXPECT_GE(a, num_triggers(32));
    EXPECT_LT(a, 32 - SpecialTokens::kReserved);
  }
}

TEST(TextCorpus, RoundTripAndWindows) {
  const std::string text = "the cat sat on the mat. ";
  const CharVocab vocab = CharVocab::from_text(text, 61);
  EXPECT_EQ(vocab.decode(vocab.encode(text)), text);
  EXPECT_THROW(vocab.encode("xyz"), std::invalid_argument);
  EXPECT_THROW(CharVocab::from_text(text, 3), std::invalid_argument);

  const auto ids = vocab.encode(text);
  const auto windows = text_windows(ids, 5, 5);
  EXPECT_EQ(windows.size(), ids.size() / 5);
  for (std::size_t w = 0; w < windows.size(); ++w) {
    EXPECT_EQ(windows[w].input[0], ids[w * 5]);
    EXPECT_EQ(windows[w].target.back(), ids[w * 5 + 4]);
  }
  EXPECT_THROW(text_windows(ids, static_cast<int>(ids.size()) + 1, 1), std::invalid_argument);
}

TEST(TextCorpus, LoadFromFile) {
  const auto dir = testutil::scratch_dir("corpus");
  const auto path = dir / "corpus.txt";
  std::ofstream(path) << "abcabcabcabc";
  const std::string text = read_text_file(path);
  const auto vocab = CharVocab::from_text(text, 10);
  const auto ex = load_text_corpus(path, vocab, 4, 4);
  EXPECT_EQ(ex.size(), 3u);
  TaskSpec s = spec_of(TaskKind::TextCorpus, 13, 3);
  s.corpus_path = path.string();
  EXPECT_EQ(make_dataset(s, 0).size(), 3u);
  std::ofstream(dir / "short.txt") << "ab";
  s.corpus_path = (dir / "short.txt").string();
  EXPECT_THROW(make_dataset(s, 0), std::invalid_argument);
}

TEST(Jsonl, RecordsParse) {
  const auto data = make_dataset(spec_of(TaskKind::KvRecall, 16, 7, 2), 3);
  std::ostringstream os;
  write_jsonl(os, data);
  std::istringstream in(os.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["input_ids"].get<TokenSequence>(), data[n].input);
    EXPECT_EQ(j["target_ids"].get<TokenSequence>(), data[n].target);
    EXPECT_EQ(j["mask"].get<std::vector<bool>>(), data[n].mask);
    ++n;
  }
  EXPECT_EQ(n, 3u);
}
