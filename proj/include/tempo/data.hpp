#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tempo/model.hpp"
#include "tempo/tokens.hpp"

namespace tempo {

using Sentence = std::vector<std::string>;

struct SentencePair {
  Sentence source;
  Sentence target;
  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

using Corpus = std::vector<SentencePair>;

enum class TaskKind { kCopy, kReverse, kShiftSubstitution, kBigramGrammar };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::kCopy;
  std::size_t alphabet_size = 64;
  std::size_t min_length = 5;
  std::size_t max_length = 20;
  std::size_t train_size = 2000;
  std::size_t dev_size = 200;
  std::size_t test_size = 200;
  // Probability that a target token is replaced by a different random symbol.
  double noise_rate = 0.0;
  // Whether dev/test targets receive noise too (train always does).
  bool noisy_eval = false;
  std::uint64_t seed = 1;
  // Non-empty: one-to-many corpus with one tagged copy of every source per kind.
  std::vector<TaskKind> multilingual_kinds;

  void validate() const;
};

struct SplitCorpus {
  Corpus train, dev, test;
  // Number of target tokens replaced by noise in the training split.
  std::size_t train_noise_tokens = 0;
  std::size_t train_target_tokens = 0;
};

// Symbol name for alphabet index i.
std::string symbol(std::size_t i);

// Applies the noise-free transduction of `kind` to a source sentence.
Sentence transduce(TaskKind kind, const Sentence& source, std::size_t alphabet_size);

SplitCorpus generate_synthetic_corpus(const SyntheticTaskSpec& spec);

// Language tag prepended to sources of the given transduction, e.g. "<2reverse>".
std::string target_tag(TaskKind kind);
bool is_tag_token(const std::string& token);

enum class Side { kSource, kTarget };

class Vocabulary {
 public:
  Vocabulary();

  // Tags get ids right after the reserved block; corpus tokens follow by
  // descending frequency, then lexicographically.
  static Vocabulary build(const Corpus& corpus, Side side, const std::vector<std::string>& tags = {});
  // One token per line; line n holds id n + kReservedIds.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  int id(const std::string& token) const;  // UNK for unseen tokens
  const std::string& token(int id) const;
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  TokenIds encode(const Sentence& sentence) const;
  // Drops reserved tokens.
  Sentence decode(std::span<const int> ids) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void append(const std::string& token);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// Returns the pair with `tag` in front of its source.
SentencePair prepend_target_tag(const SentencePair& pair, const std::string& tag, const Vocabulary& source_vocab);

struct Batch {
  TokenBatch source;  // tokens + EOS, padded
  TokenBatch target;  // BOS + tokens + EOS, padded
  std::vector<std::size_t> pair_indices;

  // Decoder input: target without its last column.
  TokenBatch decoder_input() const;
  // Labels aligned with decoder_input rows, flattened; PAD where masked.
  std::vector<int> labels() const;
  double padding_fraction() const;
};

struct EncodedPair {
  TokenIds source;  // ends with EOS
  TokenIds target;  // BOS ... EOS
};

std::vector<EncodedPair> encode_corpus(const Corpus& corpus, const Vocabulary& src, const Vocabulary& tgt);

// Builds one epoch of batches: pairs are shuffled with `seed`, grouped by
// length when `bucket` is set, and the batch order is shuffled again.
std::vector<Batch> make_batches(std::span<const EncodedPair> pairs, std::size_t batch_size,
                                std::uint64_t seed, bool bucket = true);

// Plain-text parallel files, one whitespace-tokenized sentence per line.
void write_corpus(const Corpus& corpus, const std::filesystem::path& source_path,
                  const std::filesystem::path& target_path);
Corpus read_corpus(const std::filesystem::path& source_path, const std::filesystem::path& target_path);
std::vector<Sentence> read_sentences(const std::filesystem::path& path);
Sentence split_tokens(const std::string& line);
std::string join_tokens(const Sentence& tokens);

}  // namespace tempo
