#include "tempo/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tempo/error.hpp"
#include "tempo/rng.hpp"

namespace tempo {

namespace {

const char* const kReservedTokens[kReservedIds] = {"<pad>", "<s>", "</s>", "<unk>"};

std::size_t symbol_index(const std::string& token) {
  return static_cast<std::size_t>(std::stoul(token.substr(1)));
}

std::string sentence_key(const Sentence& s) { return join_tokens(s); }

}  // namespace

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kShiftSubstitution: return "shift";
    case TaskKind::kBigramGrammar: return "bigram";
  }
  return "copy";
}

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "copy") return TaskKind::kCopy;
  if (name == "reverse") return TaskKind::kReverse;
  if (name == "shift" || name == "shift-substitution") return TaskKind::kShiftSubstitution;
  if (name == "bigram" || name == "bigram-grammar") return TaskKind::kBigramGrammar;
  throw ConfigError("unknown task kind '" + name + "'");
}

void SyntheticTaskSpec::validate() const {
  if (alphabet_size < 2) throw ConfigError("alphabet_size must be at least 2");
  if (min_length == 0 || min_length > max_length) throw ConfigError("invalid length range");
  if (!(noise_rate >= 0.0 && noise_rate < 1.0)) throw ConfigError("noise_rate must lie in [0, 1)");
  if (train_size == 0) throw ConfigError("train_size must be positive");
}

std::string symbol(std::size_t i) { return "s" + std::to_string(i); }

Sentence transduce(TaskKind kind, const Sentence& source, std::size_t alphabet_size) {
  Sentence out;
  out.reserve(source.size());
  switch (kind) {
    case TaskKind::kCopy:
      out = source;
      break;
    case TaskKind::kReverse:
      out.assign(source.rbegin(), source.rend());
      break;
    case TaskKind::kShiftSubstitution:
      for (const auto& tok : source) out.push_back(symbol((symbol_index(tok) + 3) % alphabet_size));
      break;
    case TaskKind::kBigramGrammar: {
      std::size_t prev = 0;
      for (const auto& tok : source) {
        const std::size_t cur = symbol_index(tok);
        out.push_back(symbol((cur + prev) % alphabet_size));
        prev = cur;
      }
      break;
    }
  }
  return out;
}

std::string target_tag(TaskKind kind) { return "<2" + to_string(kind) + ">"; }

bool is_tag_token(const std::string& token) {
  return token.size() > 3 && token.rfind("<2", 0) == 0 && token.back() == '>';
}

SplitCorpus generate_synthetic_corpus(const SyntheticTaskSpec& spec) {
  spec.validate();
  SplitCorpus out;
  std::set<std::string> seen;

  auto sample_sources = [&](std::size_t count, std::uint64_t salt) {
    Rng rng(derive_seed(spec.seed, salt));
    std::vector<Sentence> sources;
    sources.reserve(count);
    std::size_t attempts = 0;
    while (sources.size() < count) {
      if (++attempts > count * 1000 + 1000) throw ConfigError("cannot draw enough distinct sentences");
      const std::size_t len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
      Sentence s(len);
      for (auto& tok : s) tok = symbol(rng.below(spec.alphabet_size));
      if (!seen.insert(sentence_key(s)).second) continue;
      sources.push_back(std::move(s));
    }
    return sources;
  };

  auto make_pairs = [&](const std::vector<Sentence>& sources, bool noisy, std::uint64_t salt, bool count) {
    Rng noise(derive_seed(spec.seed, salt));
    Corpus pairs;
    std::vector<TaskKind> kinds = spec.multilingual_kinds;
    const bool tagged = !kinds.empty();
    if (!tagged) kinds.push_back(spec.kind);
    for (TaskKind kind : kinds) {
      for (const auto& src : sources) {
        SentencePair p{src, transduce(kind, src, spec.alphabet_size)};
        if (noisy && spec.noise_rate > 0.0) {
          for (auto& tok : p.target) {
            if (!noise.bernoulli(spec.noise_rate)) continue;
            const std::size_t orig = symbol_index(tok);
            std::size_t repl = noise.below(spec.alphabet_size - 1);
            if (repl >= orig) ++repl;
            tok = symbol(repl);
            if (count) ++out.train_noise_tokens;
          }
        }
        if (count) out.train_target_tokens += p.target.size();
        if (tagged) p.source.insert(p.source.begin(), target_tag(kind));
        pairs.push_back(std::move(p));
      }
    }
    return pairs;
  };

  const auto train_src = sample_sources(spec.train_size, 1);
  const auto dev_src = sample_sources(spec.dev_size, 2);
  const auto test_src = sample_sources(spec.test_size, 3);
  out.train = make_pairs(train_src, true, 11, true);
  out.dev = make_pairs(dev_src, spec.noisy_eval, 12, false);
  out.test = make_pairs(test_src, spec.noisy_eval, 13, false);
  return out;
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() {
  for (const char* tok : kReservedTokens) append(tok);
}

void Vocabulary::append(const std::string& token) {
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const Corpus& corpus, Side side, const std::vector<std::string>& tags) {
  if (corpus.empty()) throw ContractError("cannot build a vocabulary from an empty corpus");
  std::map<std::string, std::size_t> counts;
  std::set<std::string> tag_set(tags.begin(), tags.end());
  for (const auto& pair : corpus) {
    for (const auto& tok : side == Side::kSource ? pair.source : pair.target) {
      if (is_tag_token(tok)) {
        tag_set.insert(tok);
      } else {
        ++counts[tok];
      }
    }
  }
  Vocabulary v;
  for (const auto& tag : tag_set) v.append(tag);
  std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [tok, n] : ordered) {
    if (!v.contains(tok)) v.append(tok);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  Vocabulary v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.find_first_of(" \t") != std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": invalid vocabulary entry");
    }
    if (v.contains(line)) throw DataError(path.string() + ": duplicate token " + line);
    v.append(line);
  }
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary " + path.string());
  for (std::size_t i = kReservedIds; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenIds Vocabulary::encode(const Sentence& sentence) const {
  TokenIds ids;
  ids.reserve(sentence.size());
  for (const auto& tok : sentence) ids.push_back(id(tok));
  return ids;
}

Sentence Vocabulary::decode(std::span<const int> ids) const {
  Sentence out;
  for (int id : ids) {
    if (id >= kReservedIds) out.push_back(token(id));
  }
  return out;
}

SentencePair prepend_target_tag(const SentencePair& pair, const std::string& tag, const Vocabulary& source_vocab) {
  if (!is_tag_token(tag) || !source_vocab.contains(tag)) {
    throw ConfigError("tag '" + tag + "' is not registered in the source vocabulary");
  }
  SentencePair out = pair;
  out.source.insert(out.source.begin(), tag);
  return out;
}

// ---------------------------------------------------------------------------

TokenBatch Batch::decoder_input() const {
  TokenBatch in;
  in.batch = target.batch;
  in.length = target.length - 1;
  in.ids.reserve(in.batch * in.length);
  for (std::size_t b = 0; b < target.batch; ++b) {
    for (std::size_t t = 0; t + 1 < target.length; ++t) in.ids.push_back(target.at(b, t));
  }
  return in;
}

std::vector<int> Batch::labels() const {
  std::vector<int> out;
  out.reserve(target.batch * (target.length - 1));
  for (std::size_t b = 0; b < target.batch; ++b) {
    for (std::size_t t = 1; t < target.length; ++t) out.push_back(target.at(b, t));
  }
  return out;
}

double Batch::padding_fraction() const {
  const auto pads = std::count(source.ids.begin(), source.ids.end(), kPadId) +
                    std::count(target.ids.begin(), target.ids.end(), kPadId);
  return static_cast<double>(pads) / static_cast<double>(source.ids.size() + target.ids.size());
}

std::vector<EncodedPair> encode_corpus(const Corpus& corpus, const Vocabulary& src, const Vocabulary& tgt) {
  std::vector<EncodedPair> out;
  out.reserve(corpus.size());
  for (const auto& pair : corpus) {
    EncodedPair e;
    e.source = src.encode(pair.source);
    e.source.push_back(kEosId);
    e.target.push_back(kBosId);
    const auto t = tgt.encode(pair.target);
    e.target.insert(e.target.end(), t.begin(), t.end());
    e.target.push_back(kEosId);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Batch> make_batches(std::span<const EncodedPair> pairs, std::size_t batch_size,
                                std::uint64_t seed, bool bucket) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  Rng rng(seed);
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  if (bucket) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const auto ka = std::make_pair(pairs[a].source.size(), pairs[a].target.size());
      const auto kb = std::make_pair(pairs[b].source.size(), pairs[b].target.size());
      return ka < kb;
    });
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<TokenIds> src, tgt;
    Batch b;
    for (std::size_t i = start; i < end; ++i) {
      src.push_back(pairs[order[i]].source);
      tgt.push_back(pairs[order[i]].target);
      b.pair_indices.push_back(order[i]);
    }
    b.source = TokenBatch::from_sequences(src);
    b.target = TokenBatch::from_sequences(tgt);
    batches.push_back(std::move(b));
  }
  rng.shuffle(batches.begin(), batches.end());
  return batches;
}

// ---------------------------------------------------------------------------

Sentence split_tokens(const std::string& line) {
  std::istringstream is(line);
  Sentence out;
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string join_tokens(const Sentence& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

std::vector<Sentence> read_sentences(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(split_tokens(line));
  return out;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& source_path,
                  const std::filesystem::path& target_path) {
  std::ofstream src(source_path), tgt(target_path);
  if (!src || !tgt) throw DataError("cannot write corpus files");
  for (const auto& p : corpus) {
    src << join_tokens(p.source) << '\n';
    tgt << join_tokens(p.target) << '\n';
  }
}

Corpus read_corpus(const std::filesystem::path& source_path, const std::filesystem::path& target_path) {
  const auto src = read_sentences(source_path);
  const auto tgt = read_sentences(target_path);
  if (src.size() != tgt.size()) {
    throw DataError("line count mismatch: " + source_path.string() + " has " + std::to_string(src.size()) +
                    ", " + target_path.string() + " has " + std::to_string(tgt.size()));
  }
  Corpus out;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].empty()) throw DataError(source_path.string() + ":" + std::to_string(i + 1) + ": empty sentence");
    out.push_back({src[i], tgt[i]});
  }
  return out;
}

}  // namespace tempo
