#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "consert/tensor.hpp"

namespace consert {

/// Token <-> id map with fixed special ids.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;

  Vocab();

  /// Returns the id of `token`, inserting it if absent. Throws on a frozen vocab.
  std::int32_t add(const std::string& token);
  /// Id of `token`, or kUnk.
  std::int32_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(std::int32_t id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  static Vocab from_tokens(const std::vector<std::string>& tokens);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
  bool frozen_ = false;
};

/// Lowercases, splits on whitespace (ASCII and the common Unicode space
/// characters) and strips leading/trailing ASCII punctuation from each piece.
/// Pieces that become empty are dropped.
std::vector<std::string> normalize_tokens(std::string_view text);

/// One sentence framed as [CLS] content... [SEP], not yet padded.
struct EncodedSentence {
  std::vector<std::int32_t> token_ids;
  std::vector<std::int32_t> position_ids;
  std::vector<float> attention_mask;

  std::size_t length() const { return token_ids.size(); }
};

EncodedSentence tokenize(std::string_view text, const Vocab& vocab, std::size_t max_len);

/// Specials first, then tokens with count >= min_count ordered by
/// (count desc, token asc). The result is frozen.
Vocab build_vocab(std::span<const std::string> corpus, std::size_t min_count = 1);

/// Sentences padded with [PAD] to the longest real length in the batch.
struct Batch {
  std::size_t size = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> token_ids;     // size * length
  std::vector<std::int32_t> position_ids;  // size * length
  Tensor mask;                             // [size, length]
};

Batch collate(std::span<const EncodedSentence> sentences);

struct SentencePairExample {
  std::string sentence_a;
  std::string sentence_b;
  double gold = 0.0;

  bool operator==(const SentencePairExample&) const = default;
};

enum class NliLabel : std::int32_t { kContradiction = 0, kEntailment = 1, kNeutral = 2 };
inline constexpr std::size_t kNliClasses = 3;

std::string_view nli_label_name(NliLabel label);
NliLabel parse_nli_label(std::string_view name);

struct NliExample {
  std::string premise;
  std::string hypothesis;
  NliLabel label = NliLabel::kEntailment;

  bool operator==(const NliExample&) const = default;
};

[[noreturn]] void throw_data_error(const std::string& message);

struct LineError {
  std::size_t line = 0;
  std::string message;
};

template <typename T>
struct ParseResult {
  std::vector<T> examples;
  std::vector<LineError> errors;

  bool ok() const { return errors.empty(); }
};

/// `sentence_a<TAB>sentence_b<TAB>score`, '#' lines skipped, LF or CRLF.
ParseResult<SentencePairExample> parse_sts_tsv(std::istream& in);
ParseResult<SentencePairExample> load_sts_tsv(const std::filesystem::path& path);
void write_sts_tsv(std::ostream& out, std::span<const SentencePairExample> examples);

/// `premise<TAB>hypothesis<TAB>label`.
ParseResult<NliExample> parse_nli_tsv(std::istream& in);
ParseResult<NliExample> load_nli_tsv(const std::filesystem::path& path);
void write_nli_tsv(std::ostream& out, std::span<const NliExample> examples);

/// One sentence per line; blank lines are skipped.
std::vector<std::string> parse_unlabeled(std::istream& in);
std::vector<std::string> load_unlabeled(const std::filesystem::path& path);
void write_unlabeled(std::ostream& out, std::span<const std::string> sentences);

/// Message listing every line error, prefixed by `source`.
std::string describe_errors(const std::vector<LineError>& errors, const std::string& source);

/// Throws DataError listing every line error if the parse had any.
template <typename T>
std::vector<T> require_clean(ParseResult<T> result, const std::string& source) {
  if (!result.ok()) throw_data_error(describe_errors(result.errors, source));
  return std::move(result.examples);
}

/// Sorted indices of a uniform sample of `n` positions without replacement.
/// Asking for at least the whole pool returns every index and emits a warning.
std::vector<std::size_t> subsample_indices(std::size_t pool_size, std::size_t n,
                                           std::uint64_t seed);

std::vector<std::string> subsample(std::span<const std::string> pool, std::size_t n,
                                   std::uint64_t seed);

/// Templated synthetic STS/NLI data with graded similarity and Zipf-like
/// token frequencies.
struct SyntheticCorpus {
  std::vector<std::string> unlabeled;
  std::vector<SentencePairExample> dev;
  std::vector<SentencePairExample> test;
  std::vector<NliExample> nli;
};

struct SyntheticOptions {
  std::size_t n_templates = 40;
  std::size_t n_per_template = 50;
  std::size_t n_dev_pairs = 300;
  std::size_t n_test_pairs = 600;
  std::size_t n_nli = 1000;
};

SyntheticCorpus make_synthetic_corpus(std::uint64_t seed, const SyntheticOptions& options = {});

/// Emits a warning through the process-wide sink (stderr by default).
void warn(std::string_view message);
using WarningSink = void (*)(std::string_view);
/// Replaces the sink; returns the previous one.
WarningSink set_warning_sink(WarningSink sink);

}  // namespace consert
