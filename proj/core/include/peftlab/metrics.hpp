#pragma once

// Text-overlap metrics for summary and transcription quality: n-gram overlap
// recall (clipped counts, multi-reference average), longest-common-
// subsequence recall, skip-bigram recall, word error rate with an operation
// breakdown, novel n-gram abstractiveness, and the unigram-overlap corpus
// filter. Plus a small corpus-evaluation driver with JSON/CSV reporting.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace peftlab {

struct TokenizeConfig {
  bool lowercase = true;
  bool strip_punctuation = true;
};

using TokenSeq = std::vector<std::string>;

// Deterministic byte-level tokenizer: optional ASCII lowercasing and
// punctuation stripping, then whitespace splitting. Tokens emptied by
// stripping vanish.
TokenSeq tokenize(std::string_view text, const TokenizeConfig& cfg = {});

// Recall of clipped n-gram counts against each reference, averaged over
// references. A reference shorter than n contributes zero. Empty reference
// lists are a UsageError; n must be positive.
double rouge_n(const TokenSeq& candidate, const std::vector<TokenSeq>& references, std::size_t n);

// LCS length over reference length, averaged over references.
double rouge_l(const TokenSeq& candidate, const std::vector<TokenSeq>& references);
double rouge_l_single(const TokenSeq& candidate, const TokenSeq& reference);

struct RougeSConfig {
  // Maximum tokens allowed between the two members of a skip-bigram;
  // zero means unlimited.
  std::size_t max_gap = 0;
};

// Recall of clipped skip-bigram counts, averaged over references. References
// with fewer than two tokens contribute zero.
double rouge_s(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
               const RougeSConfig& cfg = {});

struct WerBreakdown {
  double rate = 0.0;
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;

  std::size_t distance() const { return substitutions + deletions + insertions; }
};

// (S + D + I) / len(reference) via edit-distance alignment. Deliberately not
// clamped: a hypothesis much longer than the reference scores above 1. The
// backtrace prefers substitution/match over deletion over insertion, so the
// breakdown is deterministic. An empty reference is only legal against an
// empty hypothesis.
WerBreakdown word_error_rate(const TokenSeq& reference, const TokenSeq& hypothesis);

// Fraction of the summary's n-gram occurrences absent from the source.
// Undefined (nullopt) when the summary has fewer than n tokens.
std::optional<double> novel_ngram_fraction(const TokenSeq& source, const TokenSeq& summary,
                                           std::size_t n);

// Clipped unigram overlap between summary and text, normalized by summary
// length. Zero for an empty summary.
double unigram_overlap_fraction(const TokenSeq& text, const TokenSeq& summary);

// Keep iff lo < overlap < hi, both bounds strict.
bool passes_overlap_filter(const TokenSeq& text, const TokenSeq& summary, double lo, double hi);

struct CorpusExample {
  std::string source;
  std::string candidate;
  std::vector<std::string> references;
};

struct ExampleScores {
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rouge_l = 0.0;
  double rouge_s = 0.0;
  double wer = 0.0;
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  // Candidate-vs-source abstractiveness; absent when the candidate is
  // shorter than the n-gram order.
  std::optional<double> novel_unigrams;
  std::optional<double> novel_bigrams;
};

struct CorpusReport {
  std::vector<ExampleScores> examples;
  // Arithmetic means of the per-example scores; operation counts are summed;
  // novel-n-gram means skip undefined entries.
  ExampleScores means;
  std::size_t example_count = 0;
  TokenizeConfig tokenization;

  std::string to_json() const;
  std::string to_csv() const;
};

struct EvalOptions {
  TokenizeConfig tokenization;
  RougeSConfig rouge_s;
  // Scores examples across threads; the report order never depends on it.
  bool parallel = false;
};

// WER uses the first reference; overlap metrics use all of them.
CorpusReport evaluate_corpus(const std::vector<CorpusExample>& corpus,
                             const EvalOptions& opts = {});

// One JSON object per line: {"source": .., "candidate": .., "references":
// [..]}. Malformed lines raise FormatError naming the line number.
std::vector<CorpusExample> load_corpus_jsonl(const std::string& path);

}  // namespace peftlab
