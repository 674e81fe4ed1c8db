#include "peftlab/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "peftlab/errors.hpp"

namespace peftlab {
namespace {

// N-grams are keyed by length-prefixing each token, so tokens containing
// arbitrary bytes can never collide across gram boundaries.
std::string gram_key(const TokenSeq& tokens, std::size_t start, std::size_t n) {
  std::string key;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& tok = tokens[start + i];
    key += std::to_string(tok.size());
    key += ':';
    key += tok;
  }
  return key;
}

using GramCounts = std::unordered_map<std::string, std::size_t>;

GramCounts count_ngrams(const TokenSeq& tokens, std::size_t n) {
  GramCounts counts;
  if (tokens.size() >= n) {
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[gram_key(tokens, i, n)];
  }
  return counts;
}

std::size_t clipped_overlap(const GramCounts& candidate, const GramCounts& reference) {
  std::size_t overlap = 0;
  for (const auto& [gram, ref_count] : reference) {
    auto it = candidate.find(gram);
    if (it != candidate.end()) overlap += std::min(it->second, ref_count);
  }
  return overlap;
}

std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      if (a[i - 1] == b[j - 1]) {
        cur[j] = prev[j - 1] + 1;
      } else {
        cur[j] = std::max(prev[j], cur[j - 1]);
      }
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

GramCounts count_skip_bigrams(const TokenSeq& tokens, std::size_t max_gap) {
  GramCounts counts;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    std::size_t limit = tokens.size();
    if (max_gap > 0) limit = std::min(limit, i + 1 + max_gap + 1);
    for (std::size_t j = i + 1; j < limit; ++j) {
      std::string key = std::to_string(tokens[i].size());
      key += ':';
      key += tokens[i];
      key += std::to_string(tokens[j].size());
      key += ':';
      key += tokens[j];
      ++counts[key];
    }
  }
  return counts;
}

std::size_t skip_bigram_total(std::size_t len, std::size_t max_gap) {
  if (len < 2) return 0;
  if (max_gap == 0) return len * (len - 1) / 2;
  std::size_t total = 0;
  for (std::size_t i = 0; i + 1 < len; ++i) {
    total += std::min(len - i - 1, max_gap + 1);
  }
  return total;
}

ExampleScores score_example(const CorpusExample& example, const EvalOptions& opts) {
  const TokenSeq source = tokenize(example.source, opts.tokenization);
  const TokenSeq candidate = tokenize(example.candidate, opts.tokenization);
  std::vector<TokenSeq> references;
  references.reserve(example.references.size());
  for (const std::string& ref : example.references) {
    references.push_back(tokenize(ref, opts.tokenization));
  }
  if (references.empty()) throw UsageError("corpus example has no references");

  ExampleScores scores;
  scores.rouge1 = rouge_n(candidate, references, 1);
  scores.rouge2 = rouge_n(candidate, references, 2);
  scores.rouge_l = rouge_l(candidate, references);
  scores.rouge_s = rouge_s(candidate, references, opts.rouge_s);
  WerBreakdown wer = word_error_rate(references.front(), candidate);
  scores.wer = wer.rate;
  scores.substitutions = wer.substitutions;
  scores.deletions = wer.deletions;
  scores.insertions = wer.insertions;
  scores.novel_unigrams = novel_ngram_fraction(source, candidate, 1);
  scores.novel_bigrams = novel_ngram_fraction(source, candidate, 2);
  return scores;
}

nlohmann::json scores_to_json(const ExampleScores& s) {
  nlohmann::json j;
  j["rouge1"] = s.rouge1;
  j["rouge2"] = s.rouge2;
  j["rouge_l"] = s.rouge_l;
  j["rouge_s"] = s.rouge_s;
  j["wer"] = s.wer;
  j["substitutions"] = s.substitutions;
  j["deletions"] = s.deletions;
  j["insertions"] = s.insertions;
  j["novel_unigrams"] = s.novel_unigrams ? nlohmann::json(*s.novel_unigrams) : nlohmann::json();
  j["novel_bigrams"] = s.novel_bigrams ? nlohmann::json(*s.novel_bigrams) : nlohmann::json();
  return j;
}

void append_csv_value(std::string& out, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  out += buf;
}

}  // namespace

TokenSeq tokenize(std::string_view text, const TokenizeConfig& cfg) {
  TokenSeq tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      tokens.push_back(current);
      current.clear();
    }
  };
  for (char raw : text) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
      continue;
    }
    if (cfg.strip_punctuation && c < 0x80 && std::ispunct(c)) continue;
    if (cfg.lowercase && c < 0x80) c = static_cast<unsigned char>(std::tolower(c));
    current.push_back(static_cast<char>(c));
  }
  flush();
  return tokens;
}

double rouge_n(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
               std::size_t n) {
  if (n == 0) throw UsageError("rouge_n requires n >= 1");
  if (references.empty()) throw UsageError("rouge_n requires at least one reference");
  const GramCounts cand_counts = count_ngrams(candidate, n);
  double sum = 0.0;
  for (const TokenSeq& ref : references) {
    if (ref.size() < n) continue;
    const std::size_t total = ref.size() - n + 1;
    const std::size_t overlap = clipped_overlap(cand_counts, count_ngrams(ref, n));
    sum += static_cast<double>(overlap) / static_cast<double>(total);
  }
  return sum / static_cast<double>(references.size());
}

double rouge_l_single(const TokenSeq& candidate, const TokenSeq& reference) {
  if (reference.empty()) return 0.0;
  return static_cast<double>(lcs_length(candidate, reference)) /
         static_cast<double>(reference.size());
}

double rouge_l(const TokenSeq& candidate, const std::vector<TokenSeq>& references) {
  if (references.empty()) throw UsageError("rouge_l requires at least one reference");
  double sum = 0.0;
  for (const TokenSeq& ref : references) sum += rouge_l_single(candidate, ref);
  return sum / static_cast<double>(references.size());
}

double rouge_s(const TokenSeq& candidate, const std::vector<TokenSeq>& references,
               const RougeSConfig& cfg) {
  if (references.empty()) throw UsageError("rouge_s requires at least one reference");
  const GramCounts cand_counts = count_skip_bigrams(candidate, cfg.max_gap);
  double sum = 0.0;
  for (const TokenSeq& ref : references) {
    const std::size_t total = skip_bigram_total(ref.size(), cfg.max_gap);
    if (total == 0) continue;
    const std::size_t overlap = clipped_overlap(cand_counts, count_skip_bigrams(ref, cfg.max_gap));
    sum += static_cast<double>(overlap) / static_cast<double>(total);
  }
  return sum / static_cast<double>(references.size());
}

WerBreakdown word_error_rate(const TokenSeq& reference, const TokenSeq& hypothesis) {
  if (reference.empty()) {
    if (hypothesis.empty()) return {};
    throw UsageError("word_error_rate requires a non-empty reference");
  }
  const std::size_t R = reference.size();
  const std::size_t H = hypothesis.size();
  std::vector<std::vector<std::size_t>> d(R + 1, std::vector<std::size_t>(H + 1, 0));
  for (std::size_t i = 0; i <= R; ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= H; ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= R; ++i) {
    for (std::size_t j = 1; j <= H; ++j) {
      const std::size_t sub_cost = reference[i - 1] == hypothesis[j - 1] ? 0 : 1;
      d[i][j] = std::min({d[i - 1][j - 1] + sub_cost, d[i - 1][j] + 1, d[i][j - 1] + 1});
    }
  }

  WerBreakdown out;
  std::size_t i = R, j = H;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const std::size_t sub_cost = reference[i - 1] == hypothesis[j - 1] ? 0 : 1;
      if (d[i][j] == d[i - 1][j - 1] + sub_cost) {
        out.substitutions += sub_cost;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      ++out.deletions;
      --i;
      continue;
    }
    ++out.insertions;
    --j;
  }
  out.rate = static_cast<double>(out.distance()) / static_cast<double>(R);
  return out;
}

std::optional<double> novel_ngram_fraction(const TokenSeq& source, const TokenSeq& summary,
                                           std::size_t n) {
  if (n == 0) throw UsageError("novel_ngram_fraction requires n >= 1");
  if (summary.size() < n) return std::nullopt;
  std::unordered_set<std::string> source_grams;
  if (source.size() >= n) {
    for (std::size_t i = 0; i + n <= source.size(); ++i) {
      source_grams.insert(gram_key(source, i, n));
    }
  }
  const std::size_t total = summary.size() - n + 1;
  std::size_t novel = 0;
  for (std::size_t i = 0; i + n <= summary.size(); ++i) {
    if (!source_grams.count(gram_key(summary, i, n))) ++novel;
  }
  return static_cast<double>(novel) / static_cast<double>(total);
}

double unigram_overlap_fraction(const TokenSeq& text, const TokenSeq& summary) {
  if (summary.empty()) return 0.0;
  const std::size_t overlap = clipped_overlap(count_ngrams(text, 1), count_ngrams(summary, 1));
  return static_cast<double>(overlap) / static_cast<double>(summary.size());
}

bool passes_overlap_filter(const TokenSeq& text, const TokenSeq& summary, double lo, double hi) {
  const double f = unigram_overlap_fraction(text, summary);
  return lo < f && f < hi;
}

CorpusReport evaluate_corpus(const std::vector<CorpusExample>& corpus, const EvalOptions& opts) {
  CorpusReport report;
  report.example_count = corpus.size();
  report.tokenization = opts.tokenization;
  report.examples.resize(corpus.size());

  if (opts.parallel && corpus.size() > 1) {
    const std::size_t workers =
        std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), corpus.size());
    std::vector<std::thread> threads;
    std::exception_ptr first_error;
    std::mutex error_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < corpus.size(); i += workers) {
            report.examples[i] = score_example(corpus[i], opts);
          }
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      });
    }
    for (std::thread& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
  } else {
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      report.examples[i] = score_example(corpus[i], opts);
    }
  }

  std::size_t novel1_count = 0, novel2_count = 0;
  double novel1_sum = 0.0, novel2_sum = 0.0;
  for (const ExampleScores& s : report.examples) {
    report.means.rouge1 += s.rouge1;
    report.means.rouge2 += s.rouge2;
    report.means.rouge_l += s.rouge_l;
    report.means.rouge_s += s.rouge_s;
    report.means.wer += s.wer;
    report.means.substitutions += s.substitutions;
    report.means.deletions += s.deletions;
    report.means.insertions += s.insertions;
    if (s.novel_unigrams) {
      novel1_sum += *s.novel_unigrams;
      ++novel1_count;
    }
    if (s.novel_bigrams) {
      novel2_sum += *s.novel_bigrams;
      ++novel2_count;
    }
  }
  if (!report.examples.empty()) {
    const double inv = 1.0 / static_cast<double>(report.examples.size());
    report.means.rouge1 *= inv;
    report.means.rouge2 *= inv;
    report.means.rouge_l *= inv;
    report.means.rouge_s *= inv;
    report.means.wer *= inv;
  }
  if (novel1_count > 0) report.means.novel_unigrams = novel1_sum / novel1_count;
  if (novel2_count > 0) report.means.novel_bigrams = novel2_sum / novel2_count;
  return report;
}

std::string CorpusReport::to_json() const {
  nlohmann::json j;
  j["example_count"] = example_count;
  j["tokenization"] = {{"lowercase", tokenization.lowercase},
                       {"strip_punctuation", tokenization.strip_punctuation}};
  j["means"] = scores_to_json(means);
  nlohmann::json rows = nlohmann::json::array();
  for (const ExampleScores& s : examples) rows.push_back(scores_to_json(s));
  j["examples"] = rows;
  return j.dump(2);
}

std::string CorpusReport::to_csv() const {
  std::string out =
      "example,rouge1,rouge2,rouge_l,rouge_s,wer,"
      "substitutions,deletions,insertions,novel_unigrams,novel_bigrams\n";
  auto append_row = [&](const std::string& label, const ExampleScores& s) {
    out += label;
    for (double v : {s.rouge1, s.rouge2, s.rouge_l, s.rouge_s, s.wer}) {
      out += ',';
      append_csv_value(out, v);
    }
    for (std::size_t v : {s.substitutions, s.deletions, s.insertions}) {
      out += ',';
      out += std::to_string(v);
    }
    for (const std::optional<double>& v : {s.novel_unigrams, s.novel_bigrams}) {
      out += ',';
      if (v) append_csv_value(out, *v);
    }
    out += '\n';
  };
  for (std::size_t i = 0; i < examples.size(); ++i) {
    append_row(std::to_string(i), examples[i]);
  }
  append_row("mean", means);
  return out;
}

std::vector<CorpusExample> load_corpus_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open corpus file: " + path);
  std::vector<CorpusExample> corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const bool blank = line.find_first_not_of(" \t\r") == std::string::npos;
    if (blank) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
    auto fail = [&](const std::string& why) -> FormatError {
      return FormatError("corpus line " + std::to_string(line_no) + ": " + why);
    };
    if (!j.is_object()) throw fail("expected a JSON object");
    if (!j.contains("source") || !j["source"].is_string()) {
      throw fail("missing string field 'source'");
    }
    if (!j.contains("candidate") || !j["candidate"].is_string()) {
      throw fail("missing string field 'candidate'");
    }
    if (!j.contains("references") || !j["references"].is_array()) {
      throw fail("missing array field 'references'");
    }
    CorpusExample example;
    example.source = j["source"].get<std::string>();
    example.candidate = j["candidate"].get<std::string>();
    for (const auto& ref : j["references"]) {
      if (!ref.is_string()) throw fail("'references' must contain only strings");
      example.references.push_back(ref.get<std::string>());
    }
    corpus.push_back(std::move(example));
  }
  return corpus;
}

}  // namespace peftlab
