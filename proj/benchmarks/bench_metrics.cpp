#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "peftlab/metrics.hpp"
#include "peftlab/rng.hpp"

namespace {

using namespace peftlab;

TokenSeq random_sentence(Rng& rng, std::size_t words, std::size_t vocab) {
  TokenSeq out;
  out.reserve(words);
  for (std::size_t i = 0; i < words; ++i) {
    out.push_back("w" + std::to_string(rng.below(vocab)));
  }
  return out;
}

std::string joined(const TokenSeq& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

std::vector<CorpusExample> synthetic_corpus(std::size_t examples, std::size_t words) {
  Rng rng(21);
  std::vector<CorpusExample> corpus;
  corpus.reserve(examples);
  for (std::size_t i = 0; i < examples; ++i) {
    TokenSeq source = random_sentence(rng, words * 2, 50);
    TokenSeq candidate = random_sentence(rng, words, 50);
    TokenSeq reference = candidate;
    // Perturb a third of the reference so scores sit strictly between 0 and 1.
    for (std::size_t k = 0; k < reference.size(); k += 3) {
      reference[k] = "w" + std::to_string(rng.below(50));
    }
    corpus.push_back({joined(source), joined(candidate), {joined(reference)}});
  }
  return corpus;
}

void BM_rouge1(benchmark::State& state) {
  Rng rng(5);
  TokenSeq candidate = random_sentence(rng, 40, 50);
  std::vector<TokenSeq> refs = {random_sentence(rng, 40, 50), random_sentence(rng, 40, 50)};
  for (auto _ : state) {
    benchmark::DoNotOptimize(rouge_n(candidate, refs, 1));
  }
}
BENCHMARK(BM_rouge1);

void BM_rouge2(benchmark::State& state) {
  Rng rng(6);
  TokenSeq candidate = random_sentence(rng, 40, 50);
  std::vector<TokenSeq> refs = {random_sentence(rng, 40, 50)};
  for (auto _ : state) {
    benchmark::DoNotOptimize(rouge_n(candidate, refs, 2));
  }
}
BENCHMARK(BM_rouge2);

void BM_rouge_l(benchmark::State& state) {
  const auto words = static_cast<std::size_t>(state.range(0));
  Rng rng(7);
  TokenSeq candidate = random_sentence(rng, words, 50);
  std::vector<TokenSeq> refs = {random_sentence(rng, words, 50)};
  for (auto _ : state) {
    benchmark::DoNotOptimize(rouge_l(candidate, refs));
  }
}
BENCHMARK(BM_rouge_l)->Arg(40)->Arg(160);

void BM_rouge_s_unlimited_gap(benchmark::State& state) {
  Rng rng(8);
  TokenSeq candidate = random_sentence(rng, 40, 50);
  std::vector<TokenSeq> refs = {random_sentence(rng, 40, 50)};
  for (auto _ : state) {
    benchmark::DoNotOptimize(rouge_s(candidate, refs));
  }
}
BENCHMARK(BM_rouge_s_unlimited_gap);

void BM_wer(benchmark::State& state) {
  const auto words = static_cast<std::size_t>(state.range(0));
  Rng rng(9);
  TokenSeq reference = random_sentence(rng, words, 50);
  TokenSeq hypothesis = reference;
  for (std::size_t k = 0; k < hypothesis.size(); k += 4) {
    hypothesis[k] = "w" + std::to_string(rng.below(50));
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(word_error_rate(reference, hypothesis).rate);
  }
}
BENCHMARK(BM_wer)->Arg(40)->Arg(160);

void BM_evaluate_corpus_serial(benchmark::State& state) {
  std::vector<CorpusExample> corpus = synthetic_corpus(64, 30);
  EvalOptions opts;
  for (auto _ : state) {
    CorpusReport report = evaluate_corpus(corpus, opts);
    benchmark::DoNotOptimize(report.means.rouge1);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 64);
}
BENCHMARK(BM_evaluate_corpus_serial);

void BM_evaluate_corpus_parallel(benchmark::State& state) {
  std::vector<CorpusExample> corpus = synthetic_corpus(64, 30);
  EvalOptions opts;
  opts.parallel = true;
  for (auto _ : state) {
    CorpusReport report = evaluate_corpus(corpus, opts);
    benchmark::DoNotOptimize(report.means.rouge1);
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 64);
}
BENCHMARK(BM_evaluate_corpus_parallel);

}  // namespace

BENCHMARK_MAIN();
