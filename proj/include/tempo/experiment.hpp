#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo/data.hpp"
#include "tempo/decoding.hpp"
#include "tempo/metrics.hpp"
#include "tempo/model.hpp"
#include "tempo/tempering.hpp"
#include "tempo/training.hpp"

namespace tempo {

// One declarative document describing a run or a sweep.
struct ExperimentConfig {
  SyntheticTaskSpec task;
  ModelConfig model;  // vocabulary sizes are filled in from the data
  TemperingConfig tempering;
  TrainerConfig trainer;
  std::vector<double> temperatures{1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 3.0, 4.0, 5.0, 10.0};
  std::vector<std::size_t> beam_sizes{2, 4, 6, 8, 10, 12};
  std::vector<double> length_penalties{0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4};
  std::size_t decode_max_length = 64;
  std::uint64_t model_seed = 7;
  std::filesystem::path output_dir = "runs/default";

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& doc);

// Sets doc[a][b][c] = value for key "a.b.c". The value is parsed as JSON when
// possible and kept as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value);

// Reads a config file (or starts from defaults when `path` is empty), applies
// "key=value" overrides in order, and validates.
ExperimentConfig load_experiment_config(const std::optional<std::filesystem::path>& path,
                                        std::span<const std::string> overrides, bool no_dropout = false);

// 16 hex digits of FNV-1a over the canonical JSON dump.
std::string config_hash(const ExperimentConfig& cfg);
std::string fnv1a_hex(const std::string& text);

struct PreparedData {
  SplitCorpus corpus;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
  std::vector<EncodedPair> train, dev, test;
};

PreparedData prepare_data(const SyntheticTaskSpec& task);

struct RunOutcome {
  TransformerModel model;  // average of the kept checkpoints
  ExperimentRecord record;
  double dev_greedy_bleu = 0.0;
  std::string config_hash;
};

// Trains one model. With a non-empty `run_dir` the corpora, vocabularies,
// checkpoints, averaged model, record and config are written there.
RunOutcome run_training(const ExperimentConfig& cfg, const PreparedData& data,
                        const std::filesystem::path& run_dir = {});

struct DecodedSet {
  std::vector<TokenIds> outputs;  // special tokens stripped
  std::vector<Hypothesis> best;
  std::vector<std::int64_t> nanoseconds;
  double seconds = 0.0;
};

// beam_size 0 selects greedy decoding.
DecodedSet decode_all(const TransformerModel& model, std::span<const EncodedPair> pairs, std::size_t beam_size,
                      double alpha, std::size_t max_length);

std::vector<TokenIds> references_of(std::span<const EncodedPair> pairs);

struct GridPoint {
  std::size_t beam_size = 0;
  double alpha = 0.0;
  double bleu = 0.0;
};

struct BeamGridResult {
  std::vector<GridPoint> points;
  GridPoint best;  // oracle: highest BLEU, first in grid order on ties
};

BeamGridResult beam_grid(const TransformerModel& model, std::span<const EncodedPair> pairs,
                         std::span<const std::size_t> beam_sizes, std::span<const double> alphas,
                         std::size_t max_length);

struct SweepRow {
  double temperature = 0.0;
  bool ok = false;
  std::string error;
  double dev_greedy_bleu = 0.0;
  double test_greedy_bleu = 0.0;
  GridPoint oracle_beam;
  double similarity_bleu = 0.0;  // beam 4, alpha 1 against greedy
  std::size_t final_step = 0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::optional<double> t_opt;
  std::string config_hash;
};

// Trains one model per temperature, picks T_opt on dev greedy BLEU, and only
// then decodes the test set. Failed runs are recorded and skipped.
SweepReport run_sweep(const ExperimentConfig& base, std::span<const double> temperatures,
                      const std::filesystem::path& out_dir = {});

void write_sweep_csv(const SweepReport& report, const std::filesystem::path& path);

struct TimingRow {
  std::string decoder;  // "greedy" or "beam"
  std::size_t beam_size = 0;
  double median_seconds = 0.0;
  double speedup = 1.0;  // beam median / greedy median, 1 for greedy
};

// Batch-size-1 decoding of the whole set after one warm-up pass; each entry is
// the median of `passes` timed passes.
std::vector<TimingRow> measure_decode_timing(const TransformerModel& model, std::span<const EncodedPair> pairs,
                                             std::span<const std::size_t> beam_sizes, std::size_t passes,
                                             std::size_t max_length);

struct AnalysisOptions {
  bool timing = true;
  std::vector<std::size_t> timing_beams{4, 10};
  std::size_t timing_passes = 3;
};

struct AnalysisReport {
  std::vector<std::string> gaps;  // missing inputs, one line each
  std::string summary;
};

// Reads run directories written by run_training and emits curve CSVs, a timing
// table, per-run similarity BLEU and summary.txt into `out_dir`.
AnalysisReport run_analysis(std::span<const std::filesystem::path> run_dirs, const std::filesystem::path& out_dir,
                            const AnalysisOptions& options = {});

// Structured score reports.
nlohmann::json bleu_report(std::span<const TokenIds> hypotheses, std::span<const TokenIds> references,
                           const std::string& hash);
nlohmann::json significance_report(const BootstrapResult& result, std::size_t n_sentences, const std::string& hash);

}  // namespace tempo
