#pragma once

#include "atlas/config.hpp"
#include "atlas/corpus.hpp"
#include "atlas/model.hpp"
#include "atlas/noisy.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace atlas {

/// Sentence-level scores for one level (detection or correction).
///  TP  errorful sentence handled exactly (same changed positions for
///      detection, output equal to the target for correction)
///  FP  changed sentence that is not a TP
///  FN  errorful sentence that is not a TP
/// precision = TP / changed sentences (1 when nothing changed),
/// recall = TP / errorful sentences (0 when there are none),
/// accuracy = share of all sentences handled exactly.
struct LevelMetrics {
    double accuracy = 0.0;
    double precision = 1.0;
    double recall = 0.0;
    double f1 = 0.0;
    long tp = 0;
    long fp = 0;
    long fn = 0;
};

struct MetricsReport {
    long sentences = 0;
    long errorful = 0;
    long adjusted = 0;            // sentences with at least one change
    long correctly_adjusted = 0;  // of those, equal to the target
    LevelMetrics detection;
    LevelMetrics correction;

    /// correctly_adjusted / adjusted, 1 when nothing was adjusted.
    double adjustment_precision() const;
    /// `key = value` lines: detection.acc ... correction.f1, counts.*.
    std::string to_text(const std::string& prefix = "") const;
};

/// F1 from precision and recall; 0 when both are 0.
double f1_score(double precision, double recall);

/// Throws DimensionError when a prediction's length differs from its record.
MetricsReport sentence_metrics(const std::vector<std::vector<int>>& predictions,
                               const std::vector<SentenceRecord>& records);

enum class ErrorBucket { NonWord, RealWord, Mixed };

/// Composition of an errorful sentence's error types; nullopt for clean ones.
std::optional<ErrorBucket> error_bucket(const SentenceRecord& record);

struct ErrorTypeBreakdown {
    MetricsReport non_word;
    MetricsReport real_word;
    MetricsReport mixed;

    std::string to_text() const;
};

/// Metrics over the errorful sentences of each bucket (clean sentences are
/// left out, so the bucket sizes add up to the errorful count).
ErrorTypeBreakdown breakdown_by_error_type(const std::vector<std::vector<int>>& predictions,
                                           const std::vector<SentenceRecord>& records);

/// Area under the ROC curve of `scores` against boolean `labels`, ties
/// counted as one half. Throws std::invalid_argument if either class is empty.
double roc_auc(std::span<const double> scores, std::span<const bool> labels);

// ---- experiments ---------------------------------------------------------------

/// Vocabulary size and tagset size a model needs for the given corpus files.
struct CorpusShape {
    int vocab = 0;
    int pos_tags = 0;
};

/// Taken from the corpus header when present, else from the largest ids seen.
CorpusShape corpus_shape(const CorpusFile& file);

/// Model config for `config` on a corpus of the given shape; throws
/// ConfigError when an explicit encoder.vocab cannot hold the corpus.
ModelConfig resolve_model_config(const RunConfig& config, const CorpusShape& shape);

struct Experiment {
    CscModel model;
    TrainResult training;
    MetricsReport metrics;
    std::vector<SentenceRecord> train;  // the tags actually trained on
};

/// Trains one model (seeded by config.seed) on a copy of `train` with
/// corpus.extra_pos_noise added, then scores it on `test`.
Experiment run_experiment(const RunConfig& config, const std::vector<SentenceRecord>& train,
                          const std::vector<SentenceRecord>& test, const CorpusShape& shape);

enum class AblationSuite { Fusion, Injection, Ngram };

std::string to_string(AblationSuite s);
std::optional<AblationSuite> parse_ablation_suite(const std::string& name);

struct AblationRow {
    std::string name;
    std::string condition;  // "default", or for the injection suite "clean" / "noise+20%"
    std::vector<std::uint64_t> seeds;
    std::vector<double> detection_f1;
    std::vector<double> correction_f1;
};

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
double mean(std::span<const double> values);
double stddev(std::span<const double> values);

struct AblationTable {
    AblationSuite suite = AblationSuite::Fusion;
    std::vector<AblationRow> rows;

    /// Header row, then one line per row with means, deviations and the
    /// per-seed correction F1 values separated by ';'.
    void write_csv(std::ostream& os) const;
};

/// Row configurations of a suite derived from `base`, before any training.
std::vector<std::pair<AblationRow, RunConfig>> ablation_plan(AblationSuite suite, const RunConfig& base);

/// Trains every row for every seed. `jobs` > 1 runs rows concurrently; the
/// table does not depend on it. `progress` is called after each finished run.
AblationTable run_ablation(AblationSuite suite, const RunConfig& base, std::span<const std::uint64_t> seeds,
                           const std::vector<SentenceRecord>& train, const std::vector<SentenceRecord>& test,
                           const CorpusShape& shape, int jobs = 1,
                           const std::function<void(const AblationRow&, std::uint64_t, double)>& progress = {});

}  // namespace atlas
