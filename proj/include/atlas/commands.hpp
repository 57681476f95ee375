#pragma once

#include "atlas/config.hpp"
#include "atlas/eval.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace atlas {

/// Process exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitVerification = 1;
inline constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Runs `body`, mapping configuration, input and I/O failures to kExitUsage
/// with a message on `err`.
int run_command(const std::function<int()>& body, std::ostream& err);

/// Writes train.jsonl, test.jsonl, spec.json and lexicon.json into `out`.
/// Without a spec file the defaults are used.
int cmd_gen_corpus(const std::optional<std::filesystem::path>& spec_file, const std::filesystem::path& out,
                   std::ostream& log);

struct TrainOptions {
    std::filesystem::path config;
    /// Also train a NoAux model on the same config (under output.dir/noaux)
    /// and report the step-time overhead of the configured mode.
    bool compare_noaux = false;
};

/// Writes model.ckpt, epoch_log.jsonl, config.txt and the timing.json
/// sidecar into output.dir.
int cmd_train(const TrainOptions& options, std::ostream& log);

struct EvalOptions {
    std::filesystem::path model;
    std::filesystem::path corpus;
    std::filesystem::path report;
    /// Defaults to <report>.predictions.jsonl.
    std::optional<std::filesystem::path> predictions;
    std::size_t batch_size = 64;
    /// Inference passes timed; the sidecar reports the fastest.
    int timing_repeats = 1;
};

/// Writes the metrics report (with error-type breakdown), the predictions,
/// and <report>.timing.json. Returns kExitVerification if any training-only
/// operation ran during inference.
int cmd_eval(const EvalOptions& options, std::ostream& log);

struct AblateOptions {
    std::string suite;
    std::filesystem::path config;
    int seeds = 1;  // runs use seed, seed + 1, ...
    std::filesystem::path out;
    int jobs = 1;
};

int cmd_ablate(const AblateOptions& options, std::ostream& log);

struct GradcheckOptions {
    std::optional<std::filesystem::path> config;  // encoder/fusion keys; small defaults otherwise
    std::uint64_t seed = 1;
    std::vector<InjectionMode> modes;  // empty: all five
    long max_params = 20000;
    double tolerance = 1e-4;
    double backward_fault = 1.0;  // != 1 corrupts the GELU backward rule
};

/// Model config used by gradcheck when no config file is given:
/// L=2, d=8, g=3, m=2, V=20, P=8.
ModelConfig gradcheck_model_config();

/// Finite-difference check of the full objective of `mode` on a random batch.
GradCheckReport model_gradcheck(const ModelConfig& config, InjectionMode mode, std::uint64_t seed);

int cmd_gradcheck(const GradcheckOptions& options, std::ostream& out);

struct DumpAttentionOptions {
    std::filesystem::path model;
    std::filesystem::path corpus;
    std::size_t sentence = 0;
    std::filesystem::path out;  // directory receiving head_<j>.csv
};

int cmd_dump_attention(const DumpAttentionOptions& options, std::ostream& log);

}  // namespace atlas
