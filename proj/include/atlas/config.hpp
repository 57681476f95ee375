#pragma once

#include "atlas/fusion.hpp"
#include "atlas/model.hpp"
#include "atlas/noisy.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace atlas {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Settings shared by the CLI commands. Read from a flat `key = value` file
/// with dotted section keys; `#` starts a comment. Unknown keys are errors.
struct RunConfig {
    // encoder
    int layers = 4;    // encoder.L
    int width = 64;    // encoder.d
    int enc_heads = 4; // encoder.heads
    int max_len = 32;  // encoder.max_len
    int vocab = 0;     // encoder.vocab; 0 takes it from the corpus
    // fusion
    FusionStrategy strategy = FusionStrategy::NgramQuery;  // fusion.strategy
    int ngram = 3;     // fusion.g
    int fusion_heads = 8;  // fusion.m
    int resnet_k = 2;  // fusion.k
    // model
    int pos_dim = 16;  // model.pos_dim
    // schedule
    InjectionMode mode = InjectionMode::FullAnnealing;  // schedule.mode
    double beta = 8e-4;          // schedule.beta
    int epochs = 6;              // schedule.epochs
    int batch_size = 16;         // schedule.batch_size
    LossReading reading = LossReading::Reconciled;  // schedule.reading
    int gmm_init_sample = 512;   // schedule.gmm_init_sample
    // optimizer
    double lr_max = 1e-3;        // optimizer.lr_max
    double lr_min = 1e-4;        // optimizer.lr_min
    double weight_decay = 0.01;  // optimizer.weight_decay
    // data and output
    std::filesystem::path train_path = "corpus/train.jsonl";  // corpus.train
    std::filesystem::path test_path = "corpus/test.jsonl";    // corpus.test
    double extra_pos_noise = 0.0;  // corpus.extra_pos_noise, added to training tags only
    std::uint64_t seed = 1;        // seed
    std::filesystem::path output_dir = "run";  // output.dir

    /// Applies one `key = value` assignment. Throws ConfigError naming the key.
    void set(const std::string& key, const std::string& value);
    /// Resolved configuration in the file format, one key per line.
    std::string to_text() const;
    void validate() const;

    /// Parses a config stream. Relative paths are resolved against `base`.
    static RunConfig parse(std::istream& is, const std::filesystem::path& base = {});
    static RunConfig load(const std::filesystem::path& path);

    /// Every accepted key, in file order.
    static const std::vector<std::string>& keys();

    ModelConfig model_config(int corpus_vocab, int pos_tags) const;
    TrainConfig train_config() const;
};

}  // namespace atlas
