#pragma once

#include "atlas/corpus.hpp"
#include "atlas/encoder.hpp"
#include "atlas/fusion.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <random>
#include <span>
#include <vector>

namespace atlas {

struct ModelConfig {
    EncoderConfig encoder;
    FusionConfig fusion;
    int pos_tags = 16;       // auxiliary classifier width (B-/I- x classes)
    bool pos_input = false;  // HardEmbedding: noisy tags feed the main classifier
    int pos_dim = 16;        // d_pos

    void validate() const;
};

/// Encoder, level fusion, a shared layer norm, the correction classifier, and the auxiliary POS
/// classifier. The POS embedding table only exists when pos_input is set.
class CscModel {
public:
    CscModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    std::vector<Parameter*> parameters();
    /// Looks a parameter up by its checkpoint name; nullptr when absent.
    Parameter* find(const std::string& name);

    Encoder& encoder() { return encoder_; }
    FusionParams& fusion_params() { return fusion_; }

    struct Forward {
        std::vector<Var> levels;
        Var fused;
        Matrix attention;  // rows x (m * (L + 1)) when fusion attends
        Var main_logits;   // rows x V
        Var aux_logits;    // rows x pos_tags
    };

    /// `pos_tags` supplies the noisy tags consumed when pos_input is set and
    /// may be empty otherwise.
    Forward forward(Graph& g, const Batch& batch, std::span<const int> pos_tags);

    /// Corrected token sequence for each record (argmax over the vocabulary).
    /// Uses only the forward pass: no loss, annealing, or mixture fitting.
    std::vector<std::vector<int>> predict(const std::vector<SentenceRecord>& records, std::size_t batch_size = 64);
    /// Argmax auxiliary tags for each record.
    std::vector<std::vector<int>> predict_pos(const std::vector<SentenceRecord>& records,
                                              std::size_t batch_size = 64);

private:
    ModelConfig config_;
    Encoder encoder_;
    FusionParams fusion_;
    Parameter norm_gain_, norm_bias_;
    Parameter main_weight_, main_bias_;
    Parameter aux_weight_, aux_bias_;
    Parameter pos_embedding_;
};

/// Text checkpoint: the "ATLAS-CKPT-1" magic line, `config <key> <value>`
/// lines, then for every parameter `param <name> <rows> <cols>` followed by
/// one line of hex-float values per row, and a closing `end` line.
inline constexpr const char* kCheckpointMagic = "ATLAS-CKPT-1";

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void save_checkpoint(std::ostream& os, CscModel& model);
void save_checkpoint(const std::filesystem::path& path, CscModel& model);
CscModel load_checkpoint(std::istream& is);
CscModel load_checkpoint(const std::filesystem::path& path);

/// Builds a batch of source sequences plus the flattened noisy tags.
Batch make_batch(const std::vector<SentenceRecord>& records, std::span<const std::size_t> indices,
                 std::vector<int>* pos_noisy = nullptr);

}  // namespace atlas
