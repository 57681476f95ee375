#pragma once

#include "atlas/numcore.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace atlas {

struct VocabularyError : IndexError {
    using IndexError::IndexError;
};

struct LengthError : DimensionError {
    using DimensionError::DimensionError;
};

struct EncoderConfig {
    int layers = 4;   // L transformer blocks
    int width = 64;   // d
    int heads = 4;    // attention heads per block
    int vocab = 62;   // V, including the reserved ids
    int max_len = 32;
    int pad_id = 0;
    int mask_id = 1;

    /// Throws std::invalid_argument naming the first violated constraint.
    void validate() const;
};

/// Token ids of several sequences laid out back to back.
struct Batch {
    std::vector<int> tokens;
    std::vector<int> positions;
    std::vector<Segment> segments;

    void append(std::span<const int> sequence);
    Index rows() const { return static_cast<Index>(tokens.size()); }
    std::size_t sequences() const { return segments.size(); }
};

/// Hidden states of every encoder level for one sequence: states[0] is the
/// embedding, states[l] the output of block l.
struct LayerStack {
    std::vector<Matrix> states;

    int levels() const { return static_cast<int>(states.size()); }
    Index rows() const { return states.empty() ? 0 : states.front().rows(); }
    Index width() const { return states.empty() ? 0 : states.front().cols(); }
};

/// Per-block attention probabilities captured during a forward pass.
struct EncoderTrace {
    // blocks x (sequence, head) matrices, as produced by segmented_attention.
    std::vector<std::vector<Matrix>> attention;
};

/// Pre-norm transformer encoder that keeps every intermediate level.
class Encoder {
public:
    Encoder(const EncoderConfig& config, std::mt19937_64& rng);

    const EncoderConfig& config() const { return config_; }
    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;

    /// Token plus positional embedding (level 0) for a whole batch.
    Var embed(Graph& g, const Batch& batch);
    /// All L + 1 levels for a whole batch.
    std::vector<Var> encode(Graph& g, const Batch& batch, EncoderTrace* trace = nullptr);

    Matrix embed(std::span<const int> tokens);
    LayerStack encode(std::span<const int> tokens);

    /// Throws VocabularyError / LengthError for inputs the encoder cannot take.
    void check_input(std::span<const int> tokens) const;

    Parameter& token_embedding() { return token_embedding_; }
    Parameter& position_embedding() { return position_embedding_; }

private:
    struct Block {
        Parameter ln1_gain, ln1_bias;
        // No key bias: it shifts every score of a query equally.
        Parameter wq, bq, wk, wv, bv, wo, bo;
        Parameter ln2_gain, ln2_bias;
        Parameter w1, b1, w2, b2;
    };

    Var block_forward(Graph& g, Block& b, const Var& x, const Batch& batch, std::vector<Matrix>* probs);

    EncoderConfig config_;
    Parameter token_embedding_;
    Parameter position_embedding_;
    std::vector<Block> blocks_;
};

/// Dense matrix with i.i.d. N(0, stddev^2) entries.
Matrix random_normal(Index rows, Index cols, double stddev, std::mt19937_64& rng);

}  // namespace atlas
