#pragma once

#include "atlas/encoder.hpp"
#include "atlas/numcore.hpp"

#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace atlas {

enum class FusionStrategy { TopOnly, Mean, ResNet, ResNetK, LastQuery, NgramQuery };

std::string to_string(FusionStrategy s);
/// Accepts the names produced by to_string (case-insensitive); nullopt otherwise.
std::optional<FusionStrategy> parse_fusion_strategy(const std::string& name);

struct FusionConfig {
    FusionStrategy strategy = FusionStrategy::NgramQuery;
    int ngram = 3;  // g
    int heads = 8;  // m
    int resnet_k = 2;

    bool uses_attention() const
    {
        return strategy == FusionStrategy::NgramQuery || strategy == FusionStrategy::LastQuery;
    }
    /// Window size actually used by the query (1 for LastQuery).
    int query_window() const { return strategy == FusionStrategy::LastQuery ? 1 : ngram; }
    /// Throws std::invalid_argument for a configuration unusable with the
    /// given model width and encoder depth.
    void validate(int width, int layers) const;
};

/// Trainable fusion weights. Present for every strategy so checkpoints have a
/// fixed layout; only the attention strategies read them.
struct FusionParams {
    Parameter query;  // (window * d) x d
    Parameter key;    // d x d
    Parameter pad;    // 1 x d, stands in for positions outside the sequence

    FusionParams() = default;
    FusionParams(const FusionConfig& config, int width, std::mt19937_64& rng);
    std::vector<Parameter*> parameters() { return {&query, &key, &pad}; }
};

/// Position offsets of the query window: -floor(g/2) .. -floor(g/2) + g - 1.
std::vector<int> ngram_offsets(int g);

/// Interior levels summed by ResNetK besides level 0 and level L.
std::vector<int> resnet_levels(int layers, int k);

/// Concatenates the top-level rows inside each token's window, substituting
/// `pad` beyond segment boundaries. Returns rows x (g * d).
Var ngram_window(const Var& top, const Var& pad, std::span<const Segment> segments, int g);

/// ngram_window(top, pad, segments, g) * w_query.
Var build_ngram_query(const Var& top, const Var& pad, std::span<const Segment> segments, int g,
                      const Var& w_query);

/// Multi-head attention of each token over its own levels. `keys` and
/// `values` hold one rows x d node per level. Values are split into `heads`
/// column slices with no projection. When `attention` is non-null it receives
/// rows x (heads * levels) weights, head-major.
Var level_attention(const Var& query, std::span<const Var> keys, std::span<const Var> values, int heads,
                    Matrix* attention = nullptr);

struct FusedVars {
    Var reps;
    Matrix attention;  // rows x (heads * (L + 1)); empty for non-attention strategies
};

FusedVars fuse(Graph& g, std::span<const Var> levels, std::span<const Segment> segments,
               const FusionConfig& config, FusionParams& params);

struct FusedOutput {
    Matrix reps;              // n x d
    std::vector<Matrix> attn; // one n x (L + 1) matrix per head; empty for non-attention strategies
};

FusedOutput fuse(const LayerStack& stack, const FusionConfig& config, const FusionParams& params);

/// Writes one head's weights as CSV: optional leading context columns, then
/// level_0 .. level_L.
void write_attention_csv(std::ostream& os, const Matrix& head_attention,
                         const std::vector<std::pair<std::string, std::vector<std::string>>>& context);

}  // namespace atlas
