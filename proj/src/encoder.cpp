#include "atlas/encoder.hpp"

#include <string>

namespace atlas {

namespace {

constexpr double kInitStd = 0.02;

Parameter ones_row(const std::string& name, Index width)
{
    return Parameter(name, Matrix::Ones(1, width), false);
}

Parameter zeros_row(const std::string& name, Index width)
{
    return Parameter(name, Matrix::Zero(1, width), false);
}

}  // namespace

Matrix random_normal(Index rows, Index cols, double stddev, std::mt19937_64& rng)
{
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i)
        m.data()[i] = dist(rng);
    return m;
}

void EncoderConfig::validate() const
{
    if (layers < 1)
        throw std::invalid_argument("encoder.L must be >= 1");
    if (width < 1)
        throw std::invalid_argument("encoder.d must be >= 1");
    if (heads < 1 || width % heads != 0)
        throw std::invalid_argument("encoder.d must be divisible by encoder.heads");
    if (vocab <= 2)
        throw std::invalid_argument("encoder vocabulary must exceed 2");
    if (max_len < 3)
        throw std::invalid_argument("encoder.max_len must be >= 3");
    if (pad_id < 0 || pad_id >= vocab || mask_id < 0 || mask_id >= vocab)
        throw std::invalid_argument("reserved ids must lie inside the vocabulary");
}

void Batch::append(std::span<const int> sequence)
{
    segments.push_back(Segment{rows(), static_cast<Index>(sequence.size())});
    for (std::size_t i = 0; i < sequence.size(); ++i) {
        tokens.push_back(sequence[i]);
        positions.push_back(static_cast<int>(i));
    }
}

Encoder::Encoder(const EncoderConfig& config, std::mt19937_64& rng) : config_(config)
{
    config_.validate();
    const Index d = config_.width;
    token_embedding_ = Parameter("encoder.token_embedding", random_normal(config_.vocab, d, kInitStd, rng));
    position_embedding_ =
        Parameter("encoder.position_embedding", random_normal(config_.max_len, d, kInitStd, rng));
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
    for (int l = 0; l < config_.layers; ++l) {
        const std::string p = "encoder.block" + std::to_string(l) + ".";
        Block b{
            ones_row(p + "ln1.gain", d),
            zeros_row(p + "ln1.bias", d),
            Parameter(p + "attn.wq", random_normal(d, d, proj_std, rng)),
            zeros_row(p + "attn.bq", d),
            Parameter(p + "attn.wk", random_normal(d, d, proj_std, rng)),
            Parameter(p + "attn.wv", random_normal(d, d, proj_std, rng)),
            zeros_row(p + "attn.bv", d),
            Parameter(p + "attn.wo", random_normal(d, d, proj_std / std::sqrt(2.0 * config_.layers), rng)),
            zeros_row(p + "attn.bo", d),
            ones_row(p + "ln2.gain", d),
            zeros_row(p + "ln2.bias", d),
            Parameter(p + "ffn.w1", random_normal(d, 4 * d, proj_std, rng)),
            zeros_row(p + "ffn.b1", 4 * d),
            Parameter(p + "ffn.w2",
                      random_normal(4 * d, d, 0.5 * proj_std / std::sqrt(2.0 * config_.layers), rng)),
            zeros_row(p + "ffn.b2", d),
        };
        blocks_.push_back(std::move(b));
    }
}

std::vector<Parameter*> Encoder::parameters()
{
    std::vector<Parameter*> out{&token_embedding_, &position_embedding_};
    for (Block& b : blocks_) {
        for (Parameter* p : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.bq, &b.wk, &b.wv, &b.bv, &b.wo, &b.bo,
                             &b.ln2_gain, &b.ln2_bias, &b.w1, &b.b1, &b.w2, &b.b2})
            out.push_back(p);
    }
    return out;
}

std::vector<const Parameter*> Encoder::parameters() const
{
    auto mut = const_cast<Encoder*>(this)->parameters();
    return {mut.begin(), mut.end()};
}

void Encoder::check_input(std::span<const int> tokens) const
{
    if (static_cast<int>(tokens.size()) > config_.max_len)
        throw LengthError("sequence of length " + std::to_string(tokens.size()) + " exceeds max_len " +
                          std::to_string(config_.max_len));
    for (int t : tokens) {
        if (t < 0 || t >= config_.vocab)
            throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of " +
                                  std::to_string(config_.vocab));
    }
}

Var Encoder::embed(Graph& g, const Batch& batch)
{
    for (const Segment& s : batch.segments)
        check_input(std::span<const int>(batch.tokens).subspan(static_cast<std::size_t>(s.offset),
                                                               static_cast<std::size_t>(s.length)));
    Var tok = embedding(g.parameter(token_embedding_), batch.tokens);
    Var pos = embedding(g.parameter(position_embedding_), batch.positions);
    return add(tok, pos);
}

Var Encoder::block_forward(Graph& g, Block& b, const Var& x, const Batch& batch, std::vector<Matrix>* probs)
{
    Var h = layer_norm(x, g.parameter(b.ln1_gain), g.parameter(b.ln1_bias));
    Var q = add_row(matmul(h, g.parameter(b.wq)), g.parameter(b.bq));
    Var k = matmul(h, g.parameter(b.wk));
    Var v = add_row(matmul(h, g.parameter(b.wv)), g.parameter(b.bv));
    Var a = segmented_attention(q, k, v, batch.segments, config_.heads, probs);
    Var x1 = add(x, add_row(matmul(a, g.parameter(b.wo)), g.parameter(b.bo)));
    Var f = layer_norm(x1, g.parameter(b.ln2_gain), g.parameter(b.ln2_bias));
    f = gelu(add_row(matmul(f, g.parameter(b.w1)), g.parameter(b.b1)));
    f = add_row(matmul(f, g.parameter(b.w2)), g.parameter(b.b2));
    return add(x1, f);
}

std::vector<Var> Encoder::encode(Graph& g, const Batch& batch, EncoderTrace* trace)
{
    std::vector<Var> levels{embed(g, batch)};
    if (trace != nullptr)
        trace->attention.assign(blocks_.size(), {});
    for (std::size_t l = 0; l < blocks_.size(); ++l)
        levels.push_back(
            block_forward(g, blocks_[l], levels.back(), batch, trace ? &trace->attention[l] : nullptr));
    return levels;
}

Matrix Encoder::embed(std::span<const int> tokens)
{
    Batch batch;
    batch.append(tokens);
    Graph g;
    return embed(g, batch).value();
}

LayerStack Encoder::encode(std::span<const int> tokens)
{
    Batch batch;
    batch.append(tokens);
    Graph g;
    LayerStack stack;
    for (const Var& v : encode(g, batch))
        stack.states.push_back(v.value());
    return stack;
}

}  // namespace atlas
