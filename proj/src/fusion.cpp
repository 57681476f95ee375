#include "atlas/fusion.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace atlas {

std::string to_string(FusionStrategy s)
{
    switch (s) {
    case FusionStrategy::TopOnly: return "TopOnly";
    case FusionStrategy::Mean: return "Mean";
    case FusionStrategy::ResNet: return "ResNet";
    case FusionStrategy::ResNetK: return "ResNetK";
    case FusionStrategy::LastQuery: return "LastQuery";
    case FusionStrategy::NgramQuery: return "NgramQuery";
    }
    return "?";
}

std::optional<FusionStrategy> parse_fusion_strategy(const std::string& name)
{
    std::string lower;
    for (char c : name)
        lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    for (FusionStrategy s : {FusionStrategy::TopOnly, FusionStrategy::Mean, FusionStrategy::ResNet,
                             FusionStrategy::ResNetK, FusionStrategy::LastQuery, FusionStrategy::NgramQuery}) {
        std::string candidate;
        for (char c : to_string(s))
            candidate.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        if (candidate == lower)
            return s;
    }
    return std::nullopt;
}

void FusionConfig::validate(int width, int layers) const
{
    if (ngram < 1)
        throw std::invalid_argument("fusion.g must be >= 1");
    if (heads < 1 || width % heads != 0)
        throw std::invalid_argument("fusion.m must divide the model width");
    if (strategy == FusionStrategy::ResNetK && (resnet_k < 1 || resnet_k > layers))
        throw std::invalid_argument("fusion.k must satisfy 1 <= k <= L");
}

FusionParams::FusionParams(const FusionConfig& config, int width, std::mt19937_64& rng)
{
    const Index d = width;
    const Index window = config.query_window();
    query = Parameter("fusion.query", random_normal(window * d, d, 1.0 / std::sqrt(double(window * d)), rng));
    key = Parameter("fusion.key", random_normal(d, d, 1.0 / std::sqrt(double(d)), rng));
    pad = Parameter("fusion.pad", Matrix::Zero(1, d), false);
}

std::vector<int> ngram_offsets(int g)
{
    std::vector<int> out;
    const int start = -(g / 2);
    for (int w = 0; w < g; ++w)
        out.push_back(start + w);
    return out;
}

std::vector<int> resnet_levels(int layers, int k)
{
    std::vector<int> out;
    for (int j = 1; j < k; ++j)
        out.push_back(static_cast<int>(std::lround(static_cast<double>(j) * layers / k)));
    return out;
}

Var ngram_window(const Var& top, const Var& pad, std::span<const Segment> segments, int g)
{
    const Matrix& tv = top.value();
    const Index d = tv.cols();
    if (pad.rows() != 1 || pad.cols() != d)
        throw DimensionError("ngram_window: pad vector must be 1 x " + std::to_string(d));
    const std::vector<int> offsets = ngram_offsets(g);
    // source row for every (row, slot); -1 means pad
    std::vector<Index> source(static_cast<std::size_t>(tv.rows()) * offsets.size(), -1);
    Matrix out(tv.rows(), g * d);
    for (const Segment& s : segments) {
        for (Index i = 0; i < s.length; ++i) {
            const Index row = s.offset + i;
            for (std::size_t w = 0; w < offsets.size(); ++w) {
                const Index p = i + offsets[w];
                const bool inside = p >= 0 && p < s.length;
                const Index src = inside ? s.offset + p : -1;
                source[static_cast<std::size_t>(row) * offsets.size() + w] = src;
                out.block(row, static_cast<Index>(w) * d, 1, d) = inside ? tv.row(src) : pad.value().row(0);
            }
        }
    }
    const std::size_t slots = offsets.size();
    return top.graph()->record(std::move(out), {top, pad},
                               [top, pad, source = std::move(source), slots, d](Graph& gr, const Matrix& go) {
                                   Matrix dtop = Matrix::Zero(top.rows(), d);
                                   Matrix dpad = Matrix::Zero(1, d);
                                   for (Index row = 0; row < go.rows(); ++row) {
                                       for (std::size_t w = 0; w < slots; ++w) {
                                           const Index src = source[static_cast<std::size_t>(row) * slots + w];
                                           const auto slice = go.block(row, static_cast<Index>(w) * d, 1, d);
                                           if (src >= 0)
                                               dtop.row(src) += slice;
                                           else
                                               dpad += slice;
                                       }
                                   }
                                   gr.accumulate(top, dtop);
                                   gr.accumulate(pad, dpad);
                               });
}

Var build_ngram_query(const Var& top, const Var& pad, std::span<const Segment> segments, int g,
                      const Var& w_query)
{
    return matmul(ngram_window(top, pad, segments, g), w_query);
}

Var level_attention(const Var& query, std::span<const Var> keys, std::span<const Var> values, int heads,
                    Matrix* attention)
{
    const Matrix& qv = query.value();
    const Index n = qv.rows();
    const Index d = qv.cols();
    const Index levels = static_cast<Index>(keys.size());
    if (levels == 0 || static_cast<Index>(values.size()) != levels)
        throw DimensionError("level_attention: need matching non-empty key/value lists");
    if (heads < 1 || d % heads != 0)
        throw DimensionError("level_attention: width not divisible by head count");
    for (Index l = 0; l < levels; ++l) {
        const Matrix& kv = keys[static_cast<std::size_t>(l)].value();
        const Matrix& vv = values[static_cast<std::size_t>(l)].value();
        if (kv.rows() != n || kv.cols() != d || vv.rows() != n || vv.cols() != d)
            throw DimensionError("level_attention: level " + std::to_string(l) + " shape mismatch");
    }
    const Index dk = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));

    Matrix weights(n, heads * levels);
    Matrix out = Matrix::Zero(n, d);
    for (int h = 0; h < heads; ++h) {
        Matrix scores(n, levels);
        for (Index l = 0; l < levels; ++l)
            scores.col(l) = qv.middleCols(h * dk, dk)
                                .cwiseProduct(keys[static_cast<std::size_t>(l)].value().middleCols(h * dk, dk))
                                .rowwise()
                                .sum() *
                            inv_scale;
        const Matrix p = softmax(scores, Axis::Cols);
        weights.middleCols(h * levels, levels) = p;
        for (Index l = 0; l < levels; ++l)
            out.middleCols(h * dk, dk) +=
                (values[static_cast<std::size_t>(l)].value().middleCols(h * dk, dk).array().colwise() *
                 p.col(l).array())
                    .matrix();
    }
    if (attention != nullptr)
        *attention = weights;

    std::vector<Var> inputs{query};
    inputs.insert(inputs.end(), keys.begin(), keys.end());
    inputs.insert(inputs.end(), values.begin(), values.end());
    std::vector<Var> ks(keys.begin(), keys.end());
    std::vector<Var> vs(values.begin(), values.end());
    return query.graph()->record(
        std::move(out), inputs,
        [query, ks = std::move(ks), vs = std::move(vs), weights = std::move(weights), heads, dk, levels,
         inv_scale](Graph& gr, const Matrix& go) {
            const Index rows = go.rows();
            const Index width = go.cols();
            Matrix dq = Matrix::Zero(rows, width);
            std::vector<Matrix> dkeys(static_cast<std::size_t>(levels), Matrix::Zero(rows, width));
            std::vector<Matrix> dvals(static_cast<std::size_t>(levels), Matrix::Zero(rows, width));
            const Matrix& qv = query.value();
            for (int h = 0; h < heads; ++h) {
                const auto p = weights.middleCols(h * levels, levels);
                const auto gslice = go.middleCols(h * dk, dk);
                Matrix dp(rows, levels);
                for (Index l = 0; l < levels; ++l) {
                    const auto vslice = vs[static_cast<std::size_t>(l)].value().middleCols(h * dk, dk);
                    dp.col(l) = gslice.cwiseProduct(vslice).rowwise().sum();
                    dvals[static_cast<std::size_t>(l)].middleCols(h * dk, dk) =
                        (gslice.array().colwise() * p.col(l).array()).matrix();
                }
                const Vector rowdot = dp.cwiseProduct(p).rowwise().sum();
                const Matrix ds = p.cwiseProduct(dp - rowdot.replicate(1, levels)) * inv_scale;
                for (Index l = 0; l < levels; ++l) {
                    const auto kslice = ks[static_cast<std::size_t>(l)].value().middleCols(h * dk, dk);
                    dq.middleCols(h * dk, dk) += (kslice.array().colwise() * ds.col(l).array()).matrix();
                    dkeys[static_cast<std::size_t>(l)].middleCols(h * dk, dk) =
                        (qv.middleCols(h * dk, dk).array().colwise() * ds.col(l).array()).matrix();
                }
            }
            gr.accumulate(query, dq);
            for (Index l = 0; l < levels; ++l) {
                gr.accumulate(ks[static_cast<std::size_t>(l)], dkeys[static_cast<std::size_t>(l)]);
                gr.accumulate(vs[static_cast<std::size_t>(l)], dvals[static_cast<std::size_t>(l)]);
            }
        });
}

namespace {

FusedVars fuse_with(std::span<const Var> levels, std::span<const Segment> segments, const FusionConfig& config,
                    const Var& w_query, const Var& w_key, const Var& pad)
{
    if (levels.empty())
        throw DimensionError("fuse: empty layer stack");
    const int layers = static_cast<int>(levels.size()) - 1;
    const Index d = levels.front().cols();
    for (const Var& l : levels)
        if (l.cols() != d || l.rows() != levels.front().rows())
            throw DimensionError("fuse: levels differ in shape");
    if (w_key.rows() != d || w_key.cols() != d || w_query.cols() != d ||
        w_query.rows() != d * config.query_window() || pad.cols() != d)
        throw DimensionError("fuse: fusion weights do not match stack width " + std::to_string(d));
    config.validate(static_cast<int>(d), std::max(layers, 1));

    const Var& top = levels.back();
    FusedVars out;
    switch (config.strategy) {
    case FusionStrategy::TopOnly:
        out.reps = top;
        break;
    case FusionStrategy::Mean: {
        Var acc = levels.front();
        for (std::size_t l = 1; l < levels.size(); ++l)
            acc = add(acc, levels[l]);
        out.reps = scale(acc, 1.0 / static_cast<double>(levels.size()));
        break;
    }
    case FusionStrategy::ResNet:
        out.reps = add(top, levels.front());
        break;
    case FusionStrategy::ResNetK: {
        Var acc = add(top, levels.front());
        for (int l : resnet_levels(layers, config.resnet_k))
            acc = add(acc, levels[static_cast<std::size_t>(l)]);
        out.reps = acc;
        break;
    }
    case FusionStrategy::LastQuery:
    case FusionStrategy::NgramQuery: {
        Var query = build_ngram_query(top, pad, segments, config.query_window(), w_query);
        std::vector<Var> keys;
        for (const Var& l : levels)
            keys.push_back(matmul(l, w_key));
        out.reps = level_attention(query, keys, levels, config.heads, &out.attention);
        break;
    }
    }
    return out;
}

}  // namespace

FusedVars fuse(Graph& g, std::span<const Var> levels, std::span<const Segment> segments,
               const FusionConfig& config, FusionParams& params)
{
    return fuse_with(levels, segments, config, g.parameter(params.query), g.parameter(params.key),
                     g.parameter(params.pad));
}

FusedOutput fuse(const LayerStack& stack, const FusionConfig& config, const FusionParams& params)
{
    Graph g;
    std::vector<Var> levels;
    for (const Matrix& s : stack.states)
        levels.push_back(g.constant(s));
    const Segment whole{0, stack.rows()};
    FusedVars fv = fuse_with(levels, std::span<const Segment>(&whole, 1), config, g.constant(params.query.value),
                             g.constant(params.key.value), g.constant(params.pad.value));
    FusedOutput out;
    out.reps = fv.reps.value();
    if (fv.attention.size() > 0) {
        const Index levels_n = stack.levels();
        for (int h = 0; h < config.heads; ++h)
            out.attn.push_back(fv.attention.middleCols(h * levels_n, levels_n));
    }
    return out;
}

void write_attention_csv(std::ostream& os, const Matrix& head_attention,
                         const std::vector<std::pair<std::string, std::vector<std::string>>>& context)
{
    os << "position";
    for (const auto& [name, values] : context)
        os << "," << name;
    for (Index l = 0; l < head_attention.cols(); ++l)
        os << ",level_" << l;
    os << "\n";
    char buf[64];
    for (Index r = 0; r < head_attention.rows(); ++r) {
        os << r;
        for (const auto& [name, values] : context)
            os << "," << values.at(static_cast<std::size_t>(r));
        for (Index l = 0; l < head_attention.cols(); ++l) {
            std::snprintf(buf, sizeof buf, "%.17g", head_attention(r, l));
            os << "," << buf;
        }
        os << "\n";
    }
}

}  // namespace atlas
