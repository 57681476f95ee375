#include "atlas/model.hpp"

#include "atlas/noisy.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace atlas {

void ModelConfig::validate() const
{
    encoder.validate();
    fusion.validate(encoder.width, encoder.layers);
    if (pos_tags < 1)
        throw std::invalid_argument("model needs at least one POS tag");
    if (pos_input && pos_dim < 1)
        throw std::invalid_argument("model.pos_dim must be >= 1");
}

namespace {

const EncoderConfig& validated(const ModelConfig& config)
{
    config.validate();
    return config.encoder;
}

}  // namespace

CscModel::CscModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config), encoder_([&] {
          std::mt19937_64 rng(seed);
          return Encoder(validated(config), rng);
      }())
{
    // Second stream for the heads so the encoder init does not depend on them.
    std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
    const Index d = config_.encoder.width;
    fusion_ = FusionParams(config_.fusion, config_.encoder.width, rng);
    const Index main_in = d + (config_.pos_input ? config_.pos_dim : 0);
    norm_gain_ = Parameter("head.norm.gain", Matrix::Ones(1, d), false);
    norm_bias_ = Parameter("head.norm.bias", Matrix::Zero(1, d), false);
    main_weight_ = Parameter("head.main.weight", random_normal(main_in, config_.encoder.vocab,
                                                               1.0 / std::sqrt(double(main_in)), rng));
    main_bias_ = Parameter("head.main.bias", Matrix::Zero(1, config_.encoder.vocab), false);
    aux_weight_ = Parameter("head.aux.weight", random_normal(d, config_.pos_tags, 1.0 / std::sqrt(double(d)), rng));
    aux_bias_ = Parameter("head.aux.bias", Matrix::Zero(1, config_.pos_tags), false);
    if (config_.pos_input)
        pos_embedding_ = Parameter("head.pos_embedding", random_normal(config_.pos_tags, config_.pos_dim, 0.1, rng));
}

std::vector<Parameter*> CscModel::parameters()
{
    std::vector<Parameter*> out = encoder_.parameters();
    for (Parameter* p : fusion_.parameters())
        out.push_back(p);
    for (Parameter* p : {&norm_gain_, &norm_bias_, &main_weight_, &main_bias_, &aux_weight_, &aux_bias_})
        out.push_back(p);
    if (config_.pos_input)
        out.push_back(&pos_embedding_);
    return out;
}

Parameter* CscModel::find(const std::string& name)
{
    for (Parameter* p : parameters())
        if (p->name == name)
            return p;
    return nullptr;
}

CscModel::Forward CscModel::forward(Graph& g, const Batch& batch, std::span<const int> pos_tags)
{
    Forward f;
    f.levels = encoder_.encode(g, batch);
    FusedVars fused = fuse(g, f.levels, batch.segments, config_.fusion, fusion_);
    f.fused = fused.reps;
    f.attention = std::move(fused.attention);
    const Var normed = layer_norm(f.fused, g.parameter(norm_gain_), g.parameter(norm_bias_));
    Var main_in = normed;
    if (config_.pos_input) {
        if (static_cast<Index>(pos_tags.size()) != batch.rows())
            throw DimensionError("forward: POS input requires one tag per token");
        main_in = hard_embedding_forward(normed, pos_tags, g.parameter(pos_embedding_));
    }
    f.main_logits = add_row(matmul(main_in, g.parameter(main_weight_)), g.parameter(main_bias_));
    f.aux_logits = add_row(matmul(normed, g.parameter(aux_weight_)), g.parameter(aux_bias_));
    return f;
}

Batch make_batch(const std::vector<SentenceRecord>& records, std::span<const std::size_t> indices,
                 std::vector<int>* pos_noisy)
{
    Batch batch;
    for (std::size_t i : indices) {
        batch.append(records[i].src);
        if (pos_noisy != nullptr)
            pos_noisy->insert(pos_noisy->end(), records[i].pos_noisy.begin(), records[i].pos_noisy.end());
    }
    return batch;
}

namespace {

template <typename Pick>
std::vector<std::vector<int>> argmax_rows(CscModel& model, const std::vector<SentenceRecord>& records,
                                          std::size_t batch_size, Pick pick)
{
    std::vector<std::vector<int>> out;
    out.reserve(records.size());
    for (std::size_t start = 0; start < records.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(records.size(), start + batch_size); ++i)
            idx.push_back(i);
        std::vector<int> tags;
        const Batch batch = make_batch(records, idx, &tags);
        Graph g;
        CscModel::Forward f = model.forward(g, batch, tags);
        const Matrix& logits = pick(f).value();
        for (const Segment& s : batch.segments) {
            std::vector<int> seq(static_cast<std::size_t>(s.length));
            for (Index r = 0; r < s.length; ++r) {
                Index best = 0;
                logits.row(s.offset + r).maxCoeff(&best);
                seq[static_cast<std::size_t>(r)] = static_cast<int>(best);
            }
            out.push_back(std::move(seq));
        }
    }
    return out;
}

}  // namespace

std::vector<std::vector<int>> CscModel::predict(const std::vector<SentenceRecord>& records, std::size_t batch_size)
{
    return argmax_rows(*this, records, batch_size, [](const Forward& f) { return f.main_logits; });
}

std::vector<std::vector<int>> CscModel::predict_pos(const std::vector<SentenceRecord>& records,
                                                    std::size_t batch_size)
{
    return argmax_rows(*this, records, batch_size, [](const Forward& f) { return f.aux_logits; });
}

// ---- checkpoints -------------------------------------------------------------

namespace {

std::vector<std::pair<std::string, std::string>> config_entries(const ModelConfig& c)
{
    return {{"encoder.L", std::to_string(c.encoder.layers)},
            {"encoder.d", std::to_string(c.encoder.width)},
            {"encoder.heads", std::to_string(c.encoder.heads)},
            {"encoder.vocab", std::to_string(c.encoder.vocab)},
            {"encoder.max_len", std::to_string(c.encoder.max_len)},
            {"encoder.pad_id", std::to_string(c.encoder.pad_id)},
            {"encoder.mask_id", std::to_string(c.encoder.mask_id)},
            {"fusion.strategy", to_string(c.fusion.strategy)},
            {"fusion.g", std::to_string(c.fusion.ngram)},
            {"fusion.m", std::to_string(c.fusion.heads)},
            {"fusion.k", std::to_string(c.fusion.resnet_k)},
            {"model.pos_tags", std::to_string(c.pos_tags)},
            {"model.pos_input", c.pos_input ? "1" : "0"},
            {"model.pos_dim", std::to_string(c.pos_dim)}};
}

int to_int(const std::map<std::string, std::string>& kv, const std::string& key)
{
    const auto it = kv.find(key);
    if (it == kv.end())
        throw CheckpointError("checkpoint is missing config " + key);
    try {
        std::size_t used = 0;
        const int v = std::stoi(it->second, &used);
        if (used != it->second.size())
            throw std::invalid_argument(key);
        return v;
    } catch (const std::logic_error&) {
        throw CheckpointError("checkpoint config " + key + " is not an integer");
    }
}

std::string hex(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

}  // namespace

void save_checkpoint(std::ostream& os, CscModel& model)
{
    os << kCheckpointMagic << '\n';
    for (const auto& [k, v] : config_entries(model.config()))
        os << "config " << k << ' ' << v << '\n';
    for (const Parameter* p : model.parameters()) {
        os << "param " << p->name << ' ' << p->value.rows() << ' ' << p->value.cols() << '\n';
        for (Index r = 0; r < p->value.rows(); ++r) {
            for (Index c = 0; c < p->value.cols(); ++c)
                os << (c == 0 ? "" : " ") << hex(p->value(r, c));
            os << '\n';
        }
    }
    os << "end\n";
}

void save_checkpoint(const std::filesystem::path& path, CscModel& model)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw CheckpointError("cannot write checkpoint " + path.string());
    save_checkpoint(os, model);
    if (!os)
        throw CheckpointError("failed writing checkpoint " + path.string());
}

CscModel load_checkpoint(std::istream& is)
{
    std::string line;
    if (!std::getline(is, line) || line != kCheckpointMagic)
        throw CheckpointError("not an ATLAS-CKPT-1 checkpoint");
    std::map<std::string, std::string> kv;
    while (is.peek() == 'c' && std::getline(is, line)) {
        std::istringstream ls(line);
        std::string tag, key, value;
        if (!(ls >> tag >> key >> value) || tag != "config")
            throw CheckpointError("malformed checkpoint line: " + line);
        kv[key] = value;
    }
    ModelConfig config;
    config.encoder.layers = to_int(kv, "encoder.L");
    config.encoder.width = to_int(kv, "encoder.d");
    config.encoder.heads = to_int(kv, "encoder.heads");
    config.encoder.vocab = to_int(kv, "encoder.vocab");
    config.encoder.max_len = to_int(kv, "encoder.max_len");
    config.encoder.pad_id = to_int(kv, "encoder.pad_id");
    config.encoder.mask_id = to_int(kv, "encoder.mask_id");
    const auto strategy = parse_fusion_strategy(kv.count("fusion.strategy") ? kv.at("fusion.strategy") : "");
    if (!strategy)
        throw CheckpointError("checkpoint has no valid fusion.strategy");
    config.fusion.strategy = *strategy;
    config.fusion.ngram = to_int(kv, "fusion.g");
    config.fusion.heads = to_int(kv, "fusion.m");
    config.fusion.resnet_k = to_int(kv, "fusion.k");
    config.pos_tags = to_int(kv, "model.pos_tags");
    config.pos_input = to_int(kv, "model.pos_input") != 0;
    config.pos_dim = to_int(kv, "model.pos_dim");
    try {
        config.validate();
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
    }

    CscModel model(config, 0);
    std::map<std::string, bool> seen;
    while (std::getline(is, line)) {
        if (line == "end") {
            for (const Parameter* p : model.parameters())
                if (!seen.count(p->name))
                    throw CheckpointError("checkpoint lacks parameter " + p->name);
            return model;
        }
        std::istringstream ls(line);
        std::string tag, name;
        Index rows = 0, cols = 0;
        if (!(ls >> tag >> name >> rows >> cols) || tag != "param")
            throw CheckpointError("malformed checkpoint line: " + line);
        Parameter* p = model.find(name);
        if (p == nullptr)
            throw CheckpointError("checkpoint has unknown parameter " + name);
        if (p->value.rows() != rows || p->value.cols() != cols)
            throw CheckpointError("checkpoint shape mismatch for " + name);
        if (seen[name])
            throw CheckpointError("checkpoint repeats parameter " + name);
        seen[name] = true;
        for (Index r = 0; r < rows; ++r) {
            if (!std::getline(is, line))
                throw CheckpointError("checkpoint truncated inside " + name);
            std::istringstream vs(line);
            std::string tok;
            for (Index c = 0; c < cols; ++c) {
                if (!(vs >> tok))
                    throw CheckpointError("checkpoint row too short in " + name);
                char* end = nullptr;
                p->value(r, c) = std::strtod(tok.c_str(), &end);
                if (end == tok.c_str() || *end != '\0')
                    throw CheckpointError("bad value '" + tok + "' in " + name);
            }
        }
    }
    throw CheckpointError("checkpoint truncated: no end marker");
}

CscModel load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw CheckpointError("cannot open checkpoint " + path.string());
    return load_checkpoint(is);
}

}  // namespace atlas
