#include "atlas/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace atlas {

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value)
{
    T out{};
    const char* first = value.data();
    const char* last = value.data() + value.size();
    const auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc() || ptr != last)
        throw ConfigError("config key " + key + ": '" + value + "' is not a valid number");
    return out;
}

std::string format_double(double v)
{
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string reading_name(LossReading r) { return r == LossReading::Literal ? "literal" : "reconciled"; }

}  // namespace

const std::vector<std::string>& RunConfig::keys()
{
    static const std::vector<std::string> k = {
        "encoder.L",         "encoder.d",          "encoder.heads",
        "encoder.max_len",   "encoder.vocab",      "fusion.strategy",
        "fusion.g",          "fusion.m",           "fusion.k",
        "model.pos_dim",     "schedule.mode",      "schedule.beta",
        "schedule.epochs",   "schedule.batch_size", "schedule.reading",
        "schedule.gmm_init_sample", "optimizer.lr_max", "optimizer.lr_min",
        "optimizer.weight_decay", "corpus.train",  "corpus.test",
        "corpus.extra_pos_noise", "seed",          "output.dir"};
    return k;
}

void RunConfig::set(const std::string& key, const std::string& value)
{
    if (key == "encoder.L")
        layers = parse_number<int>(key, value);
    else if (key == "encoder.d")
        width = parse_number<int>(key, value);
    else if (key == "encoder.heads")
        enc_heads = parse_number<int>(key, value);
    else if (key == "encoder.max_len")
        max_len = parse_number<int>(key, value);
    else if (key == "encoder.vocab")
        vocab = parse_number<int>(key, value);
    else if (key == "fusion.strategy") {
        const auto s = parse_fusion_strategy(value);
        if (!s)
            throw ConfigError("config key fusion.strategy: unknown strategy '" + value + "'");
        strategy = *s;
    } else if (key == "fusion.g")
        ngram = parse_number<int>(key, value);
    else if (key == "fusion.m")
        fusion_heads = parse_number<int>(key, value);
    else if (key == "fusion.k")
        resnet_k = parse_number<int>(key, value);
    else if (key == "model.pos_dim")
        pos_dim = parse_number<int>(key, value);
    else if (key == "schedule.mode") {
        const auto m = parse_injection_mode(value);
        if (!m)
            throw ConfigError("config key schedule.mode: unknown mode '" + value + "'");
        mode = *m;
    } else if (key == "schedule.beta")
        beta = parse_number<double>(key, value);
    else if (key == "schedule.epochs")
        epochs = parse_number<int>(key, value);
    else if (key == "schedule.batch_size")
        batch_size = parse_number<int>(key, value);
    else if (key == "schedule.reading") {
        if (value == "reconciled")
            reading = LossReading::Reconciled;
        else if (value == "literal")
            reading = LossReading::Literal;
        else
            throw ConfigError("config key schedule.reading: expected reconciled or literal");
    } else if (key == "schedule.gmm_init_sample")
        gmm_init_sample = parse_number<int>(key, value);
    else if (key == "optimizer.lr_max")
        lr_max = parse_number<double>(key, value);
    else if (key == "optimizer.lr_min")
        lr_min = parse_number<double>(key, value);
    else if (key == "optimizer.weight_decay")
        weight_decay = parse_number<double>(key, value);
    else if (key == "corpus.train")
        train_path = value;
    else if (key == "corpus.test")
        test_path = value;
    else if (key == "corpus.extra_pos_noise")
        extra_pos_noise = parse_number<double>(key, value);
    else if (key == "seed")
        seed = parse_number<std::uint64_t>(key, value);
    else if (key == "output.dir")
        output_dir = value;
    else
        throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::to_text() const
{
    std::ostringstream os;
    os << "encoder.L = " << layers << '\n'
       << "encoder.d = " << width << '\n'
       << "encoder.heads = " << enc_heads << '\n'
       << "encoder.max_len = " << max_len << '\n'
       << "encoder.vocab = " << vocab << '\n'
       << "fusion.strategy = " << to_string(strategy) << '\n'
       << "fusion.g = " << ngram << '\n'
       << "fusion.m = " << fusion_heads << '\n'
       << "fusion.k = " << resnet_k << '\n'
       << "model.pos_dim = " << pos_dim << '\n'
       << "schedule.mode = " << to_string(mode) << '\n'
       << "schedule.beta = " << format_double(beta) << '\n'
       << "schedule.epochs = " << epochs << '\n'
       << "schedule.batch_size = " << batch_size << '\n'
       << "schedule.reading = " << reading_name(reading) << '\n'
       << "schedule.gmm_init_sample = " << gmm_init_sample << '\n'
       << "optimizer.lr_max = " << format_double(lr_max) << '\n'
       << "optimizer.lr_min = " << format_double(lr_min) << '\n'
       << "optimizer.weight_decay = " << format_double(weight_decay) << '\n'
       << "corpus.train = " << train_path.string() << '\n'
       << "corpus.test = " << test_path.string() << '\n'
       << "corpus.extra_pos_noise = " << format_double(extra_pos_noise) << '\n'
       << "seed = " << seed << '\n'
       << "output.dir = " << output_dir.string() << '\n';
    return os.str();
}

void RunConfig::validate() const
{
    if (vocab < 0)
        throw ConfigError("config key encoder.vocab must be >= 0");
    if (!(beta > 0.0))
        throw ConfigError("config key schedule.beta must be > 0");
    if (epochs < 1)
        throw ConfigError("config key schedule.epochs must be >= 1");
    if (batch_size < 1)
        throw ConfigError("config key schedule.batch_size must be >= 1");
    if (gmm_init_sample < 1)
        throw ConfigError("config key schedule.gmm_init_sample must be >= 1");
    if (!(lr_max > 0.0) || lr_min < 0.0 || lr_min > lr_max)
        throw ConfigError("config keys optimizer.lr_max/lr_min need 0 <= lr_min <= lr_max, lr_max > 0");
    if (weight_decay < 0.0)
        throw ConfigError("config key optimizer.weight_decay must be >= 0");
    if (extra_pos_noise < 0.0 || extra_pos_noise > 1.0)
        throw ConfigError("config key corpus.extra_pos_noise must lie in [0, 1]");
    if (pos_dim < 1)
        throw ConfigError("config key model.pos_dim must be >= 1");
    try {
        model_config(vocab > 0 ? vocab : 3, 2).validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

RunConfig RunConfig::parse(std::istream& is, const std::filesystem::path& base)
{
    RunConfig c;
    std::string line;
    std::size_t number = 0;
    while (std::getline(is, line)) {
        ++number;
        const auto hash = line.find('#');
        const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
        if (body.empty())
            continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
        const std::string key = trim(body.substr(0, eq));
        const std::string value = trim(body.substr(eq + 1));
        try {
            c.set(key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(number) + ": " + e.what());
        }
    }
    if (!base.empty()) {
        for (std::filesystem::path* p : {&c.train_path, &c.test_path, &c.output_dir})
            if (p->is_relative())
                *p = base / *p;
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path)
{
    std::ifstream is(path);
    if (!is)
        throw ConfigError("cannot read config file " + path.string());
    return parse(is, path.parent_path());
}

ModelConfig RunConfig::model_config(int corpus_vocab, int pos_tags) const
{
    ModelConfig m;
    m.encoder.layers = layers;
    m.encoder.width = width;
    m.encoder.heads = enc_heads;
    m.encoder.max_len = max_len;
    m.encoder.vocab = corpus_vocab;
    m.fusion.strategy = strategy;
    m.fusion.ngram = ngram;
    m.fusion.heads = fusion_heads;
    m.fusion.resnet_k = resnet_k;
    m.pos_tags = pos_tags;
    m.pos_input = mode == InjectionMode::HardEmbedding;
    m.pos_dim = pos_dim;
    return m;
}

TrainConfig RunConfig::train_config() const
{
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.optimizer.lr_max = lr_max;
    t.optimizer.lr_min = lr_min;
    t.optimizer.weight_decay = weight_decay;
    t.mode = mode;
    t.beta = beta;
    t.reading = reading;
    t.gmm_init_sample = gmm_init_sample;
    t.seed = seed;
    return t;
}

}  // namespace atlas
