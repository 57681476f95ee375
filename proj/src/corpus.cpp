#include "atlas/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace atlas {

using json = nlohmann::json;

namespace {

// splitmix64 finaliser; gives every generation stage its own stream.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stage)
{
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stage + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void check_rate(double v, const char* field)
{
    if (!(v >= 0.0 && v <= 1.0))
        throw GenerationError(std::string("corpus spec field ") + field + " must lie in [0, 1]");
}

std::size_t sample_weighted(const std::vector<double>& weights, std::mt19937_64& rng)
{
    std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
    return dist(rng);
}

}  // namespace

std::string to_string(ErrorType t)
{
    switch (t) {
    case ErrorType::None: return "none";
    case ErrorType::NonWord: return "non_word";
    case ErrorType::RealWord: return "real_word";
    }
    return "?";
}

std::optional<ErrorType> parse_error_type(const std::string& s)
{
    if (s == "none")
        return ErrorType::None;
    if (s == "non_word")
        return ErrorType::NonWord;
    if (s == "real_word")
        return ErrorType::RealWord;
    return std::nullopt;
}

void CorpusSpec::validate() const
{
    if (train_sentences < 0)
        throw GenerationError("corpus spec field train_sentences must be >= 0");
    if (test_sentences < 0)
        throw GenerationError("corpus spec field test_sentences must be >= 0");
    if (min_length < 1)
        throw GenerationError("corpus spec field min_length must be >= 1");
    if (max_length < min_length)
        throw GenerationError("corpus spec field max_length must be >= min_length");
    if (pos_classes < 1)
        throw GenerationError("corpus spec field pos_classes must be >= 1");
    if (group_size < 3)
        throw GenerationError("corpus spec field group_size must be >= 3 so every token has confusable substitutes");
    if (vocab_size < 3 * group_size)
        throw GenerationError("corpus spec field vocab_size must be >= 3 * group_size");
    if (lexicon_words < pos_classes)
        throw GenerationError("corpus spec field lexicon_words must be >= pos_classes");
    if (pos_successors < 1 || pos_successors > pos_classes)
        throw GenerationError("corpus spec field pos_successors must lie in [1, pos_classes]");
    check_rate(neighbor_fraction, "neighbor_fraction");
    check_rate(sentence_error_rate, "sentence_error_rate");
    check_rate(token_error_rate, "token_error_rate");
    check_rate(real_word_fraction, "real_word_fraction");
    check_rate(pos_noise_base, "pos_noise_base");
    check_rate(pos_noise_error, "pos_noise_error");
}

// ---- lexicon ---------------------------------------------------------------

void Lexicon::reindex()
{
    index_.clear();
    for (std::size_t i = 0; i < words.size(); ++i)
        index_.emplace(words[i], i);
}

std::vector<std::size_t> Lexicon::words_of_class(int pos_class) const
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < words.size(); ++i)
        if (word_pos[i] == pos_class)
            out.push_back(i);
    return out;
}

Lexicon gen_lexicon(const CorpusSpec& spec)
{
    std::mt19937_64 rng(derive_seed(spec.seed, 0));
    return gen_lexicon(spec, rng);
}

Lexicon gen_lexicon(const CorpusSpec& spec, std::mt19937_64& rng)
{
    spec.validate();
    const double v = spec.vocab_size;
    if (spec.lexicon_words > v + v * v + v * v * v)
        throw GenerationError("corpus spec field lexicon_words exceeds the number of distinct words");
    Lexicon lex;
    lex.pos_classes = spec.pos_classes;

    std::vector<int> tokens(static_cast<std::size_t>(spec.vocab_size));
    std::iota(tokens.begin(), tokens.end(), kFirstTokenId);
    std::shuffle(tokens.begin(), tokens.end(), rng);
    const int groups = spec.vocab_size / spec.group_size;
    lex.confusion_groups.assign(static_cast<std::size_t>(groups), {});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::size_t gi = i < static_cast<std::size_t>(groups * spec.group_size)
                                    ? i / static_cast<std::size_t>(spec.group_size)
                                    : (i - static_cast<std::size_t>(groups * spec.group_size));
        lex.confusion_groups[gi].push_back(tokens[i]);
    }
    lex.group_of.assign(static_cast<std::size_t>(spec.total_vocab()), -1);
    for (std::size_t gi = 0; gi < lex.confusion_groups.size(); ++gi) {
        std::sort(lex.confusion_groups[gi].begin(), lex.confusion_groups[gi].end());
        for (int t : lex.confusion_groups[gi])
            lex.group_of[static_cast<std::size_t>(t)] = static_cast<int>(gi);
    }

    std::uniform_real_distribution<double> weight(0.5, 1.5);
    lex.pos_start.resize(static_cast<std::size_t>(spec.pos_classes));
    for (double& w : lex.pos_start)
        w = weight(rng);
    const double start_total = std::accumulate(lex.pos_start.begin(), lex.pos_start.end(), 0.0);
    for (double& w : lex.pos_start)
        w /= start_total;
    lex.pos_bigram.assign(static_cast<std::size_t>(spec.pos_classes),
                          std::vector<double>(static_cast<std::size_t>(spec.pos_classes), 0.0));
    std::vector<int> classes(static_cast<std::size_t>(spec.pos_classes));
    std::iota(classes.begin(), classes.end(), 0);
    for (auto& row : lex.pos_bigram) {
        std::shuffle(classes.begin(), classes.end(), rng);
        double total = 0.0;
        for (int s = 0; s < spec.pos_successors; ++s) {
            const double w = weight(rng);
            row[static_cast<std::size_t>(classes[static_cast<std::size_t>(s)])] = w;
            total += w;
        }
        for (double& w : row)
            w /= total;
    }

    std::discrete_distribution<int> length_dist({0.25, 0.5, 0.25});
    std::uniform_int_distribution<std::size_t> token_pick(0, tokens.size() - 1);
    std::uniform_int_distribution<int> class_pick(0, spec.pos_classes - 1);
    std::set<std::vector<int>> seen;
    int attempts = 0;
    while (static_cast<int>(lex.words.size()) < spec.lexicon_words) {
        if (++attempts > 1000 * spec.lexicon_words)
            throw GenerationError("corpus spec field lexicon_words too large for the vocabulary");
        const int len = 1 + length_dist(rng);
        std::vector<int> w;
        for (int i = 0; i < len; ++i)
            w.push_back(tokens[token_pick(rng)]);
        if (!seen.insert(w).second)
            continue;
        const int cls = lex.words.size() < static_cast<std::size_t>(spec.pos_classes)
                            ? static_cast<int>(lex.words.size())
                            : class_pick(rng);
        lex.words.push_back(std::move(w));
        lex.word_pos.push_back(cls);
    }

    // Confusable neighbours make real-word substitutions available.
    std::bernoulli_distribution add_neighbor(spec.neighbor_fraction);
    const std::size_t base_count = lex.words.size();
    for (std::size_t wi = 0; wi < base_count; ++wi) {
        if (!add_neighbor(rng))
            continue;
        std::vector<int> w = lex.words[wi];
        std::uniform_int_distribution<std::size_t> pos_pick(0, w.size() - 1);
        const std::size_t j = pos_pick(rng);
        const auto& group = lex.confusion_groups[static_cast<std::size_t>(lex.group_of[static_cast<std::size_t>(w[j])])];
        std::vector<int> mates;
        for (int t : group)
            if (t != w[j])
                mates.push_back(t);
        std::uniform_int_distribution<std::size_t> mate_pick(0, mates.size() - 1);
        w[j] = mates[mate_pick(rng)];
        if (!seen.insert(w).second)
            continue;
        int cls = lex.word_pos[wi];
        if (spec.pos_classes > 1) {
            std::uniform_int_distribution<int> other(0, spec.pos_classes - 2);
            cls = other(rng);
            if (cls >= lex.word_pos[wi])
                ++cls;
        }
        lex.words.push_back(std::move(w));
        lex.word_pos.push_back(cls);
    }
    lex.reindex();
    return lex;
}

// ---- records ---------------------------------------------------------------

bool SentenceRecord::has_error() const
{
    return std::find(err_mask.begin(), err_mask.end(), true) != err_mask.end();
}

void SentenceRecord::validate() const
{
    const std::size_t n = tgt.size();
    if (src.size() != n || pos_gold.size() != n || pos_noisy.size() != n || err_mask.size() != n ||
        err_type.size() != n || pos_noise_mask.size() != n)
        throw std::invalid_argument("record fields differ in length");
    for (std::size_t i = 0; i < n; ++i) {
        if (err_mask[i] != (src[i] != tgt[i]))
            throw std::invalid_argument("err_mask disagrees with src/tgt at position " + std::to_string(i));
        if ((err_type[i] == ErrorType::None) == err_mask[i])
            throw std::invalid_argument("err_type disagrees with err_mask at position " + std::to_string(i));
        if (pos_noise_mask[i] != (pos_noisy[i] != pos_gold[i]))
            throw std::invalid_argument("pos_noise_mask disagrees with tags at position " + std::to_string(i));
    }
    if (n > 0 && !tag_is_word_start(pos_gold[0]))
        throw std::invalid_argument("pos_gold must start with a B- tag");
}

std::vector<std::pair<std::size_t, std::size_t>> SentenceRecord::words() const
{
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i < pos_gold.size(); ++i) {
        if (tag_is_word_start(pos_gold[i]) || out.empty())
            out.emplace_back(i, i + 1);
        else
            out.back().second = i + 1;
    }
    return out;
}

std::vector<SentenceRecord> gen_sentences(const Lexicon& lexicon, const CorpusSpec& spec, int count,
                                          std::mt19937_64& rng)
{
    std::vector<std::vector<std::size_t>> by_class;
    for (int c = 0; c < lexicon.pos_classes; ++c) {
        by_class.push_back(lexicon.words_of_class(c));
        if (by_class.back().empty())
            throw GenerationError("lexicon has no word for POS class " + std::to_string(c));
    }
    std::size_t longest = 1;
    for (const auto& w : lexicon.words)
        longest = std::max(longest, w.size());
    const int hi_target = std::max(spec.min_length, spec.max_length - static_cast<int>(longest) + 1);
    std::uniform_int_distribution<int> target_dist(spec.min_length, hi_target);

    std::vector<SentenceRecord> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int s = 0; s < count; ++s) {
        const int target = target_dist(rng);
        SentenceRecord r;
        int cls = static_cast<int>(sample_weighted(lexicon.pos_start, rng));
        while (static_cast<int>(r.tgt.size()) < target) {
            const auto& choices = by_class[static_cast<std::size_t>(cls)];
            std::uniform_int_distribution<std::size_t> pick(0, choices.size() - 1);
            const auto& word = lexicon.words[choices[pick(rng)]];
            for (std::size_t i = 0; i < word.size(); ++i) {
                r.tgt.push_back(word[i]);
                r.pos_gold.push_back(pos_tag(cls, i > 0));
            }
            cls = static_cast<int>(sample_weighted(lexicon.pos_bigram[static_cast<std::size_t>(cls)], rng));
        }
        const std::size_t n = r.tgt.size();
        r.src = r.tgt;
        r.pos_noisy = r.pos_gold;
        r.err_mask.assign(n, false);
        r.err_type.assign(n, ErrorType::None);
        r.pos_noise_mask.assign(n, false);
        out.push_back(std::move(r));
    }
    return out;
}

ErrorType classify_word_error(const Lexicon& lexicon, const std::vector<int>& corrupted)
{
    return lexicon.contains(corrupted) ? ErrorType::RealWord : ErrorType::NonWord;
}

void inject_spelling_errors(std::vector<SentenceRecord>& records, const Lexicon& lexicon, const CorpusSpec& spec,
                            std::mt19937_64& rng)
{
    std::bernoulli_distribution errorful(spec.sentence_error_rate);
    std::bernoulli_distribution real_word(spec.real_word_fraction);

    // Substitutes for position i that yield an error of the requested type.
    auto substitutes = [&](const SentenceRecord& r, std::pair<std::size_t, std::size_t> span, std::size_t i,
                           ErrorType want) {
        std::vector<int> out;
        const int original = r.tgt[i];
        const int gi = lexicon.group_of.at(static_cast<std::size_t>(original));
        if (gi < 0)
            return out;
        std::vector<int> word(r.tgt.begin() + static_cast<std::ptrdiff_t>(span.first),
                              r.tgt.begin() + static_cast<std::ptrdiff_t>(span.second));
        for (int t : lexicon.confusion_groups[static_cast<std::size_t>(gi)]) {
            if (t == original)
                continue;
            word[i - span.first] = t;
            if (classify_word_error(lexicon, word) == want)
                out.push_back(t);
        }
        return out;
    };

    for (SentenceRecord& r : records) {
        if (r.tgt.empty() || !errorful(rng))
            continue;
        const auto spans = r.words();
        std::binomial_distribution<int> count_dist(static_cast<int>(r.tgt.size()), spec.token_error_rate);
        const int errors = std::max(1, count_dist(rng));
        std::vector<bool> word_used(spans.size(), false);
        for (int e = 0; e < errors; ++e) {
            const ErrorType want = real_word(rng) ? ErrorType::RealWord : ErrorType::NonWord;
            std::vector<std::pair<std::size_t, std::size_t>> candidates;  // (word, position)
            for (std::size_t w = 0; w < spans.size(); ++w) {
                if (word_used[w])
                    continue;
                for (std::size_t i = spans[w].first; i < spans[w].second; ++i)
                    if (!substitutes(r, spans[w], i, want).empty())
                        candidates.emplace_back(w, i);
            }
            if (candidates.empty())
                continue;
            std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
            const auto [w, i] = candidates[pick(rng)];
            const auto subs = substitutes(r, spans[w], i, want);
            std::uniform_int_distribution<std::size_t> sub_pick(0, subs.size() - 1);
            r.src[i] = subs[sub_pick(rng)];
            r.err_mask[i] = true;
            r.err_type[i] = want;
            word_used[w] = true;
        }
    }
}

void inject_pos_noise(std::vector<SentenceRecord>& records, const CorpusSpec& spec, std::mt19937_64& rng)
{
    const int tags = spec.pos_tags();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> other(0, tags - 2);
    for (SentenceRecord& r : records) {
        r.pos_noisy = r.pos_gold;
        r.pos_noise_mask.assign(r.size(), false);
        for (const auto& [b, e] : r.words()) {
            bool misspelt = false;
            for (std::size_t i = b; i < e; ++i)
                misspelt = misspelt || r.err_mask[i];
            const double rate = misspelt ? spec.pos_noise_error : spec.pos_noise_base;
            for (std::size_t i = b; i < e; ++i) {
                if (unit(rng) >= rate)
                    continue;
                int t = other(rng);
                if (t >= r.pos_gold[i])
                    ++t;
                r.pos_noisy[i] = t;
                r.pos_noise_mask[i] = true;
            }
        }
    }
}

void add_pos_noise(std::vector<SentenceRecord>& records, int pos_tags, double rate, std::mt19937_64& rng)
{
    if (!(rate >= 0.0 && rate <= 1.0))
        throw std::invalid_argument("add_pos_noise: rate outside [0, 1]");
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> other(0, pos_tags - 2);
    for (SentenceRecord& r : records) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (unit(rng) >= rate)
                continue;
            int t = other(rng);
            if (t >= r.pos_gold[i])
                ++t;
            r.pos_noisy[i] = t;
            r.pos_noise_mask[i] = true;
        }
    }
}

Corpus generate_corpus(const CorpusSpec& spec)
{
    spec.validate();
    Corpus c;
    c.lexicon = gen_lexicon(spec);
    std::mt19937_64 text_rng(derive_seed(spec.seed, 1));
    c.train = gen_sentences(c.lexicon, spec, spec.train_sentences, text_rng);
    c.test = gen_sentences(c.lexicon, spec, spec.test_sentences, text_rng);
    std::mt19937_64 error_rng(derive_seed(spec.seed, 2));
    inject_spelling_errors(c.train, c.lexicon, spec, error_rng);
    inject_spelling_errors(c.test, c.lexicon, spec, error_rng);
    std::mt19937_64 noise_rng(derive_seed(spec.seed, 3));
    inject_pos_noise(c.train, spec, noise_rng);
    inject_pos_noise(c.test, spec, noise_rng);
    return c;
}

// ---- serialisation ---------------------------------------------------------

namespace {

json spec_json(const CorpusSpec& s)
{
    return json{{"seed", s.seed},
                {"train_sentences", s.train_sentences},
                {"test_sentences", s.test_sentences},
                {"min_length", s.min_length},
                {"max_length", s.max_length},
                {"vocab_size", s.vocab_size},
                {"pos_classes", s.pos_classes},
                {"group_size", s.group_size},
                {"lexicon_words", s.lexicon_words},
                {"neighbor_fraction", s.neighbor_fraction},
                {"pos_successors", s.pos_successors},
                {"sentence_error_rate", s.sentence_error_rate},
                {"token_error_rate", s.token_error_rate},
                {"real_word_fraction", s.real_word_fraction},
                {"pos_noise_base", s.pos_noise_base},
                {"pos_noise_error", s.pos_noise_error}};
}

CorpusSpec spec_from(const json& j)
{
    CorpusSpec s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.train_sentences = j.at("train_sentences").get<int>();
    s.test_sentences = j.at("test_sentences").get<int>();
    s.min_length = j.at("min_length").get<int>();
    s.max_length = j.at("max_length").get<int>();
    s.vocab_size = j.at("vocab_size").get<int>();
    s.pos_classes = j.at("pos_classes").get<int>();
    s.group_size = j.at("group_size").get<int>();
    s.lexicon_words = j.at("lexicon_words").get<int>();
    s.neighbor_fraction = j.at("neighbor_fraction").get<double>();
    s.pos_successors = j.at("pos_successors").get<int>();
    s.sentence_error_rate = j.at("sentence_error_rate").get<double>();
    s.token_error_rate = j.at("token_error_rate").get<double>();
    s.real_word_fraction = j.at("real_word_fraction").get<double>();
    s.pos_noise_base = j.at("pos_noise_base").get<double>();
    s.pos_noise_error = j.at("pos_noise_error").get<double>();
    return s;
}

}  // namespace

std::string spec_to_json(const CorpusSpec& spec) { return spec_json(spec).dump(); }

CorpusSpec spec_from_json(const std::string& text) { return spec_from(json::parse(text)); }

void write_corpus(const std::filesystem::path& path, const std::vector<SentenceRecord>& records,
                  const std::optional<CorpusSpec>& spec)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    if (spec)
        os << json{{"corpus_spec", spec_json(*spec)}}.dump() << "\n";
    for (const SentenceRecord& r : records) {
        json types = json::array();
        for (ErrorType t : r.err_type)
            types.push_back(to_string(t));
        json line{{"src", r.src}, {"tgt", r.tgt}, {"pos_gold", r.pos_gold}, {"pos_noisy", r.pos_noisy},
                  {"err_type", types}};
        os << line.dump() << "\n";
    }
    if (!os)
        throw std::runtime_error("failed writing " + path.string());
}

CorpusFile read_corpus(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw std::runtime_error("cannot open corpus " + path.string());
    CorpusFile out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(is, line)) {
        ++number;
        if (line.empty())
            continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw CorpusParseError(number, std::string("malformed record: ") + e.what());
        }
        try {
            if (j.contains("corpus_spec")) {
                if (number != 1)
                    throw CorpusParseError(number, "corpus_spec header must be the first line");
                out.spec = spec_from(j.at("corpus_spec"));
                continue;
            }
            SentenceRecord r;
            r.src = j.at("src").get<std::vector<int>>();
            r.tgt = j.at("tgt").get<std::vector<int>>();
            r.pos_gold = j.at("pos_gold").get<std::vector<int>>();
            r.pos_noisy = j.at("pos_noisy").get<std::vector<int>>();
            for (const auto& t : j.at("err_type")) {
                auto parsed = parse_error_type(t.get<std::string>());
                if (!parsed)
                    throw CorpusParseError(number, "unknown err_type '" + t.get<std::string>() + "'");
                r.err_type.push_back(*parsed);
            }
            const std::size_t n = r.tgt.size();
            if (r.src.size() != n || r.pos_gold.size() != n || r.pos_noisy.size() != n || r.err_type.size() != n)
                throw CorpusParseError(number, "fields differ in length");
            for (std::size_t i = 0; i < n; ++i) {
                r.err_mask.push_back(r.src[i] != r.tgt[i]);
                r.pos_noise_mask.push_back(r.pos_noisy[i] != r.pos_gold[i]);
            }
            r.validate();
            out.records.push_back(std::move(r));
        } catch (const CorpusParseError&) {
            throw;
        } catch (const std::exception& e) {
            throw CorpusParseError(number, e.what());
        }
    }
    return out;
}

void write_lexicon(const std::filesystem::path& path, const Lexicon& lexicon)
{
    json j{{"pos_classes", lexicon.pos_classes},
           {"words", lexicon.words},
           {"word_pos", lexicon.word_pos},
           {"pos_start", lexicon.pos_start},
           {"pos_bigram", lexicon.pos_bigram},
           {"confusion_groups", lexicon.confusion_groups}};
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << j.dump() << "\n";
}

}  // namespace atlas
