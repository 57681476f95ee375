#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace atlas {

enum class ErrorType { None, NonWord, RealWord };

std::string to_string(ErrorType t);
std::optional<ErrorType> parse_error_type(const std::string& s);

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Parse failure that knows the 1-based line it came from.
struct CorpusParseError : std::runtime_error {
    CorpusParseError(std::size_t line_, const std::string& what)
        : std::runtime_error("line " + std::to_string(line_) + ": " + what), line(line_)
    {
    }
    std::size_t line;
};

/// Reserved ids preceding the generated tokens.
inline constexpr int kPadId = 0;
inline constexpr int kMaskId = 1;
inline constexpr int kFirstTokenId = 2;

struct CorpusSpec {
    std::uint64_t seed = 1;
    int train_sentences = 5000;
    int test_sentences = 1000;
    int min_length = 8;
    int max_length = 20;
    int vocab_size = 60;  // generated tokens, excluding reserved ids
    int pos_classes = 8;
    int group_size = 4;
    int lexicon_words = 16;         // base words before real-word neighbours are added
    double neighbor_fraction = 0.8; // share of base words given a confusable lexicon neighbour
    int pos_successors = 2;         // nonzero entries per POS transition row
    double sentence_error_rate = 0.5;
    double token_error_rate = 0.1;
    double real_word_fraction = 0.3;
    double pos_noise_base = 0.05;   // rho_base
    double pos_noise_error = 0.5;   // rho_err

    /// Throws GenerationError naming the offending field.
    void validate() const;
    int total_vocab() const { return vocab_size + kFirstTokenId; }
    int pos_tags() const { return 2 * pos_classes; }
};

/// POS tag ids interleave the B-/I- prefixes: tag = 2 * class + (inside ? 1 : 0).
inline int pos_tag(int pos_class, bool inside) { return 2 * pos_class + (inside ? 1 : 0); }
inline bool tag_is_word_start(int tag) { return tag % 2 == 0; }

struct Lexicon {
    int pos_classes = 0;
    std::vector<std::vector<int>> words;
    std::vector<int> word_pos;
    std::vector<double> pos_start;                // initial class weights
    std::vector<std::vector<double>> pos_bigram;  // row-normalised transition weights
    std::vector<std::vector<int>> confusion_groups;
    std::vector<int> group_of;  // token id -> group index; -1 for reserved ids

    bool contains(const std::vector<int>& word) const { return index_.count(word) != 0; }
    std::vector<std::size_t> words_of_class(int pos_class) const;
    /// Rebuilds the word lookup after editing `words` by hand.
    void reindex();

private:
    std::map<std::vector<int>, std::size_t> index_;
};

struct SentenceRecord {
    std::vector<int> src;
    std::vector<int> tgt;
    std::vector<int> pos_gold;
    std::vector<int> pos_noisy;
    std::vector<bool> err_mask;        // src[i] != tgt[i]
    std::vector<ErrorType> err_type;   // None iff !err_mask[i]
    std::vector<bool> pos_noise_mask;  // pos_noisy[i] != pos_gold[i]

    std::size_t size() const { return tgt.size(); }
    bool has_error() const;
    /// Throws std::invalid_argument when the record breaks an invariant.
    void validate() const;
    /// Word spans [begin, end) from the B-/I- structure of pos_gold.
    std::vector<std::pair<std::size_t, std::size_t>> words() const;
};

struct Corpus {
    Lexicon lexicon;
    std::vector<SentenceRecord> train;
    std::vector<SentenceRecord> test;
};

Lexicon gen_lexicon(const CorpusSpec& spec);
Lexicon gen_lexicon(const CorpusSpec& spec, std::mt19937_64& rng);

/// Clean sentences from a POS-bigram walk over lexicon words.
std::vector<SentenceRecord> gen_sentences(const Lexicon& lexicon, const CorpusSpec& spec, int count,
                                          std::mt19937_64& rng);

/// Substitutes tokens within their confusion group and labels each error.
void inject_spelling_errors(std::vector<SentenceRecord>& records, const Lexicon& lexicon, const CorpusSpec& spec,
                            std::mt19937_64& rng);

/// Recomputes pos_noisy from pos_gold: each tag flips with rho_base, or
/// rho_err inside a word containing a spelling error.
void inject_pos_noise(std::vector<SentenceRecord>& records, const CorpusSpec& spec, std::mt19937_64& rng);

/// Flips a further `rate` share of positions to a tag differing from gold.
void add_pos_noise(std::vector<SentenceRecord>& records, int pos_tags, double rate, std::mt19937_64& rng);

/// Type of the error at a word given the corrupted and clean spellings.
ErrorType classify_word_error(const Lexicon& lexicon, const std::vector<int>& corrupted);

/// Full pipeline: lexicon, clean text, spelling errors, POS noise.
Corpus generate_corpus(const CorpusSpec& spec);

struct CorpusFile {
    std::optional<CorpusSpec> spec;
    std::vector<SentenceRecord> records;
};

void write_corpus(const std::filesystem::path& path, const std::vector<SentenceRecord>& records,
                  const std::optional<CorpusSpec>& spec = std::nullopt);
CorpusFile read_corpus(const std::filesystem::path& path);

void write_lexicon(const std::filesystem::path& path, const Lexicon& lexicon);

std::string spec_to_json(const CorpusSpec& spec);
CorpusSpec spec_from_json(const std::string& text);

}  // namespace atlas
