#include "atlas/eval.hpp"
#include "support.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <sstream>

using namespace atlas;

namespace {

/// Record over `tgt` with the given (position, source token, type) errors.
SentenceRecord make_record(std::vector<int> tgt, std::vector<std::tuple<std::size_t, int, ErrorType>> errors = {})
{
    SentenceRecord r;
    const std::size_t n = tgt.size();
    r.tgt = std::move(tgt);
    r.src = r.tgt;
    r.pos_gold.assign(n, 0);
    r.pos_noisy.assign(n, 0);
    r.err_mask.assign(n, false);
    r.err_type.assign(n, ErrorType::None);
    r.pos_noise_mask.assign(n, false);
    for (const auto& [i, tok, type] : errors) {
        r.src[i] = tok;
        r.err_mask[i] = true;
        r.err_type[i] = type;
    }
    r.validate();
    return r;
}

std::vector<std::vector<int>> targets(const std::vector<SentenceRecord>& records)
{
    std::vector<std::vector<int>> out;
    for (const auto& r : records)
        out.push_back(r.tgt);
    return out;
}

std::vector<std::vector<int>> sources(const std::vector<SentenceRecord>& records)
{
    std::vector<std::vector<int>> out;
    for (const auto& r : records)
        out.push_back(r.src);
    return out;
}

constexpr auto NW = ErrorType::NonWord;
constexpr auto RW = ErrorType::RealWord;

/// Six sentences: non-word fixed, non-word missed, real-word fixed,
/// real-word detected but miscorrected, mixed half-fixed, clean untouched.
struct Fixture {
    std::vector<SentenceRecord> records;
    std::vector<std::vector<int>> predictions;
};

Fixture six_sentences()
{
    Fixture f;
    f.records = {make_record({2, 3, 4}, {{1, 9, NW}}),      make_record({2, 3, 4}, {{0, 9, NW}}),
                 make_record({5, 6, 7}, {{2, 9, RW}}),      make_record({5, 6, 7}, {{1, 9, RW}}),
                 make_record({2, 3, 4}, {{0, 8, NW}, {2, 9, RW}}), make_record({4, 4, 4})};
    f.predictions = {{2, 3, 4}, {9, 3, 4}, {5, 6, 7}, {5, 8, 7}, {2, 3, 9}, {4, 4, 4}};
    return f;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("F1 is the harmonic mean")
{
    CHECK(f1_score(0.0, 0.0) == 0.0);
    CHECK(f1_score(1.0, 1.0) == 1.0);
    CHECK(f1_score(0.5, 1.0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 200; ++i) {
        const double p = u(rng), r = u(rng);
        const double f = f1_score(p, r);
        CHECK(f == 2 * p * r / (p + r));
        CHECK(f <= std::max(p, r));
        CHECK(f >= std::min(p, r) - 1e-15);
    }
}

TEST_CASE("perfect predictions score 1 everywhere")
{
    const Corpus c = generate_corpus(testing::tiny_spec(2));
    const MetricsReport m = sentence_metrics(targets(c.test), c.test);
    for (const LevelMetrics* l : {&m.detection, &m.correction}) {
        CHECK(l->accuracy == 1.0);
        CHECK(l->precision == 1.0);
        CHECK(l->recall == 1.0);
        CHECK(l->f1 == 1.0);
        CHECK(l->fp == 0);
        CHECK(l->fn == 0);
    }
    CHECK(m.adjustment_precision() == 1.0);
}

TEST_CASE("changing nothing: precision 1, recall 0, accuracy is the clean share")
{
    const Corpus c = generate_corpus(testing::tiny_spec(2));
    const MetricsReport m = sentence_metrics(sources(c.test), c.test);
    long clean = 0;
    for (const auto& r : c.test)
        clean += r.has_error() ? 0 : 1;
    REQUIRE(clean < long(c.test.size()));
    for (const LevelMetrics* l : {&m.detection, &m.correction}) {
        CHECK(l->precision == 1.0);
        CHECK(l->recall == 0.0);
        CHECK(l->f1 == 0.0);
        CHECK(l->accuracy == double(clean) / double(c.test.size()));
    }
    CHECK(m.adjusted == 0);
}

TEST_CASE("all-clean corpus with no changes")
{
    const std::vector<SentenceRecord> records{make_record({2, 3}), make_record({4})};
    const MetricsReport m = sentence_metrics(sources(records), records);
    CHECK(m.correction.precision == 1.0);
    CHECK(m.correction.recall == 0.0);
    CHECK(m.correction.accuracy == 1.0);
}

TEST_CASE("418 correct out of 585 adjustments")
{
    std::vector<SentenceRecord> records;
    std::vector<std::vector<int>> pred;
    for (int i = 0; i < 600; ++i) {
        records.push_back(make_record({2, 3, 4}, {{1, 5, NW}}));
        if (i < 418)
            pred.push_back({2, 3, 4});
        else if (i < 585)
            pred.push_back({2, 6, 4});
        else
            pred.push_back({2, 5, 4});
    }
    const MetricsReport m = sentence_metrics(pred, records);
    CHECK(m.adjusted == 585);
    CHECK(m.correctly_adjusted == 418);
    CHECK(m.adjustment_precision() == 418.0 / 585.0);
    CHECK(std::abs(m.adjustment_precision() - 0.7145) < 1e-4);
    CHECK(m.correction.precision == 418.0 / 585.0);
    CHECK(m.detection.tp == 585);
    CHECK(m.correction.fn == 182);
}

TEST_CASE("six-sentence fixture, overall and per error type")
{
    const Fixture f = six_sentences();
    const MetricsReport all = sentence_metrics(f.predictions, f.records);
    CHECK(all.errorful == 5);
    CHECK(all.adjusted == 4);
    CHECK(all.detection.tp == 3);
    CHECK(all.detection.fp == 1);
    CHECK(all.detection.fn == 2);
    CHECK(all.detection.precision == 0.75);
    CHECK(all.detection.recall == 0.6);
    CHECK(all.detection.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(all.detection.accuracy == doctest::Approx(4.0 / 6.0).epsilon(1e-14));
    CHECK(all.correction.tp == 2);
    CHECK(all.correction.precision == 0.5);
    CHECK(all.correction.recall == 0.4);
    CHECK(all.correction.f1 == doctest::Approx(4.0 / 9.0).epsilon(1e-14));
    CHECK(all.correction.accuracy == 0.5);

    const ErrorTypeBreakdown b = breakdown_by_error_type(f.predictions, f.records);
    CHECK(b.non_word.sentences == 2);
    CHECK(b.non_word.correction.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(b.non_word.detection.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(b.real_word.sentences == 2);
    CHECK(b.real_word.detection.f1 == 1.0);
    CHECK(b.real_word.correction.f1 == 0.5);
    CHECK(b.mixed.sentences == 1);
    CHECK(b.mixed.detection.f1 == 0.0);
    CHECK(b.mixed.correction.f1 == 0.0);
    CHECK(b.mixed.correction.precision == 0.0);
}

TEST_CASE("error buckets")
{
    CHECK_FALSE(error_bucket(make_record({2, 3})).has_value());
    CHECK(error_bucket(make_record({2, 3}, {{0, 4, NW}})) == ErrorBucket::NonWord);
    CHECK(error_bucket(make_record({2, 3}, {{0, 4, RW}})) == ErrorBucket::RealWord);
    CHECK(error_bucket(make_record({2, 3}, {{0, 4, RW}, {1, 5, NW}})) == ErrorBucket::Mixed);
}

TEST_CASE("only non-word errors leave the other buckets empty")
{
    CorpusSpec spec = testing::tiny_spec(4);
    spec.real_word_fraction = 0.0;
    const Corpus c = generate_corpus(spec);
    const ErrorTypeBreakdown b = breakdown_by_error_type(sources(c.test), c.test);
    CHECK(b.real_word.sentences == 0);
    CHECK(b.mixed.sentences == 0);
    CHECK(b.non_word.sentences > 0);
}

TEST_CASE("buckets partition the errorful sentences")
{
    CorpusSpec spec = testing::tiny_spec(5);
    spec.test_sentences = 300;
    spec.token_error_rate = 0.3;
    const Corpus c = generate_corpus(spec);
    std::vector<std::vector<int>> pred = sources(c.test);
    for (std::size_t s = 0; s < pred.size(); s += 3)
        pred[s] = c.test[s].tgt;
    const MetricsReport all = sentence_metrics(pred, c.test);
    const ErrorTypeBreakdown b = breakdown_by_error_type(pred, c.test);
    CHECK(b.non_word.sentences + b.real_word.sentences + b.mixed.sentences == all.errorful);
    CHECK(b.non_word.correction.tp + b.real_word.correction.tp + b.mixed.correction.tp == all.correction.tp);
    CHECK(b.mixed.sentences > 0);
    const std::string text = b.to_text();
    CHECK(text.find("non_word.correction.f1 = ") != std::string::npos);
    CHECK(text.find("mixed.counts.errorful = ") != std::string::npos);
}

TEST_CASE("metrics are invariant under shuffling and bounded")
{
    const Corpus c = generate_corpus(testing::tiny_spec(6));
    std::mt19937_64 rng(3);
    std::vector<std::vector<int>> pred = sources(c.test);
    std::uniform_int_distribution<int> tok(kFirstTokenId, 19);
    for (std::size_t s = 0; s < pred.size(); ++s) {
        if (s % 2 == 0)
            pred[s] = c.test[s].tgt;
        if (s % 3 == 0)
            pred[s][0] = tok(rng);
    }
    const MetricsReport a = sentence_metrics(pred, c.test);
    std::vector<std::size_t> order(c.test.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<SentenceRecord> rec2;
    std::vector<std::vector<int>> pred2;
    for (std::size_t i : order) {
        rec2.push_back(c.test[i]);
        pred2.push_back(pred[i]);
    }
    const MetricsReport b = sentence_metrics(pred2, rec2);
    CHECK(a.to_text() == b.to_text());
    CHECK(a.correction.tp <= a.detection.tp);
    for (const LevelMetrics* l : {&a.detection, &a.correction})
        for (double v : {l->accuracy, l->precision, l->recall, l->f1}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
}

TEST_CASE("length mismatch is a contract violation")
{
    const std::vector<SentenceRecord> records{make_record({2, 3})};
    CHECK_THROWS_AS(sentence_metrics({{2}}, records), DimensionError);
    CHECK_THROWS_AS(sentence_metrics({}, records), DimensionError);
}

TEST_CASE("report field names")
{
    const Fixture f = six_sentences();
    const std::string text = sentence_metrics(f.predictions, f.records).to_text();
    for (const char* key : {"detection.acc = ", "detection.prec = ", "detection.rec = ", "detection.f1 = ",
                            "correction.acc = ", "correction.prec = ", "correction.rec = ", "correction.f1 = ",
                            "counts.adjusted = 4", "counts.correctly_adjusted = 2", "counts.detection.tp = 3"})
        CHECK(text.find(key) != std::string::npos);
}

TEST_CASE("ROC AUC against a pair-counting oracle")
{
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    const bool l[] = {false, false, true, true};
    CHECK(roc_auc(s, l) == 0.75);
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> level(0, 5);
    std::bernoulli_distribution coin(0.3);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> x(80);
        std::array<bool, 80> y{};
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] = level(rng);  // many ties
            y[i] = coin(rng);
        }
        y[0] = true;
        y[1] = false;
        double wins = 0.0, pairs = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = 0; j < x.size(); ++j)
                if (y[i] && !y[j]) {
                    pairs += 1.0;
                    wins += x[i] > x[j] ? 1.0 : (x[i] == x[j] ? 0.5 : 0.0);
                }
        CHECK(std::abs(roc_auc(x, y) - wins / pairs) < 1e-12);
    }
    const bool same[] = {true, true};
    CHECK_THROWS(roc_auc(std::vector<double>{1, 2}, same));
}

TEST_CASE("mean and sample deviation")
{
    CHECK(mean(std::vector<double>{1, 2, 3, 6}) == 3.0);
    CHECK(stddev(std::vector<double>{1, 2, 3, 6}) == doctest::Approx(std::sqrt(14.0 / 3.0)).epsilon(1e-15));
    CHECK(stddev(std::vector<double>{0.4}) == 0.0);
}

TEST_CASE("ablation row sets")
{
    const RunConfig base;
    auto names = [&](AblationSuite s) {
        std::vector<std::string> out;
        for (const auto& [row, config] : ablation_plan(s, base))
            out.push_back(row.name + "/" + row.condition);
        return out;
    };
    CHECK(names(AblationSuite::Fusion) ==
          std::vector<std::string>{"TopOnly/default", "Mean/default", "ResNet/default", "ResNetK/default",
                                   "LastQuery/default", "NgramQuery/default"});
    CHECK(names(AblationSuite::Ngram) == std::vector<std::string>{"g=1/default", "g=2/default", "g=3/default",
                                                                   "g=4/default", "g=5/default", "g=7/default"});
    const auto injection = ablation_plan(AblationSuite::Injection, base);
    REQUIRE(injection.size() == 10);
    for (std::size_t i = 0; i < injection.size(); ++i) {
        CHECK(injection[i].first.condition == (i % 2 ? "noise+20%" : "clean"));
        CHECK(injection[i].second.extra_pos_noise == (i % 2 ? 0.2 : 0.0));
    }
    CHECK(injection[0].second.mode == InjectionMode::NoAux);
    CHECK(injection[9].second.mode == InjectionMode::FullAnnealing);
    for (const auto& [row, config] : ablation_plan(AblationSuite::Ngram, base))
        CHECK(config.strategy == FusionStrategy::NgramQuery);
    CHECK(parse_ablation_suite("ngram") == AblationSuite::Ngram);
    CHECK_FALSE(parse_ablation_suite("optimizer").has_value());
}

TEST_CASE("single-seed ablation runs stay in range and ignore the job count")
{
    const CorpusSpec spec = testing::tiny_spec(7);
    const Corpus c = generate_corpus(spec);
    const CorpusShape shape{spec.total_vocab(), spec.pos_tags()};
    const std::vector<std::uint64_t> seeds{3};
    for (AblationSuite suite : {AblationSuite::Fusion, AblationSuite::Injection, AblationSuite::Ngram}) {
        int calls = 0;
        const AblationTable t = run_ablation(suite, testing::tiny_run_config(), seeds, c.train, c.test, shape, 1,
                                             [&](const AblationRow&, std::uint64_t, double) { ++calls; });
        CHECK(calls == int(t.rows.size()));
        for (const AblationRow& r : t.rows) {
            REQUIRE(r.correction_f1.size() == 1);
            CHECK(r.correction_f1[0] >= 0.0);
            CHECK(r.correction_f1[0] <= 1.0);
            CHECK(r.detection_f1[0] >= 0.0);
            CHECK(r.detection_f1[0] <= 1.0);
        }
        if (suite == AblationSuite::Fusion) {
            const AblationTable par =
                run_ablation(suite, testing::tiny_run_config(), seeds, c.train, c.test, shape, 3);
            std::ostringstream a, b;
            t.write_csv(a);
            par.write_csv(b);
            CHECK(a.str() == b.str());
            const std::string csv = a.str();
            CHECK(csv.rfind("suite,row,condition,seeds,detection_f1_mean", 0) == 0);
            CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
        }
    }
    CHECK_THROWS(run_ablation(AblationSuite::Fusion, testing::tiny_run_config(), {}, c.train, c.test, shape));
}

TEST_CASE("corpus shape and model config resolution")
{
    const CorpusSpec spec = testing::tiny_spec();
    const Corpus c = generate_corpus(spec);
    CorpusFile with_header{spec, c.train};
    CHECK(corpus_shape(with_header).vocab == 20);
    CHECK(corpus_shape(with_header).pos_tags == 8);
    const CorpusShape inferred = corpus_shape(CorpusFile{std::nullopt, c.train});
    CHECK(inferred.vocab <= 20);
    CHECK(inferred.pos_tags <= 8);
    RunConfig rc = testing::tiny_run_config();
    CHECK(resolve_model_config(rc, {20, 8}).encoder.vocab == 20);
    rc.vocab = 30;
    CHECK_THROWS_AS(resolve_model_config(rc, {20, 8}), ConfigError);
}

TEST_CASE("extra POS noise reaches the training tags only")
{
    const CorpusSpec spec = testing::tiny_spec(8);
    const Corpus c = generate_corpus(spec);
    RunConfig rc = testing::tiny_run_config();
    rc.extra_pos_noise = 0.5;
    const Experiment ex = run_experiment(rc, c.train, c.test, {spec.total_vocab(), spec.pos_tags()});
    long before = 0, after = 0;
    for (std::size_t s = 0; s < c.train.size(); ++s)
        for (std::size_t i = 0; i < c.train[s].size(); ++i) {
            before += c.train[s].pos_noise_mask[i];
            after += ex.train[s].pos_noise_mask[i];
            CHECK(ex.train[s].pos_gold[i] == c.train[s].pos_gold[i]);
        }
    CHECK(after > before);
    CHECK(ex.metrics.sentences == long(c.test.size()));
}

}  // TEST_SUITE
