#include "atlas/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

namespace atlas {

namespace {

double ratio(long num, long den, double empty)
{
    return den == 0 ? empty : static_cast<double>(num) / static_cast<double>(den);
}

void finish(LevelMetrics& m, long exact, long sentences, long adjusted, long errorful)
{
    m.fp = adjusted - m.tp;
    m.fn = errorful - m.tp;
    m.accuracy = ratio(exact, sentences, 0.0);
    m.precision = ratio(m.tp, adjusted, 1.0);
    m.recall = ratio(m.tp, errorful, 0.0);
    m.f1 = f1_score(m.precision, m.recall);
}

std::string number(double v)
{
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

double f1_score(double precision, double recall)
{
    return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

double MetricsReport::adjustment_precision() const { return ratio(correctly_adjusted, adjusted, 1.0); }

std::string MetricsReport::to_text(const std::string& prefix) const
{
    std::ostringstream os;
    const auto level = [&](const char* name, const LevelMetrics& m) {
        os << prefix << name << ".acc = " << number(m.accuracy) << '\n'
           << prefix << name << ".prec = " << number(m.precision) << '\n'
           << prefix << name << ".rec = " << number(m.recall) << '\n'
           << prefix << name << ".f1 = " << number(m.f1) << '\n';
    };
    level("detection", detection);
    level("correction", correction);
    os << prefix << "counts.sentences = " << sentences << '\n'
       << prefix << "counts.errorful = " << errorful << '\n'
       << prefix << "counts.adjusted = " << adjusted << '\n'
       << prefix << "counts.correctly_adjusted = " << correctly_adjusted << '\n'
       << prefix << "counts.detection.tp = " << detection.tp << '\n'
       << prefix << "counts.detection.fp = " << detection.fp << '\n'
       << prefix << "counts.detection.fn = " << detection.fn << '\n'
       << prefix << "counts.correction.tp = " << correction.tp << '\n'
       << prefix << "counts.correction.fp = " << correction.fp << '\n'
       << prefix << "counts.correction.fn = " << correction.fn << '\n';
    return os.str();
}

MetricsReport sentence_metrics(const std::vector<std::vector<int>>& predictions,
                               const std::vector<SentenceRecord>& records)
{
    if (predictions.size() != records.size())
        throw DimensionError("sentence_metrics: prediction count differs from record count");
    MetricsReport r;
    long det_exact = 0;
    long cor_exact = 0;
    for (std::size_t s = 0; s < records.size(); ++s) {
        const SentenceRecord& rec = records[s];
        const std::vector<int>& pred = predictions[s];
        if (pred.size() != rec.size())
            throw DimensionError("sentence_metrics: prediction " + std::to_string(s) + " has the wrong length");
        bool changed = false;
        bool same_positions = true;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred[i] != rec.src[i];
            changed = changed || p;
            same_positions = same_positions && (p == (rec.tgt[i] != rec.src[i]));
        }
        const bool correct = pred == rec.tgt;
        const bool errorful = rec.src != rec.tgt;
        ++r.sentences;
        r.errorful += errorful;
        r.adjusted += changed;
        r.correctly_adjusted += changed && correct;
        det_exact += same_positions;
        cor_exact += correct;
        r.detection.tp += errorful && same_positions;
        r.correction.tp += errorful && correct;
    }
    finish(r.detection, det_exact, r.sentences, r.adjusted, r.errorful);
    finish(r.correction, cor_exact, r.sentences, r.adjusted, r.errorful);
    return r;
}

std::optional<ErrorBucket> error_bucket(const SentenceRecord& record)
{
    bool non_word = false;
    bool real_word = false;
    for (ErrorType t : record.err_type) {
        non_word = non_word || t == ErrorType::NonWord;
        real_word = real_word || t == ErrorType::RealWord;
    }
    if (non_word && real_word)
        return ErrorBucket::Mixed;
    if (non_word)
        return ErrorBucket::NonWord;
    if (real_word)
        return ErrorBucket::RealWord;
    return std::nullopt;
}

std::string ErrorTypeBreakdown::to_text() const
{
    return non_word.to_text("non_word.") + real_word.to_text("real_word.") + mixed.to_text("mixed.");
}

ErrorTypeBreakdown breakdown_by_error_type(const std::vector<std::vector<int>>& predictions,
                                           const std::vector<SentenceRecord>& records)
{
    if (predictions.size() != records.size())
        throw DimensionError("breakdown_by_error_type: prediction count differs from record count");
    std::vector<std::vector<int>> pred[3];
    std::vector<SentenceRecord> rec[3];
    for (std::size_t s = 0; s < records.size(); ++s) {
        const auto bucket = error_bucket(records[s]);
        if (!bucket)
            continue;
        const auto b = static_cast<std::size_t>(*bucket);
        pred[b].push_back(predictions[s]);
        rec[b].push_back(records[s]);
    }
    ErrorTypeBreakdown out;
    out.non_word = sentence_metrics(pred[0], rec[0]);
    out.real_word = sentence_metrics(pred[1], rec[1]);
    out.mixed = sentence_metrics(pred[2], rec[2]);
    return out;
}

double roc_auc(std::span<const double> scores, std::span<const bool> labels)
{
    if (scores.size() != labels.size())
        throw DimensionError("roc_auc: scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double positives = 0.0;
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]])
            ++j;
        const double mid_rank = 0.5 * static_cast<double>(i + j + 1);  // 1-based average rank
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) {
                positives += 1.0;
                rank_sum += mid_rank;
            }
        i = j;
    }
    const double negatives = static_cast<double>(scores.size()) - positives;
    if (positives == 0.0 || negatives == 0.0)
        throw std::invalid_argument("roc_auc: needs both positive and negative labels");
    return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

// ---- experiments ---------------------------------------------------------------

CorpusShape corpus_shape(const CorpusFile& file)
{
    if (file.spec)
        return {file.spec->total_vocab(), file.spec->pos_tags()};
    int max_token = kFirstTokenId;
    int max_tag = 1;
    for (const SentenceRecord& r : file.records) {
        for (int t : r.src)
            max_token = std::max(max_token, t);
        for (int t : r.tgt)
            max_token = std::max(max_token, t);
        for (int t : r.pos_gold)
            max_tag = std::max(max_tag, t);
        for (int t : r.pos_noisy)
            max_tag = std::max(max_tag, t);
    }
    return {max_token + 1, 2 * (max_tag / 2 + 1)};
}

ModelConfig resolve_model_config(const RunConfig& config, const CorpusShape& shape)
{
    if (config.vocab != 0 && config.vocab != shape.vocab)
        throw ConfigError("config encoder.vocab = " + std::to_string(config.vocab) +
                          " does not match the corpus vocabulary of " + std::to_string(shape.vocab));
    ModelConfig m = config.model_config(shape.vocab, shape.pos_tags);
    try {
        m.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return m;
}

Experiment run_experiment(const RunConfig& config, const std::vector<SentenceRecord>& train,
                          const std::vector<SentenceRecord>& test, const CorpusShape& shape)
{
    Experiment ex{CscModel(resolve_model_config(config, shape), config.seed), {}, {}, train};
    if (config.extra_pos_noise > 0.0) {
        std::mt19937_64 rng(config.seed * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
        add_pos_noise(ex.train, shape.pos_tags, config.extra_pos_noise, rng);
    }
    ex.training = train_epochs(ex.model, ex.train, config.train_config());
    ex.metrics = sentence_metrics(ex.model.predict(test), test);
    return ex;
}

std::string to_string(AblationSuite s)
{
    switch (s) {
    case AblationSuite::Fusion: return "fusion";
    case AblationSuite::Injection: return "injection";
    case AblationSuite::Ngram: return "ngram";
    }
    return "?";
}

std::optional<AblationSuite> parse_ablation_suite(const std::string& name)
{
    for (AblationSuite s : {AblationSuite::Fusion, AblationSuite::Injection, AblationSuite::Ngram})
        if (to_string(s) == name)
            return s;
    return std::nullopt;
}

double mean(std::span<const double> values)
{
    if (values.empty())
        return 0.0;
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double stddev(std::span<const double> values)
{
    if (values.size() < 2)
        return 0.0;
    const double mu = mean(values);
    double ss = 0.0;
    for (double v : values)
        ss += (v - mu) * (v - mu);
    return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

void AblationTable::write_csv(std::ostream& os) const
{
    os << "suite,row,condition,seeds,detection_f1_mean,detection_f1_sd,correction_f1_mean,correction_f1_sd,"
          "correction_f1_per_seed\n";
    for (const AblationRow& r : rows) {
        os << to_string(suite) << ',' << r.name << ',' << r.condition << ',' << r.seeds.size() << ','
           << number(mean(r.detection_f1)) << ',' << number(stddev(r.detection_f1)) << ','
           << number(mean(r.correction_f1)) << ',' << number(stddev(r.correction_f1)) << ',';
        for (std::size_t i = 0; i < r.correction_f1.size(); ++i)
            os << (i ? ";" : "") << number(r.correction_f1[i]);
        os << '\n';
    }
}

std::vector<std::pair<AblationRow, RunConfig>> ablation_plan(AblationSuite suite, const RunConfig& base)
{
    std::vector<std::pair<AblationRow, RunConfig>> plan;
    const auto add = [&](std::string name, std::string condition, RunConfig c) {
        AblationRow row;
        row.name = std::move(name);
        row.condition = std::move(condition);
        plan.emplace_back(std::move(row), std::move(c));
    };
    switch (suite) {
    case AblationSuite::Fusion:
        for (FusionStrategy s : {FusionStrategy::TopOnly, FusionStrategy::Mean, FusionStrategy::ResNet,
                                 FusionStrategy::ResNetK, FusionStrategy::LastQuery, FusionStrategy::NgramQuery}) {
            RunConfig c = base;
            c.strategy = s;
            add(to_string(s), "default", c);
        }
        break;
    case AblationSuite::Injection:
        for (InjectionMode m : {InjectionMode::NoAux, InjectionMode::HardEmbedding, InjectionMode::HardJoint,
                                InjectionMode::PartAnnealing, InjectionMode::FullAnnealing}) {
            RunConfig c = base;
            c.mode = m;
            c.extra_pos_noise = 0.0;
            add(to_string(m), "clean", c);
            c.extra_pos_noise = 0.2;
            add(to_string(m), "noise+20%", c);
        }
        break;
    case AblationSuite::Ngram:
        for (int g : {1, 2, 3, 4, 5, 7}) {
            RunConfig c = base;
            c.strategy = FusionStrategy::NgramQuery;
            c.ngram = g;
            add("g=" + std::to_string(g), "default", c);
        }
        break;
    }
    return plan;
}

AblationTable run_ablation(AblationSuite suite, const RunConfig& base, std::span<const std::uint64_t> seeds,
                           const std::vector<SentenceRecord>& train, const std::vector<SentenceRecord>& test,
                           const CorpusShape& shape, int jobs,
                           const std::function<void(const AblationRow&, std::uint64_t, double)>& progress)
{
    if (seeds.empty())
        throw std::invalid_argument("run_ablation: at least one seed is required");
    auto plan = ablation_plan(suite, base);
    for (auto& [row, config] : plan) {
        resolve_model_config(config, shape);  // fail before any training
        row.seeds.assign(seeds.begin(), seeds.end());
        row.detection_f1.assign(seeds.size(), 0.0);
        row.correction_f1.assign(seeds.size(), 0.0);
    }

    const std::size_t tasks = plan.size() * seeds.size();
    std::atomic<std::size_t> next{0};
    std::mutex report;
    std::exception_ptr failure;
    const auto worker = [&] {
        for (std::size_t t = next++; t < tasks; t = next++) {
            auto& [row, config] = plan[t / seeds.size()];
            const std::size_t s = t % seeds.size();
            try {
                RunConfig c = config;
                c.seed = seeds[s];
                const Experiment ex = run_experiment(c, train, test, shape);
                row.detection_f1[s] = ex.metrics.detection.f1;
                row.correction_f1[s] = ex.metrics.correction.f1;
                if (progress) {
                    const std::lock_guard lock(report);
                    progress(row, seeds[s], ex.metrics.correction.f1);
                }
            } catch (...) {
                const std::lock_guard lock(report);
                if (!failure)
                    failure = std::current_exception();
                next = tasks;
            }
        }
    };
    const auto workers = static_cast<std::size_t>(std::clamp(jobs, 1, static_cast<int>(std::max<std::size_t>(tasks, 1))));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < workers; ++i)
            pool.emplace_back(worker);
    }
    if (failure)
        std::rethrow_exception(failure);

    AblationTable table;
    table.suite = suite;
    for (auto& [row, config] : plan)
        table.rows.push_back(std::move(row));
    return table;
}

}  // namespace atlas
