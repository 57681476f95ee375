#include "atlas/noisy.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <numeric>
#include <random>

namespace atlas {

namespace {

struct Counters {
    std::atomic<long> eta{0};
    std::atomic<long> gmm_fit{0};
    std::atomic<long> posterior_clean{0};
    std::atomic<long> combine_loss{0};
};

Counters& counters()
{
    static Counters c;
    return c;
}

double elapsed_ms(std::chrono::steady_clock::time_point since)
{
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

TrainingOpCounts training_op_counts()
{
    Counters& c = counters();
    return TrainingOpCounts{c.eta.load(), c.gmm_fit.load(), c.posterior_clean.load(), c.combine_loss.load()};
}

void reset_training_op_counts()
{
    Counters& c = counters();
    c.eta = 0;
    c.gmm_fit = 0;
    c.posterior_clean = 0;
    c.combine_loss = 0;
}

std::string to_string(InjectionMode m)
{
    switch (m) {
    case InjectionMode::NoAux: return "NoAux";
    case InjectionMode::HardEmbedding: return "HardEmbedding";
    case InjectionMode::HardJoint: return "HardJoint";
    case InjectionMode::PartAnnealing: return "PartAnnealing";
    case InjectionMode::FullAnnealing: return "FullAnnealing";
    }
    return "?";
}

std::optional<InjectionMode> parse_injection_mode(const std::string& name)
{
    auto lower = [](std::string s) {
        for (char& c : s)
            c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return s;
    };
    for (InjectionMode m : {InjectionMode::NoAux, InjectionMode::HardEmbedding, InjectionMode::HardJoint,
                            InjectionMode::PartAnnealing, InjectionMode::FullAnnealing})
        if (lower(to_string(m)) == lower(name))
            return m;
    return std::nullopt;
}

void AnnealSchedule::validate() const
{
    if (!(beta > 0.0))
        throw std::invalid_argument("annealing beta must be > 0");
    if (total_steps < 0 || step < 0 || step > total_steps)
        throw std::invalid_argument("annealing step must satisfy 0 <= t <= T");
}

double eta(InjectionMode mode, double beta, double t, double total)
{
    ++counters().eta;
    const double half = total / 2.0;
    switch (mode) {
    case InjectionMode::NoAux:
    case InjectionMode::HardEmbedding:
        return 1.0;
    case InjectionMode::HardJoint:
        return 0.5;
    case InjectionMode::PartAnnealing:
        if (t >= half)
            return 0.5;
        [[fallthrough]];
    case InjectionMode::FullAnnealing:
        return 1.0 / (1.0 + std::exp(beta * (half - t)));
    }
    return 1.0;
}

double eta(const AnnealSchedule& schedule)
{
    schedule.validate();
    return eta(schedule.mode, schedule.beta, static_cast<double>(schedule.step),
               static_cast<double>(schedule.total_steps));
}

// ---- mixture -----------------------------------------------------------------

namespace {

double mean_log_likelihood(const Gmm& m, std::span<const double> x)
{
    double total = 0.0;
    for (double v : x)
        total += m.log_likelihood(v);
    return total / static_cast<double>(x.size());
}

Gmm median_split(std::span<const double> x, double floor)
{
    std::vector<double> sorted(x.begin(), x.end());
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[sorted.size() / 2];
    std::array<std::vector<double>, 2> parts;
    for (double v : x)
        parts[v < median ? 0 : 1].push_back(v);
    if (parts[0].empty() || parts[1].empty()) {
        // Heavy ties at the median: split the sorted values in half instead.
        const std::size_t half = sorted.size() / 2;
        parts[0].assign(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(half));
        parts[1].assign(sorted.begin() + static_cast<std::ptrdiff_t>(half), sorted.end());
    }
    Gmm m;
    for (int k = 0; k < 2; ++k) {
        const auto& p = parts[static_cast<std::size_t>(k)];
        const double mu = std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
        double var = 0.0;
        for (double v : p)
            var += (v - mu) * (v - mu);
        var /= static_cast<double>(p.size());
        m.weight[static_cast<std::size_t>(k)] = static_cast<double>(p.size()) / static_cast<double>(x.size());
        m.mean[static_cast<std::size_t>(k)] = mu;
        m.variance[static_cast<std::size_t>(k)] = std::max(var, floor);
    }
    return m;
}

}  // namespace

GmmFit gmm_fit(std::span<const double> observations, const Gmm* init, const GmmFitOptions& options)
{
    ++counters().gmm_fit;
    if (observations.empty())
        throw std::invalid_argument("gmm_fit: no observations");
    GmmFit fit;
    const auto [lo_it, hi_it] = std::minmax_element(observations.begin(), observations.end());
    if (*lo_it == *hi_it) {
        fit.model.mean = {*lo_it, *lo_it};
        fit.model.variance = {options.variance_floor, options.variance_floor};
        fit.model.degenerate = true;
        fit.converged = true;
        return fit;
    }

    Gmm m = init != nullptr ? *init : median_split(observations, options.variance_floor);
    m.degenerate = false;
    const std::size_t n = observations.size();
    std::vector<double> resp(n);
    double previous = mean_log_likelihood(m, observations);
    fit.log_likelihood.push_back(previous);
    for (int it = 0; it < options.max_iters; ++it) {
        // E step: responsibility of component 0.
        for (std::size_t i = 0; i < n; ++i) {
            const double a = std::log(m.weight[0]) + m.log_density(0, observations[i]);
            const double b = std::log(m.weight[1]) + m.log_density(1, observations[i]);
            resp[i] = 1.0 / (1.0 + std::exp(b - a));
        }
        // M step.
        Gmm next = m;
        for (int k = 0; k < 2; ++k) {
            double nk = 0.0, sum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double r = k == 0 ? resp[i] : 1.0 - resp[i];
                nk += r;
                sum += r * observations[i];
            }
            const auto ku = static_cast<std::size_t>(k);
            next.weight[ku] = nk / static_cast<double>(n);
            if (nk <= 0.0)
                continue;  // collapsed component keeps its shape with zero weight
            const double mu = sum / nk;
            double var = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double r = k == 0 ? resp[i] : 1.0 - resp[i];
                var += r * (observations[i] - mu) * (observations[i] - mu);
            }
            next.mean[ku] = mu;
            next.variance[ku] = std::max(var / nk, options.variance_floor);
        }
        m = next;
        const double current = mean_log_likelihood(m, observations);
        fit.log_likelihood.push_back(current);
        fit.iterations = it + 1;
        if (current - previous < options.tol) {
            fit.converged = true;
            break;
        }
        previous = current;
    }
    fit.model = m;
    return fit;
}

double posterior_clean(const Gmm& model, double x)
{
    ++counters().posterior_clean;
    if (model.degenerate)
        return 1.0;
    const int s = model.clean_component();
    const double a = std::log(model.weight[static_cast<std::size_t>(s)]) + model.log_density(s, x);
    const double b = std::log(model.weight[static_cast<std::size_t>(1 - s)]) + model.log_density(1 - s, x);
    if (std::isinf(a) && a < 0)
        return 0.0;
    return 1.0 / (1.0 + std::exp(b - a));
}

CleanPosterior CleanPosterior::fit(std::span<const double> losses, const GmmFitOptions& options)
{
    CleanPosterior out;
    if (losses.empty())
        return out;
    const auto [lo_it, hi_it] = std::minmax_element(losses.begin(), losses.end());
    out.lo = *lo_it;
    out.hi = *hi_it;
    std::vector<double> normalised(losses.size());
    const double range = out.hi - out.lo;
    for (std::size_t i = 0; i < losses.size(); ++i)
        normalised[i] = range > 0.0 ? (losses[i] - out.lo) / range : 0.0;
    GmmFit fit = gmm_fit(normalised, nullptr, options);
    out.model = fit.model;
    out.degenerate = fit.model.degenerate;
    return out;
}

double CleanPosterior::alpha(double loss) const
{
    if (degenerate)
        return 1.0;
    const double x = std::clamp((loss - lo) / (hi - lo), 0.0, 1.0);
    return posterior_clean(model, x);
}

// ---- objective -----------------------------------------------------------------

LossWeights loss_weights(const AnnealSchedule& schedule, std::span<const double> alpha, std::size_t tokens)
{
    const double e = eta(schedule);
    const bool mixture = uses_mixture(schedule.mode);
    if (mixture && !alpha.empty() && alpha.size() != tokens)
        throw DimensionError("loss_weights: alpha must have one entry per token");
    LossWeights w;
    w.main.resize(tokens);
    w.aux.resize(tokens);
    for (std::size_t i = 0; i < tokens; ++i) {
        const double a = (mixture && !alpha.empty()) ? alpha[i] : 1.0;
        if (schedule.reading == LossReading::Literal && mixture) {
            w.main[i] = a * (1.0 - e);
            w.aux[i] = e;
        } else {
            w.main[i] = e;
            w.aux[i] = a * (1.0 - e);
        }
    }
    return w;
}

double combine_loss(const TokenLosses& losses, const AnnealSchedule& schedule)
{
    ++counters().combine_loss;
    const auto n = static_cast<std::size_t>(losses.main.size());
    if (static_cast<std::size_t>(losses.aux.size()) != n)
        throw DimensionError("combine_loss: main and auxiliary losses differ in length");
    if ((losses.main.array() < 0.0).any() || (losses.aux.array() < 0.0).any())
        throw std::invalid_argument("combine_loss: negative per-token loss");
    std::span<const double> alpha(losses.alpha.data(), static_cast<std::size_t>(losses.alpha.size()));
    const LossWeights w = loss_weights(schedule, alpha, n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        total += w.main[i] * losses.main(static_cast<Index>(i)) + w.aux[i] * losses.aux(static_cast<Index>(i));
    return total;
}

Var hard_embedding_forward(const Var& fused, std::span<const int> pos_tags, const Var& pos_table)
{
    if (static_cast<Index>(pos_tags.size()) != fused.rows())
        throw DimensionError("hard_embedding_forward: one tag per token required");
    const Var parts[] = {fused, embedding(pos_table, pos_tags)};
    return concat_cols(parts);
}

// ---- training loop ---------------------------------------------------------------

std::string EpochLog::to_json() const
{
    nlohmann::json j{{"epoch", epoch},
                     {"mean_main_loss", mean_main_loss},
                     {"mean_aux_loss", mean_aux_loss},
                     {"eta_start", eta_start},
                     {"eta_end", eta_end},
                     {"gmm_degenerate", gmm_degenerate},
                     {"mu_0", gmm.mean[0]},
                     {"mu_1", gmm.mean[1]},
                     {"pi_0", gmm.weight[0]},
                     {"var_0", gmm.variance[0]},
                     {"var_1", gmm.variance[1]}};
    return j.dump();
}

std::string EpochLog::timing_json() const
{
    return nlohmann::json{{"epoch", epoch}, {"wall_ms", wall_ms}, {"mixture_ms", mixture_ms}}.dump();
}

namespace {

std::vector<int> flatten(const std::vector<SentenceRecord>& records, std::span<const std::size_t> idx,
                         std::vector<int> SentenceRecord::*field)
{
    std::vector<int> out;
    for (std::size_t i : idx)
        out.insert(out.end(), (records[i].*field).begin(), (records[i].*field).end());
    return out;
}

}  // namespace

TokenLosses token_losses(CscModel& model, const std::vector<SentenceRecord>& records, std::size_t batch_size)
{
    std::vector<double> main, aux;
    for (std::size_t start = 0; start < records.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(records.size(), start + batch_size); ++i)
            idx.push_back(i);
        std::vector<int> tags;
        const Batch batch = make_batch(records, idx, &tags);
        const std::vector<int> targets = flatten(records, idx, &SentenceRecord::tgt);
        const std::vector<double> ones(tags.size(), 1.0);
        Graph g;
        CscModel::Forward f = model.forward(g, batch, tags);
        const CrossEntropy m = cross_entropy(f.main_logits, targets, ones);
        const CrossEntropy a = cross_entropy(f.aux_logits, tags, ones);
        main.insert(main.end(), m.per_token.begin(), m.per_token.end());
        aux.insert(aux.end(), a.per_token.begin(), a.per_token.end());
    }
    TokenLosses out;
    out.main = Eigen::Map<Vector>(main.data(), static_cast<Index>(main.size()));
    out.aux = Eigen::Map<Vector>(aux.data(), static_cast<Index>(aux.size()));
    return out;
}

Objective training_objective(const CscModel::Forward& forward, std::span<const int> targets,
                             std::span<const int> tags, const AnnealSchedule& schedule,
                             const CleanPosterior* posterior)
{
    const std::vector<double> ones(tags.size(), 1.0);
    Objective out;
    // Unweighted auxiliary losses first: alpha depends on them.
    out.losses.aux = cross_entropy(forward.aux_logits, tags, ones).per_token;
    std::vector<double> alpha;
    if (posterior != nullptr && uses_mixture(schedule.mode)) {
        alpha.resize(tags.size());
        for (std::size_t i = 0; i < alpha.size(); ++i)
            alpha[i] = posterior->alpha(out.losses.aux(static_cast<Index>(i)));
        out.losses.alpha = Eigen::Map<const Vector>(alpha.data(), static_cast<Index>(alpha.size()));
    }
    const LossWeights w = loss_weights(schedule, alpha, tags.size());
    const CrossEntropy main_ce = cross_entropy(forward.main_logits, targets, w.main);
    const CrossEntropy aux_ce = cross_entropy(forward.aux_logits, tags, w.aux);
    out.losses.main = main_ce.per_token;
    out.loss = add(main_ce.loss, aux_ce.loss);
    return out;
}

TrainResult train_epochs(CscModel& model, const std::vector<SentenceRecord>& corpus, const TrainConfig& config)
{
    if (corpus.empty())
        throw std::invalid_argument("train_epochs: empty corpus");
    if (config.epochs < 1 || config.batch_size < 1)
        throw std::invalid_argument("train_epochs: epochs and batch size must be >= 1");
    const auto start_time = std::chrono::steady_clock::now();
    const std::size_t n = corpus.size();
    const std::size_t batch_size = static_cast<std::size_t>(config.batch_size);
    const long batches = static_cast<long>((n + batch_size - 1) / batch_size);
    const long total = batches * config.epochs;

    std::vector<Parameter*> params = model.parameters();
    AdamW optimizer(params, config.optimizer, total);
    AnnealSchedule schedule{config.mode, config.beta, total, 0, config.reading};
    schedule.validate();
    std::mt19937_64 rng(config.seed ^ 0x7f4a7c159e3779b9ULL);

    TrainResult result;
    const bool mixture = uses_mixture(config.mode);
    CleanPosterior posterior;
    double init_mixture_ms = 0.0;
    if (mixture) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        order.resize(std::min<std::size_t>(n, static_cast<std::size_t>(std::max(config.gmm_init_sample, 1))));
        std::sort(order.begin(), order.end());
        std::vector<SentenceRecord> sample;
        for (std::size_t i : order)
            sample.push_back(corpus[i]);
        const TokenLosses init = token_losses(model, sample);
        posterior = CleanPosterior::fit(std::span<const double>(init.aux.data(), static_cast<std::size_t>(init.aux.size())));
        init_mixture_ms = elapsed_ms(t0);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        EpochLog log;
        log.epoch = epoch;
        log.mixture_ms = epoch == 1 ? init_mixture_ms : 0.0;
        log.eta_start = eta(schedule);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<double> epoch_aux;
        double main_sum = 0.0;
        double aux_sum = 0.0;
        std::size_t tokens = 0;
        for (long b = 0; b < batches; ++b) {
            const std::size_t lo = static_cast<std::size_t>(b) * batch_size;
            const std::span<const std::size_t> idx(order.data() + lo, std::min(batch_size, n - lo));
            std::vector<int> tags;
            const Batch batch = make_batch(corpus, idx, &tags);
            const std::vector<int> targets = flatten(corpus, idx, &SentenceRecord::tgt);

            Graph g;
            const CscModel::Forward f = model.forward(g, batch, tags);
            log.eta_end = eta(schedule);
            const auto t0 = std::chrono::steady_clock::now();
            const Objective obj = training_objective(f, targets, tags, schedule, mixture ? &posterior : nullptr);
            if (mixture)
                log.mixture_ms += elapsed_ms(t0);
            const Var& loss = obj.loss;
            const Vector& aux_losses = obj.losses.aux;
            for (Parameter* p : params)
                p->zero_grad();
            g.backward(loss);
            optimizer.step();
            ++schedule.step;

            main_sum += obj.losses.main.sum();
            aux_sum += aux_losses.sum();
            tokens += tags.size();
            epoch_aux.insert(epoch_aux.end(), aux_losses.begin(), aux_losses.end());
        }
        if (mixture) {
            const auto t0 = std::chrono::steady_clock::now();
            posterior = CleanPosterior::fit(epoch_aux);
            log.mixture_ms += elapsed_ms(t0);
        }
        log.mean_main_loss = main_sum / static_cast<double>(tokens);
        log.mean_aux_loss = aux_sum / static_cast<double>(tokens);
        log.gmm = posterior.model;
        log.gmm_degenerate = posterior.degenerate;
        log.wall_ms = elapsed_ms(epoch_start);
        result.epochs.push_back(log);
    }
    result.final_posterior = posterior;
    result.steps = schedule.step;
    result.total_ms = elapsed_ms(start_time);
    return result;
}

}  // namespace atlas
