#include "atlas/commands.hpp"
#include "atlas/noisy.hpp"
#include "support.hpp"

#include <cmath>
#include <numbers>

using namespace atlas;

namespace {

constexpr InjectionMode kModes[] = {InjectionMode::NoAux, InjectionMode::HardEmbedding, InjectionMode::HardJoint,
                                    InjectionMode::PartAnnealing, InjectionMode::FullAnnealing};

double normal_pdf(double x, double mean, double var)
{
    return std::exp(-0.5 * (x - mean) * (x - mean) / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

TokenLosses losses(std::vector<double> main, std::vector<double> aux, std::vector<double> alpha = {})
{
    TokenLosses l;
    l.main = Eigen::Map<Vector>(main.data(), Index(main.size()));
    l.aux = Eigen::Map<Vector>(aux.data(), Index(aux.size()));
    l.alpha = Eigen::Map<Vector>(alpha.data(), Index(alpha.size()));
    return l;
}

AnnealSchedule at(InjectionMode mode, long t, long total = 100, double beta = 0.1)
{
    return AnnealSchedule{mode, beta, total, t, LossReading::Reconciled};
}

ModelConfig tiny_model(bool pos_input = false)
{
    ModelConfig c = gradcheck_model_config();
    c.pos_input = pos_input;
    return c;
}

struct TinyBatch {
    std::vector<SentenceRecord> records;
    Batch batch;
    std::vector<int> tags;
    std::vector<int> targets;
};

TinyBatch tiny_batch()
{
    TinyBatch b;
    const Corpus c = generate_corpus(testing::tiny_spec());
    b.records.assign(c.train.begin(), c.train.begin() + 4);
    const std::vector<std::size_t> idx{0, 1, 2, 3};
    b.batch = make_batch(b.records, idx, &b.tags);
    for (const auto& r : b.records)
        b.targets.insert(b.targets.end(), r.tgt.begin(), r.tgt.end());
    return b;
}

bool all_zero(const Matrix& m) { return m.cwiseAbs().maxCoeff() == 0.0; }

}  // namespace

TEST_SUITE("noisy") {

TEST_CASE("mode names round trip")
{
    for (InjectionMode m : kModes)
        CHECK(parse_injection_mode(to_string(m)) == m);
    CHECK(parse_injection_mode("fullannealing") == InjectionMode::FullAnnealing);
    CHECK_FALSE(parse_injection_mode("Soft").has_value());
}

TEST_CASE("eta examples")
{
    CHECK(eta(at(InjectionMode::FullAnnealing, 50)) == 0.5);
    CHECK(std::abs(eta(InjectionMode::FullAnnealing, 8e-4, 0.0, 10000.0) - 1.0 / (1.0 + std::exp(4.0))) < 1e-15);
    CHECK(std::abs(eta(InjectionMode::FullAnnealing, 8e-4, 0.0, 10000.0) - 0.017986) < 1e-6);
    CHECK(eta(at(InjectionMode::NoAux, 3)) == 1.0);
    CHECK(eta(at(InjectionMode::HardEmbedding, 3)) == 1.0);
    CHECK(eta(at(InjectionMode::HardJoint, 3)) == 0.5);
    CHECK(eta(at(InjectionMode::PartAnnealing, 10)) == eta(at(InjectionMode::FullAnnealing, 10)));
    CHECK(eta(at(InjectionMode::PartAnnealing, 50)) == 0.5);
    CHECK(eta(at(InjectionMode::PartAnnealing, 90)) == 0.5);
}

TEST_CASE("eta is symmetric about the midpoint")
{
    for (double beta : {8e-4, 0.01, 0.3})
        for (double delta : {0.5, 3.0, 40.0, 400.0})
            CHECK(std::abs(eta(InjectionMode::FullAnnealing, beta, 500.0 + delta, 1000.0) +
                           eta(InjectionMode::FullAnnealing, beta, 500.0 - delta, 1000.0) - 1.0) < 1e-12);
}

TEST_CASE("eta is non-decreasing and within [0, 1] for every mode")
{
    for (InjectionMode m : kModes) {
        double prev = -1.0;
        for (long t = 0; t <= 200; ++t) {
            const double e = eta(at(m, t, 200, 0.05));
            CHECK(e >= 0.0);
            CHECK(e <= 1.0);
            CHECK(e >= prev);
            prev = e;
        }
    }
}

TEST_CASE("schedule validation")
{
    CHECK_THROWS(eta(at(InjectionMode::FullAnnealing, 101)));
    CHECK_THROWS(eta(at(InjectionMode::FullAnnealing, -1)));
    CHECK_THROWS(eta(at(InjectionMode::FullAnnealing, 1, 100, 0.0)));
}

TEST_CASE("EM recovers a two-component sample")
{
    std::mt19937_64 rng(17);
    std::normal_distribution<double> clean(0.05, 0.02), noisy(1.2, 0.3);
    std::bernoulli_distribution pick(0.1);
    std::vector<double> x(10000);
    for (double& v : x)
        v = pick(rng) ? noisy(rng) : clean(rng);
    const GmmFit fit = gmm_fit(x);
    const Gmm& m = fit.model;
    const int s = m.clean_component();
    CHECK_FALSE(m.degenerate);
    CHECK(std::abs(m.mean[s] - 0.05) < 0.005);
    CHECK(std::abs(m.mean[1 - s] - 1.2) < 0.12);
    CHECK(std::abs(m.weight[s] - 0.9) < 0.02);
    CHECK(std::abs(m.weight[0] + m.weight[1] - 1.0) < 1e-12);
}

TEST_CASE("EM log-likelihood never decreases")
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::vector<double> x(500);
        for (double& v : x)
            v = u(rng) * u(rng);
        const GmmFit fit = gmm_fit(x);
        REQUIRE(fit.log_likelihood.size() == std::size_t(fit.iterations) + 1);
        for (std::size_t i = 1; i < fit.log_likelihood.size(); ++i)
            CHECK(fit.log_likelihood[i] >= fit.log_likelihood[i - 1] - 1e-12);
        // The recorded value is the likelihood of the returned model.
        double ll = 0.0;
        for (double v : x) {
            double p = 0.0;
            for (int k = 0; k < 2; ++k)
                p += fit.model.weight[k] * normal_pdf(v, fit.model.mean[k], fit.model.variance[k]);
            ll += std::log(p);
        }
        CHECK(std::abs(ll / double(x.size()) - fit.log_likelihood.back()) < 1e-6);
        CHECK(fit.model.variance[0] >= 1e-8);
        CHECK(fit.model.variance[1] >= 1e-8);
    }
}

TEST_CASE("identical observations give a degenerate model")
{
    const std::vector<double> x(50, 0.7);
    const GmmFit fit = gmm_fit(x);
    CHECK(fit.model.degenerate);
    CHECK(fit.model.mean[0] == 0.7);
    CHECK(fit.model.mean[1] == 0.7);
    CHECK(posterior_clean(fit.model, 0.1) == 1.0);
    CHECK(posterior_clean(fit.model, 5.0) == 1.0);
    const CleanPosterior p = CleanPosterior::fit(x);
    CHECK(p.degenerate);
    CHECK(p.alpha(0.7) == 1.0);
}

TEST_CASE("posterior examples")
{
    Gmm m;
    m.weight = {0.5, 0.5};
    m.mean = {0.0, 1.0};
    m.variance = {1.0, 1.0};
    CHECK(std::abs(posterior_clean(m, 0.5) - 0.5) < 1e-15);

    m.variance = {0.01, 0.01};
    CHECK(posterior_clean(m, 0.0) > 0.99);
    m.mean = {1.0, 0.0};  // clean component is whichever has the smaller mean
    CHECK(posterior_clean(m, 0.0) > 0.99);

    m.weight = {0.3, 0.7};
    m.mean = {0.2, 0.9};
    m.variance = {0.04, 0.09};
    for (double x : {-0.5, 0.1, 0.4, 0.8, 2.0}) {
        const double a = 0.3 * normal_pdf(x, 0.2, 0.04), b = 0.7 * normal_pdf(x, 0.9, 0.09);
        CHECK(std::abs(posterior_clean(m, x) - a / (a + b)) < 1e-12);
    }
}

TEST_CASE("posterior is non-increasing in x for equal variances")
{
    Gmm m;
    m.weight = {0.8, 0.2};
    m.mean = {0.1, 0.6};
    m.variance = {0.02, 0.02};
    double prev = 2.0;
    for (double x = -1.0; x <= 2.0; x += 0.01) {
        const double a = posterior_clean(m, x);
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
        CHECK(a <= prev);
        prev = a;
    }
}

TEST_CASE("clean posterior normalises on the fitted range")
{
    std::vector<double> x;
    for (int i = 0; i < 100; ++i)
        x.push_back(i < 80 ? 2.0 + 0.01 * (i % 7) : 8.0 + 0.01 * (i % 5));
    const CleanPosterior p = CleanPosterior::fit(x);
    CHECK_FALSE(p.degenerate);
    CHECK(p.lo == 2.0);
    CHECK(p.hi == 8.04);
    CHECK(p.alpha(2.0) > 0.99);
    CHECK(p.alpha(8.0) < 0.01);
    CHECK(p.alpha(100.0) == p.alpha(8.04));
    CHECK(p.alpha(-5.0) == p.alpha(2.0));
}

TEST_CASE("combine_loss examples")
{
    CHECK(combine_loss(losses({1, 2}, {3, 4}), at(InjectionMode::HardJoint, 0)) == 5.0);
    CHECK(combine_loss(losses({1, 2}, {3, 4}), at(InjectionMode::NoAux, 0)) == 3.0);
    // alpha is discarded outside the mixture modes
    CHECK(combine_loss(losses({1, 2}, {3, 4}, {0, 0}), at(InjectionMode::HardJoint, 0)) == 5.0);
    const AnnealSchedule full = at(InjectionMode::FullAnnealing, 30);
    const double e = eta(full);
    CHECK(std::abs(combine_loss(losses({1, 2}, {3, 4}, {0, 0}), full) - e * 3.0) < 1e-15);
    CHECK(std::abs(combine_loss(losses({1, 2}, {3, 4}, {1, 0.5}), full) - (e * 3.0 + (1 - e) * 5.0)) < 1e-14);
    AnnealSchedule literal = full;
    literal.reading = LossReading::Literal;
    CHECK(std::abs(combine_loss(losses({1, 2}, {3, 4}, {1, 0.5}), literal) - (e * 7.0 + (1 - e) * 2.0)) < 1e-14);
}

TEST_CASE("combine_loss contract violations")
{
    CHECK_THROWS(combine_loss(losses({1, -2}, {3, 4}), at(InjectionMode::HardJoint, 0)));
    CHECK_THROWS_AS(combine_loss(losses({1, 2}, {3}), at(InjectionMode::HardJoint, 0)), DimensionError);
    CHECK_THROWS_AS(combine_loss(losses({1, 2}, {3, 4}, {1}), at(InjectionMode::FullAnnealing, 0)), DimensionError);
}

TEST_CASE("combine_loss is linear in each per-token loss")
{
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 3.0), a(0.0, 1.0);
    for (InjectionMode mode : kModes) {
        const AnnealSchedule s = at(mode, 37);
        std::vector<double> m(6), x(6), al(6);
        for (int i = 0; i < 6; ++i) {
            m[i] = u(rng);
            x[i] = u(rng);
            al[i] = a(rng);
        }
        const double base = combine_loss(losses(m, x, al), s);
        for (int i = 0; i < 6; ++i) {
            auto m2 = m, x2 = x;
            m2[i] += 1.0;
            x2[i] += 1.0;
            const double dm = combine_loss(losses(m2, x, al), s) - base;
            const double dx = combine_loss(losses(m, x2, al), s) - base;
            m2[i] += 1.0;
            x2[i] += 1.0;
            CHECK(std::abs(combine_loss(losses(m2, x, al), s) - base - 2 * dm) < 1e-12);
            CHECK(std::abs(combine_loss(losses(m, x2, al), s) - base - 2 * dx) < 1e-12);
        }
    }
}

TEST_CASE("training objective agrees with combine_loss")
{
    TinyBatch b = tiny_batch();
    CscModel model(tiny_model(), 3);
    std::vector<double> spread;
    for (int i = 0; i < 40; ++i)
        spread.push_back(1.0 + 0.1 * i + (i % 3 == 0 ? 2.0 : 0.0));
    const CleanPosterior posterior = CleanPosterior::fit(spread);
    for (InjectionMode mode : kModes) {
        if (mode == InjectionMode::HardEmbedding)
            continue;
        for (LossReading reading : {LossReading::Reconciled, LossReading::Literal}) {
            AnnealSchedule s = at(mode, 40);
            s.reading = reading;
            Graph g;
            const CscModel::Forward f = model.forward(g, b.batch, b.tags);
            const Objective obj = training_objective(f, b.targets, b.tags, s, &posterior);
            CHECK(obj.losses.main.size() == Index(b.tags.size()));
            CHECK(obj.losses.alpha.size() == (uses_mixture(mode) ? Index(b.tags.size()) : 0));
            CHECK(std::abs(obj.loss.value()(0, 0) - combine_loss(obj.losses, s)) < 1e-9);
        }
    }
}

TEST_CASE("NoAux leaves the auxiliary head without gradient")
{
    TinyBatch b = tiny_batch();
    CscModel model(tiny_model(), 5);
    for (Parameter* p : model.parameters())
        p->zero_grad();
    Graph g;
    const CscModel::Forward f = model.forward(g, b.batch, b.tags);
    const Objective obj = training_objective(f, b.targets, b.tags, at(InjectionMode::NoAux, 10), nullptr);
    g.backward(obj.loss);
    CHECK(all_zero(model.find("head.aux.weight")->grad));
    CHECK(all_zero(model.find("head.aux.bias")->grad));
    CHECK_FALSE(all_zero(model.find("head.main.weight")->grad));
}

TEST_CASE("hard embedding input")
{
    TinyBatch b = tiny_batch();
    CscModel with(tiny_model(true), 7);
    const int d = with.config().encoder.width, dp = with.config().pos_dim;
    Parameter* table = with.find("head.pos_embedding");
    REQUIRE(table != nullptr);
    CHECK(with.find("head.main.weight")->value.rows() == d + dp);

    Graph g;
    const Var fused = g.constant(Matrix::Ones(Index(b.tags.size()), d));
    const Var in = hard_embedding_forward(fused, b.tags, g.parameter(*table));
    CHECK(in.cols() == d + dp);
    CHECK_THROWS_AS(hard_embedding_forward(fused, std::vector<int>{1}, g.parameter(*table)), DimensionError);
    CHECK_THROWS(hard_embedding_forward(fused, std::vector<int>(b.tags.size(), 99), g.parameter(*table)));

    // A zero table makes the tags irrelevant.
    table->value.setZero();
    std::vector<int> other = b.tags;
    for (int& t : other)
        t = (t + 3) % 8;
    Graph g1, g2;
    const Matrix a = with.forward(g1, b.batch, b.tags).main_logits.value();
    const Matrix c = with.forward(g2, b.batch, other).main_logits.value();
    CHECK(a == c);
}

TEST_CASE("hard embedding table receives gradient")
{
    TinyBatch b = tiny_batch();
    CscModel model(tiny_model(true), 8);
    for (Parameter* p : model.parameters())
        p->zero_grad();
    Graph g;
    const CscModel::Forward f = model.forward(g, b.batch, b.tags);
    const Objective obj = training_objective(f, b.targets, b.tags, at(InjectionMode::HardEmbedding, 0), nullptr);
    g.backward(obj.loss);
    const Matrix& grad = model.find("head.pos_embedding")->grad;
    for (int t : b.tags)
        CHECK(grad.row(t).norm() > 0.0);
    CHECK(all_zero(model.find("head.aux.weight")->grad));
}

TEST_CASE("training is deterministic")
{
    const Corpus c = generate_corpus(testing::tiny_spec());
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.gmm_init_sample = 16;
    std::string logs[2];
    Matrix weights[2];
    for (int run = 0; run < 2; ++run) {
        CscModel model(tiny_model(), 11);
        const TrainResult r = train_epochs(model, c.train, tc);
        CHECK(r.epochs.size() == 2);
        CHECK(r.steps == 16);
        for (const EpochLog& e : r.epochs)
            logs[run] += e.to_json() + "\n";
        weights[run] = model.find("head.main.weight")->value;
    }
    CHECK(logs[0] == logs[1]);
    CHECK(weights[0] == weights[1]);
}

TEST_CASE("epoch logs track eta and the mixture")
{
    const Corpus c = generate_corpus(testing::tiny_spec());
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 8;
    tc.beta = 0.5;
    CscModel model(tiny_model(), 12);
    const TrainResult r = train_epochs(model, c.train, tc);
    REQUIRE(r.epochs.size() == 3);
    CHECK(r.epochs.front().eta_start < 0.01);
    CHECK(r.epochs.back().eta_end > 0.99);
    for (std::size_t i = 1; i < r.epochs.size(); ++i)
        CHECK(r.epochs[i].eta_start >= r.epochs[i - 1].eta_end);
    CHECK(r.epochs.back().mean_main_loss < r.epochs.front().mean_main_loss);
    CHECK(r.epochs.front().to_json().find("wall_ms") == std::string::npos);
    CHECK(r.epochs.front().timing_json().find("wall_ms") != std::string::npos);
    CHECK_THROWS(train_epochs(model, {}, tc));
}

TEST_CASE("prediction never calls training-only operations")
{
    const Corpus c = generate_corpus(testing::tiny_spec());
    CscModel model(tiny_model(), 13);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 8;
    train_epochs(model, c.train, tc);
    CHECK(training_op_counts().total() > 0);
    reset_training_op_counts();
    const auto pred = model.predict(c.test);
    model.predict_pos(c.test);
    CHECK(pred.size() == c.test.size());
    CHECK(training_op_counts().total() == 0);
}

}  // TEST_SUITE

TEST_SUITE("noisy_slow") {

TEST_CASE("HardJoint learns the tagger on the desk corpus")
{
    CorpusSpec spec;
    spec.pos_noise_base = 0.0;
    spec.pos_noise_error = 0.0;
    const Corpus c = generate_corpus(spec);
    ModelConfig mc;
    mc.encoder.vocab = spec.total_vocab();
    mc.pos_tags = spec.pos_tags();
    CscModel model(mc, 1);
    TrainConfig tc;
    tc.mode = InjectionMode::HardJoint;
    train_epochs(model, c.train, tc);
    const auto tags = model.predict_pos(c.test);
    long right = 0, total = 0;
    for (std::size_t s = 0; s < tags.size(); ++s)
        for (std::size_t i = 0; i < tags[s].size(); ++i) {
            right += tags[s][i] == c.test[s].pos_gold[i] ? 1 : 0;
            ++total;
        }
    const double accuracy = double(right) / double(total);
    MESSAGE("auxiliary tagging accuracy " << accuracy);
    CHECK(accuracy > 0.9);
}

}  // TEST_SUITE
