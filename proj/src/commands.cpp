#include "atlas/commands.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace atlas {

namespace {

using Clock = std::chrono::steady_clock;
using nlohmann::json;
namespace fs = std::filesystem;

double ms_since(Clock::time_point t0)
{
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void ensure_dir(const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir))
        throw UsageError("cannot create output directory " + dir.string());
    const fs::path probe = dir / ".write_probe";
    {
        std::ofstream os(probe);
        if (!os)
            throw UsageError("output directory " + dir.string() + " is not writable");
    }
    fs::remove(probe, ec);
}

std::ofstream open_out(const fs::path& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw UsageError("cannot write " + path.string());
    return os;
}

std::string slurp(const fs::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw UsageError("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

CorpusFile load_corpus(const fs::path& path)
{
    if (!fs::exists(path))
        throw UsageError("corpus file " + path.string() + " does not exist");
    return read_corpus(path);
}

void check_fits(const CscModel& model, const CorpusFile& corpus)
{
    const CorpusShape shape = corpus_shape(corpus);
    const ModelConfig& c = model.config();
    if (shape.vocab > c.encoder.vocab)
        throw ConfigError("corpus vocabulary (" + std::to_string(shape.vocab) + ") exceeds the model's (" +
                          std::to_string(c.encoder.vocab) + ")");
    if (shape.pos_tags > c.pos_tags)
        throw ConfigError("corpus tagset (" + std::to_string(shape.pos_tags) + ") exceeds the model's (" +
                          std::to_string(c.pos_tags) + ")");
    for (const SentenceRecord& r : corpus.records)
        if (static_cast<int>(r.size()) > c.encoder.max_len)
            throw ConfigError("corpus sentence longer than encoder.max_len");
}

json timing_record(const TrainResult& r, InjectionMode mode)
{
    json epochs = json::array();
    double mixture = 0.0;
    for (const EpochLog& e : r.epochs) {
        epochs.push_back(json::parse(e.timing_json()));
        mixture += e.mixture_ms;
    }
    return json{{"mode", to_string(mode)},
                {"steps", r.steps},
                {"total_ms", r.total_ms},
                {"mean_step_ms", r.steps > 0 ? r.total_ms / static_cast<double>(r.steps) : 0.0},
                {"objective_ms", mixture},
                {"epochs", epochs}};
}

}  // namespace

int run_command(const std::function<int()>& body, std::ostream& err)
{
    try {
        return body();
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
    } catch (const GenerationError& e) {
        err << "corpus spec error: " << e.what() << '\n';
    } catch (const CorpusParseError& e) {
        err << "corpus parse error: " << e.what() << '\n';
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << '\n';
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
    }
    return kExitUsage;
}

// ---- gen-corpus ------------------------------------------------------------------

int cmd_gen_corpus(const std::optional<fs::path>& spec_file, const fs::path& out, std::ostream& log)
{
    CorpusSpec spec;
    if (spec_file) {
        try {
            spec = spec_from_json(slurp(*spec_file));
        } catch (const nlohmann::json::exception& e) {
            throw UsageError("spec file " + spec_file->string() + ": " + e.what());
        }
    }
    spec.validate();
    ensure_dir(out);
    const Corpus corpus = generate_corpus(spec);
    write_corpus(out / "train.jsonl", corpus.train, spec);
    write_corpus(out / "test.jsonl", corpus.test, spec);
    write_lexicon(out / "lexicon.json", corpus.lexicon);
    open_out(out / "spec.json") << spec_to_json(spec) << '\n';
    log << "wrote " << corpus.train.size() << " train and " << corpus.test.size() << " test sentences to "
        << out.string() << '\n';
    return kExitOk;
}

// ---- train ---------------------------------------------------------------------------

int cmd_train(const TrainOptions& options, std::ostream& log)
{
    const RunConfig config = RunConfig::load(options.config);
    const CorpusFile train = load_corpus(config.train_path);
    if (train.records.empty())
        throw UsageError("training corpus " + config.train_path.string() + " is empty");
    const CorpusShape shape = corpus_shape(train);
    const ModelConfig model_config = resolve_model_config(config, shape);
    for (const SentenceRecord& r : train.records)
        if (static_cast<int>(r.size()) > model_config.encoder.max_len)
            throw ConfigError("training sentence longer than encoder.max_len");
    ensure_dir(config.output_dir);

    const auto train_one = [&](const RunConfig& c, const fs::path& dir) {
        ensure_dir(dir);
        Experiment ex = run_experiment(c, train.records, {}, shape);
        save_checkpoint(dir / "model.ckpt", ex.model);
        std::ofstream elog = open_out(dir / "epoch_log.jsonl");
        for (const EpochLog& e : ex.training.epochs)
            elog << e.to_json() << '\n';
        open_out(dir / "config.txt") << c.to_text();
        log << to_string(c.mode) << ": " << ex.training.steps << " steps in " << ex.training.total_ms << " ms\n";
        return ex.training;
    };

    const TrainResult main = train_one(config, config.output_dir);
    json timing = timing_record(main, config.mode);
    if (options.compare_noaux) {
        RunConfig base = config;
        base.mode = InjectionMode::NoAux;
        const TrainResult baseline = train_one(base, config.output_dir / "noaux");
        timing["baseline"] = timing_record(baseline, InjectionMode::NoAux);
        const double a = timing["mean_step_ms"].get<double>();
        const double b = timing["baseline"]["mean_step_ms"].get<double>();
        timing["overhead_pct"] = b > 0.0 ? 100.0 * (a - b) / b : 0.0;
        log << "step-time overhead vs NoAux: " << timing["overhead_pct"].get<double>() << "%\n";
    }
    open_out(config.output_dir / "timing.json") << timing.dump(2) << '\n';
    return kExitOk;
}

// ---- eval ------------------------------------------------------------------------------

int cmd_eval(const EvalOptions& options, std::ostream& log)
{
    CscModel model = load_checkpoint(options.model);
    const CorpusFile corpus = load_corpus(options.corpus);
    check_fits(model, corpus);

    reset_training_op_counts();
    std::vector<std::vector<int>> pred;
    std::vector<double> runs;
    for (int r = 0; r < std::max(1, options.timing_repeats); ++r) {
        const auto t0 = Clock::now();
        pred = model.predict(corpus.records, options.batch_size);
        runs.push_back(ms_since(t0));
    }
    const double inference_ms = *std::min_element(runs.begin(), runs.end());
    const TrainingOpCounts ops = training_op_counts();

    const MetricsReport report = sentence_metrics(pred, corpus.records);
    const ErrorTypeBreakdown breakdown = breakdown_by_error_type(pred, corpus.records);
    if (options.report.has_parent_path())
        ensure_dir(options.report.parent_path());
    open_out(options.report) << report.to_text() << "adjustment.precision = " << report.adjustment_precision()
                             << '\n'
                             << breakdown.to_text();

    const fs::path pred_path =
        options.predictions.value_or(fs::path(options.report.string() + ".predictions.jsonl"));
    std::ofstream ps = open_out(pred_path);
    for (const std::vector<int>& p : pred)
        ps << json{{"pred", p}}.dump() << '\n';

    open_out(fs::path(options.report.string() + ".timing.json"))
        << json{{"inference_ms", inference_ms},
                {"runs_ms", runs},
                {"sentences", corpus.records.size()},
                {"ms_per_sentence",
                 corpus.records.empty() ? 0.0 : inference_ms / static_cast<double>(corpus.records.size())}}
               .dump(2)
        << '\n';

    log << "correction F1 " << report.correction.f1 << ", detection F1 " << report.detection.f1 << " over "
        << report.sentences << " sentences\n";
    if (ops.total() != 0) {
        log << "inference invoked training-only operations (eta " << ops.eta << ", gmm_fit " << ops.gmm_fit
            << ", posterior_clean " << ops.posterior_clean << ", combine_loss " << ops.combine_loss << ")\n";
        return kExitVerification;
    }
    return kExitOk;
}

// ---- ablate --------------------------------------------------------------------------------

int cmd_ablate(const AblateOptions& options, std::ostream& log)
{
    const auto suite = parse_ablation_suite(options.suite);
    if (!suite)
        throw UsageError("unknown suite '" + options.suite + "' (expected fusion, injection or ngram)");
    if (options.seeds < 1)
        throw UsageError("--seeds must be >= 1");
    const RunConfig config = RunConfig::load(options.config);
    const CorpusFile train = load_corpus(config.train_path);
    const CorpusFile test = load_corpus(config.test_path);
    if (train.records.empty())
        throw UsageError("training corpus " + config.train_path.string() + " is empty");
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < options.seeds; ++i)
        seeds.push_back(config.seed + static_cast<std::uint64_t>(i));
    if (options.out.has_parent_path())
        ensure_dir(options.out.parent_path());
    std::ofstream os = open_out(options.out);
    const AblationTable table =
        run_ablation(*suite, config, seeds, train.records, test.records, corpus_shape(train), options.jobs,
                     [&](const AblationRow& row, std::uint64_t seed, double f1) {
                         log << row.name << " [" << row.condition << "] seed " << seed << ": correction F1 " << f1
                             << '\n';
                     });
    table.write_csv(os);
    return kExitOk;
}

// ---- gradcheck --------------------------------------------------------------------------------

ModelConfig gradcheck_model_config()
{
    ModelConfig c;
    c.encoder.layers = 2;
    c.encoder.width = 8;
    c.encoder.heads = 2;
    c.encoder.vocab = 20;
    c.encoder.max_len = 8;
    c.fusion.strategy = FusionStrategy::NgramQuery;
    c.fusion.ngram = 3;
    c.fusion.heads = 2;
    c.pos_tags = 8;
    c.pos_dim = 4;
    return c;
}

GradCheckReport model_gradcheck(const ModelConfig& base, InjectionMode mode, std::uint64_t seed)
{
    ModelConfig config = base;
    config.pos_input = mode == InjectionMode::HardEmbedding;
    CscModel model(config, seed);
    std::mt19937_64 rng(seed + 17);
    // Move away from the structured init (zero biases, unit gains, zero pad).
    std::normal_distribution<double> jitter(0.0, 0.05);
    for (Parameter* p : model.parameters())
        for (Index i = 0; i < p->value.size(); ++i)
            p->value.data()[i] += jitter(rng);

    const int lengths[] = {std::min(5, config.encoder.max_len), std::min(3, config.encoder.max_len)};
    Batch batch;
    std::vector<int> targets, tags;
    std::uniform_int_distribution<int> token(kFirstTokenId, config.encoder.vocab - 1);
    std::uniform_int_distribution<int> tag(0, config.pos_tags - 1);
    for (int n : lengths) {
        std::vector<int> seq(static_cast<std::size_t>(n));
        for (int& t : seq)
            t = token(rng);
        batch.append(seq);
        for (int i = 0; i < n; ++i) {
            targets.push_back(token(rng));
            tags.push_back(tag(rng));
        }
    }

    const AnnealSchedule schedule{mode, 0.3, 10, 3, LossReading::Reconciled};
    // alpha is a constant of the objective, fixed at the probe point.
    std::vector<double> alpha;
    if (uses_mixture(mode)) {
        Graph g;
        const CscModel::Forward f = model.forward(g, batch, tags);
        const Vector aux = cross_entropy(f.aux_logits, tags, std::vector<double>(tags.size(), 1.0)).per_token;
        const CleanPosterior posterior = CleanPosterior::fit(std::span<const double>(aux.data(), tags.size()));
        for (Index i = 0; i < aux.size(); ++i)
            alpha.push_back(posterior.alpha(aux(i)));
    }
    const LossWeights w = loss_weights(schedule, alpha, tags.size());
    const LossBuilder build = [&](Graph& g) {
        const CscModel::Forward f = model.forward(g, batch, tags);
        return add(cross_entropy(f.main_logits, targets, w.main).loss, cross_entropy(f.aux_logits, tags, w.aux).loss);
    };
    const std::vector<Parameter*> params = model.parameters();
    return finite_diff_check(build, params);
}

int cmd_gradcheck(const GradcheckOptions& options, std::ostream& out)
{
    ModelConfig config = gradcheck_model_config();
    if (options.config) {
        const RunConfig rc = RunConfig::load(*options.config);
        config = rc.model_config(rc.vocab > 0 ? rc.vocab : config.encoder.vocab, config.pos_tags);
        config.validate();
    }
    std::vector<InjectionMode> modes = options.modes;
    if (modes.empty())
        modes = {InjectionMode::NoAux, InjectionMode::HardEmbedding, InjectionMode::HardJoint,
                 InjectionMode::PartAnnealing, InjectionMode::FullAnnealing};

    for (InjectionMode m : modes) {
        ModelConfig c = config;
        c.pos_input = m == InjectionMode::HardEmbedding;
        CscModel probe(c, options.seed);
        long count = 0;
        for (const Parameter* p : probe.parameters())
            count += static_cast<long>(p->value.size());
        if (count > options.max_params)
            throw UsageError("model has " + std::to_string(count) + " parameters, above the gradcheck cap of " +
                             std::to_string(options.max_params));
    }

    struct FaultGuard {
        explicit FaultGuard(double f) { set_backward_fault(f); }
        ~FaultGuard() { set_backward_fault(1.0); }
    } guard(options.backward_fault);

    bool ok = true;
    char buf[256];
    for (InjectionMode m : modes) {
        const GradCheckReport report = model_gradcheck(config, m, options.seed);
        if (!report.valid) {
            out << "mode " << to_string(m) << ": loss not reproducible, check invalid\n";
            ok = false;
            continue;
        }
        for (const GradCheckEntry& e : report.entries) {
            const bool pass = e.max_rel_error < options.tolerance;
            std::snprintf(buf, sizeof buf, "mode %-14s %-32s max_rel_error %.3e %s\n", to_string(m).c_str(),
                          e.name.c_str(), e.max_rel_error, pass ? "PASS" : "FAIL");
            out << buf;
            ok = ok && pass;
        }
    }
    out << "gradcheck " << (ok ? "PASS" : "FAIL") << '\n';
    return ok ? kExitOk : kExitVerification;
}

// ---- dump-attention ----------------------------------------------------------------------------

int cmd_dump_attention(const DumpAttentionOptions& options, std::ostream& log)
{
    CscModel model = load_checkpoint(options.model);
    const FusionConfig& fusion = model.config().fusion;
    if (!fusion.uses_attention())
        throw UsageError("unsupported strategy " + to_string(fusion.strategy) +
                         ": attention dumps need NgramQuery or LastQuery");
    const CorpusFile corpus = load_corpus(options.corpus);
    check_fits(model, corpus);
    if (options.sentence >= corpus.records.size())
        throw UsageError("sentence index " + std::to_string(options.sentence) + " out of range (corpus has " +
                         std::to_string(corpus.records.size()) + ")");
    const SentenceRecord& rec = corpus.records[options.sentence];
    const LayerStack stack = model.encoder().encode(rec.src);
    const FusedOutput fused = fuse(stack, fusion, model.fusion_params());

    std::vector<std::string> src, tgt;
    for (std::size_t i = 0; i < rec.size(); ++i) {
        src.push_back(std::to_string(rec.src[i]));
        tgt.push_back(std::to_string(rec.tgt[i]));
    }
    ensure_dir(options.out);
    for (std::size_t h = 0; h < fused.attn.size(); ++h) {
        std::ofstream os = open_out(options.out / ("head_" + std::to_string(h) + ".csv"));
        write_attention_csv(os, fused.attn[h], {{"src", src}, {"tgt", tgt}});
    }
    log << "wrote " << fused.attn.size() << " head files to " << options.out.string() << '\n';
    return kExitOk;
}

}  // namespace atlas
