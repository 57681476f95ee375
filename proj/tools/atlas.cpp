#include "atlas/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv)
{
    using namespace atlas;

    CLI::App app{"Layerwise-attention spelling corrector with loss-annealed auxiliary tagging"};
    app.require_subcommand(1);

    std::optional<std::filesystem::path> spec_file;
    std::filesystem::path corpus_out;
    auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic train/test corpus");
    gen->add_option("--spec", spec_file, "Corpus spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
    gen->add_option("--out", corpus_out, "Output directory")->required();

    TrainOptions train;
    auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
    train_cmd->add_option("--config", train.config, "Run config file")->required()->check(CLI::ExistingFile);
    train_cmd->add_flag("--compare-noaux", train.compare_noaux,
                        "Also train a NoAux baseline and report the step-time overhead");

    EvalOptions eval;
    auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a corpus");
    eval_cmd->add_option("--model", eval.model, "Checkpoint")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--corpus", eval.corpus, "Corpus file")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--report", eval.report, "Report output path")->required();
    eval_cmd->add_option("--predictions", eval.predictions, "Predictions output path");
    eval_cmd->add_option("--timing-repeats", eval.timing_repeats, "Timed inference passes")
        ->check(CLI::Range(1, 100));
    std::optional<std::filesystem::path> eval_config;
    eval_cmd->add_option("--config", eval_config, "Run config (validated; does not affect inference)")
        ->check(CLI::ExistingFile);

    AblateOptions ablate;
    auto* ablate_cmd = app.add_subcommand("ablate", "Run an ablation suite");
    ablate_cmd->add_option("--suite", ablate.suite, "fusion, injection or ngram")->required();
    ablate_cmd->add_option("--config", ablate.config, "Base run config")->required()->check(CLI::ExistingFile);
    ablate_cmd->add_option("--seeds", ablate.seeds, "Number of seeds, starting at the config seed");
    ablate_cmd->add_option("--out", ablate.out, "CSV output path")->required();
    ablate_cmd->add_option("--jobs", ablate.jobs, "Rows trained concurrently")->check(CLI::Range(1, 256));

    GradcheckOptions grad;
    std::vector<std::string> grad_modes;
    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full model");
    grad_cmd->add_option("--config", grad.config, "Run config with encoder/fusion keys")->check(CLI::ExistingFile);
    grad_cmd->add_option("--seed", grad.seed, "Seed for weights and batch");
    grad_cmd->add_option("--mode", grad_modes, "Injection modes to check (default: all)");
    grad_cmd->add_option("--max-params", grad.max_params, "Refuse models with more parameters");
    grad_cmd->add_option("--backward-fault", grad.backward_fault)->group("");  // test hook, hidden

    DumpAttentionOptions dump;
    auto* dump_cmd = app.add_subcommand("dump-attention", "Write per-head level attention for one sentence");
    dump_cmd->add_option("--model", dump.model, "Checkpoint")->required()->check(CLI::ExistingFile);
    dump_cmd->add_option("--corpus", dump.corpus, "Corpus file")->required()->check(CLI::ExistingFile);
    dump_cmd->add_option("--sentence", dump.sentence, "Sentence index (0-based)");
    dump_cmd->add_option("--out", dump.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    return run_command(
        [&]() -> int {
            if (*gen)
                return cmd_gen_corpus(spec_file, corpus_out, std::cout);
            if (*train_cmd)
                return cmd_train(train, std::cout);
            if (*eval_cmd) {
                if (eval_config)
                    RunConfig::load(*eval_config);
                return cmd_eval(eval, std::cout);
            }
            if (*ablate_cmd)
                return cmd_ablate(ablate, std::cout);
            if (*grad_cmd) {
                for (const std::string& name : grad_modes) {
                    const auto m = parse_injection_mode(name);
                    if (!m)
                        throw UsageError("unknown mode '" + name + "'");
                    grad.modes.push_back(*m);
                }
                return cmd_gradcheck(grad, std::cout);
            }
            return cmd_dump_attention(dump, std::cout);
        },
        std::cerr);
}
