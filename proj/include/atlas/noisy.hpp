#pragma once

#include "atlas/corpus.hpp"
#include "atlas/model.hpp"
#include "atlas/numcore.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace atlas {

// ---- annealing -------------------------------------------------------------

enum class InjectionMode { NoAux, HardEmbedding, HardJoint, PartAnnealing, FullAnnealing };

std::string to_string(InjectionMode m);
std::optional<InjectionMode> parse_injection_mode(const std::string& name);
inline bool uses_mixture(InjectionMode m)
{
    return m == InjectionMode::PartAnnealing || m == InjectionMode::FullAnnealing;
}

/// Which term the annealing weight and the clean posterior multiply.
///  Reconciled: L = eta * sum_i Lm_i + (1 - eta) * sum_i alpha_i * La_i
///  Literal:    L = eta * sum_i La_i + (1 - eta) * sum_i alpha_i * Lm_i
enum class LossReading { Reconciled, Literal };

struct AnnealSchedule {
    InjectionMode mode = InjectionMode::FullAnnealing;
    double beta = 8e-4;
    long total_steps = 1;  // T
    long step = 0;         // t
    LossReading reading = LossReading::Reconciled;

    void validate() const;
};

/// Inverse-sigmoid weight at (possibly fractional) step t of T.
double eta(InjectionMode mode, double beta, double t, double total);
double eta(const AnnealSchedule& schedule);

// ---- two-component Gaussian mixture ----------------------------------------

template <typename Scalar>
struct GaussianMixture {
    std::array<Scalar, 2> weight{Scalar(0.5), Scalar(0.5)};
    std::array<Scalar, 2> mean{Scalar(0), Scalar(1)};
    std::array<Scalar, 2> variance{Scalar(1), Scalar(1)};
    bool degenerate = false;

    /// Index of the component with the smaller mean (the clean one).
    int clean_component() const { return mean[1] < mean[0] ? 1 : 0; }

    Scalar log_density(int k, Scalar x) const
    {
        const Scalar two_pi = Scalar(6.28318530717958647692);
        const Scalar diff = x - mean[k];
        return -Scalar(0.5) * (std::log(two_pi * variance[k]) + diff * diff / variance[k]);
    }

    /// log of the mixture density at x.
    Scalar log_likelihood(Scalar x) const
    {
        const Scalar a = std::log(weight[0]) + log_density(0, x);
        const Scalar b = std::log(weight[1]) + log_density(1, x);
        const Scalar hi = std::max(a, b);
        return hi + std::log(std::exp(a - hi) + std::exp(b - hi));
    }
};

using Gmm = GaussianMixture<double>;

struct GmmFitOptions {
    int max_iters = 100;
    double tol = 1e-6;  // on the mean log-likelihood
    double variance_floor = 1e-8;
};

struct GmmFit {
    Gmm model;
    std::vector<double> log_likelihood;  // mean log-likelihood at the start and after each EM iteration
    int iterations = 0;
    bool converged = false;
};

/// EM fit. Without `init` the observations are split at the median, the
/// lower half seeding component 0. All-equal input yields a degenerate model
/// with both means at that value.
GmmFit gmm_fit(std::span<const double> observations, const Gmm* init = nullptr, const GmmFitOptions& options = {});

/// Posterior of the smaller-mean component at x; 1 for a degenerate model.
double posterior_clean(const Gmm& model, double x);

/// Mixture fitted on min-max normalised losses, with the range it was fitted on.
struct CleanPosterior {
    Gmm model;
    double lo = 0.0;
    double hi = 1.0;
    bool degenerate = true;

    /// Fits on raw loss values; marks itself degenerate if they do not vary.
    static CleanPosterior fit(std::span<const double> losses, const GmmFitOptions& options = {});
    /// alpha for a raw loss value, normalised on the fitted range (clamped to [0, 1]).
    double alpha(double loss) const;
};

// ---- objective ---------------------------------------------------------------

struct TokenLosses {
    Vector main;
    Vector aux;
    Vector alpha;
};

/// Per-token multipliers of the main and auxiliary losses.
struct LossWeights {
    std::vector<double> main;
    std::vector<double> aux;
};

/// `alpha` may be empty for modes that do not use the mixture.
LossWeights loss_weights(const AnnealSchedule& schedule, std::span<const double> alpha, std::size_t tokens);

/// Scalar objective for the given per-token losses.
double combine_loss(const TokenLosses& losses, const AnnealSchedule& schedule);

/// Differentiable objective for one forward pass, plus the unweighted
/// per-token losses and the alpha values it used. `posterior` is only read
/// in the mixture modes; pass nullptr for alpha = 1.
struct Objective {
    Var loss;
    TokenLosses losses;
};
Objective training_objective(const CscModel::Forward& forward, std::span<const int> targets,
                             std::span<const int> tags, const AnnealSchedule& schedule,
                             const CleanPosterior* posterior);

/// Main-classifier input for HardEmbedding: [fused | embedding(tag)].
Var hard_embedding_forward(const Var& fused, std::span<const int> pos_tags, const Var& pos_table);

/// Call counts of the training-only operations (eta, gmm_fit,
/// posterior_clean, combine_loss), for checking that inference never uses them.
struct TrainingOpCounts {
    long eta = 0;
    long gmm_fit = 0;
    long posterior_clean = 0;
    long combine_loss = 0;

    long total() const { return eta + gmm_fit + posterior_clean + combine_loss; }
};
TrainingOpCounts training_op_counts();
void reset_training_op_counts();

// ---- training loop -----------------------------------------------------------

struct TrainConfig {
    int epochs = 6;
    int batch_size = 16;
    AdamWConfig optimizer;
    InjectionMode mode = InjectionMode::FullAnnealing;
    double beta = 8e-4;
    LossReading reading = LossReading::Reconciled;
    int gmm_init_sample = 512;  // sentences in the initial mixture fit
    std::uint64_t seed = 1;
};

struct EpochLog {
    int epoch = 0;
    double mean_main_loss = 0.0;
    double mean_aux_loss = 0.0;
    double eta_start = 0.0;
    double eta_end = 0.0;
    Gmm gmm;
    bool gmm_degenerate = true;
    double wall_ms = 0.0;      // kept out of the deterministic log
    double mixture_ms = 0.0;   // time spent fitting and evaluating the mixture

    /// Deterministic JSON line (timing excluded).
    std::string to_json() const;
    /// Timing-only JSON line.
    std::string timing_json() const;
};

struct TrainResult {
    std::vector<EpochLog> epochs;
    CleanPosterior final_posterior;
    long steps = 0;
    double total_ms = 0.0;
};

/// Runs the epoch loop: initial mixture fit on auxiliary losses from the
/// untrained model, then per batch forward, alpha from the current mixture,
/// weighted loss, AdamW step; the mixture is refitted on each epoch's
/// auxiliary losses.
TrainResult train_epochs(CscModel& model, const std::vector<SentenceRecord>& corpus, const TrainConfig& config);

/// Unweighted per-token main and auxiliary losses of the model on `records`,
/// flattened in corpus order. Auxiliary targets are the noisy tags.
TokenLosses token_losses(CscModel& model, const std::vector<SentenceRecord>& records, std::size_t batch_size = 64);

}  // namespace atlas
