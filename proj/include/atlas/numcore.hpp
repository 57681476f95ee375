#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace atlas {

// All tensors are rank <= 2 and stored row-major; a scalar is 1x1.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct NumericError : std::domain_error {
    using std::domain_error::domain_error;
};

enum class Axis { Rows, Cols };

/// Numerically stable softmax along an axis. Axis::Cols normalises each row.
template <typename Derived>
Matrix softmax(const Eigen::MatrixBase<Derived>& x, Axis axis = Axis::Cols)
{
    if (x.hasNaN())
        throw NumericError("softmax: NaN input");
    Matrix out(x.rows(), x.cols());
    if (axis == Axis::Cols) {
        for (Index r = 0; r < x.rows(); ++r) {
            const double shift = x.row(r).maxCoeff();
            out.row(r) = (x.row(r).array() - shift).exp().matrix();
            out.row(r) /= out.row(r).sum();
        }
    } else {
        for (Index c = 0; c < x.cols(); ++c) {
            const double shift = x.col(c).maxCoeff();
            out.col(c) = (x.col(c).array() - shift).exp().matrix();
            out.col(c) /= out.col(c).sum();
        }
    }
    return out;
}

/// A trainable tensor and its accumulated gradient.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    bool decay = true;  // subject to decoupled weight decay

    Parameter() = default;
    Parameter(std::string name_, Matrix value_, bool decay_ = true)
        : name(std::move(name_)), value(std::move(value_)), grad(Matrix::Zero(value.rows(), value.cols())),
          decay(decay_)
    {
    }

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    Index size() const { return value.size(); }
};

class Graph;

/// Handle to a node recorded on a Graph.
class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    double scalar() const;
    bool valid() const { return graph_ != nullptr; }
    Graph* graph() const { return graph_; }
    int id() const { return id_; }

private:
    friend class Graph;
    Var(Graph* g, int id) : graph_(g), id_(id) {}
    Graph* graph_ = nullptr;
    int id_ = -1;
};

/// Dynamically recorded computation graph for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so walking them backwards is a
/// valid topological order. Parameter leaves push their gradient into the
/// owning Parameter when backward() finishes.
class Graph {
public:
    // Receives the node's output gradient; pushes contributions to inputs.
    using BackwardFn = std::function<void(Graph&, const Matrix&)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Matrix value);
    Var parameter(Parameter& p);
    Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward);
    Var record(Matrix value, std::span<const Var> inputs, BackwardFn backward);

    const Matrix& value(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id())].value; }
    bool requires_grad(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id())].requires_grad; }

    /// Adds `contribution` into the gradient of `v` (no-op for constants).
    template <typename Derived>
    void accumulate(const Var& v, const Eigen::MatrixBase<Derived>& contribution)
    {
        Node& n = nodes_[static_cast<std::size_t>(v.id())];
        if (!n.requires_grad)
            return;
        if (n.grad.size() == 0)
            n.grad = contribution;
        else
            n.grad += contribution;
    }

    /// Gradient of the last backward() for `v`; zeros if none reached it.
    Matrix grad(const Var& v) const;

    /// Seeds d(root)/d(root) = 1 and propagates. `root` must be 1x1.
    void backward(const Var& root);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Parameter* param = nullptr;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

// ---- differentiable operations -------------------------------------------

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
/// x (n x k) plus a broadcast row vector (1 x k).
Var add_row(const Var& x, const Var& row);
Var gelu(const Var& x);
/// Row-wise layer normalisation with affine gain/bias rows (1 x k).
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Softmax over each row.
Var softmax_rows(const Var& x);
/// Sum of all entries, as a 1x1 node.
Var sum(const Var& x);
/// Gathers rows of `table` (rows = vocabulary) at `ids`.
Var embedding(const Var& table, std::span<const int> ids);
Var concat_cols(std::span<const Var> parts);

struct CrossEntropy {
    Var loss;          // sum_i weight_i * loss_i
    Vector per_token;  // unweighted loss_i = -log softmax(logits_i)[target_i]
};

/// Token-weighted cross entropy over the rows of `logits`.
CrossEntropy cross_entropy(const Var& logits, std::span<const int> targets, std::span<const double> weights);

/// A contiguous run of rows belonging to one sequence.
struct Segment {
    Index offset = 0;
    Index length = 0;
};

/// Scaled dot-product multi-head attention restricted to each segment.
/// When `probs` is non-null it receives one (length x length) matrix per
/// (segment, head), segment-major.
Var segmented_attention(const Var& q, const Var& k, const Var& v, std::span<const Segment> segments, int heads,
                        std::vector<Matrix>* probs = nullptr);

// ---- optimisation --------------------------------------------------------

/// Cosine decay from lr_max at t = 0 to lr_min at t = total.
template <typename Scalar>
Scalar cosine_learning_rate(Scalar lr_max, Scalar lr_min, long step, long total)
{
    if (total <= 0)
        return lr_max;
    const Scalar pi = Scalar(3.14159265358979323846);
    const Scalar phase = pi * Scalar(step) / Scalar(total);
    return lr_min + Scalar(0.5) * (lr_max - lr_min) * (Scalar(1) + std::cos(phase));
}

struct AdamWConfig {
    double lr_max = 1e-3;
    double lr_min = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Moment accumulators and step counter for AdamW over a fixed parameter list.
class AdamW {
public:
    AdamW(std::vector<Parameter*> params, AdamWConfig config, long total_steps);

    /// Learning rate that the next step() will use.
    double learning_rate() const;
    /// Applies one update from the parameters' accumulated gradients.
    void step();

    long step_count() const { return step_; }
    long total_steps() const { return total_; }
    const AdamWConfig& config() const { return config_; }
    const Matrix& first_moment(std::size_t i) const { return m_[i]; }
    const Matrix& second_moment(std::size_t i) const { return v_[i]; }

private:
    std::vector<Parameter*> params_;
    AdamWConfig config_;
    std::vector<Matrix> m_, v_;
    long step_ = 0;
    long total_ = 0;
};

// ---- finite-difference verification --------------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_grad = 0.0;
    Index worst_index = -1;
};

struct GradCheckReport {
    bool valid = true;  // false when the loss is not reproducible
    std::vector<GradCheckEntry> entries;

    double max_rel_error() const;
    bool passed(double tolerance) const { return valid && max_rel_error() < tolerance; }
};

using LossBuilder = std::function<Var(Graph&)>;

/// Compares analytic gradients with central differences for every entry of
/// every parameter. Relative error is |a - f| / max(|a|, |f|, 1e-8).
GradCheckReport finite_diff_check(const LossBuilder& build, std::span<Parameter* const> params, double eps = 1e-5);

/// Multiplies the GELU backward rule by `factor`. Test hook for checking that
/// the gradient checker catches a broken rule; 1.0 disables it.
void set_backward_fault(double factor);

}  // namespace atlas
