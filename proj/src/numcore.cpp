#include "atlas/numcore.hpp"

#include <algorithm>
#include <sstream>

namespace atlas {

namespace {

double g_backward_fault = 1.0;

std::string shape_of(const Matrix& m)
{
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

void require_same_graph(const Var& a, const Var& b, const char* op)
{
    if (!a.valid() || !b.valid() || a.graph() != b.graph())
        throw std::invalid_argument(std::string(op) + ": operands must live on the same graph");
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op)
{
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " + shape_of(b));
}

}  // namespace

void set_backward_fault(double factor) { g_backward_fault = factor; }

const Matrix& Var::value() const { return graph_->value(*this); }

double Var::scalar() const
{
    const Matrix& v = value();
    if (v.size() != 1)
        throw DimensionError("scalar(): node is " + shape_of(v));
    return v(0, 0);
}

Var Graph::constant(Matrix value)
{
    nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::parameter(Parameter& p)
{
    nodes_.push_back(Node{p.value, {}, true, &p, {}});
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward)
{
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Graph::record(Matrix value, std::span<const Var> inputs, BackwardFn backward)
{
    bool needs = false;
    for (const Var& in : inputs) {
        if (in.graph() != this)
            throw std::invalid_argument("record: input from a different graph");
        needs = needs || requires_grad(in);
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs)
        n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Matrix Graph::grad(const Var& v) const
{
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.grad.size() == 0)
        return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

void Graph::backward(const Var& root)
{
    if (root.graph() != this)
        throw std::invalid_argument("backward: root from a different graph");
    if (value(root).size() != 1)
        throw DimensionError("backward: root must be a scalar, got " + shape_of(value(root)));
    for (Node& n : nodes_)
        n.grad.resize(0, 0);
    if (!requires_grad(root))
        return;
    nodes_[static_cast<std::size_t>(root.id())].grad = Matrix::Ones(1, 1);
    for (int id = root.id(); id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || n.grad.size() == 0)
            continue;
        if (n.backward) {
            // The closure may touch other nodes' grads but never this one.
            const Matrix g = n.grad;
            n.backward(*this, g);
        }
        if (n.param != nullptr)
            n.param->grad += n.grad;
    }
}

// ---- elementwise and linear ops ------------------------------------------

Var matmul(const Var& a, const Var& b)
{
    require_same_graph(a, b, "matmul");
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    if (av.cols() != bv.rows())
        throw DimensionError("matmul: inner dimensions differ " + shape_of(av) + " x " + shape_of(bv));
    Graph& g = *a.graph();
    return g.record(av * bv, {a, b}, [a, b](Graph& gr, const Matrix& go) {
        if (gr.requires_grad(a))
            gr.accumulate(a, go * b.value().transpose());
        if (gr.requires_grad(b))
            gr.accumulate(b, a.value().transpose() * go);
    });
}

Var add(const Var& a, const Var& b)
{
    require_same_graph(a, b, "add");
    require_same_shape(a.value(), b.value(), "add");
    return a.graph()->record(a.value() + b.value(), {a, b}, [a, b](Graph& gr, const Matrix& go) {
        gr.accumulate(a, go);
        gr.accumulate(b, go);
    });
}

Var sub(const Var& a, const Var& b)
{
    require_same_graph(a, b, "sub");
    require_same_shape(a.value(), b.value(), "sub");
    return a.graph()->record(a.value() - b.value(), {a, b}, [a, b](Graph& gr, const Matrix& go) {
        gr.accumulate(a, go);
        gr.accumulate(b, -go);
    });
}

Var hadamard(const Var& a, const Var& b)
{
    require_same_graph(a, b, "hadamard");
    require_same_shape(a.value(), b.value(), "hadamard");
    return a.graph()->record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Graph& gr, const Matrix& go) {
        if (gr.requires_grad(a))
            gr.accumulate(a, go.cwiseProduct(b.value()));
        if (gr.requires_grad(b))
            gr.accumulate(b, go.cwiseProduct(a.value()));
    });
}

Var scale(const Var& a, double factor)
{
    return a.graph()->record(a.value() * factor, {a},
                             [a, factor](Graph& gr, const Matrix& go) { gr.accumulate(a, go * factor); });
}

Var add_row(const Var& x, const Var& row)
{
    require_same_graph(x, row, "add_row");
    const Matrix& xv = x.value();
    const Matrix& rv = row.value();
    if (rv.rows() != 1 || rv.cols() != xv.cols())
        throw DimensionError("add_row: expected 1x" + std::to_string(xv.cols()) + " row, got " + shape_of(rv));
    Matrix out = xv.rowwise() + rv.row(0);
    return x.graph()->record(std::move(out), {x, row}, [x, row](Graph& gr, const Matrix& go) {
        gr.accumulate(x, go);
        if (gr.requires_grad(row))
            gr.accumulate(row, go.colwise().sum());
    });
}

Var gelu(const Var& x)
{
    const Matrix& xv = x.value();
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    Matrix out = xv.unaryExpr([inv_sqrt2](double z) { return 0.5 * z * (1.0 + std::erf(z * inv_sqrt2)); });
    return x.graph()->record(std::move(out), {x}, [x, inv_sqrt2](Graph& gr, const Matrix& go) {
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * 3.14159265358979323846);
        const double fault = g_backward_fault;
        Matrix d = x.value().unaryExpr([&](double z) {
            const double cdf = 0.5 * (1.0 + std::erf(z * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * z * z);
            return fault * (cdf + z * pdf);
        });
        gr.accumulate(x, go.cwiseProduct(d));
    });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps)
{
    require_same_graph(x, gain, "layer_norm");
    require_same_graph(x, bias, "layer_norm");
    const Matrix& xv = x.value();
    const Index k = xv.cols();
    if (gain.rows() != 1 || gain.cols() != k || bias.rows() != 1 || bias.cols() != k)
        throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(k));
    Matrix xhat(xv.rows(), k);
    Vector inv_std(xv.rows());
    for (Index r = 0; r < xv.rows(); ++r) {
        const double mean = xv.row(r).mean();
        const double var = (xv.row(r).array() - mean).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
    }
    Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
    return x.graph()->record(
        std::move(out), {x, gain, bias},
        [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr, const Matrix& go) {
            if (gr.requires_grad(gain))
                gr.accumulate(gain, go.cwiseProduct(xhat).colwise().sum());
            if (gr.requires_grad(bias))
                gr.accumulate(bias, go.colwise().sum());
            if (gr.requires_grad(x)) {
                const Matrix dxhat = go.array().rowwise() * gain.value().row(0).array();
                Matrix dx(dxhat.rows(), dxhat.cols());
                for (Index r = 0; r < dxhat.rows(); ++r) {
                    const double m1 = dxhat.row(r).mean();
                    const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                    dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                }
                gr.accumulate(x, dx);
            }
        });
}

Var softmax_rows(const Var& x)
{
    Matrix p = softmax(x.value(), Axis::Cols);
    Matrix saved = p;
    return x.graph()->record(std::move(p), {x}, [x, p = std::move(saved)](Graph& gr, const Matrix& go) {
        const Vector dot = go.cwiseProduct(p).rowwise().sum();
        Matrix dx = p.cwiseProduct(go - dot.replicate(1, go.cols()));
        gr.accumulate(x, dx);
    });
}

Var sum(const Var& x)
{
    Matrix out(1, 1);
    out(0, 0) = x.value().sum();
    const Index r = x.rows(), c = x.cols();
    return x.graph()->record(std::move(out), {x}, [x, r, c](Graph& gr, const Matrix& go) {
        gr.accumulate(x, Matrix::Constant(r, c, go(0, 0)));
    });
}

Var embedding(const Var& table, std::span<const int> ids)
{
    const Matrix& tv = table.value();
    Matrix out(static_cast<Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tv.rows())
            throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                             std::to_string(tv.rows()) + " rows");
        out.row(static_cast<Index>(i)) = tv.row(ids[i]);
    }
    std::vector<int> saved(ids.begin(), ids.end());
    return table.graph()->record(std::move(out), {table}, [table, saved = std::move(saved)](Graph& gr, const Matrix& go) {
        Matrix d = Matrix::Zero(table.rows(), table.cols());
        for (std::size_t i = 0; i < saved.size(); ++i)
            d.row(saved[i]) += go.row(static_cast<Index>(i));
        gr.accumulate(table, d);
    });
}

Var concat_cols(std::span<const Var> parts)
{
    if (parts.empty())
        throw DimensionError("concat_cols: no inputs");
    const Index rows = parts[0].rows();
    Index cols = 0;
    for (const Var& p : parts) {
        require_same_graph(parts[0], p, "concat_cols");
        if (p.rows() != rows)
            throw DimensionError("concat_cols: row counts differ");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    Index at = 0;
    for (const Var& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    std::vector<Var> saved(parts.begin(), parts.end());
    return parts[0].graph()->record(std::move(out), parts, [saved = std::move(saved)](Graph& gr, const Matrix& go) {
        Index offset = 0;
        for (const Var& p : saved) {
            if (gr.requires_grad(p))
                gr.accumulate(p, go.middleCols(offset, p.cols()));
            offset += p.cols();
        }
    });
}

CrossEntropy cross_entropy(const Var& logits, std::span<const int> targets, std::span<const double> weights)
{
    const Matrix& z = logits.value();
    const Index n = z.rows();
    if (static_cast<Index>(targets.size()) != n || static_cast<Index>(weights.size()) != n)
        throw DimensionError("cross_entropy: targets/weights must have one entry per row");
    Matrix probs(n, z.cols());
    Vector per_token(n);
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        if (t < 0 || t >= z.cols())
            throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                             std::to_string(z.cols()) + ")");
        if (weights[static_cast<std::size_t>(i)] < 0.0)
            throw std::invalid_argument("cross_entropy: negative token weight");
        const double shift = z.row(i).maxCoeff();
        const double lse = shift + std::log((z.row(i).array() - shift).exp().sum());
        probs.row(i) = (z.row(i).array() - lse).exp().matrix();
        per_token(i) = lse - z(i, t);
        total += weights[static_cast<std::size_t>(i)] * per_token(i);
    }
    Matrix out(1, 1);
    out(0, 0) = total;
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    Var loss = logits.graph()->record(
        std::move(out), {logits},
        [logits, probs = std::move(probs), tg = std::move(tg), w = std::move(w)](Graph& gr, const Matrix& go) {
            Matrix d = probs;
            for (Index i = 0; i < d.rows(); ++i) {
                d(i, tg[static_cast<std::size_t>(i)]) -= 1.0;
                d.row(i) *= w[static_cast<std::size_t>(i)] * go(0, 0);
            }
            gr.accumulate(logits, d);
        });
    return CrossEntropy{loss, std::move(per_token)};
}

Var segmented_attention(const Var& q, const Var& k, const Var& v, std::span<const Segment> segments, int heads,
                        std::vector<Matrix>* probs)
{
    require_same_graph(q, k, "segmented_attention");
    require_same_graph(q, v, "segmented_attention");
    const Matrix& qv = q.value();
    require_same_shape(qv, k.value(), "segmented_attention");
    require_same_shape(qv, v.value(), "segmented_attention");
    const Index d = qv.cols();
    if (heads <= 0 || d % heads != 0)
        throw DimensionError("segmented_attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    const Index dh = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<Matrix> saved;
    saved.reserve(segments.size() * static_cast<std::size_t>(heads));
    Matrix out = Matrix::Zero(qv.rows(), d);
    for (const Segment& s : segments) {
        if (s.offset < 0 || s.length <= 0 || s.offset + s.length > qv.rows())
            throw DimensionError("segmented_attention: segment outside input rows");
        for (int h = 0; h < heads; ++h) {
            const auto qs = qv.block(s.offset, h * dh, s.length, dh);
            const auto ks = k.value().block(s.offset, h * dh, s.length, dh);
            const auto vs = v.value().block(s.offset, h * dh, s.length, dh);
            Matrix p = softmax((qs * ks.transpose()) * inv_scale, Axis::Cols);
            out.block(s.offset, h * dh, s.length, dh) = p * vs;
            saved.push_back(std::move(p));
        }
    }
    if (probs != nullptr)
        *probs = saved;
    std::vector<Segment> segs(segments.begin(), segments.end());
    return q.graph()->record(
        std::move(out), {q, k, v},
        [q, k, v, segs = std::move(segs), saved = std::move(saved), heads, dh, inv_scale](Graph& gr,
                                                                                          const Matrix& go) {
            Matrix dq = Matrix::Zero(go.rows(), go.cols());
            Matrix dk = Matrix::Zero(go.rows(), go.cols());
            Matrix dv = Matrix::Zero(go.rows(), go.cols());
            std::size_t at = 0;
            for (const Segment& s : segs) {
                for (int h = 0; h < heads; ++h, ++at) {
                    const Matrix& p = saved[at];
                    const auto qs = q.value().block(s.offset, h * dh, s.length, dh);
                    const auto ks = k.value().block(s.offset, h * dh, s.length, dh);
                    const auto vs = v.value().block(s.offset, h * dh, s.length, dh);
                    const auto gs = go.block(s.offset, h * dh, s.length, dh);
                    dv.block(s.offset, h * dh, s.length, dh) = p.transpose() * gs;
                    const Matrix dp = gs * vs.transpose();
                    const Vector rowdot = dp.cwiseProduct(p).rowwise().sum();
                    const Matrix ds = p.cwiseProduct(dp - rowdot.replicate(1, dp.cols())) * inv_scale;
                    dq.block(s.offset, h * dh, s.length, dh) = ds * ks;
                    dk.block(s.offset, h * dh, s.length, dh) = ds.transpose() * qs;
                }
            }
            gr.accumulate(q, dq);
            gr.accumulate(k, dk);
            gr.accumulate(v, dv);
        });
}

// ---- AdamW ---------------------------------------------------------------

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig config, long total_steps)
    : params_(std::move(params)), config_(config), total_(total_steps)
{
    if (total_steps < 0)
        throw std::invalid_argument("AdamW: negative total step count");
    for (const Parameter* p : params_) {
        m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
}

double AdamW::learning_rate() const { return cosine_learning_rate(config_.lr_max, config_.lr_min, step_, total_); }

void AdamW::step()
{
    if (step_ >= total_)
        throw std::logic_error("AdamW: step counter already at total steps");
    const double lr = learning_rate();
    const double t = static_cast<double>(step_ + 1);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Parameter& p = *params_[i];
        if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols())
            throw DimensionError("AdamW: gradient shape differs from parameter " + p.name);
        m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * p.grad;
        v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * p.grad.cwiseAbs2();
        if (p.decay)
            p.value *= 1.0 - lr * config_.weight_decay;
        p.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
    }
    ++step_;
}

// ---- finite differences --------------------------------------------------

double GradCheckReport::max_rel_error() const
{
    double worst = 0.0;
    for (const GradCheckEntry& e : entries)
        worst = std::max(worst, e.max_rel_error);
    return worst;
}

GradCheckReport finite_diff_check(const LossBuilder& build, std::span<Parameter* const> params, double eps)
{
    auto evaluate = [&build]() {
        Graph g;
        return build(g).scalar();
    };

    GradCheckReport report;
    for (Parameter* p : params)
        p->zero_grad();
    {
        Graph g;
        Var loss = build(g);
        g.backward(loss);
    }
    const double base = evaluate();
    if (evaluate() != base) {
        report.valid = false;
        return report;
    }

    for (Parameter* p : params) {
        GradCheckEntry entry;
        entry.name = p->name;
        for (Index i = 0; i < p->value.size(); ++i) {
            double& x = p->value.data()[i];
            const double saved = x;
            x = saved + eps;
            const double up = evaluate();
            x = saved - eps;
            const double down = evaluate();
            x = saved;
            const double fd = (up - down) / (2.0 * eps);
            const double an = p->grad.data()[i];
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
            entry.max_abs_grad = std::max(entry.max_abs_grad, std::abs(an));
            if (rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_index = i;
            }
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace atlas
