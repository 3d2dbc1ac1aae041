#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "skiplab/tensor.hpp"

namespace skiplab {

// Eager reverse-mode tape. Every op computes its value immediately and, when
// the tape is recording, stores a closure that scatters the output gradient
// into its parents. Insertion order is a topological order, so backward() is
// a single reverse sweep that touches each node exactly once.
//
// With recording=false the tape is a plain evaluator: values are kept (the
// model reads hidden states out of it), closures are not, and backward()
// refuses to run.
class Tape {
  public:
    using Id = int;

    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    std::size_t num_nodes() const { return nodes_.size(); }

    Id leaf(Tensor value) {
        nodes_.push_back(Node{std::move(value), nullptr, {}, nullptr});
        return static_cast<Id>(nodes_.size() - 1);
    }

    // Non-owning leaf; the pointee must outlive the tape. Used for model
    // parameters so a forward never copies the weight matrices.
    Id external(const Tensor* value) {
        nodes_.push_back(Node{Tensor(), value, {}, nullptr});
        return static_cast<Id>(nodes_.size() - 1);
    }

    const Tensor& value(Id id) const {
        const Node& n = node(id);
        return n.external ? *n.external : n.value;
    }

    // Gradient of the last backward() target w.r.t. this node. Zero tensor if
    // the node did not contribute.
    Tensor grad(Id id) const {
        const Node& n = node(id);
        if (n.grad) return *n.grad;
        const Tensor& v = value(id);
        return Tensor::zeros(v.shape());
    }

    Id matmul(Id a, Id b) {
        Tensor c = skiplab::matmul(value(a), value(b));
        return push(std::move(c), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
            t.accumulate(a, skiplab::matmul(g, skiplab::transpose(t.value(b))));
            t.accumulate(b, skiplab::matmul(skiplab::transpose(t.value(a)), g));
        });
    }

    Id transpose(Id a) {
        return push(skiplab::transpose(value(a)), {a},
                    [a](Tape& t, const Tensor& g, const Tensor&) {
                        t.accumulate(a, skiplab::transpose(g));
                    });
    }

    Id add(Id a, Id b) {
        return push(skiplab::add(value(a), value(b)), {a, b},
                    [a, b](Tape& t, const Tensor& g, const Tensor&) {
                        t.accumulate(a, g);
                        t.accumulate(b, g);
                    });
    }

    Id add_rowvec(Id a, Id v) {
        return push(skiplab::add_rowvec(value(a), value(v)), {a, v},
                    [a, v](Tape& t, const Tensor& g, const Tensor&) {
                        t.accumulate(a, g);
                        Tensor gv = Tensor::zeros(t.value(v).shape());
                        for (int i = 0; i < g.rows(); ++i)
                            for (int j = 0; j < g.cols(); ++j) gv[j] += g.at(i, j);
                        t.accumulate(v, std::move(gv));
                    });
    }

    Id scale(Id a, double s) {
        return push(skiplab::scale(value(a), s), {a},
                    [a, s](Tape& t, const Tensor& g, const Tensor&) {
                        t.accumulate(a, skiplab::scale(g, s));
                    });
    }

    Id slice_rows(Id a, int r0, int r1) {
        const Tensor& x = value(a);
        if (x.dim() != 2 || r0 < 0 || r1 > x.rows() || r0 >= r1)
            throw ShapeError("slice_rows out of range");
        const int n = x.cols();
        Tensor y = Tensor::zeros({r1 - r0, n});
        for (int i = r0; i < r1; ++i)
            for (int j = 0; j < n; ++j) y.at(i - r0, j) = x.at(i, j);
        return push(std::move(y), {a}, [a, r0](Tape& t, const Tensor& g, const Tensor&) {
            Tensor gx = Tensor::zeros(t.value(a).shape());
            for (int i = 0; i < g.rows(); ++i)
                for (int j = 0; j < g.cols(); ++j) gx.at(i + r0, j) = g.at(i, j);
            t.accumulate(a, std::move(gx));
        });
    }

    Id slice_cols(Id a, int c0, int c1) {
        const Tensor& x = value(a);
        if (x.dim() != 2 || c0 < 0 || c1 > x.cols() || c0 >= c1)
            throw ShapeError("slice_cols out of range");
        Tensor y = Tensor::zeros({x.rows(), c1 - c0});
        for (int i = 0; i < x.rows(); ++i)
            for (int j = c0; j < c1; ++j) y.at(i, j - c0) = x.at(i, j);
        return push(std::move(y), {a}, [a, c0](Tape& t, const Tensor& g, const Tensor&) {
            Tensor gx = Tensor::zeros(t.value(a).shape());
            for (int i = 0; i < g.rows(); ++i)
                for (int j = 0; j < g.cols(); ++j) gx.at(i, j + c0) = g.at(i, j);
            t.accumulate(a, std::move(gx));
        });
    }

    Id concat_cols(const std::vector<Id>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols of nothing");
        int rows = value(parts[0]).rows();
        int total = 0;
        for (Id p : parts) {
            if (value(p).dim() != 2 || value(p).rows() != rows)
                throw ShapeError("concat_cols row mismatch");
            total += value(p).cols();
        }
        Tensor y = Tensor::zeros({rows, total});
        int off = 0;
        for (Id p : parts) {
            const Tensor& x = value(p);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < x.cols(); ++j) y.at(i, off + j) = x.at(i, j);
            off += x.cols();
        }
        return push(std::move(y), parts, [parts](Tape& t, const Tensor& g, const Tensor&) {
            int off = 0;
            for (Id p : parts) {
                const Tensor& x = t.value(p);
                Tensor gp = Tensor::zeros(x.shape());
                for (int i = 0; i < x.rows(); ++i)
                    for (int j = 0; j < x.cols(); ++j) gp.at(i, j) = g.at(i, off + j);
                off += x.cols();
                t.accumulate(p, std::move(gp));
            }
        });
    }

    // Row gather for embeddings; backward scatter-adds into the table.
    Id gather_rows(Id table, std::vector<int> ids) {
        const Tensor& w = value(table);
        if (w.dim() != 2) throw ShapeError("gather_rows expects a rank-2 table");
        const int n = static_cast<int>(ids.size()), d = w.cols();
        Tensor y = Tensor::zeros({n, d});
        for (int i = 0; i < n; ++i) {
            if (ids[i] < 0 || ids[i] >= w.rows()) throw InputError("gather_rows id out of range");
            for (int j = 0; j < d; ++j) y.at(i, j) = w.at(ids[i], j);
        }
        return push(std::move(y), {table},
                    [table, ids = std::move(ids)](Tape& t, const Tensor& g, const Tensor&) {
                        Tensor gw = Tensor::zeros(t.value(table).shape());
                        for (int i = 0; i < g.rows(); ++i)
                            for (int j = 0; j < g.cols(); ++j) gw.at(ids[i], j) += g.at(i, j);
                        t.accumulate(table, std::move(gw));
                    });
    }

    Id softmax_rows(Id a) {
        return push(skiplab::softmax(value(a), 1), {a},
                    [a](Tape& t, const Tensor& g, const Tensor& y) {
                        Tensor gx = Tensor::zeros(y.shape());
                        for (int i = 0; i < y.rows(); ++i) {
                            double dotgy = 0.0;
                            for (int j = 0; j < y.cols(); ++j) dotgy += g.at(i, j) * y.at(i, j);
                            for (int j = 0; j < y.cols(); ++j)
                                gx.at(i, j) = y.at(i, j) * (g.at(i, j) - dotgy);
                        }
                        t.accumulate(a, std::move(gx));
                    });
    }

    Id gelu(Id a) {
        Tensor y = value(a);
        for (double& v : y.vec()) v = gelu_scalar(v);
        check_finite(y, "gelu");
        return push(std::move(y), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
            const Tensor& x = t.value(a);
            Tensor gx = Tensor::zeros(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) gx[i] = g[i] * gelu_grad_scalar(x[i]);
            t.accumulate(a, std::move(gx));
        });
    }

    // Per-row layer norm: y = gain * (x - mean) / sqrt(var + eps) + bias.
    Id layer_norm(Id x, Id gain, Id bias) {
        const Tensor& xv = value(x);
        const Tensor& gv = value(gain);
        const Tensor& bv = value(bias);
        if (xv.dim() != 2 || gv.dim() != 1 || bv.dim() != 1 || gv.cols() != xv.cols() ||
            bv.cols() != xv.cols())
            throw ShapeError("layer_norm expects (m x n), gain(n), bias(n)");
        constexpr double kEps = 1e-5;
        const int m = xv.rows(), n = xv.cols();
        Tensor y = Tensor::zeros({m, n});
        for (int i = 0; i < m; ++i) {
            double mean = 0.0;
            for (int j = 0; j < n; ++j) mean += xv.at(i, j);
            mean /= n;
            double var = 0.0;
            for (int j = 0; j < n; ++j) {
                double d = xv.at(i, j) - mean;
                var += d * d;
            }
            var /= n;
            double inv = 1.0 / std::sqrt(var + kEps);
            for (int j = 0; j < n; ++j)
                y.at(i, j) = gv[j] * ((xv.at(i, j) - mean) * inv) + bv[j];
        }
        check_finite(y, "layer_norm");
        return push(std::move(y), {x, gain, bias},
                    [x, gain, bias](Tape& t, const Tensor& g, const Tensor&) {
                        constexpr double kEps = 1e-5;
                        const Tensor& xv = t.value(x);
                        const Tensor& gv = t.value(gain);
                        const int m = xv.rows(), n = xv.cols();
                        Tensor gx = Tensor::zeros({m, n});
                        Tensor gg = Tensor::zeros({n});
                        Tensor gb = Tensor::zeros({n});
                        for (int i = 0; i < m; ++i) {
                            double mean = 0.0;
                            for (int j = 0; j < n; ++j) mean += xv.at(i, j);
                            mean /= n;
                            double var = 0.0;
                            for (int j = 0; j < n; ++j) {
                                double d = xv.at(i, j) - mean;
                                var += d * d;
                            }
                            var /= n;
                            double inv = 1.0 / std::sqrt(var + kEps);
                            // xhat_j and dxhat_j, then the two row means that
                            // close the normalization terms.
                            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                            std::vector<double> xhat(n), dxhat(n);
                            for (int j = 0; j < n; ++j) {
                                xhat[j] = (xv.at(i, j) - mean) * inv;
                                dxhat[j] = g.at(i, j) * gv[j];
                                mean_dxhat += dxhat[j];
                                mean_dxhat_xhat += dxhat[j] * xhat[j];
                                gg[j] += g.at(i, j) * xhat[j];
                                gb[j] += g.at(i, j);
                            }
                            mean_dxhat /= n;
                            mean_dxhat_xhat /= n;
                            for (int j = 0; j < n; ++j)
                                gx.at(i, j) =
                                    inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                        t.accumulate(x, std::move(gx));
                        t.accumulate(gain, std::move(gg));
                        t.accumulate(bias, std::move(gb));
                    });
    }

    // Mean NLL over masked positions, as a 1-element node.
    Id cross_entropy(Id logits, std::vector<int> targets, std::vector<bool> mask) {
        double loss = skiplab::cross_entropy(value(logits), targets, mask);
        int count = 0;
        for (bool b : mask) count += b ? 1 : 0;
        return push(Tensor::scalar(loss), {logits},
                    [logits, targets = std::move(targets), mask = std::move(mask),
                     count](Tape& t, const Tensor& g, const Tensor&) {
                        const Tensor& lv = t.value(logits);
                        Tensor gl = Tensor::zeros(lv.shape());
                        const double go = g[0] / count;
                        for (int i = 0; i < lv.rows(); ++i) {
                            if (!mask[i]) continue;
                            Tensor p = skiplab::softmax(
                                Tensor::row_vector({lv.row(i).begin(), lv.row(i).end()}));
                            for (int j = 0; j < lv.cols(); ++j) gl.at(i, j) = p[j] * go;
                            gl.at(i, targets[i]) -= go;
                        }
                        t.accumulate(logits, std::move(gl));
                    });
    }

    Id mean_scalars(const std::vector<Id>& xs) {
        if (xs.empty()) throw ShapeError("mean_scalars of nothing");
        Id acc = xs[0];
        for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
        return scale(acc, 1.0 / static_cast<double>(xs.size()));
    }

    // Reverse sweep from a recorded scalar node; gradients accumulate
    // additively into every contributing node.
    void backward(Id loss) {
        if (!recording_) throw TapeError("backward on a non-recording tape");
        if (loss < 0 || loss >= static_cast<Id>(nodes_.size()))
            throw TapeError("loss node was not recorded on this tape");
        if (value(loss).size() != 1) throw TapeError("backward target must be scalar");
        nodes_[loss].grad = Tensor::full(value(loss).shape(), 1.0);
        for (Id id = loss; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.grad || !n.backward) continue;
            n.backward(*this, *n.grad, n.external ? *n.external : n.value);
        }
    }

  private:
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad, const Tensor& out_value)>;

    struct Node {
        Tensor value;
        const Tensor* external = nullptr;
        std::vector<Id> parents;
        BackwardFn backward;
        std::optional<Tensor> grad;
    };

    const Node& node(Id id) const {
        if (id < 0 || id >= static_cast<Id>(nodes_.size())) throw TapeError("invalid tape node id");
        return nodes_[id];
    }

    Id push(Tensor value, std::vector<Id> parents, BackwardFn fn) {
        Node n;
        n.value = std::move(value);
        if (recording_) {
            n.parents = std::move(parents);
            n.backward = std::move(fn);
        }
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    void accumulate(Id id, Tensor g) {
        Node& n = nodes_[id];
        if (!n.grad) {
            n.grad = std::move(g);
            return;
        }
        Tensor& acc = *n.grad;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }

    bool recording_;
    std::vector<Node> nodes_;
};

}  // namespace skiplab
