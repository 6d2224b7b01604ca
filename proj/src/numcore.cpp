#include "visaff/numcore.hpp"

#include "visaff/errors.hpp"
#include "visaff/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace visaff::num {

Tensor::Tensor(std::size_t r, std::size_t c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != r * c) throw ValidationError("tensor data size does not match shape");
}

Tensor Tensor::scalar(double v) { return Tensor(1, 1, {v}); }

Tensor Tensor::row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(1, n, std::move(v));
}

double Tensor::item() const {
    if (rows != 1 || cols != 1) throw ValidationError("item() requires a 1x1 tensor");
    return data[0];
}

bool Tensor::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

const Tensor& Var::value() const { return tape_->node(id_).value; }
const Tensor& Var::grad() const { return tape_->node(id_).grad; }

Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.grad = Tensor(value.rows, value.cols);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::make(Tensor value, bool requires_grad, std::function<void(Tape&, const Tensor&)> fn) {
    Node n;
    n.grad = Tensor(value.rows, value.cols);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backprop = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
}

void Tape::backward(const Var& output) {
    if (output.tape() != this) throw ValidationError("backward: output from another tape");
    const Node& out = nodes_[output.id()];
    if (out.value.rows != 1 || out.value.cols != 1) {
        throw ValidationError("backward requires a scalar output");
    }
    nodes_[output.id()].grad.data[0] = 1.0;
    for (std::size_t i = output.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backprop) continue;
        bool touched = std::any_of(n.grad.data.begin(), n.grad.data.end(),
                                   [](double v) { return v != 0.0; });
        if (!touched) continue;
        n.backprop(*this, n.grad);
    }
}

namespace {

bool any_grad(const Tape& t, std::initializer_list<std::size_t> ids) {
    for (auto id : ids) {
        if (t.node(id).requires_grad) return true;
    }
    return false;
}

void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) throw ValidationError(std::string(op) + ": non-finite result");
    (void)t;
    (void)op;
}

} // namespace

Var matmul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols != bv.rows) throw ValidationError("matmul: inner dimensions mismatch");
    Tensor out(av.rows, bv.cols);
    for (std::size_t i = 0; i < av.rows; ++i) {
        for (std::size_t k = 0; k < av.cols; ++k) {
            const double aik = av.at(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < bv.cols; ++j) {
                out.at(i, j) += aik * bv.at(k, j);
            }
        }
    }
    Tape& t = *a.tape();
    auto ia = a.id(), ib = b.id();
    return t.make(std::move(out), any_grad(t, {ia, ib}), [ia, ib](Tape& t, const Tensor& g) {
        const Tensor& av = t.node(ia).value;
        const Tensor& bv = t.node(ib).value;
        if (t.node(ia).requires_grad) {
            Tensor da(av.rows, av.cols); // g * b^T
            for (std::size_t i = 0; i < av.rows; ++i)
                for (std::size_t j = 0; j < bv.cols; ++j) {
                    const double gij = g.at(i, j);
                    if (gij == 0.0) continue;
                    for (std::size_t k = 0; k < av.cols; ++k) da.at(i, k) += gij * bv.at(k, j);
                }
            t.accumulate(ia, da);
        }
        if (t.node(ib).requires_grad) {
            Tensor db(bv.rows, bv.cols); // a^T * g
            for (std::size_t i = 0; i < av.rows; ++i)
                for (std::size_t k = 0; k < av.cols; ++k) {
                    const double aik = av.at(i, k);
                    if (aik == 0.0) continue;
                    for (std::size_t j = 0; j < bv.cols; ++j) db.at(k, j) += aik * g.at(i, j);
                }
            t.accumulate(ib, db);
        }
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols != bv.cols) throw ValidationError("matmul_nt: inner dimensions mismatch");
    Tensor out(av.rows, bv.rows);
    for (std::size_t i = 0; i < av.rows; ++i)
        for (std::size_t j = 0; j < bv.rows; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < av.cols; ++k) s += av.at(i, k) * bv.at(j, k);
            out.at(i, j) = s;
        }
    Tape& t = *a.tape();
    auto ia = a.id(), ib = b.id();
    return t.make(std::move(out), any_grad(t, {ia, ib}), [ia, ib](Tape& t, const Tensor& g) {
        const Tensor& av = t.node(ia).value;
        const Tensor& bv = t.node(ib).value;
        if (t.node(ia).requires_grad) {
            Tensor da(av.rows, av.cols); // g * b
            for (std::size_t i = 0; i < av.rows; ++i)
                for (std::size_t j = 0; j < bv.rows; ++j) {
                    const double gij = g.at(i, j);
                    if (gij == 0.0) continue;
                    for (std::size_t k = 0; k < av.cols; ++k) da.at(i, k) += gij * bv.at(j, k);
                }
            t.accumulate(ia, da);
        }
        if (t.node(ib).requires_grad) {
            Tensor db(bv.rows, bv.cols); // g^T * a
            for (std::size_t i = 0; i < av.rows; ++i)
                for (std::size_t j = 0; j < bv.rows; ++j) {
                    const double gij = g.at(i, j);
                    if (gij == 0.0) continue;
                    for (std::size_t k = 0; k < av.cols; ++k) db.at(j, k) += gij * av.at(i, k);
                }
            t.accumulate(ib, db);
        }
    });
}

Var add(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv)) throw ValidationError("add: shape mismatch");
    Tensor out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    Tape& t = *a.tape();
    auto ia = a.id(), ib = b.id();
    return t.make(std::move(out), any_grad(t, {ia, ib}), [ia, ib](Tape& t, const Tensor& g) {
        t.accumulate(ia, g);
        t.accumulate(ib, g);
    });
}

Var add_bias(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (bv.rows != 1 || bv.cols != av.cols) throw ValidationError("add_bias: bias must be 1 x cols");
    Tensor out = av;
    for (std::size_t i = 0; i < av.rows; ++i)
        for (std::size_t j = 0; j < av.cols; ++j) out.at(i, j) += bv.at(0, j);
    Tape& t = *a.tape();
    auto ia = a.id(), ib = b.id();
    return t.make(std::move(out), any_grad(t, {ia, ib}), [ia, ib](Tape& t, const Tensor& g) {
        t.accumulate(ia, g);
        if (t.node(ib).requires_grad) {
            Tensor db(1, g.cols);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j) db.at(0, j) += g.at(i, j);
            t.accumulate(ib, db);
        }
    });
}

Var sub(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv)) throw ValidationError("sub: shape mismatch");
    Tensor out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
    Tape& t = *a.tape();
    auto ia = a.id(), ib = b.id();
    return t.make(std::move(out), any_grad(t, {ia, ib}), [ia, ib](Tape& t, const Tensor& g) {
        t.accumulate(ia, g);
        if (t.node(ib).requires_grad) {
            Tensor db = g;
            for (double& v : db.data) v = -v;
            t.accumulate(ib, db);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv)) throw ValidationError("mul: shape mismatch");
    Tensor out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    Tape& t = *a.tape();
    auto ia = a.id(), ib = b.id();
    return t.make(std::move(out), any_grad(t, {ia, ib}), [ia, ib](Tape& t, const Tensor& g) {
        const Tensor& av = t.node(ia).value;
        const Tensor& bv = t.node(ib).value;
        if (t.node(ia).requires_grad) {
            Tensor da = g;
            for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] *= bv.data[i];
            t.accumulate(ia, da);
        }
        if (t.node(ib).requires_grad) {
            Tensor db = g;
            for (std::size_t i = 0; i < db.data.size(); ++i) db.data[i] *= av.data[i];
            t.accumulate(ib, db);
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.data) v *= s;
    Tape& t = *a.tape();
    auto ia = a.id();
    return t.make(std::move(out), t.node(ia).requires_grad, [ia, s](Tape& t, const Tensor& g) {
        Tensor da = g;
        for (double& v : da.data) v *= s;
        t.accumulate(ia, da);
    });
}

Var mul_const(const Var& a, const Tensor& w) {
    const Tensor& av = a.value();
    if (!av.same_shape(w)) throw ValidationError("mul_const: shape mismatch");
    Tensor out = av;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= w.data[i];
    Tape& t = *a.tape();
    auto ia = a.id();
    return t.make(std::move(out), t.node(ia).requires_grad, [ia, w](Tape& t, const Tensor& g) {
        Tensor da = g;
        for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] *= w.data[i];
        t.accumulate(ia, da);
    });
}

Var row_scale(const Var& a, const std::vector<double>& s) {
    const Tensor& av = a.value();
    if (s.size() != av.rows) throw ValidationError("row_scale: scale count must equal rows");
    Tensor out = av;
    for (std::size_t i = 0; i < av.rows; ++i)
        for (std::size_t j = 0; j < av.cols; ++j) out.at(i, j) *= s[i];
    Tape& t = *a.tape();
    auto ia = a.id();
    return t.make(std::move(out), t.node(ia).requires_grad, [ia, s](Tape& t, const Tensor& g) {
        Tensor da = g;
        for (std::size_t i = 0; i < da.rows; ++i)
            for (std::size_t j = 0; j < da.cols; ++j) da.at(i, j) *= s[i];
        t.accumulate(ia, da);
    });
}

Var scale_by_var(const Var& a, const Var& s) {
    const Tensor& av = a.value();
    const double sv = s.value().item();
    Tensor out = av;
    for (double& v : out.data) v *= sv;
    Tape& t = *a.tape();
    auto ia = a.id(), is = s.id();
    return t.make(std::move(out), any_grad(t, {ia, is}), [ia, is](Tape& t, const Tensor& g) {
        const Tensor& av = t.node(ia).value;
        const double sv = t.node(is).value.item();
        if (t.node(ia).requires_grad) {
            Tensor da = g;
            for (double& v : da.data) v *= sv;
            t.accumulate(ia, da);
        }
        if (t.node(is).requires_grad) {
            double ds = 0.0;
            for (std::size_t i = 0; i < g.data.size(); ++i) ds += g.data[i] * av.data[i];
            t.accumulate(is, Tensor::scalar(ds));
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ValidationError("concat_cols: empty input");
    const std::size_t rows = parts[0].value().rows;
    std::size_t cols = 0;
    for (const Var& p : parts) {
        if (p.value().rows != rows) throw ValidationError("concat_cols: row mismatch");
        cols += p.value().cols;
    }
    Tensor out(rows, cols);
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& pv = p.value();
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < pv.cols; ++j) out.at(i, off + j) = pv.at(i, j);
        off += pv.cols;
    }
    Tape& t = *parts[0].tape();
    std::vector<std::size_t> ids;
    bool rg = false;
    for (const Var& p : parts) {
        ids.push_back(p.id());
        rg = rg || t.node(p.id()).requires_grad;
    }
    return t.make(std::move(out), rg, [ids](Tape& t, const Tensor& g) {
        std::size_t off = 0;
        for (std::size_t id : ids) {
            const Tensor& pv = t.node(id).value;
            if (t.node(id).requires_grad) {
                Tensor dp(pv.rows, pv.cols);
                for (std::size_t i = 0; i < pv.rows; ++i)
                    for (std::size_t j = 0; j < pv.cols; ++j) dp.at(i, j) = g.at(i, off + j);
                t.accumulate(id, dp);
            }
            off += pv.cols;
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ValidationError("concat_rows: empty input");
    const std::size_t cols = parts[0].value().cols;
    std::size_t rows = 0;
    for (const Var& p : parts) {
        if (p.value().cols != cols) throw ValidationError("concat_rows: column mismatch");
        rows += p.value().rows;
    }
    Tensor out(rows, cols);
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& pv = p.value();
        for (std::size_t i = 0; i < pv.rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out.at(off + i, j) = pv.at(i, j);
        off += pv.rows;
    }
    Tape& t = *parts[0].tape();
    std::vector<std::size_t> ids;
    bool rg = false;
    for (const Var& p : parts) {
        ids.push_back(p.id());
        rg = rg || t.node(p.id()).requires_grad;
    }
    return t.make(std::move(out), rg, [ids](Tape& t, const Tensor& g) {
        std::size_t off = 0;
        for (std::size_t id : ids) {
            const Tensor& pv = t.node(id).value;
            if (t.node(id).requires_grad) {
                Tensor dp(pv.rows, pv.cols);
                for (std::size_t i = 0; i < pv.rows; ++i)
                    for (std::size_t j = 0; j < pv.cols; ++j) dp.at(i, j) = g.at(off + i, j);
                t.accumulate(id, dp);
            }
            off += pv.rows;
        }
    });
}

Var slice_rows(const Var& a, std::size_t r0, std::size_t r1) {
    const Tensor& av = a.value();
    if (r0 >= r1 || r1 > av.rows) throw ValidationError("slice_rows: bad range");
    Tensor out(r1 - r0, av.cols);
    for (std::size_t i = r0; i < r1; ++i)
        for (std::size_t j = 0; j < av.cols; ++j) out.at(i - r0, j) = av.at(i, j);
    Tape& t = *a.tape();
    auto ia = a.id();
    return t.make(std::move(out), t.node(ia).requires_grad, [ia, r0](Tape& t, const Tensor& g) {
        const Tensor& av = t.node(ia).value;
        Tensor da(av.rows, av.cols);
        for (std::size_t i = 0; i < g.rows; ++i)
            for (std::size_t j = 0; j < g.cols; ++j) da.at(r0 + i, j) = g.at(i, j);
        t.accumulate(ia, da);
    });
}

Var row(const Var& a, std::size_t i) { return slice_rows(a, i, i + 1); }

Var element(const Var& a, std::size_t r, std::size_t c) {
    const Tensor& av = a.value();
    if (r >= av.rows || c >= av.cols) throw ValidationError("element: index out of range");
    Tape& t = *a.tape();
    auto ia = a.id();
    return t.make(Tensor::scalar(av.at(r, c)), t.node(ia).requires_grad,
                  [ia, r, c](Tape& t, const Tensor& g) {
                      const Tensor& av = t.node(ia).value;
                      Tensor da(av.rows, av.cols);
                      da.at(r, c) = g.item();
                      t.accumulate(ia, da);
                  });
}

Var relu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    Tape& t = *a.tape();
    auto ia = a.id();
    return t.make(std::move(out), t.node(ia).requires_grad, [ia](Tape& t, const Tensor& g) {
        const Tensor& av = t.node(ia).value;
        Tensor da = g;
        for (std::size_t i = 0; i < da.data.size(); ++i)
            if (av.data[i] <= 0.0) da.data[i] = 0.0;
        t.accumulate(ia, da);
    });
}

Var tanh_op(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.data) v = std::tanh(v);
    Tape& t = *a.tape();
    auto ia = a.id();
    const std::size_t self_hint = t.size(); // id this node will receive
    return t.make(std::move(out), t.node(ia).requires_grad,
                  [ia, self_hint](Tape& t, const Tensor& g) {
                      const Tensor& y = t.node(self_hint).value;
                      Tensor da = g;
                      for (std::size_t i = 0; i < da.data.size(); ++i)
                          da.data[i] *= 1.0 - y.data[i] * y.data[i];
                      t.accumulate(ia, da);
                  });
}

namespace {

// Shared masked row softmax; returns probabilities with masked entries at 0.
Tensor masked_softmax_values(const Tensor& x, const Tensor* mask) {
    if (mask && !mask->same_shape(x)) throw ValidationError("softmax: mask shape mismatch");
    Tensor probs(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < x.cols; ++j) {
            if (mask && mask->at(i, j) == 0.0) continue;
            mx = std::max(mx, x.at(i, j));
        }
        if (!std::isfinite(mx)) throw ValidationError("softmax: row fully masked");
        double z = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) {
            if (mask && mask->at(i, j) == 0.0) continue;
            const double e = std::exp(x.at(i, j) - mx);
            probs.at(i, j) = e;
            z += e;
        }
        for (std::size_t j = 0; j < x.cols; ++j) probs.at(i, j) /= z;
    }
    return probs;
}

} // namespace

Var softmax_rows(const Var& a, const Tensor* mask) {
    Tensor out = masked_softmax_values(a.value(), mask);
    Tape& t = *a.tape();
    auto ia = a.id();
    const std::size_t self_hint = t.size();
    return t.make(std::move(out), t.node(ia).requires_grad,
                  [ia, self_hint](Tape& t, const Tensor& g) {
                      const Tensor& y = t.node(self_hint).value;
                      Tensor da(y.rows, y.cols);
                      for (std::size_t i = 0; i < y.rows; ++i) {
                          double dot = 0.0;
                          for (std::size_t j = 0; j < y.cols; ++j) dot += g.at(i, j) * y.at(i, j);
                          for (std::size_t j = 0; j < y.cols; ++j)
                              da.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
                      }
                      t.accumulate(ia, da);
                  });
}

Var logsumexp_rows(const Var& a, const Tensor* mask) {
    const Tensor& x = a.value();
    Tensor probs = masked_softmax_values(x, mask); // reused in the backward pass
    Tensor out(x.rows, 1);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < x.cols; ++j) {
            if (mask && mask->at(i, j) == 0.0) continue;
            mx = std::max(mx, x.at(i, j));
        }
        double z = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) {
            if (mask && mask->at(i, j) == 0.0) continue;
            z += std::exp(x.at(i, j) - mx);
        }
        out.at(i, 0) = mx + std::log(z);
    }
    Tape& t = *a.tape();
    auto ia = a.id();
    return t.make(std::move(out), t.node(ia).requires_grad,
                  [ia, probs](Tape& t, const Tensor& g) {
                      Tensor da(probs.rows, probs.cols);
                      for (std::size_t i = 0; i < probs.rows; ++i)
                          for (std::size_t j = 0; j < probs.cols; ++j)
                              da.at(i, j) = g.at(i, 0) * probs.at(i, j);
                      t.accumulate(ia, da);
                  });
}

Var sum_all(const Var& a) {
    const Tensor& av = a.value();
    const double s = pairwise_sum(av.data);
    Tape& t = *a.tape();
    auto ia = a.id();
    return t.make(Tensor::scalar(s), t.node(ia).requires_grad, [ia](Tape& t, const Tensor& g) {
        const Tensor& av = t.node(ia).value;
        Tensor da(av.rows, av.cols);
        for (double& v : da.data) v = g.item();
        t.accumulate(ia, da);
    });
}

Var mean_all(const Var& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

Var weighted_sum(const Var& a, const Tensor& w) {
    const Tensor& av = a.value();
    if (!av.same_shape(w)) throw ValidationError("weighted_sum: shape mismatch");
    std::vector<double> prods(av.data.size());
    for (std::size_t i = 0; i < prods.size(); ++i) prods[i] = av.data[i] * w.data[i];
    Tape& t = *a.tape();
    auto ia = a.id();
    return t.make(Tensor::scalar(pairwise_sum(prods)), t.node(ia).requires_grad,
                  [ia, w](Tape& t, const Tensor& g) {
                      Tensor da = w;
                      for (double& v : da.data) v *= g.item();
                      t.accumulate(ia, da);
                  });
}

Var l2_normalize_rows(const Var& a) {
    const Tensor& av = a.value();
    Tensor out(av.rows, av.cols);
    std::vector<double> norms(av.rows);
    for (std::size_t i = 0; i < av.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < av.cols; ++j) s += av.at(i, j) * av.at(i, j);
        const double n = std::sqrt(s);
        if (n == 0.0) throw ValidationError("l2_normalize_rows: zero row");
        norms[i] = n;
        for (std::size_t j = 0; j < av.cols; ++j) out.at(i, j) = av.at(i, j) / n;
    }
    Tape& t = *a.tape();
    auto ia = a.id();
    const std::size_t self_hint = t.size();
    return t.make(std::move(out), t.node(ia).requires_grad,
                  [ia, self_hint, norms](Tape& t, const Tensor& g) {
                      const Tensor& y = t.node(self_hint).value;
                      Tensor da(y.rows, y.cols);
                      for (std::size_t i = 0; i < y.rows; ++i) {
                          double dot = 0.0;
                          for (std::size_t j = 0; j < y.cols; ++j) dot += g.at(i, j) * y.at(i, j);
                          for (std::size_t j = 0; j < y.cols; ++j)
                              da.at(i, j) = (g.at(i, j) - y.at(i, j) * dot) / norms[i];
                      }
                      t.accumulate(ia, da);
                  });
}

Var cross_entropy_mean(const Var& logits, const std::vector<int>& labels) {
    const Tensor& z = logits.value();
    if (labels.size() != z.rows) throw ValidationError("cross_entropy_mean: label count mismatch");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= z.cols) {
            throw ValidationError("cross_entropy_mean: label out of range");
        }
    }
    Tensor probs = masked_softmax_values(z, nullptr);
    std::vector<double> losses(z.rows);
    for (std::size_t i = 0; i < z.rows; ++i) {
        // stable: lse - z[y]
        double mx = z.at(i, 0);
        for (std::size_t j = 1; j < z.cols; ++j) mx = std::max(mx, z.at(i, j));
        double acc = 0.0;
        for (std::size_t j = 0; j < z.cols; ++j) acc += std::exp(z.at(i, j) - mx);
        losses[i] = mx + std::log(acc) - z.at(i, static_cast<std::size_t>(labels[i]));
    }
    const double mean = pairwise_sum(losses) / static_cast<double>(z.rows);
    Tape& t = *logits.tape();
    auto iz = logits.id();
    return t.make(Tensor::scalar(mean), t.node(iz).requires_grad,
                  [iz, probs, labels](Tape& t, const Tensor& g) {
                      const double gv = g.item() / static_cast<double>(probs.rows);
                      Tensor dz = probs;
                      for (std::size_t i = 0; i < probs.rows; ++i)
                          dz.at(i, static_cast<std::size_t>(labels[i])) -= 1.0;
                      for (double& v : dz.data) v *= gv;
                      t.accumulate(iz, dz);
                  });
}

std::vector<double> softmax(std::span<const double> x, double temperature) {
    if (x.empty()) throw ValidationError("softmax: empty input");
    if (!(temperature > 0.0)) throw ValidationError("softmax: temperature must be positive");
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    std::vector<double> out(x.size());
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp((x[i] - mx) / temperature);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
}

double cross_entropy(std::span<const double> logits, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
        throw ValidationError("cross_entropy: label out of range");
    }
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double acc = 0.0;
    for (double v : logits) acc += std::exp(v - mx);
    return mx + std::log(acc) - logits[static_cast<std::size_t>(label)];
}

std::size_t argmax_index(std::span<const double> x) {
    if (x.empty()) throw ValidationError("argmax: empty input");
    std::size_t best = 0;
    for (std::size_t i = 1; i < x.size(); ++i) {
        if (x[i] > x[best]) best = i;
    }
    return best;
}

Parameter& ParamStore::add(const std::string& name, Tensor init) {
    if (contains(name)) throw ValidationError("duplicate parameter: " + name);
    params_.emplace_back(name, std::move(init));
    return params_.back();
}

Parameter& ParamStore::get(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return p;
    }
    throw ValidationError("unknown parameter: " + name);
}

const Parameter& ParamStore::get(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return p;
    }
    throw ValidationError("unknown parameter: " + name);
}

bool ParamStore::contains(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return true;
    }
    return false;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
}

std::size_t ParamStore::total_entries() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

Var ParamBinding::use(Tape& tape, const std::string& name) {
    for (std::size_t i = 0; i < store_->count(); ++i) {
        if (store_->at(i).name == name) {
            Var v = tape.leaf(store_->at(i).value, true);
            bound_.emplace_back(i, v.id());
            return v;
        }
    }
    throw ValidationError("unknown parameter: " + name);
}

void ParamBinding::accumulate_grads(const Tape& tape) {
    for (auto [pi, nid] : bound_) {
        const Tensor& g = tape.node(nid).grad;
        Tensor& dst = store_->at(pi).grad;
        for (std::size_t i = 0; i < g.data.size(); ++i) dst.data[i] += g.data[i];
    }
}

GradCheckReport grad_check(const ScalarFn& f,
                           const std::function<void(ParamStore&)>& compute_grads,
                           ParamStore& params, double eps) {
    params.zero_grad();
    compute_grads(params);

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.count(); ++pi) {
        Parameter& p = params.at(pi);
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double saved = p.value.data[i];
            p.value.data[i] = saved + eps;
            const double f_plus = f(params);
            p.value.data[i] = saved - eps;
            const double f_minus = f(params);
            p.value.data[i] = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
                throw ValidationError("grad_check: non-finite function value at " + p.name);
            }
            const double fd = (f_plus - f_minus) / (2.0 * eps);
            const double analytic = p.grad.data[i];
            const double rel = std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_entry = p.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return report;
}

namespace {

std::string encode_f64_le(const std::vector<double>& values) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(values.size() * 8);
    for (double v : values) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xff));
    }
    return base64_encode(bytes);
}

std::vector<double> decode_f64_le(const std::string& b64, std::size_t expected) {
    const std::vector<std::uint8_t> bytes = base64_decode(b64);
    if (bytes.size() != expected * 8) throw ValidationError("checkpoint: payload size mismatch");
    std::vector<double> values(expected);
    for (std::size_t i = 0; i < expected; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
        std::memcpy(&values[i], &bits, sizeof(bits));
    }
    return values;
}

} // namespace

std::string serialize_params(const ParamStore& params, const std::string& extra_header_json) {
    nlohmann::json header;
    header["schema"] = "visaff-ckpt/1";
    if (!extra_header_json.empty()) {
        nlohmann::json extra = nlohmann::json::parse(extra_header_json);
        for (auto it = extra.begin(); it != extra.end(); ++it) header[it.key()] = it.value();
    }
    std::ostringstream out;
    out << header.dump() << "\n";
    for (std::size_t i = 0; i < params.count(); ++i) {
        const Parameter& p = params.at(i);
        out << p.name << "\n"
            << p.value.rows << " " << p.value.cols << "\n"
            << encode_f64_le(p.value.data) << "\n";
    }
    return out.str();
}

void deserialize_params(const std::string& text, ParamStore& params, std::string* header_json) {
    const std::vector<std::string> lines = split_lines(text);
    if (lines.empty()) throw ValidationError("checkpoint: empty file");
    nlohmann::json header = nlohmann::json::parse(lines[0]);
    if (!header.contains("schema") || header.at("schema") != "visaff-ckpt/1") {
        throw ValidationError("checkpoint: unsupported schema");
    }
    if (header_json) *header_json = header.dump();
    std::size_t li = 1;
    std::size_t filled = 0;
    while (li + 2 < lines.size() + 1 && li < lines.size()) {
        const std::string& name = lines[li];
        if (name.empty()) break;
        if (li + 2 >= lines.size()) throw ValidationError("checkpoint: truncated entry " + name);
        std::istringstream shape_ss(lines[li + 1]);
        std::size_t r = 0, c = 0;
        shape_ss >> r >> c;
        Parameter& p = params.get(name);
        if (p.value.rows != r || p.value.cols != c) {
            throw ValidationError("checkpoint: shape mismatch for " + name);
        }
        p.value.data = decode_f64_le(lines[li + 2], r * c);
        ++filled;
        li += 3;
    }
    if (filled != params.count()) {
        throw ValidationError("checkpoint: parameter count mismatch");
    }
}

} // namespace visaff::num
