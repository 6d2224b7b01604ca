#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace visaff::num {

// Dense row-major 2-d tensor of doubles. Scalars are 1x1, row vectors 1xn.
struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    Tensor(std::size_t r, std::size_t c, std::vector<double> d);

    static Tensor scalar(double v);
    static Tensor row(std::vector<double> v);

    std::size_t size() const { return rows * cols; }
    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    double item() const; // requires 1x1
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
    bool all_finite() const;
};

class Tape;

// Lightweight handle to a node on a tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
    const Tensor& value() const;
    const Tensor& grad() const;
    Tape* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

// Reverse-mode tape. One tape per forward/backward pass, single-threaded.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Tape&, const Tensor&)> backprop; // receives this node's grad
    };

    Var leaf(Tensor value, bool requires_grad);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // Seeds d(output)/d(output) = 1 and propagates to every reachable leaf.
    // Accumulation across reuse is summation. Throws on non-scalar output.
    void backward(const Var& output);

    std::size_t size() const { return nodes_.size(); }
    Node& node(std::size_t id) { return nodes_[id]; }
    const Node& node(std::size_t id) const { return nodes_[id]; }

    Var make(Tensor value, bool requires_grad, std::function<void(Tape&, const Tensor&)> fn);
    void accumulate(std::size_t id, const Tensor& g);

private:
    std::vector<Node> nodes_;
};

// ---- differentiable primitives ----

Var matmul(const Var& a, const Var& b);    // [m,k]x[k,n] -> [m,n]
Var matmul_nt(const Var& a, const Var& b); // a * b^T: [m,k]x[n,k] -> [m,n]
Var add(const Var& a, const Var& b);       // same shape
Var add_bias(const Var& a, const Var& b);  // [m,n] + [1,n], broadcast over rows
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b); // elementwise
Var scale(const Var& a, double s);
Var mul_const(const Var& a, const Tensor& w);              // elementwise by constant
Var row_scale(const Var& a, const std::vector<double>& s); // row i scaled by s[i]
Var scale_by_var(const Var& a, const Var& s);              // s is 1x1
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t r0, std::size_t r1);
Var row(const Var& a, std::size_t i);
Var element(const Var& a, std::size_t r, std::size_t c); // 1x1 gather
Var relu(const Var& a);
Var tanh_op(const Var& a);
// Row-wise softmax; mask (if given) is 0/1 with at least one 1 per row, and
// masked-out entries get exactly zero weight.
Var softmax_rows(const Var& a, const Tensor* mask = nullptr);
Var logsumexp_rows(const Var& a, const Tensor* mask = nullptr); // [m,1]
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var weighted_sum(const Var& a, const Tensor& w); // sum(a o w), scalar
Var l2_normalize_rows(const Var& a);
// Mean over rows of -log softmax(logits_i)[labels_i]; stable log-sum-exp form.
Var cross_entropy_mean(const Var& logits, const std::vector<int>& labels);

// ---- plain (non-tape) numeric helpers ----

// Max-subtracted softmax with temperature; components sum to 1 within 1e-12.
std::vector<double> softmax(std::span<const double> x, double temperature = 1.0);
double cross_entropy(std::span<const double> logits, int label);
std::size_t argmax_index(std::span<const double> x); // ties -> lowest index

// ---- parameters ----

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter(std::string n, Tensor v) : name(std::move(n)), value(v), grad(v.rows, v.cols) {}
};

// Ordered parameter collection; registration order defines the checkpoint and
// optimizer traversal order.
class ParamStore {
public:
    Parameter& add(const std::string& name, Tensor init);
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::size_t count() const { return params_.size(); }
    Parameter& at(std::size_t i) { return params_[i]; }
    const Parameter& at(std::size_t i) const { return params_[i]; }
    void zero_grad();
    std::size_t total_entries() const;

private:
    std::vector<Parameter> params_;
};

// Connects ParamStore entries to leaf nodes for one tape, and harvests the
// node gradients back into Parameter::grad after backward().
class ParamBinding {
public:
    explicit ParamBinding(ParamStore& store) : store_(&store) {}
    Var use(Tape& tape, const std::string& name);
    void accumulate_grads(const Tape& tape);

private:
    ParamStore* store_;
    std::vector<std::pair<std::size_t, std::size_t>> bound_; // (param idx, node id)
};

// Builds the scalar output from current parameter values on a fresh tape.
using ScalarFn = std::function<double(const ParamStore&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_entry;
};

// Central finite differences over every parameter entry:
// |analytic - fd| / max(1, |fd|), maximized.
GradCheckReport grad_check(const ScalarFn& f,
                           const std::function<void(ParamStore&)>& compute_grads,
                           ParamStore& params, double eps);

// Checkpoint format: one JSON header line, then per parameter a name line, a
// shape line ("rows cols") and a base64 line of little-endian f64 data.
std::string serialize_params(const ParamStore& params, const std::string& extra_header_json = "");
void deserialize_params(const std::string& text, ParamStore& params,
                        std::string* header_json = nullptr);

} // namespace visaff::num
