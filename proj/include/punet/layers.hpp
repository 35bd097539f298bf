#pragma once

// Parameter containers shared by the network modules, their initializers,
// and a visitor interface used for naming, checkpointing, optimization and
// precision casts.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "punet/autodiff.hpp"
#include "punet/ops.hpp"
#include "punet/rng.hpp"
#include "punet/tensor.hpp"

namespace punet {

template <typename T>
struct Conv {
    Var<T> weight;  // (c_out, c_in, k, k)
    Var<T> bias;    // (c_out)
    Conv2dOptions opt;

    Index c_out() const { return weight.shape().n; }
    Index c_in() const { return weight.shape().c; }
    Index kernel() const { return weight.shape().h; }
};

template <typename T>
struct Linear {
    Var<T> weight;  // (out, in)
    Var<T> bias;    // (out)

    Index out_features() const { return weight.shape().h; }
    Index in_features() const { return weight.shape().w; }
};

template <typename T>
struct LayerNormParams {
    Var<T> gamma;
    Var<T> beta;
    double eps = 1e-5;
};

template <typename T>
struct BatchNormParams {
    Var<T> gamma;
    Var<T> beta;
    BnState<T> state;
};

/// Kaiming fan-in normal weights (std sqrt(2 / fan_in)), zero bias.
/// Padding defaults to dilation * (k - 1) / 2.
template <typename T>
Conv<T> make_conv(Rng& rng, Index c_in, Index c_out, Index k, int stride = 1, int dilation = 1);

/// Normal weights with std sqrt(1 / fan_in), zero bias.
template <typename T>
Linear<T> make_linear(Rng& rng, Index in, Index out);

template <typename T>
LayerNormParams<T> make_layer_norm(Index d, double eps = 1e-5);

/// gamma = 1, beta = 0, running mean 0, running var 1.
template <typename T>
BatchNormParams<T> make_batch_norm(Index c);

template <typename T>
Var<T> apply(const Conv<T>& p, const Var<T>& x) {
    return conv2d(x, p.weight, p.bias, p.opt);
}

template <typename T>
Var<T> apply(const Linear<T>& p, const Var<T>& x) {
    return linear(x, p.weight, p.bias);
}

template <typename T>
Var<T> apply(const LayerNormParams<T>& p, const Var<T>& x) {
    return layer_norm(x, p.gamma, p.beta, p.eps);
}

template <typename T>
Var<T> apply(BatchNormParams<T>& p, const Var<T>& x, const BnOptions& opt) {
    return batch_norm(x, p.gamma, p.beta, p.state, opt);
}

/// Receives every trainable parameter and every persistent buffer of a
/// module tree, in a fixed traversal order.
template <typename T>
class ParamVisitor {
  public:
    virtual ~ParamVisitor() = default;
    virtual void param(const std::string& name, Var<T>& v) = 0;
    virtual void buffer(const std::string& name, Tensor<T>& t) = 0;
};

template <typename T>
class FnVisitor : public ParamVisitor<T> {
  public:
    using ParamFn = std::function<void(const std::string&, Var<T>&)>;
    using BufferFn = std::function<void(const std::string&, Tensor<T>&)>;

    explicit FnVisitor(ParamFn p, BufferFn b = {}) : p_(std::move(p)), b_(std::move(b)) {}
    void param(const std::string& name, Var<T>& v) override {
        if (p_) p_(name, v);
    }
    void buffer(const std::string& name, Tensor<T>& t) override {
        if (b_) b_(name, t);
    }

  private:
    ParamFn p_;
    BufferFn b_;
};

template <typename T>
void visit(Conv<T>& p, const std::string& prefix, ParamVisitor<T>& v) {
    v.param(prefix + ".weight", p.weight);
    v.param(prefix + ".bias", p.bias);
}

template <typename T>
void visit(Linear<T>& p, const std::string& prefix, ParamVisitor<T>& v) {
    v.param(prefix + ".weight", p.weight);
    v.param(prefix + ".bias", p.bias);
}

template <typename T>
void visit(LayerNormParams<T>& p, const std::string& prefix, ParamVisitor<T>& v) {
    v.param(prefix + ".gamma", p.gamma);
    v.param(prefix + ".beta", p.beta);
}

template <typename T>
void visit(BatchNormParams<T>& p, const std::string& prefix, ParamVisitor<T>& v) {
    v.param(prefix + ".gamma", p.gamma);
    v.param(prefix + ".beta", p.beta);
    v.buffer(prefix + ".running_mean", p.state.running_mean);
    v.buffer(prefix + ".running_var", p.state.running_var);
}

/// Makes every parameter of `p` a leaf on `tape`.
template <typename T, typename P>
void track_params(P& p, Tape<T>& tape) {
    FnVisitor<T> fv([&](const std::string&, Var<T>& v) { tape.track(v); });
    visit(p, std::string(), fv);
}

template <typename T, typename P>
void detach_params(P& p) {
    FnVisitor<T> fv([](const std::string&, Var<T>& v) { v.detach(); });
    visit(p, std::string(), fv);
}

struct NamedEntry {
    std::string name;
    bool trainable = false;
};

/// Names of parameters and buffers in traversal order.
template <typename T, typename P>
std::vector<NamedEntry> list_entries(P& p, const std::string& prefix = std::string()) {
    std::vector<NamedEntry> out;
    FnVisitor<T> fv([&](const std::string& n, Var<T>&) { out.push_back({n, true}); },
                    [&](const std::string& n, Tensor<T>&) { out.push_back({n, false}); });
    visit(p, prefix, fv);
    return out;
}

/// Number of trainable scalars.
template <typename T, typename P>
Index count_params(P& p) {
    Index total = 0;
    FnVisitor<T> fv([&](const std::string&, Var<T>& v) { total += v.value.numel(); });
    visit(p, std::string(), fv);
    return total;
}

/// Copies every parameter and buffer of `src` into the identically
/// structured `dst`, converting precision. Throws on structural mismatch.
template <typename S, typename D, typename PS, typename PD>
void copy_params(PS& src, PD& dst) {
    std::vector<std::pair<std::string, Tensor<S>>> values;
    FnVisitor<S> collect(
        [&](const std::string& n, Var<S>& v) { values.emplace_back(n, v.value); },
        [&](const std::string& n, Tensor<S>& t) { values.emplace_back(n, t); });
    visit(src, std::string(), collect);
    std::size_t i = 0;
    auto take = [&](const std::string& n, Tensor<D>& t) {
        if (i >= values.size() || values[i].first != n ||
            values[i].second.shape() != t.shape()) {
            throw std::invalid_argument("copy_params: structure mismatch at " + n);
        }
        t = values[i].second.template cast<D>();
        ++i;
    };
    FnVisitor<D> assign([&](const std::string& n, Var<D>& v) { take(n, v.value); },
                        [&](const std::string& n, Tensor<D>& t) { take(n, t); });
    visit(dst, std::string(), assign);
    if (i != values.size()) {
        throw std::invalid_argument("copy_params: source has extra entries");
    }
}

}  // namespace punet
