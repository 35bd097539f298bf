#pragma once

// Tape-based reverse-mode differentiation. A Var is a tensor value plus an
// optional node on a Tape; ops that see at least one tracked input record an
// adjoint closure, ops on detached inputs record nothing. The tape is rebuilt
// for every forward pass.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "punet/tensor.hpp"

namespace punet {

using NodeId = std::uint32_t;

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tensor<T> value;
    std::optional<NodeId> node;
    Tape<T>* tape = nullptr;

    Var() = default;
    explicit Var(Tensor<T> v) : value(std::move(v)) {}
    Var(Tensor<T> v, NodeId id, Tape<T>* t) : value(std::move(v)), node(id), tape(t) {}

    const Shape& shape() const { return value.shape(); }
    bool tracked() const { return node.has_value(); }
    void detach() {
        node.reset();
        tape = nullptr;
    }
};

/// Receives input adjoints from a node's backward rule.
template <typename T>
class GradAccumulator {
  public:
    explicit GradAccumulator(std::vector<std::optional<Tensor<T>>>& grads) : grads_(grads) {}

    void add(std::optional<NodeId> id, Tensor<T> g) {
        if (!id) {
            return;
        }
        auto& slot = grads_[*id];
        if (!slot) {
            slot = std::move(g);
            return;
        }
        if (slot->shape() != g.shape()) {
            throw ShapeError("backward", "adjoint shape " + g.shape().str() + " vs " +
                                             slot->shape().str());
        }
        for (Index i = 0; i < g.numel(); ++i) {
            (*slot)[i] += g[i];
        }
    }

  private:
    std::vector<std::optional<Tensor<T>>>& grads_;
};

template <typename T>
class Tape {
  public:
    using Backward = std::function<void(const Tensor<T>& grad_out, GradAccumulator<T>& acc)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// New tracked leaf holding `value`.
    Var<T> leaf(Tensor<T> value) {
        NodeId id = push({});
        return Var<T>(std::move(value), id, this);
    }

    /// Turns an existing Var into a leaf of this tape in place.
    void track(Var<T>& v) {
        v.node = push({});
        v.tape = this;
    }

    NodeId record(Backward fn) { return push(std::move(fn)); }

    std::size_t size() const { return nodes_.size(); }
    const Backward& rule(NodeId id) const { return nodes_[id]; }

  private:
    NodeId push(Backward fn) {
        nodes_.push_back(std::move(fn));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    std::vector<Backward> nodes_;
};

/// Adjoints keyed by node id. Nodes the loss does not depend on have no entry.
template <typename T>
class Gradients {
  public:
    explicit Gradients(std::vector<std::optional<Tensor<T>>> grads) : grads_(std::move(grads)) {}

    const Tensor<T>* find(NodeId id) const {
        if (id >= grads_.size() || !grads_[id]) {
            return nullptr;
        }
        return &*grads_[id];
    }
    const Tensor<T>* find(const Var<T>& v) const { return v.node ? find(*v.node) : nullptr; }

    const Tensor<T>& at(const Var<T>& v) const {
        const Tensor<T>* g = find(v);
        if (!g) {
            throw std::out_of_range("no gradient recorded for this variable");
        }
        return *g;
    }

    bool contains(NodeId id) const { return find(id) != nullptr; }

  private:
    std::vector<std::optional<Tensor<T>>> grads_;
};

/// Replays adjoint rules from `loss` back to the leaves.
template <typename T>
Gradients<T> backward(const Tape<T>& tape, const Var<T>& loss) {
    if (loss.value.numel() != 1) {
        throw ShapeError("backward", "loss must be a scalar, got " + loss.shape().str());
    }
    if (!loss.node || loss.tape != &tape) {
        throw std::invalid_argument("backward: loss is not recorded on this tape");
    }
    std::vector<std::optional<Tensor<T>>> grads(tape.size());
    grads[*loss.node] = Tensor<T>(loss.shape(), T(1));
    GradAccumulator<T> acc(grads);
    for (std::int64_t id = *loss.node; id >= 0; --id) {
        const auto& rule = tape.rule(static_cast<NodeId>(id));
        if (!grads[id] || !rule) {
            continue;
        }
        // Copy out: the rule may accumulate into other slots of `grads`.
        Tensor<T> g = *grads[id];
        rule(g, acc);
    }
    return Gradients<T>(std::move(grads));
}

namespace detail {

template <typename T>
Tape<T>* common_tape(std::initializer_list<const Var<T>*> inputs, const char* op) {
    Tape<T>* tape = nullptr;
    for (const Var<T>* v : inputs) {
        if (v == nullptr || !v->node) {
            continue;
        }
        if (tape != nullptr && v->tape != tape) {
            throw std::invalid_argument(std::string(op) + ": inputs recorded on different tapes");
        }
        tape = v->tape;
    }
    return tape;
}

template <typename T>
Tape<T>* common_tape(const std::vector<Var<T>>& inputs, const char* op) {
    Tape<T>* tape = nullptr;
    for (const Var<T>& v : inputs) {
        if (!v.node) {
            continue;
        }
        if (tape != nullptr && v.tape != tape) {
            throw std::invalid_argument(std::string(op) + ": inputs recorded on different tapes");
        }
        tape = v.tape;
    }
    return tape;
}

/// Wraps an op result. `make_backward` is only invoked when some input is
/// tracked, so detached (inference) passes save no context.
template <typename T, typename MakeBackward>
Var<T> emit(const char* op, Tensor<T> out, Tape<T>* tape, MakeBackward&& make_backward) {
    check_finite(op, out);
    if (tape == nullptr) {
        return Var<T>(std::move(out));
    }
    NodeId id = tape->record(make_backward());
    return Var<T>(std::move(out), id, tape);
}

}  // namespace detail

}  // namespace punet
