#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <deque>
#include <unordered_map>
#include <vector>

#include "cmsa/tensor.hpp"

namespace cmsa {

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    int id = -1;

    const BasicTensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    std::int64_t dim(int axis) const { return value().dim(axis); }
};

/// A named learnable (or state) tensor with its accumulated gradient.
template <typename T>
struct Parameter {
    std::string name;
    BasicTensor<T> value;
    BasicTensor<T> grad;
    /// False for running statistics: saved and restored, never optimized or counted.
    bool trainable = true;
};

/// Ordered collection of parameters with stable addresses.
template <typename T>
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore& other);
    ParamStore& operator=(const ParamStore& other);
    ParamStore(ParamStore&&) noexcept = default;
    ParamStore& operator=(ParamStore&&) noexcept = default;

    Parameter<T>& add(std::string name, BasicTensor<T> value, bool trainable = true);
    bool contains(std::string_view name) const;
    Parameter<T>& get(std::string_view name);
    const Parameter<T>& get(std::string_view name) const;
    void erase(std::string_view name);

    std::size_t size() const noexcept { return params_.size(); }
    Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
    const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

    /// Number of trainable scalars.
    std::int64_t learnable_count() const;
    void zero_grads();

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& p : params_) out.add(p->name, p->value.template cast<U>(), p->trainable);
        return out;
    }

private:
    void reindex();

    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so every node's
/// inputs precede it. One graph is built and differentiated by one thread.
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, int self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Leaf that never receives a gradient.
    Var<T> constant(BasicTensor<T> value);
    /// Leaf that receives a gradient (differentiable input).
    Var<T> input(BasicTensor<T> value);
    /// Leaf bound to a parameter; its gradient is added to `p.grad` by
    /// accumulate_parameter_grads(). Binding the same parameter twice returns
    /// the same node.
    Var<T> parameter(Parameter<T>& p);

    /// Appends an operation result. `inputs` are the operand ids; `fn` is
    /// dropped when no operand requires a gradient.
    Var<T> record(BasicTensor<T> value, std::vector<int> inputs, BackwardFn fn);

    /// With `release`, each intermediate node drops its value, gradient and
    /// saved state as soon as it has propagated; only leaves and parameters
    /// stay readable afterwards.
    void backward(Var<T> loss, bool release = false);
    void accumulate_parameter_grads();

    const BasicTensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    /// Gradient of a node after backward(); zeros when it received none.
    BasicTensor<T> grad(Var<T> v) const;
    /// Mutable gradient buffer used by backward functions, allocated lazily.
    BasicTensor<T>& grad_buffer(int id);
    bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }
    const BasicTensor<T>& grad_ref(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<int>& inputs_of(int id) const { return nodes_[static_cast<std::size_t>(id)].inputs; }

private:
    struct Node {
        BasicTensor<T> value;
        BasicTensor<T> grad;
        std::vector<int> inputs;
        BackwardFn backward;
        Parameter<T>* param = nullptr;
        bool requires_grad = false;
    };

    Var<T> push(Node node);

    std::deque<Node> nodes_;
    std::unordered_map<const Parameter<T>*, int> bound_;
    bool backward_done_ = false;
};

template <typename T>
const BasicTensor<T>& Var<T>::value() const {
    return graph->value(id);
}

/// Resolves parameter names under a prefix to graph nodes.
template <typename T>
class Binder {
public:
    Binder(Graph<T>& graph, ParamStore<T>& store) : graph_(graph), store_(store) {}

    Var<T> operator()(std::string_view name) { return graph_.parameter(store_.get(name)); }
    Parameter<T>& raw(std::string_view name) { return store_.get(name); }
    bool has(std::string_view name) const { return store_.contains(name); }
    Graph<T>& graph() { return graph_; }
    ParamStore<T>& store() { return store_; }

private:
    Graph<T>& graph_;
    ParamStore<T>& store_;
};

}  // namespace cmsa
