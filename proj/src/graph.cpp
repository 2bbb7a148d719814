#include "cmsa/graph.hpp"

#include "cmsa/errors.hpp"

namespace cmsa {

template <typename T>
ParamStore<T>::ParamStore(const ParamStore& other) {
    for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter<T>>(*p));
    reindex();
}

template <typename T>
ParamStore<T>& ParamStore<T>::operator=(const ParamStore& other) {
    if (this != &other) {
        ParamStore copy(other);
        *this = std::move(copy);
    }
    return *this;
}

template <typename T>
Parameter<T>& ParamStore<T>::add(std::string name, BasicTensor<T> value, bool trainable) {
    if (index_.count(name)) throw UsageError("duplicate parameter '" + name + "'");
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = std::move(value);
    p->trainable = trainable;
    index_.emplace(std::move(name), params_.size());
    params_.push_back(std::move(p));
    return *params_.back();
}

template <typename T>
bool ParamStore<T>::contains(std::string_view name) const {
    return index_.count(std::string(name)) != 0;
}

template <typename T>
Parameter<T>& ParamStore<T>::get(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
    return *params_[it->second];
}

template <typename T>
const Parameter<T>& ParamStore<T>::get(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
    return *params_[it->second];
}

template <typename T>
void ParamStore<T>::erase(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
    params_.erase(params_.begin() + static_cast<std::ptrdiff_t>(it->second));
    reindex();
}

template <typename T>
void ParamStore<T>::reindex() {
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) index_.emplace(params_[i]->name, i);
}

template <typename T>
std::int64_t ParamStore<T>::learnable_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_)
        if (p->trainable) n += p->value.numel();
    return n;
}

template <typename T>
void ParamStore<T>::zero_grads() {
    for (auto& p : params_) {
        if (p->grad.shape() != p->value.shape()) {
            p->grad = BasicTensor<T>::zeros(p->value.shape());
        } else {
            std::fill(p->grad.data().begin(), p->grad.data().end(), T{0});
        }
    }
}

template <typename T>
Var<T> Graph<T>::push(Node node) {
    if (backward_done_) throw UsageError("graph already differentiated; build a new graph");
    nodes_.push_back(std::move(node));
    return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::constant(BasicTensor<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

template <typename T>
Var<T> Graph<T>::input(BasicTensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
}

template <typename T>
Var<T> Graph<T>::parameter(Parameter<T>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return Var<T>{this, it->second};
    Node n;
    n.value = p.value;
    n.requires_grad = p.trainable;
    n.param = &p;
    auto v = push(std::move(n));
    bound_.emplace(&p, v.id);
    return v;
}

template <typename T>
Var<T> Graph<T>::record(BasicTensor<T> value, std::vector<int> inputs, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    for (int i : inputs) {
        if (i < 0 || i >= static_cast<int>(nodes_.size())) throw UsageError("operand from a different graph");
        if (nodes_[static_cast<std::size_t>(i)].requires_grad) n.requires_grad = true;
    }
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
}

template <typename T>
BasicTensor<T>& Graph<T>::grad_buffer(int id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = BasicTensor<T>::zeros(n.value.shape());
    return n.grad;
}

template <typename T>
BasicTensor<T> Graph<T>::grad(Var<T> v) const {
    const auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.empty()) return BasicTensor<T>::zeros(n.value.shape());
    return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss, bool release) {
    if (loss.graph != this) throw UsageError("backward: loss belongs to a different graph");
    if (value(loss.id).numel() != 1) {
        throw UsageError("backward requires a scalar loss, got shape " + shape_str(value(loss.id).shape()));
    }
    if (backward_done_) throw UsageError("backward called twice on the same graph");
    backward_done_ = true;
    grad_buffer(loss.id)[0] = T{1};
    for (int id = loss.id; id >= 0; --id) {
        auto& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.backward) continue;
        if (!n.grad.empty()) n.backward(*this, id);
        if (release) {
            n.backward = nullptr;
            n.grad = BasicTensor<T>();
            n.value = BasicTensor<T>();
        }
    }
}

template <typename T>
void Graph<T>::accumulate_parameter_grads() {
    for (auto& n : nodes_) {
        if (!n.param || n.grad.empty() || !n.param->trainable) continue;
        auto& g = n.param->grad;
        if (g.shape() != n.value.shape()) g = BasicTensor<T>::zeros(n.value.shape());
        auto dst = g.data();
        auto src = n.grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace cmsa
