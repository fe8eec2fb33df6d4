#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "visprior/rng.hpp"

namespace vp {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

#define VP_CHECK(cond, msg)                                        \
    do {                                                           \
        if (!(cond)) throw std::runtime_error(std::string(msg));   \
    } while (0)

struct Node;

// Dense float32 tensor with an optional autodiff node. Copies share the
// underlying buffers; clone() makes them independent.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<float>> data;
    std::shared_ptr<std::vector<float>> grad;
    bool requires_grad = false;
    std::shared_ptr<Node> node;

    Tensor() = default;

    static Tensor zeros(const Shape& s, bool rg = false) {
        Tensor t;
        t.shape = s;
        t.data = std::make_shared<std::vector<float>>(count(s), 0.0f);
        t.requires_grad = rg;
        if (rg) t.ensure_grad();
        return t;
    }

    static Tensor full(const Shape& s, float v, bool rg = false) {
        Tensor t = zeros(s, rg);
        for (auto& x : *t.data) x = v;
        return t;
    }
    static Tensor from_vector(const Shape& s, const std::vector<float>& v, bool rg = false) {
        VP_CHECK(count(s) == v.size(), "tensor: value count does not match shape " + shape_str(s));
        Tensor t;
        t.shape = s;
        t.data = std::make_shared<std::vector<float>>(v);
        t.requires_grad = rg;
        if (rg) t.ensure_grad();
        return t;
    }
    static Tensor scalar(float v) { return from_vector({1}, {v}); }
    static Tensor randn(const Shape& s, Rng& rng, float std_dev = 1.0f, bool rg = false) {
        Tensor t = zeros(s, rg);
        for (auto& x : *t.data) x = rng.normalf() * std_dev;
        return t;
    }
    static Tensor trunc_normal(const Shape& s, Rng& rng, float std_dev, bool rg = false) {
        Tensor t = zeros(s, rg);
        for (auto& x : *t.data) x = rng.trunc_normalf(std_dev);
        return t;
    }

    static size_t count(const Shape& s) {
        size_t n = 1;
        for (int d : s) {
            VP_CHECK(d > 0, "tensor: nonpositive extent in shape " + shape_str(s));
            n *= size_t(d);
        }
        return n;
    }

    size_t numel() const { return data ? data->size() : 0; }
    int rank() const { return int(shape.size()); }
    int dim(int i) const { return shape[size_t(i)]; }
    bool defined() const { return bool(data); }

    float* ptr() { return data->data(); }
    const float* ptr() const { return data->data(); }
    float& operator[](size_t i) { return (*data)[i]; }
    float operator[](size_t i) const { return (*data)[i]; }

    float item() const {
        VP_CHECK(numel() == 1, "item(): tensor has " + std::to_string(numel()) + " elements");
        return (*data)[0];
    }

    void ensure_grad() {
        if (!grad) grad = std::make_shared<std::vector<float>>(numel(), 0.0f);
    }
    void zero_grad() {
        if (grad)
            for (auto& g : *grad) g = 0.0f;
    }

    // Deep copy of values; no node, grad not carried over.
    Tensor clone() const {
        Tensor t;
        t.shape = shape;
        t.data = std::make_shared<std::vector<float>>(*data);
        t.requires_grad = requires_grad;
        if (requires_grad) t.ensure_grad();
        return t;
    }

    // Same buffers, no autodiff history.
    Tensor detach() const {
        Tensor t;
        t.shape = shape;
        t.data = data;
        return t;
    }

    bool all_finite() const;
    void check_finite(const std::string& tag) const;
};

struct Node {
    std::vector<Tensor> parents;
    std::function<void(Tensor&)> backward; // accumulates into parents' grads
};

// --- autodiff mode ---------------------------------------------------------

bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// True when the op output should carry a node.
inline bool track(const Tensor& a) { return grad_enabled() && a.requires_grad; }
inline bool track(const Tensor& a, const Tensor& b) {
    return grad_enabled() && (a.requires_grad || b.requires_grad);
}

// Reverse pass from a scalar loss through the recorded graph.
void backward(Tensor& loss);

// --- named parameters ------------------------------------------------------

// Insertion-ordered name -> Tensor map. Iteration order is the construction
// sequence, which is what makes optimizer state, checkpoints and checksums
// stable across runs.
class ParameterStore {
public:
    Tensor& add(const std::string& name, Tensor t) {
        VP_CHECK(!by_name_.count(name), "ParameterStore: duplicate parameter '" + name + "'");
        order_.push_back(name);
        auto [it, ok] = by_name_.emplace(name, std::move(t));
        (void)ok;
        return it->second;
    }
    bool has(const std::string& name) const { return by_name_.count(name) > 0; }
    Tensor& get(const std::string& name) {
        auto it = by_name_.find(name);
        VP_CHECK(it != by_name_.end(), "ParameterStore: no parameter '" + name + "'");
        return it->second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = by_name_.find(name);
        VP_CHECK(it != by_name_.end(), "ParameterStore: no parameter '" + name + "'");
        return it->second;
    }
    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }
    size_t total_elements() const {
        size_t n = 0;
        for (const auto& name : order_) n += by_name_.at(name).numel();
        return n;
    }

    void zero_grads() {
        for (const auto& name : order_) by_name_.at(name).zero_grad();
    }

    // Independent copy of every tensor (fresh buffers).
    ParameterStore clone() const {
        ParameterStore out;
        for (const auto& name : order_) out.add(name, by_name_.at(name).clone());
        return out;
    }

    // Store whose data buffers alias this store's grad buffers.
    ParameterStore grads() const {
        ParameterStore out;
        for (const auto& name : order_) {
            const Tensor& p = by_name_.at(name);
            VP_CHECK(p.grad, "grads(): parameter '" + name + "' has no gradient buffer");
            Tensor g;
            g.shape = p.shape;
            g.data = p.grad;
            out.add(name, g);
        }
        return out;
    }

    // Copy values from an aligned store (same names and shapes).
    void copy_values_from(const ParameterStore& src) {
        for (const auto& name : order_) {
            Tensor& dst = by_name_.at(name);
            const Tensor& s = src.get(name);
            VP_CHECK(s.shape == dst.shape, "copy_values_from: shape mismatch at '" + name + "'");
            *dst.data = *s.data;
        }
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> by_name_;
};

// --- parallel helper -------------------------------------------------------

// Static split over [0, n); each index is processed by exactly one worker,
// so results are bitwise identical for any thread count.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

} // namespace vp
