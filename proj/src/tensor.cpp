#include "visprior/tensor.hpp"

#include <cmath>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vp {

bool Tensor::all_finite() const {
    for (float v : *data)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::check_finite(const std::string& tag) const {
    for (size_t i = 0; i < data->size(); ++i) {
        if (!std::isfinite((*data)[i]))
            throw std::runtime_error("non-finite value in " + tag + " at index " + std::to_string(i));
    }
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(Tensor& loss) {
    VP_CHECK(loss.numel() == 1, "backward(): loss must be scalar");
    VP_CHECK(loss.node || loss.requires_grad, "backward(): loss does not depend on any parameter");

    // Topological order over nodes, then run in reverse.
    std::vector<Tensor*> order;
    std::vector<Tensor*> stack;
    std::unordered_set<Node*> seen;
    std::unordered_set<Node*> done;
    stack.push_back(&loss);
    while (!stack.empty()) {
        Tensor* t = stack.back();
        Node* n = t->node.get();
        if (!n || done.count(n)) {
            stack.pop_back();
            continue;
        }
        if (seen.count(n)) {
            stack.pop_back();
            done.insert(n);
            order.push_back(t);
            continue;
        }
        seen.insert(n);
        for (auto& p : n->parents)
            if (p.node && !done.count(p.node.get())) stack.push_back(&p);
    }

    loss.ensure_grad();
    (*loss.grad)[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* t = *it;
        if (t->grad && t->node->backward) t->node->backward(*t);
    }
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
#ifdef _OPENMP
    int nt = omp_get_max_threads();
    if (nt > 1 && n > 1) {
        int chunks = nt;
#pragma omp parallel for schedule(static, 1)
        for (int c = 0; c < chunks; ++c) {
            int64_t lo = n * c / chunks;
            int64_t hi = n * (c + 1) / chunks;
            if (lo < hi) fn(lo, hi);
        }
        return;
    }
#endif
    fn(0, n);
}

} // namespace vp
