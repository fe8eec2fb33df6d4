#include "visprior/ops.hpp"

#include <cmath>
#include <cstring>

namespace vp {

namespace {

Tensor make_out(const Shape& s, bool tracked) { return Tensor::zeros(s, tracked); }

void attach(Tensor& out, std::vector<Tensor> parents, std::function<void(Tensor&)> bw) {
    out.node = std::make_shared<Node>();
    out.node->parents = std::move(parents);
    out.node->backward = std::move(bw);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    VP_CHECK(a.shape == b.shape,
             std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

inline size_t rows_of(const Tensor& x) { return x.numel() / size_t(x.shape.back()); }

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    bool tr = track(a, b);
    Tensor out = make_out(a.shape, tr);
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
    if (tr) attach(out, {a, b}, [](Tensor& o) {
        Tensor& a = o.node->parents[0];
        Tensor& b = o.node->parents[1];
        const size_t n = o.numel();
        if (a.requires_grad)
            for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i];
        if (b.requires_grad)
            for (size_t i = 0; i < n; ++i) (*b.grad)[i] += (*o.grad)[i];
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    bool tr = track(a, b);
    Tensor out = make_out(a.shape, tr);
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
    if (tr) attach(out, {a, b}, [](Tensor& o) {
        Tensor& a = o.node->parents[0];
        Tensor& b = o.node->parents[1];
        const size_t n = o.numel();
        if (a.requires_grad)
            for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i];
        if (b.requires_grad)
            for (size_t i = 0; i < n; ++i) (*b.grad)[i] -= (*o.grad)[i];
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    bool tr = track(a, b);
    Tensor out = make_out(a.shape, tr);
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
    if (tr) attach(out, {a, b}, [](Tensor& o) {
        Tensor& a = o.node->parents[0];
        Tensor& b = o.node->parents[1];
        const size_t n = o.numel();
        if (a.requires_grad)
            for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i] * (*b.data)[i];
        if (b.requires_grad)
            for (size_t i = 0; i < n; ++i) (*b.grad)[i] += (*o.grad)[i] * (*a.data)[i];
    });
    return out;
}

Tensor scale(const Tensor& a, float s) {
    bool tr = track(a);
    Tensor out = make_out(a.shape, tr);
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * s;
    if (tr) attach(out, {a}, [s](Tensor& o) {
        Tensor& a = o.node->parents[0];
        if (!a.requires_grad) return;
        const size_t n = o.numel();
        for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i] * s;
    });
    return out;
}

Tensor add_scalar(const Tensor& a, float s) {
    bool tr = track(a);
    Tensor out = make_out(a.shape, tr);
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + s;
    if (tr) attach(out, {a}, [](Tensor& o) {
        Tensor& a = o.node->parents[0];
        if (!a.requires_grad) return;
        const size_t n = o.numel();
        for (size_t i = 0; i < n; ++i) (*a.grad)[i] += (*o.grad)[i];
    });
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b) {
    VP_CHECK(w.rank() == 2, "linear: weight must be rank 2");
    const int in = w.dim(0), out_dim = w.dim(1);
    VP_CHECK(x.shape.back() == in, "linear: input dim " + std::to_string(x.shape.back()) +
                                       " != weight in dim " + std::to_string(in));
    if (b) VP_CHECK(b->rank() == 1 && b->dim(0) == out_dim, "linear: bias shape mismatch");

    const int64_t rows = int64_t(rows_of(x));
    Shape os = x.shape;
    os.back() = out_dim;
    bool tr = b ? (track(x, w) || track(*b)) : track(x, w);
    Tensor out = make_out(os, tr);

    const float* xp = x.ptr();
    const float* wp = w.ptr();
    const float* bp = b ? b->ptr() : nullptr;
    float* op = out.ptr();
    parallel_for(rows, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            float* orow = op + r * out_dim;
            if (bp)
                std::memcpy(orow, bp, sizeof(float) * size_t(out_dim));
            const float* xrow = xp + r * in;
            for (int i = 0; i < in; ++i) {
                const float xv = xrow[i];
                if (xv == 0.0f) continue;
                const float* wrow = wp + size_t(i) * out_dim;
                for (int o = 0; o < out_dim; ++o) orow[o] += xv * wrow[o];
            }
        }
    });

    if (tr) {
        std::vector<Tensor> parents = {x, w};
        if (b) parents.push_back(*b);
        attach(out, std::move(parents), [in, out_dim, rows](Tensor& o) {
            Tensor& x = o.node->parents[0];
            Tensor& w = o.node->parents[1];
            Tensor* b = o.node->parents.size() > 2 ? &o.node->parents[2] : nullptr;
            const float* gp = o.grad->data();
            if (x.requires_grad) {
                float* dx = x.grad->data();
                const float* wp = w.ptr();
                parallel_for(rows, [&](int64_t lo, int64_t hi) {
                    for (int64_t r = lo; r < hi; ++r) {
                        const float* grow = gp + r * out_dim;
                        float* dxrow = dx + r * in;
                        for (int i = 0; i < in; ++i) {
                            const float* wrow = wp + size_t(i) * out_dim;
                            float acc = 0.0f;
                            for (int o = 0; o < out_dim; ++o) acc += grow[o] * wrow[o];
                            dxrow[i] += acc;
                        }
                    }
                });
            }
            if (w.requires_grad) {
                float* dw = w.grad->data();
                const float* xp = x.ptr();
                parallel_for(in, [&](int64_t ilo, int64_t ihi) {
                    for (int64_t r = 0; r < rows; ++r) {
                        const float* grow = gp + r * out_dim;
                        const float* xrow = xp + r * in;
                        for (int64_t i = ilo; i < ihi; ++i) {
                            const float xv = xrow[i];
                            if (xv == 0.0f) continue;
                            float* dwrow = dw + size_t(i) * out_dim;
                            for (int o = 0; o < out_dim; ++o) dwrow[o] += xv * grow[o];
                        }
                    }
                });
            }
            if (b && b->requires_grad) {
                float* db = b->grad->data();
                for (int64_t r = 0; r < rows; ++r) {
                    const float* grow = gp + r * out_dim;
                    for (int o = 0; o < out_dim; ++o) db[o] += grow[o];
                }
            }
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    VP_CHECK(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
    VP_CHECK(a.dim(1) == b.dim(0), "matmul: inner dims disagree");
    return linear(a, b, nullptr);
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
    VP_CHECK(b.rank() == 1 && b.dim(0) == x.shape.back(), "add_bias: bias shape mismatch");
    const int d = x.shape.back();
    const int64_t rows = int64_t(rows_of(x));
    bool tr = track(x, b);
    Tensor out = make_out(x.shape, tr);
    for (int64_t r = 0; r < rows; ++r)
        for (int i = 0; i < d; ++i) (*out.data)[r * d + i] = (*x.data)[r * d + i] + (*b.data)[i];
    if (tr) attach(out, {x, b}, [d, rows](Tensor& o) {
        Tensor& x = o.node->parents[0];
        Tensor& b = o.node->parents[1];
        if (x.requires_grad)
            for (size_t i = 0; i < o.numel(); ++i) (*x.grad)[i] += (*o.grad)[i];
        if (b.requires_grad)
            for (int64_t r = 0; r < rows; ++r)
                for (int i = 0; i < d; ++i) (*b.grad)[i] += (*o.grad)[r * d + i];
    });
    return out;
}

Tensor add_rows(const Tensor& x, const Tensor& r) {
    VP_CHECK(x.rank() == 3 && r.rank() == 2, "add_rows: want [B,N,D] and [N,D]");
    VP_CHECK(x.dim(1) == r.dim(0) && x.dim(2) == r.dim(1), "add_rows: row shape mismatch");
    const int bsz = x.dim(0);
    const size_t nd = size_t(x.dim(1)) * size_t(x.dim(2));
    bool tr = track(x, r);
    Tensor out = make_out(x.shape, tr);
    for (int b = 0; b < bsz; ++b)
        for (size_t i = 0; i < nd; ++i) (*out.data)[b * nd + i] = (*x.data)[b * nd + i] + (*r.data)[i];
    if (tr) attach(out, {x, r}, [bsz, nd](Tensor& o) {
        Tensor& x = o.node->parents[0];
        Tensor& r = o.node->parents[1];
        if (x.requires_grad)
            for (size_t i = 0; i < o.numel(); ++i) (*x.grad)[i] += (*o.grad)[i];
        if (r.requires_grad)
            for (int b = 0; b < bsz; ++b)
                for (size_t i = 0; i < nd; ++i) (*r.grad)[i] += (*o.grad)[b * nd + i];
    });
    return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 std::shared_ptr<std::vector<float>>* attn_out) {
    VP_CHECK(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: want [B,N,D] operands");
    const int B = q.dim(0), nq = q.dim(1), d = q.dim(2);
    const int nk = k.dim(1);
    VP_CHECK(k.dim(0) == B && v.dim(0) == B, "attention: batch mismatch");
    VP_CHECK(k.dim(2) == d && v.dim(2) == d && v.dim(1) == nk, "attention: kv shape mismatch");
    VP_CHECK(heads >= 1 && d % heads == 0,
             "attention: model dim " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
    const int dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(double(dh));

    bool tr = track(q, k) || track(v);
    Tensor out = make_out(q.shape, tr);
    auto weights = std::make_shared<std::vector<float>>(size_t(B) * heads * nq * nk);

    const float* qp = q.ptr();
    const float* kp = k.ptr();
    const float* vp = v.ptr();
    float* op = out.ptr();
    float* ap = weights->data();

    parallel_for(int64_t(B) * heads, [&](int64_t lo, int64_t hi) {
        std::vector<double> s(static_cast<size_t>(nk));
        std::vector<double> oacc(static_cast<size_t>(dh));
        for (int64_t bh = lo; bh < hi; ++bh) {
            const int b = int(bh / heads), h = int(bh % heads);
            const float* qb = qp + size_t(b) * nq * d + size_t(h) * dh;
            const float* kb = kp + size_t(b) * nk * d + size_t(h) * dh;
            const float* vb = vp + size_t(b) * nk * d + size_t(h) * dh;
            float* arow = ap + size_t(bh) * nq * nk;
            for (int i = 0; i < nq; ++i) {
                // logits + stable softmax, double accumulation so the result
                // is invariant to key permutation up to f32 rounding
                double mx = -1e300;
                const float* qr = qb + size_t(i) * d;
                for (int j = 0; j < nk; ++j) {
                    double acc = 0.0;
                    const float* kr = kb + size_t(j) * d;
                    for (int e = 0; e < dh; ++e) acc += double(qr[e]) * double(kr[e]);
                    s[size_t(j)] = acc * inv_sqrt;
                    if (s[size_t(j)] > mx) mx = s[size_t(j)];
                }
                double z = 0.0;
                for (int j = 0; j < nk; ++j) {
                    s[size_t(j)] = std::exp(s[size_t(j)] - mx);
                    z += s[size_t(j)];
                }
                float* aout = arow + size_t(i) * nk;
                for (int j = 0; j < nk; ++j) aout[j] = float(s[size_t(j)] / z);
                std::fill(oacc.begin(), oacc.end(), 0.0);
                for (int j = 0; j < nk; ++j) {
                    const double a = double(aout[j]);
                    const float* vr = vb + size_t(j) * d;
                    for (int e = 0; e < dh; ++e) oacc[size_t(e)] += a * double(vr[e]);
                }
                float* orow = op + size_t(b) * nq * d + size_t(i) * d + size_t(h) * dh;
                for (int e = 0; e < dh; ++e) orow[e] = float(oacc[size_t(e)]);
            }
        }
    });

    if (attn_out) *attn_out = weights;

    if (tr) attach(out, {q, k, v}, [B, nq, nk, d, heads, dh, inv_sqrt, weights](Tensor& o) {
        Tensor& q = o.node->parents[0];
        Tensor& k = o.node->parents[1];
        Tensor& v = o.node->parents[2];
        const float* gp = o.grad->data();
        const float* qp = q.ptr();
        const float* kp = k.ptr();
        const float* vp = v.ptr();
        const float* ap = weights->data();
        float* dq = q.requires_grad ? q.grad->data() : nullptr;
        float* dk = k.requires_grad ? k.grad->data() : nullptr;
        float* dv = v.requires_grad ? v.grad->data() : nullptr;
        parallel_for(int64_t(B) * heads, [&](int64_t lo, int64_t hi) {
            std::vector<double> da(size_t(nq) * nk), ds(size_t(nq) * nk);
            for (int64_t bh = lo; bh < hi; ++bh) {
                const int b = int(bh / heads), h = int(bh % heads);
                const float* qb = qp + size_t(b) * nq * d + size_t(h) * dh;
                const float* kb = kp + size_t(b) * nk * d + size_t(h) * dh;
                const float* vb = vp + size_t(b) * nk * d + size_t(h) * dh;
                const float* arow = ap + size_t(bh) * nq * nk;
                const float* gb = gp + size_t(b) * nq * d + size_t(h) * dh;
                // dA = dO V^T ; dS = A o (dA - rowsum(dA o A))
                for (int i = 0; i < nq; ++i) {
                    for (int j = 0; j < nk; ++j) {
                        double acc = 0.0;
                        for (int e = 0; e < dh; ++e)
                            acc += double(gb[size_t(i) * d + e]) * double(vb[size_t(j) * d + e]);
                        da[size_t(i) * nk + j] = acc;
                    }
                    double dot = 0.0;
                    for (int j = 0; j < nk; ++j)
                        dot += da[size_t(i) * nk + j] * double(arow[size_t(i) * nk + j]);
                    for (int j = 0; j < nk; ++j)
                        ds[size_t(i) * nk + j] =
                            double(arow[size_t(i) * nk + j]) * (da[size_t(i) * nk + j] - dot);
                }
                if (dv) {
                    float* dvb = dv + size_t(b) * nk * d + size_t(h) * dh;
                    for (int j = 0; j < nk; ++j)
                        for (int e = 0; e < dh; ++e) {
                            double acc = 0.0;
                            for (int i = 0; i < nq; ++i)
                                acc += double(arow[size_t(i) * nk + j]) * double(gb[size_t(i) * d + e]);
                            dvb[size_t(j) * d + e] += float(acc);
                        }
                }
                if (dq) {
                    float* dqb = dq + size_t(b) * nq * d + size_t(h) * dh;
                    for (int i = 0; i < nq; ++i)
                        for (int e = 0; e < dh; ++e) {
                            double acc = 0.0;
                            for (int j = 0; j < nk; ++j)
                                acc += ds[size_t(i) * nk + j] * double(kb[size_t(j) * d + e]);
                            dqb[size_t(i) * d + e] += float(acc * inv_sqrt);
                        }
                }
                if (dk) {
                    float* dkb = dk + size_t(b) * nk * d + size_t(h) * dh;
                    for (int j = 0; j < nk; ++j)
                        for (int e = 0; e < dh; ++e) {
                            double acc = 0.0;
                            for (int i = 0; i < nq; ++i)
                                acc += ds[size_t(i) * nk + j] * double(qb[size_t(i) * d + e]);
                            dkb[size_t(j) * d + e] += float(acc * inv_sqrt);
                        }
                }
            }
        });
    });
    return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    const int d = x.shape.back();
    VP_CHECK(gamma.rank() == 1 && gamma.dim(0) == d, "layernorm: gamma shape mismatch");
    VP_CHECK(beta.rank() == 1 && beta.dim(0) == d, "layernorm: beta shape mismatch");
    const int64_t rows = int64_t(rows_of(x));
    bool tr = track(x, gamma) || track(beta);
    Tensor out = make_out(x.shape, tr);
    // cache normalized values and inverse std for backward
    auto xhat = std::make_shared<std::vector<float>>(x.numel());
    auto istd = std::make_shared<std::vector<float>>(size_t(rows));

    const float* xp = x.ptr();
    float* op = out.ptr();
    parallel_for(rows, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            const float* xr = xp + r * d;
            double mean = 0.0;
            for (int i = 0; i < d; ++i) mean += xr[i];
            mean /= d;
            double var = 0.0;
            for (int i = 0; i < d; ++i) {
                double c = xr[i] - mean;
                var += c * c;
            }
            var /= d;
            const double is = 1.0 / std::sqrt(var + double(eps));
            (*istd)[size_t(r)] = float(is);
            for (int i = 0; i < d; ++i) {
                float xh = float((xr[i] - mean) * is);
                (*xhat)[size_t(r) * d + i] = xh;
                op[r * d + i] = xh * (*gamma.data)[i] + (*beta.data)[i];
            }
        }
    });

    if (tr) attach(out, {x, gamma, beta}, [d, rows, xhat, istd](Tensor& o) {
        Tensor& x = o.node->parents[0];
        Tensor& gamma = o.node->parents[1];
        Tensor& beta = o.node->parents[2];
        const float* gp = o.grad->data();
        if (x.requires_grad) {
            float* dx = x.grad->data();
            const float* gm = gamma.ptr();
            parallel_for(rows, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    const float* grow = gp + r * d;
                    const float* xh = xhat->data() + r * d;
                    double m1 = 0.0, m2 = 0.0;
                    for (int i = 0; i < d; ++i) {
                        const double gy = double(grow[i]) * double(gm[i]);
                        m1 += gy;
                        m2 += gy * double(xh[i]);
                    }
                    m1 /= d;
                    m2 /= d;
                    const double is = double((*istd)[size_t(r)]);
                    for (int i = 0; i < d; ++i) {
                        const double gy = double(grow[i]) * double(gm[i]);
                        dx[r * d + i] += float(is * (gy - m1 - double(xh[i]) * m2));
                    }
                }
            });
        }
        if (gamma.requires_grad) {
            float* dg = gamma.grad->data();
            for (int64_t r = 0; r < rows; ++r)
                for (int i = 0; i < d; ++i) dg[i] += gp[r * d + i] * (*xhat)[size_t(r) * d + i];
        }
        if (beta.requires_grad) {
            float* db = beta.grad->data();
            for (int64_t r = 0; r < rows; ++r)
                for (int i = 0; i < d; ++i) db[i] += gp[r * d + i];
        }
    });
    return out;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;
} // namespace

Tensor gelu(const Tensor& x) {
    bool tr = track(x);
    Tensor out = make_out(x.shape, tr);
    const size_t n = x.numel();
    for (size_t i = 0; i < n; ++i) {
        double v = double((*x.data)[i]);
        (*out.data)[i] = float(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
    }
    if (tr) attach(out, {x}, [](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        const size_t n = o.numel();
        for (size_t i = 0; i < n; ++i) {
            double v = double((*x.data)[i]);
            double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            (*x.grad)[i] += (*o.grad)[i] * float(cdf + v * pdf);
        }
    });
    return out;
}

Tensor silu(const Tensor& x) {
    bool tr = track(x);
    Tensor out = make_out(x.shape, tr);
    const size_t n = x.numel();
    for (size_t i = 0; i < n; ++i) {
        double v = double((*x.data)[i]);
        (*out.data)[i] = float(v / (1.0 + std::exp(-v)));
    }
    if (tr) attach(out, {x}, [](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        const size_t n = o.numel();
        for (size_t i = 0; i < n; ++i) {
            double v = double((*x.data)[i]);
            double s = 1.0 / (1.0 + std::exp(-v));
            (*x.grad)[i] += (*o.grad)[i] * float(s * (1.0 + v * (1.0 - s)));
        }
    });
    return out;
}

Tensor tanh_act(const Tensor& x) {
    bool tr = track(x);
    Tensor out = make_out(x.shape, tr);
    const size_t n = x.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = std::tanh((*x.data)[i]);
    if (tr) attach(out, {x}, [](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        const size_t n = o.numel();
        for (size_t i = 0; i < n; ++i) {
            float y = (*o.data)[i];
            (*x.grad)[i] += (*o.grad)[i] * (1.0f - y * y);
        }
    });
    return out;
}

Tensor exp_act(const Tensor& x) {
    bool tr = track(x);
    Tensor out = make_out(x.shape, tr);
    const size_t n = x.numel();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = std::exp((*x.data)[i]);
    if (tr) attach(out, {x}, [](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        const size_t n = o.numel();
        for (size_t i = 0; i < n; ++i) (*x.grad)[i] += (*o.grad)[i] * (*o.data)[i];
    });
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    const int d = x.shape.back();
    const int64_t rows = int64_t(rows_of(x));
    bool tr = track(x);
    Tensor out = make_out(x.shape, tr);
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = x.ptr() + r * d;
        float* yr = out.ptr() + r * d;
        double mx = -1e300;
        for (int i = 0; i < d; ++i) mx = std::max(mx, double(xr[i]));
        double z = 0.0;
        std::vector<double> e(static_cast<size_t>(d));
        for (int i = 0; i < d; ++i) {
            e[size_t(i)] = std::exp(double(xr[i]) - mx);
            z += e[size_t(i)];
        }
        for (int i = 0; i < d; ++i) yr[i] = float(e[size_t(i)] / z);
    }
    if (tr) attach(out, {x}, [d, rows](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        for (int64_t r = 0; r < rows; ++r) {
            const float* yr = o.ptr() + r * d;
            const float* gr = o.grad->data() + r * d;
            double dot = 0.0;
            for (int i = 0; i < d; ++i) dot += double(gr[i]) * double(yr[i]);
            for (int i = 0; i < d; ++i)
                (*x.grad)[size_t(r) * d + i] += float(double(yr[i]) * (double(gr[i]) - dot));
        }
    });
    return out;
}

Tensor log_softmax_rows(const Tensor& x) {
    const int d = x.shape.back();
    const int64_t rows = int64_t(rows_of(x));
    bool tr = track(x);
    Tensor out = make_out(x.shape, tr);
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = x.ptr() + r * d;
        float* yr = out.ptr() + r * d;
        double mx = -1e300;
        for (int i = 0; i < d; ++i) mx = std::max(mx, double(xr[i]));
        double z = 0.0;
        for (int i = 0; i < d; ++i) z += std::exp(double(xr[i]) - mx);
        const double lz = std::log(z) + mx;
        for (int i = 0; i < d; ++i) yr[i] = float(double(xr[i]) - lz);
    }
    if (tr) attach(out, {x}, [d, rows](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        for (int64_t r = 0; r < rows; ++r) {
            const float* yr = o.ptr() + r * d;
            const float* gr = o.grad->data() + r * d;
            double gsum = 0.0;
            for (int i = 0; i < d; ++i) gsum += double(gr[i]);
            for (int i = 0; i < d; ++i)
                (*x.grad)[size_t(r) * d + i] += float(double(gr[i]) - std::exp(double(yr[i])) * gsum);
        }
    });
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, int stride, int pad) {
    VP_CHECK(x.rank() == 4 && w.rank() == 4, "conv2d: want x [B,C,H,W], w [O,C,kh,kw]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    VP_CHECK(w.dim(1) == C, "conv2d: channel mismatch");
    VP_CHECK(stride >= 1, "conv2d: bad stride");
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    VP_CHECK(OH > 0 && OW > 0, "conv2d: kernel larger than padded input");
    if (b) VP_CHECK(b->rank() == 1 && b->dim(0) == O, "conv2d: bias shape mismatch");

    bool tr = b ? (track(x, w) || track(*b)) : track(x, w);
    Tensor out = make_out({B, O, OH, OW}, tr);
    const float* xp = x.ptr();
    const float* wp = w.ptr();
    float* op = out.ptr();

    parallel_for(int64_t(B) * O, [&](int64_t lo, int64_t hi) {
        for (int64_t bo = lo; bo < hi; ++bo) {
            const int bb = int(bo / O), o = int(bo % O);
            const float bias = b ? (*b->data)[o] : 0.0f;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    float acc = bias;
                    for (int c = 0; c < C; ++c) {
                        const float* xc = xp + (size_t(bb) * C + c) * H * W;
                        const float* wc = wp + (size_t(o) * C + c) * kh * kw;
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= W) continue;
                                acc += xc[size_t(iy) * W + ix] * wc[size_t(ky) * kw + kx];
                            }
                        }
                    }
                    op[(size_t(bb) * O + o) * OH * OW + size_t(oy) * OW + ox] = acc;
                }
        }
    });

    if (tr) {
        std::vector<Tensor> parents = {x, w};
        if (b) parents.push_back(*b);
        attach(out, std::move(parents), [B, C, H, W, O, kh, kw, OH, OW, stride, pad](Tensor& out) {
            Tensor& x = out.node->parents[0];
            Tensor& w = out.node->parents[1];
            Tensor* b = out.node->parents.size() > 2 ? &out.node->parents[2] : nullptr;
            const float* gp = out.grad->data();
            const float* xp = x.ptr();
            const float* wp = w.ptr();
            if (x.requires_grad) {
                float* dx = x.grad->data();
                parallel_for(B, [&](int64_t lo, int64_t hi) {
                    for (int64_t bb = lo; bb < hi; ++bb)
                        for (int o = 0; o < O; ++o)
                            for (int oy = 0; oy < OH; ++oy)
                                for (int ox = 0; ox < OW; ++ox) {
                                    const float g =
                                        gp[(size_t(bb) * O + o) * OH * OW + size_t(oy) * OW + ox];
                                    if (g == 0.0f) continue;
                                    for (int c = 0; c < C; ++c) {
                                        float* dxc = dx + (size_t(bb) * C + c) * H * W;
                                        const float* wc = wp + (size_t(o) * C + c) * kh * kw;
                                        for (int ky = 0; ky < kh; ++ky) {
                                            const int iy = oy * stride - pad + ky;
                                            if (iy < 0 || iy >= H) continue;
                                            for (int kx = 0; kx < kw; ++kx) {
                                                const int ix = ox * stride - pad + kx;
                                                if (ix < 0 || ix >= W) continue;
                                                dxc[size_t(iy) * W + ix] += g * wc[size_t(ky) * kw + kx];
                                            }
                                        }
                                    }
                                }
                });
            }
            if (w.requires_grad) {
                float* dw = w.grad->data();
                parallel_for(O, [&](int64_t lo, int64_t hi) {
                    for (int64_t o = lo; o < hi; ++o)
                        for (int bb = 0; bb < B; ++bb)
                            for (int oy = 0; oy < OH; ++oy)
                                for (int ox = 0; ox < OW; ++ox) {
                                    const float g =
                                        gp[(size_t(bb) * O + o) * OH * OW + size_t(oy) * OW + ox];
                                    if (g == 0.0f) continue;
                                    for (int c = 0; c < C; ++c) {
                                        const float* xc = xp + (size_t(bb) * C + c) * H * W;
                                        float* dwc = dw + (size_t(o) * C + c) * kh * kw;
                                        for (int ky = 0; ky < kh; ++ky) {
                                            const int iy = oy * stride - pad + ky;
                                            if (iy < 0 || iy >= H) continue;
                                            for (int kx = 0; kx < kw; ++kx) {
                                                const int ix = ox * stride - pad + kx;
                                                if (ix < 0 || ix >= W) continue;
                                                dwc[size_t(ky) * kw + kx] += g * xc[size_t(iy) * W + ix];
                                            }
                                        }
                                    }
                                }
                });
            }
            if (b && b->requires_grad) {
                float* db = b->grad->data();
                for (int bb = 0; bb < B; ++bb)
                    for (int o = 0; o < O; ++o) {
                        double acc = 0.0;
                        const float* g = gp + (size_t(bb) * O + o) * OH * OW;
                        for (int i = 0; i < OH * OW; ++i) acc += g[i];
                        db[o] += float(acc);
                    }
            }
        });
    }
    return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
    VP_CHECK(x.rank() == 4, "upsample_nearest2x: want [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    bool tr = track(x);
    Tensor out = make_out({B, C, 2 * H, 2 * W}, tr);
    for (int bc = 0; bc < B * C; ++bc) {
        const float* xc = x.ptr() + size_t(bc) * H * W;
        float* oc = out.ptr() + size_t(bc) * 4 * H * W;
        for (int y = 0; y < 2 * H; ++y)
            for (int xw = 0; xw < 2 * W; ++xw) oc[size_t(y) * 2 * W + xw] = xc[size_t(y / 2) * W + xw / 2];
    }
    if (tr) attach(out, {x}, [B, C, H, W](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        for (int bc = 0; bc < B * C; ++bc) {
            float* dxc = x.grad->data() + size_t(bc) * H * W;
            const float* gc = o.grad->data() + size_t(bc) * 4 * H * W;
            for (int y = 0; y < 2 * H; ++y)
                for (int xw = 0; xw < 2 * W; ++xw) dxc[size_t(y / 2) * W + xw / 2] += gc[size_t(y) * 2 * W + xw];
        }
    });
    return out;
}

namespace {
// spatial index shared by patchify / unpatchify (channel offset in caller)
inline size_t pix_index(int gy, int gx, int py, int px, int W, int p) {
    return size_t(gy * p + py) * W + size_t(gx * p + px);
}
} // namespace

Tensor patchify(const Tensor& x, int p) {
    VP_CHECK(x.rank() == 4, "patchify: want [B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    VP_CHECK(p >= 1 && H % p == 0 && W % p == 0,
             "patchify: side " + std::to_string(H) + "x" + std::to_string(W) + " not divisible by patch " +
                 std::to_string(p));
    const int gh = H / p, gw = W / p;
    const int P = gh * gw, td = C * p * p;
    bool tr = track(x);
    Tensor out = make_out({B, P, td}, tr);
    for (int b = 0; b < B; ++b)
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                float* tok = out.ptr() + (size_t(b) * P + size_t(gy) * gw + gx) * td;
                for (int c = 0; c < C; ++c) {
                    const float* xc = x.ptr() + (size_t(b) * C + c) * H * W;
                    for (int py = 0; py < p; ++py)
                        for (int px = 0; px < p; ++px)
                            tok[(size_t(c) * p + py) * p + px] = xc[pix_index(gy, gx, py, px, W, p)];
                }
            }
    if (tr) attach(out, {x}, [B, C, H, W, p, gh, gw, P, td](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        for (int b = 0; b < B; ++b)
            for (int gy = 0; gy < gh; ++gy)
                for (int gx = 0; gx < gw; ++gx) {
                    const float* gt = o.grad->data() + (size_t(b) * P + size_t(gy) * gw + gx) * td;
                    for (int c = 0; c < C; ++c) {
                        float* dxc = x.grad->data() + (size_t(b) * C + c) * H * W;
                        for (int py = 0; py < p; ++py)
                            for (int px = 0; px < p; ++px)
                                dxc[pix_index(gy, gx, py, px, W, p)] += gt[(size_t(c) * p + py) * p + px];
                    }
                }
    });
    return out;
}

Tensor unpatchify(const Tensor& tokens, int c, int h, int w, int p) {
    VP_CHECK(tokens.rank() == 3, "unpatchify: want [B,P,td]");
    const int B = tokens.dim(0), P = tokens.dim(1), td = tokens.dim(2);
    VP_CHECK(h % p == 0 && w % p == 0, "unpatchify: side not divisible by patch");
    const int gh = h / p, gw = w / p;
    VP_CHECK(P == gh * gw && td == c * p * p, "unpatchify: token layout mismatch");
    bool tr = track(tokens);
    Tensor out = make_out({B, c, h, w}, tr);
    for (int b = 0; b < B; ++b)
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                const float* tok = tokens.ptr() + (size_t(b) * P + size_t(gy) * gw + gx) * td;
                for (int ci = 0; ci < c; ++ci) {
                    float* oc = out.ptr() + (size_t(b) * c + ci) * h * w;
                    for (int py = 0; py < p; ++py)
                        for (int px = 0; px < p; ++px)
                            oc[pix_index(gy, gx, py, px, w, p)] = tok[(size_t(ci) * p + py) * p + px];
                }
            }
    if (tr) attach(out, {tokens}, [B, c, h, w, p, gh, gw, P, td](Tensor& o) {
        Tensor& t = o.node->parents[0];
        if (!t.requires_grad) return;
        for (int b = 0; b < B; ++b)
            for (int gy = 0; gy < gh; ++gy)
                for (int gx = 0; gx < gw; ++gx) {
                    float* gt = t.grad->data() + (size_t(b) * P + size_t(gy) * gw + gx) * td;
                    for (int ci = 0; ci < c; ++ci) {
                        const float* gc = o.grad->data() + (size_t(b) * c + ci) * h * w;
                        for (int py = 0; py < p; ++py)
                            for (int px = 0; px < p; ++px)
                                gt[(size_t(ci) * p + py) * p + px] += gc[pix_index(gy, gx, py, px, w, p)];
                    }
                }
    });
    return out;
}

Tensor concat_tokens(const Tensor& a, const Tensor& b) {
    VP_CHECK(a.rank() == 3 && b.rank() == 3, "concat_tokens: want [B,N,D]");
    VP_CHECK(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2), "concat_tokens: batch/dim mismatch");
    const int B = a.dim(0), na = a.dim(1), nb = b.dim(1), d = a.dim(2);
    bool tr = track(a, b);
    Tensor out = make_out({B, na + nb, d}, tr);
    for (int bb = 0; bb < B; ++bb) {
        std::memcpy(out.ptr() + size_t(bb) * (na + nb) * d, a.ptr() + size_t(bb) * na * d,
                    sizeof(float) * size_t(na) * d);
        std::memcpy(out.ptr() + (size_t(bb) * (na + nb) + na) * d, b.ptr() + size_t(bb) * nb * d,
                    sizeof(float) * size_t(nb) * d);
    }
    if (tr) attach(out, {a, b}, [B, na, nb, d](Tensor& o) {
        Tensor& a = o.node->parents[0];
        Tensor& b = o.node->parents[1];
        for (int bb = 0; bb < B; ++bb) {
            const float* g = o.grad->data() + size_t(bb) * (na + nb) * d;
            if (a.requires_grad) {
                float* da = a.grad->data() + size_t(bb) * na * d;
                for (size_t i = 0; i < size_t(na) * d; ++i) da[i] += g[i];
            }
            if (b.requires_grad) {
                float* db = b.grad->data() + size_t(bb) * nb * d;
                for (size_t i = 0; i < size_t(nb) * d; ++i) db[i] += g[size_t(na) * d + i];
            }
        }
    });
    return out;
}

Tensor slice_tokens(const Tensor& x, int start, int len) {
    VP_CHECK(x.rank() == 3, "slice_tokens: want [B,N,D]");
    const int B = x.dim(0), N = x.dim(1), d = x.dim(2);
    VP_CHECK(start >= 0 && len > 0 && start + len <= N, "slice_tokens: bad range");
    bool tr = track(x);
    Tensor out = make_out({B, len, d}, tr);
    for (int b = 0; b < B; ++b)
        std::memcpy(out.ptr() + size_t(b) * len * d, x.ptr() + (size_t(b) * N + start) * d,
                    sizeof(float) * size_t(len) * d);
    if (tr) attach(out, {x}, [B, N, d, start, len](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        for (int b = 0; b < B; ++b) {
            float* dx = x.grad->data() + (size_t(b) * N + start) * d;
            const float* g = o.grad->data() + size_t(b) * len * d;
            for (size_t i = 0; i < size_t(len) * d; ++i) dx[i] += g[i];
        }
    });
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    VP_CHECK(a.rank() == 4 && b.rank() == 4, "concat_channels: want [B,C,H,W]");
    VP_CHECK(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
             "concat_channels: shape mismatch");
    const int B = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    bool tr = track(a, b);
    Tensor out = make_out({B, ca + cb, a.dim(2), a.dim(3)}, tr);
    for (int bb = 0; bb < B; ++bb) {
        std::memcpy(out.ptr() + size_t(bb) * (ca + cb) * hw, a.ptr() + size_t(bb) * ca * hw,
                    sizeof(float) * size_t(ca) * hw);
        std::memcpy(out.ptr() + (size_t(bb) * (ca + cb) + ca) * hw, b.ptr() + size_t(bb) * cb * hw,
                    sizeof(float) * size_t(cb) * hw);
    }
    if (tr) attach(out, {a, b}, [B, ca, cb, hw](Tensor& o) {
        Tensor& a = o.node->parents[0];
        Tensor& b = o.node->parents[1];
        for (int bb = 0; bb < B; ++bb) {
            const float* g = o.grad->data() + size_t(bb) * (ca + cb) * hw;
            if (a.requires_grad) {
                float* da = a.grad->data() + size_t(bb) * ca * hw;
                for (size_t i = 0; i < size_t(ca) * hw; ++i) da[i] += g[i];
            }
            if (b.requires_grad) {
                float* db = b.grad->data() + size_t(bb) * cb * hw;
                for (size_t i = 0; i < size_t(cb) * hw; ++i) db[i] += g[size_t(ca) * hw + i];
            }
        }
    });
    return out;
}

Tensor slice_dim0(const Tensor& x, int start, int len) {
    VP_CHECK(x.rank() >= 1, "slice_dim0: scalar input");
    const int n0 = x.dim(0);
    VP_CHECK(start >= 0 && len > 0 && start + len <= n0, "slice_dim0: bad range");
    const size_t inner = x.numel() / size_t(n0);
    Shape os = x.shape;
    os[0] = len;
    bool tr = track(x);
    Tensor out = make_out(os, tr);
    std::memcpy(out.ptr(), x.ptr() + size_t(start) * inner, sizeof(float) * size_t(len) * inner);
    if (tr) attach(out, {x}, [start, len, inner](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        float* dx = x.grad->data() + size_t(start) * inner;
        const float* g = o.grad->data();
        for (size_t i = 0; i < size_t(len) * inner; ++i) dx[i] += g[i];
    });
    return out;
}

Tensor embedding(const std::vector<int>& ids, int b, int l, const Tensor& table) {
    VP_CHECK(table.rank() == 2, "embedding: table must be [V,D]");
    VP_CHECK(int(ids.size()) == b * l, "embedding: id count mismatch");
    const int V = table.dim(0), d = table.dim(1);
    for (int id : ids) VP_CHECK(id >= 0 && id < V, "embedding: id out of range");
    bool tr = track(table);
    Tensor out = make_out({b, l, d}, tr);
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.ptr() + i * d, table.ptr() + size_t(ids[i]) * d, sizeof(float) * size_t(d));
    if (tr) attach(out, {table}, [ids, d](Tensor& o) {
        Tensor& t = o.node->parents[0];
        if (!t.requires_grad) return;
        for (size_t i = 0; i < ids.size(); ++i) {
            float* dt = t.grad->data() + size_t(ids[i]) * d;
            const float* g = o.grad->data() + i * d;
            for (int j = 0; j < d; ++j) dt[j] += g[j];
        }
    });
    return out;
}

Tensor sum_all(const Tensor& x) {
    bool tr = track(x);
    double acc = 0.0;
    for (float v : *x.data) acc += v;
    Tensor out = Tensor::from_vector({1}, {float(acc)}, tr);
    if (tr) attach(out, {x}, [](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        const float g = (*o.grad)[0];
        for (auto& dx : *x.grad) dx += g;
    });
    return out;
}

Tensor mean_all(const Tensor& x) {
    const float inv = 1.0f / float(x.numel());
    return scale(sum_all(x), inv);
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mse");
    bool tr = track(a, b);
    const size_t n = a.numel();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double d = double((*a.data)[i]) - double((*b.data)[i]);
        acc += d * d;
    }
    Tensor out = Tensor::from_vector({1}, {float(acc / double(n))}, tr);
    if (tr) attach(out, {a, b}, [n](Tensor& o) {
        Tensor& a = o.node->parents[0];
        Tensor& b = o.node->parents[1];
        const float g = (*o.grad)[0] * 2.0f / float(n);
        for (size_t i = 0; i < n; ++i) {
            const float d = (*a.data)[i] - (*b.data)[i];
            if (a.requires_grad) (*a.grad)[i] += g * d;
            if (b.requires_grad) (*b.grad)[i] -= g * d;
        }
    });
    return out;
}

Tensor mean_tokens(const Tensor& x) {
    VP_CHECK(x.rank() == 3, "mean_tokens: want [B,N,D]");
    const int B = x.dim(0), N = x.dim(1), d = x.dim(2);
    bool tr = track(x);
    Tensor out = make_out({B, d}, tr);
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < d; ++i) {
            double acc = 0.0;
            for (int n = 0; n < N; ++n) acc += (*x.data)[(size_t(b) * N + n) * d + i];
            (*out.data)[size_t(b) * d + i] = float(acc / N);
        }
    if (tr) attach(out, {x}, [B, N, d](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        for (int b = 0; b < B; ++b)
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < d; ++i)
                    (*x.grad)[(size_t(b) * N + n) * d + i] += (*o.grad)[size_t(b) * d + i] / float(N);
    });
    return out;
}

Tensor affine_tokens(const Tensor& x, const Tensor& sc, const Tensor& sh) {
    VP_CHECK(x.rank() == 3 && sc.rank() == 2 && sh.rank() == 2, "affine_tokens: want x[B,N,D], sc/sh[B,D]");
    const int B = x.dim(0), N = x.dim(1), d = x.dim(2);
    VP_CHECK(sc.dim(0) == B && sc.dim(1) == d && sh.dim(0) == B && sh.dim(1) == d,
             "affine_tokens: modulation shape mismatch");
    bool tr = track(x, sc) || track(sh);
    Tensor out = make_out(x.shape, tr);
    for (int b = 0; b < B; ++b)
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < d; ++i) {
                const size_t xi = (size_t(b) * N + n) * d + i;
                (*out.data)[xi] =
                    (*x.data)[xi] * (1.0f + (*sc.data)[size_t(b) * d + i]) + (*sh.data)[size_t(b) * d + i];
            }
    if (tr) attach(out, {x, sc, sh}, [B, N, d](Tensor& o) {
        Tensor& x = o.node->parents[0];
        Tensor& sc = o.node->parents[1];
        Tensor& sh = o.node->parents[2];
        for (int b = 0; b < B; ++b)
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < d; ++i) {
                    const size_t xi = (size_t(b) * N + n) * d + i;
                    const size_t si = size_t(b) * d + i;
                    const float g = (*o.grad)[xi];
                    if (x.requires_grad) (*x.grad)[xi] += g * (1.0f + (*sc.data)[si]);
                    if (sc.requires_grad) (*sc.grad)[si] += g * (*x.data)[xi];
                    if (sh.requires_grad) (*sh.grad)[si] += g;
                }
    });
    return out;
}

Tensor gate_tokens(const Tensor& x, const Tensor& g) {
    VP_CHECK(x.rank() == 3 && g.rank() == 2, "gate_tokens: want x[B,N,D], g[B,D]");
    const int B = x.dim(0), N = x.dim(1), d = x.dim(2);
    VP_CHECK(g.dim(0) == B && g.dim(1) == d, "gate_tokens: gate shape mismatch");
    bool tr = track(x, g);
    Tensor out = make_out(x.shape, tr);
    for (int b = 0; b < B; ++b)
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < d; ++i) {
                const size_t xi = (size_t(b) * N + n) * d + i;
                (*out.data)[xi] = (*x.data)[xi] * (*g.data)[size_t(b) * d + i];
            }
    if (tr) attach(out, {x, g}, [B, N, d](Tensor& o) {
        Tensor& x = o.node->parents[0];
        Tensor& g = o.node->parents[1];
        for (int b = 0; b < B; ++b)
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < d; ++i) {
                    const size_t xi = (size_t(b) * N + n) * d + i;
                    const size_t gi = size_t(b) * d + i;
                    const float go = (*o.grad)[xi];
                    if (x.requires_grad) (*x.grad)[xi] += go * (*g.data)[gi];
                    if (g.requires_grad) (*g.grad)[gi] += go * (*x.data)[xi];
                }
    });
    return out;
}

Tensor slice_lastdim(const Tensor& x, int start, int len) {
    const int d = x.shape.back();
    VP_CHECK(start >= 0 && len > 0 && start + len <= d, "slice_lastdim: bad range");
    const int64_t rows = int64_t(rows_of(x));
    Shape os = x.shape;
    os.back() = len;
    bool tr = track(x);
    Tensor out = make_out(os, tr);
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(out.ptr() + r * len, x.ptr() + r * d + start, sizeof(float) * size_t(len));
    if (tr) attach(out, {x}, [d, rows, start, len](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        for (int64_t r = 0; r < rows; ++r)
            for (int i = 0; i < len; ++i) (*x.grad)[size_t(r) * d + start + i] += (*o.grad)[size_t(r) * len + i];
    });
    return out;
}

Tensor reshape(const Tensor& x, const Shape& s) {
    VP_CHECK(Tensor::count(s) == x.numel(), "reshape: element count mismatch");
    bool tr = track(x);
    Tensor out = make_out(s, tr);
    *out.data = *x.data;
    if (tr) attach(out, {x}, [](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        for (size_t i = 0; i < o.numel(); ++i) (*x.grad)[i] += (*o.grad)[i];
    });
    return out;
}

Tensor transpose_01(const Tensor& x) {
    VP_CHECK(x.rank() == 3, "transpose_01: want rank 3");
    const int A = x.dim(0), B = x.dim(1), d = x.dim(2);
    bool tr = track(x);
    Tensor out = make_out({B, A, d}, tr);
    for (int i = 0; i < A; ++i)
        for (int j = 0; j < B; ++j)
            std::memcpy(out.ptr() + (size_t(j) * A + i) * d, x.ptr() + (size_t(i) * B + j) * d,
                        sizeof(float) * size_t(d));
    if (tr) attach(out, {x}, [A, B, d](Tensor& o) {
        Tensor& x = o.node->parents[0];
        if (!x.requires_grad) return;
        for (int i = 0; i < A; ++i)
            for (int j = 0; j < B; ++j) {
                float* dx = x.grad->data() + (size_t(i) * B + j) * d;
                const float* g = o.grad->data() + (size_t(j) * A + i) * d;
                for (int e = 0; e < d; ++e) dx[e] += g[e];
            }
    });
    return out;
}

Tensor compose_condition(const Tensor& live, const Tensor& bank, const std::vector<char>& drop) {
    VP_CHECK(live.rank() == 3, "compose_condition: live must be [B,M,D]");
    VP_CHECK(bank.rank() == 2, "compose_condition: bank must be [maxM,D]");
    const int B = live.dim(0), M = live.dim(1), d = live.dim(2);
    VP_CHECK(bank.dim(1) == d, "compose_condition: dim mismatch");
    VP_CHECK(M <= bank.dim(0), "compose_condition: " + std::to_string(M) + " tokens exceed null bank size " +
                                   std::to_string(bank.dim(0)));
    VP_CHECK(int(drop.size()) == B, "compose_condition: mask size mismatch");
    bool tr = track(live, bank);
    Tensor out = make_out(live.shape, tr);
    for (int b = 0; b < B; ++b) {
        const float* src = drop[size_t(b)] ? bank.ptr() : live.ptr() + size_t(b) * M * d;
        std::memcpy(out.ptr() + size_t(b) * M * d, src, sizeof(float) * size_t(M) * d);
    }
    if (tr) attach(out, {live, bank}, [B, M, d, drop](Tensor& o) {
        Tensor& live = o.node->parents[0];
        Tensor& bank = o.node->parents[1];
        for (int b = 0; b < B; ++b) {
            const float* g = o.grad->data() + size_t(b) * M * d;
            if (drop[size_t(b)]) {
                if (!bank.requires_grad) continue;
                float* db = bank.grad->data();
                for (size_t i = 0; i < size_t(M) * d; ++i) db[i] += g[i];
            } else {
                if (!live.requires_grad) continue;
                float* dl = live.grad->data() + size_t(b) * M * d;
                for (size_t i = 0; i < size_t(M) * d; ++i) dl[i] += g[i];
            }
        }
    });
    return out;
}

} // namespace vp
