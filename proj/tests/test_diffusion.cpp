#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "visprior/diffusion.hpp"
#include "visprior/optim.hpp"
#include "visprior/sha256.hpp"

using namespace vp;

namespace {

BackboneConfig tiny_cfg() {
    BackboneConfig cfg;
    cfg.latent_side = 8;
    cfg.patch = 4;
    cfg.dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.cond_dim = 8;
    cfg.max_cond_tokens = 6;
    return cfg;
}

void randomize(ParameterStore& ps, uint64_t seed, float std_dev = 0.25f) {
    Rng rng(seed);
    for (const auto& name : ps.names())
        for (auto& v : *ps.get(name).data) v = rng.normalf() * std_dev;
}

bool bits_equal(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

} // namespace

TEST_CASE("make_schedule: terminal signal level, monotonicity, edge cases") {
    NoiseSchedule ns = make_schedule(1000, 1e-4f, 0.02f);
    // independent product in double as the oracle
    double prod = 1.0;
    for (int t = 0; t < 1000; ++t) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * t / 999.0);
    CHECK(double(ns.alpha_bar[999]) == doctest::Approx(prod).epsilon(1e-4));
    CHECK(ns.alpha_bar[999] < 0.01f);

    for (int t = 1; t < 1000; ++t) CHECK(ns.alpha_bar[size_t(t)] < ns.alpha_bar[size_t(t - 1)]);
    CHECK(ns.alpha_bar[0] == ns.alpha[0]);

    NoiseSchedule one = make_schedule(1, 0.1f, 0.1f);
    CHECK(one.alpha_bar[0] == doctest::Approx(1.0f - 0.1f));

    CHECK_THROWS(make_schedule(10, 0.0f, 0.02f));
    CHECK_THROWS(make_schedule(10, 0.03f, 0.02f));
    CHECK_THROWS(make_schedule(10, 0.5f, 1.0f));
}

TEST_CASE("q_sample: noiseless case, coefficient identity, Monte Carlo variance") {
    NoiseSchedule ns = make_schedule(1000);
    Rng rng(5);
    Tensor z0 = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor zero_eps = Tensor::zeros(z0.shape);
    Tensor zt = q_sample(z0, 300, zero_eps, ns);
    const float a = std::sqrt(ns.alpha_bar[300]);
    for (size_t i = 0; i < z0.numel(); ++i) CHECK(zt[i] == doctest::Approx(a * z0[i]));

    for (int t = 0; t < 1000; t += 13) {
        const double c1 = std::sqrt(double(ns.alpha_bar[size_t(t)]));
        const double c2 = std::sqrt(1.0 - double(ns.alpha_bar[size_t(t)]));
        CHECK(c1 * c1 + c2 * c2 == doctest::Approx(1.0).epsilon(1e-6));
    }

    // a hundred thousand scalar draws at z0 = 0: Var[z_t] ~ 1 - abar_t
    const int t_mc = 500;
    const int n = 100000;
    Tensor z0s = Tensor::zeros({n});
    Tensor eps = Tensor::zeros({n});
    Rng mc(99);
    for (int i = 0; i < n; ++i) eps[size_t(i)] = mc.normalf();
    Tensor zts = q_sample(z0s, t_mc, eps, ns);
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += zts[size_t(i)];
    mean /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) var += (zts[size_t(i)] - mean) * (zts[size_t(i)] - mean);
    var /= double(n - 1);
    const double want = 1.0 - double(ns.alpha_bar[t_mc]);
    CHECK(std::fabs(var - want) / want < 0.02);

    CHECK_THROWS(q_sample(z0, 1000, zero_eps, ns));
}

TEST_CASE("diffusion_loss: oracle denoiser and zero denoiser") {
    NoiseSchedule ns = make_schedule(100);
    const int B = 4;
    Tensor z0 = Tensor::zeros({B, 3, 8, 8});
    Tensor cond = Tensor::zeros({B, 2, 4});
    Tensor bank = Tensor::zeros({4, 4});

    SUBCASE("a denoiser that returns the drawn noise gives zero loss") {
        // with z0 = 0, eps = z_t / sqrt(1 - abar_t) recovers the draw exactly
        DenoiseFn oracle = [&](const Tensor& z_t, const std::vector<int>& t, const Tensor&) {
            Tensor out = Tensor::zeros(z_t.shape);
            const size_t per = z_t.numel() / size_t(z_t.dim(0));
            for (int b = 0; b < z_t.dim(0); ++b) {
                const float s = std::sqrt(1.0f - ns.alpha_bar[size_t(t[size_t(b)])]);
                for (size_t i = 0; i < per; ++i) out[size_t(b) * per + i] = z_t[size_t(b) * per + i] / s;
            }
            return out;
        };
        Rng rng(7);
        Tensor loss = diffusion_loss_fn(oracle, bank, z0, cond, ns, 0.0f, rng);
        CHECK(loss.item() < 1e-10f);
    }

    SUBCASE("a zero denoiser scores the expected squared norm of unit noise") {
        DenoiseFn zero = [](const Tensor& z_t, const std::vector<int>&, const Tensor&) {
            return Tensor::zeros(z_t.shape);
        };
        Rng rng(11);
        double acc = 0.0;
        for (int rep = 0; rep < 20; ++rep)
            acc += diffusion_loss_fn(zero, bank, z0, cond, ns, 0.0f, rng).item();
        CHECK(acc / 20.0 == doctest::Approx(1.0).epsilon(0.05));
    }
}

TEST_CASE("cfg_combine: exact endpoints and the affine formula") {
    Rng rng(3);
    Tensor c = Tensor::randn({2, 3, 4, 4}, rng);
    Tensor u = Tensor::randn({2, 3, 4, 4}, rng);
    CHECK(bits_equal(cfg_combine(c, u, 1.0f), c));
    CHECK(bits_equal(cfg_combine(c, u, 0.0f), u));

    Tensor ones = Tensor::full({4}, 1.0f);
    Tensor zeros = Tensor::zeros({4});
    Tensor two = cfg_combine(ones, zeros, 2.0f);
    for (size_t i = 0; i < 4; ++i) CHECK(two[i] == doctest::Approx(2.0f));
}

TEST_CASE("ddim: inversion identity and determinism; ddpm: terminal step") {
    NoiseSchedule ns = make_schedule(1000);
    Rng rng(13);
    Tensor z0 = Tensor::randn({1, 3, 8, 8}, rng);
    Tensor eps = Tensor::randn({1, 3, 8, 8}, rng);

    for (int t : {100, 500, 999}) {
        Tensor zt = q_sample(z0, t, eps, ns);
        Rng r1(1);
        Tensor rec = ddim_step(zt, eps, t, -1, 0.0f, ns, r1);
        for (size_t i = 0; i < rec.numel(); ++i)
            CHECK(rec[i] == doctest::Approx(z0[i]).epsilon(1e-4));
    }

    // ddim eta=0 ignores the rng entirely
    Tensor zt = q_sample(z0, 500, eps, ns);
    Rng ra(1), rb(999);
    Tensor da = ddim_step(zt, eps, 500, 480, 0.0f, ns, ra);
    Tensor db = ddim_step(zt, eps, 500, 480, 0.0f, ns, rb);
    CHECK(bits_equal(da, db));

    // ddpm at t=0 adds no noise: different rngs, identical output
    Rng rc(1), rd(999);
    Tensor pa = ddpm_step(zt, eps, 0, ns, rc);
    Tensor pb = ddpm_step(zt, eps, 0, ns, rd);
    CHECK(bits_equal(pa, pb));

    // at t>0 noise does enter
    Tensor qa = ddpm_step(zt, eps, 10, ns, rc);
    Tensor qb = ddpm_step(zt, eps, 10, ns, rd);
    CHECK_FALSE(bits_equal(qa, qb));
}

TEST_CASE("sample: determinism, single-pass w=1 identity, weight freeze, abort") {
    BackboneConfig cfg = tiny_cfg();
    DiT model(cfg, 5);
    randomize(model.params, 7, 0.1f);
    NoiseSchedule ns = make_schedule(40);
    Rng rng(9);
    Tensor cond = Tensor::randn({2, 3, cfg.cond_dim}, rng);

    SamplerConfig sc;
    sc.kind = SamplerKind::Ddim;
    sc.steps = 8;
    sc.eta = 0.0f;
    sc.guidance = 1.0f;
    sc.seed = 4;

    const std::string before = store_checksum(model.params);
    Tensor s1 = sample(model, cond, sc, ns, {2, 3, 8, 8});
    Tensor s2 = sample(model, cond, sc, ns, {2, 3, 8, 8});
    CHECK(bits_equal(s1, s2));
    CHECK(store_checksum(model.params) == before); // sampling never trains

    // a loop that always evaluates both passes and combines at w=1 walks the
    // identical trajectory bit for bit
    {
        NoGradGuard ng;
        Tensor null_cond = model.null_condition_batch(2, 3);
        EpsFn combined = [&](const Tensor& zz, const std::vector<int>& t, bool) {
            Tensor ec = model.denoise(zz, t, cond);
            Tensor eu = model.denoise(zz, t, null_cond);
            return cfg_combine(ec, eu, 1.0f);
        };
        Tensor manual = sample_loop(combined, sc, ns, {2, 3, 8, 8});
        CHECK(bits_equal(manual, s1));
    }

    // guidance != 1 changes the result
    SamplerConfig scg = sc;
    scg.guidance = 3.0f;
    Tensor sg = sample(model, cond, scg, ns, {2, 3, 8, 8});
    CHECK_FALSE(bits_equal(sg, s1));

    // ddpm demands the full schedule
    SamplerConfig bad = sc;
    bad.kind = SamplerKind::Ddpm;
    bad.steps = 8;
    CHECK_THROWS(sample(model, cond, bad, ns, {2, 3, 8, 8}));

    // non-finite intermediate aborts with the step index in the message
    EpsFn blowup = [](const Tensor& z, const std::vector<int>&, bool) {
        return Tensor::full(z.shape, std::numeric_limits<float>::quiet_NaN());
    };
    bool threw = false;
    try {
        sample_loop(blowup, sc, ns, {1, 3, 8, 8});
    } catch (const std::exception& e) {
        threw = true;
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
    CHECK(threw);
}

TEST_CASE("diffusion_loss gradient passes finite differences on a tiny model") {
    BackboneConfig cfg = tiny_cfg();
    cfg.latent_side = 4;
    cfg.patch = 2;
    DiT model(cfg, 5);
    randomize(model.params, 23);
    NoiseSchedule ns = make_schedule(20);
    Rng data_rng(31);
    Tensor z0 = Tensor::randn({2, 3, 4, 4}, data_rng);
    Tensor cond = Tensor::randn({2, 2, cfg.cond_dim}, data_rng);

    auto fn = [&](ParameterStore&) {
        Rng rng(77); // frozen randomness: same t/eps/drop on every call
        return diffusion_loss(model, z0, cond, ns, 0.5f, rng);
    };
    float err = grad_check(fn, model.params, 1e-2f, 4);
    INFO("loss grad err ", err);
    CHECK(err < 1e-2f);
}

TEST_CASE("p_drop endpoints route gradients to exactly one source") {
    BackboneConfig cfg = tiny_cfg();
    DiT model(cfg, 5);
    randomize(model.params, 7);
    NoiseSchedule ns = make_schedule(50);
    Rng rng(3);
    Tensor z0 = Tensor::randn({3, 3, 8, 8}, rng);
    Tensor live = Tensor::randn({3, 4, cfg.cond_dim}, rng, 1.0f, true);

    std::vector<char> mask;
    model.params.zero_grads();
    live.zero_grad();
    Rng r1(5);
    Tensor l1 = diffusion_loss(model, z0, live, ns, 1.0f, r1, &mask);
    backward(l1);
    for (char m : mask) CHECK(int(m) == 1);
    for (float g : *live.grad) CHECK(g == 0.0f);

    model.params.zero_grads();
    live.zero_grad();
    Rng r2(5);
    Tensor l0 = diffusion_loss(model, z0, live, ns, 0.0f, r2, &mask);
    backward(l0);
    for (char m : mask) CHECK(int(m) == 0);
    for (float g : *model.null_bank.grad) CHECK(g == 0.0f);
}
