#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cpolab/denoiser.hpp"
#include "cpolab/error.hpp"
#include "cpolab/rng.hpp"
#include "oracles.hpp"

using namespace cpolab;

namespace {

Architecture small_arch() { return {8, 16, 6, 12, 10, {}}; }

Vec normal_vec(std::size_t n, std::uint64_t seed, double scale = 1.0) {
    Rng rng{seed};
    Vec v(n);
    fill_normal(rng, v);
    for (auto& x : v) x *= scale;
    return v;
}

// Init followed by a random output layer, so the network is not identically zero.
DenoiserParams live_params(const Architecture& arch, std::uint64_t seed) {
    DenoiserParams p = init_params(seed, arch);
    Rng rng{seed + 1};
    std::uniform_real_distribution<double> w(-0.3, 0.3);
    for (auto& v : p.weight(kLayerCount - 1)) v = w(rng);
    for (auto& v : p.bias(kLayerCount - 1)) v = w(rng);
    for (std::size_t l = 0; l + 1 < kLayerCount; ++l) {
        for (auto& v : p.bias(l)) v = 0.1 * w(rng);
    }
    return p;
}

bool all_zero(const GradientBundle& g) {
    return std::all_of(g.values.begin(), g.values.end(), [](double v) { return v == 0.0; });
}

}  // namespace

TEST_CASE("shapes") {
    const Architecture a = small_arch();
    const auto sh = layer_shapes(a);
    CHECK(sh[0].cols == 8 + 16 + 6);
    CHECK(sh[0].rows == 12);
    CHECK(sh[3].rows == 8);
    CHECK(parameter_count(a) == 30 * 12 + 12 + 2 * (12 * 12 + 12) + 12 * 8 + 8);
}

TEST_CASE("time embedding") {
    const Vec e = time_embedding(37, 100, 16);
    REQUIRE(e.size() == 16);
    for (double v : e) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK(time_embedding(37, 100, 16) == e);
    CHECK_FALSE(time_embedding(38, 100, 16) == e);
}

TEST_CASE("zero output layer gives zero prediction") {
    const Architecture a = small_arch();
    const DenoiserParams p = init_params(3, a);
    for (int t : {1, 5, 10}) {
        const Vec out = forward(p, normal_vec(8, t), t, normal_vec(6, 100 + t));
        CHECK(std::all_of(out.begin(), out.end(), [](double v) { return v == 0.0; }));
    }
}

TEST_CASE("skip term adds c_t x_t") {
    const NoiseSchedule s = make_schedule(10, 1e-3, 0.2);
    Architecture a = small_arch();
    a.skip = noise_skip(s);
    REQUIRE(a.skip.size() == 10);
    CHECK(a.skip[0] == doctest::Approx(std::sqrt(1 - s.alpha_bar(1))).epsilon(1e-15));

    const Vec x = normal_vec(8, 4), c = normal_vec(6, 5);
    const Vec zero_out = forward(init_params(3, a), x, 7, c);
    for (std::size_t i = 0; i < 8; ++i) CHECK(zero_out[i] == doctest::Approx(s.sigma(7) * x[i]).epsilon(1e-14));

    const DenoiserParams live = live_params(a, 6);
    DenoiserParams plain = live;
    plain.arch.skip.clear();
    const Vec with = forward(live, x, 7, c), without = forward(plain, x, 7, c);
    for (std::size_t i = 0; i < 8; ++i) CHECK(with[i] - without[i] == doctest::Approx(a.skip[6] * x[i]).epsilon(1e-12));

    a.skip.pop_back();
    CHECK_THROWS_AS(forward(init_params(3, a), x, 2, c), ValidationError);
}

TEST_CASE("forward is pure and validates shapes") {
    const DenoiserParams p = live_params(small_arch(), 2);
    const Vec x = normal_vec(8, 1), c = normal_vec(6, 2);
    CHECK(forward(p, x, 4, c) == forward(p, x, 4, c));
    CHECK_THROWS_AS(forward(p, normal_vec(7, 1), 4, c), ValidationError);
    CHECK_THROWS_AS(forward(p, x, 4, normal_vec(5, 1)), ValidationError);

    const Vec big = normal_vec(8, 9, 10.0 / std::sqrt(8.0) / 3.0);
    for (double v : forward(p, big, 10, c)) CHECK(std::isfinite(v));
}

TEST_CASE("backward linearity") {
    const DenoiserParams p = live_params(small_arch(), 8);
    ForwardTape tape;
    forward(p, normal_vec(8, 1), 3, normal_vec(6, 2), &tape);

    CHECK(all_zero(backward(p, tape, Vec(8, 0.0))));

    const Vec a1 = normal_vec(8, 11), a2 = normal_vec(8, 12);
    Vec sum(8);
    for (std::size_t i = 0; i < 8; ++i) sum[i] = a1[i] + a2[i];
    GradientBundle g = backward(p, tape, a1);
    g += backward(p, tape, a2);
    const GradientBundle h = backward(p, tape, sum);
    for (std::size_t k = 0; k < g.values.size(); ++k) CHECK(g.values[k] == doctest::Approx(h.values[k]).epsilon(1e-12));
}

TEST_CASE("gradient matches central differences") {
    for (bool skip : {false, true}) {
        Architecture a = small_arch();
        if (skip) a.skip = noise_skip(make_schedule(10, 1e-3, 0.2));
        const DenoiserParams p = live_params(a, 21);
        const Vec x = normal_vec(8, 1), c = normal_vec(6, 2), eps = normal_vec(8, 3);
        const int t = 6;

        const std::function<double(const DenoiserParams&)> loss = [&](const DenoiserParams& q) {
            const Vec out = forward(q, x, t, c);
            return static_cast<double>(oracle::sq_dist(eps, out));
        };
        ForwardTape tape;
        const Vec out = forward(p, x, t, c, &tape);
        Vec adj(8);
        for (std::size_t i = 0; i < 8; ++i) adj[i] = 2.0 * (out[i] - eps[i]);
        const GradientBundle g = backward(p, tape, adj);

        Rng rng{77};
        std::uniform_int_distribution<std::size_t> pick(0, p.values.size() - 1);
        int checked = 0;
        for (int attempt = 0; attempt < 1000 && checked < 100; ++attempt) {
            const std::size_t k = pick(rng);
            const double fd = oracle::central_difference(loss, p, k);
            if (std::max(std::abs(fd), std::abs(g.values[k])) < 1e-7) continue;
            CHECK(oracle::relative_error(fd, g.values[k]) <= 1e-4);
            ++checked;
        }
        CHECK(checked == 100);
    }
}

TEST_CASE("init") {
    const Architecture a = small_arch();
    const DenoiserParams p = init_params(5, a);
    CHECK(init_params(5, a) == p);
    CHECK_FALSE(init_params(6, a) == p);
    const double limit = std::sqrt(6.0 / static_cast<double>(layer_shapes(a)[0].cols));
    for (double w : p.weight(0)) CHECK(std::abs(w) <= limit);
    for (double b : p.bias(0)) CHECK(b == 0.0);
}

TEST_CASE("adam") {
    const Architecture a = small_arch();
    const AdamConfig cfg{1e-3, 0.9, 0.999, 1e-8};

    SUBCASE("zero gradient leaves parameters") {
        DenoiserParams p = live_params(a, 1);
        const DenoiserParams before = p;
        AdamState st = AdamState::zeros_like(p);
        for (int i = 0; i < 5; ++i) adam_step(p, GradientBundle(a), st, cfg);
        CHECK(p == before);
        CHECK(st.step == 5);
    }
    SUBCASE("constant gradient moves by lr per step") {
        DenoiserParams p = live_params(a, 1);
        AdamState st = AdamState::zeros_like(p);
        GradientBundle g(a);
        for (std::size_t k = 0; k < g.values.size(); ++k) g.values[k] = (k % 2 ? 0.3 : -2.0);
        for (int i = 0; i < 200; ++i) {
            const DenoiserParams before = p;
            adam_step(p, g, st, cfg);
            for (std::size_t k = 0; k < 4; ++k) {
                const double step = before.values[k] - p.values[k];
                CHECK(std::abs(step) == doctest::Approx(1e-3).epsilon(1e-4));
                CHECK((step > 0) == (g.values[k] > 0));
            }
        }
    }
    SUBCASE("deterministic") {
        DenoiserParams p1 = live_params(a, 1), p2 = p1;
        AdamState s1 = AdamState::zeros_like(p1), s2 = s1;
        GradientBundle g(a);
        g.values = normal_vec(g.values.size(), 4);
        adam_step(p1, g, s1, cfg);
        adam_step(p2, g, s2, cfg);
        CHECK(p1 == p2);
    }
}

TEST_CASE("checkpoint round trip") {
    const auto dir = oracle::scratch_dir("ck");
    Architecture a = small_arch();
    a.skip = noise_skip(make_schedule(10, 1e-3, 0.2));
    const DenoiserParams p = live_params(a, 31);
    const auto path = (dir / "m.ck").string();
    save_checkpoint(path, p);
    CHECK(load_checkpoint(path) == p);

    const std::string bytes = oracle::slurp(path);
    std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 3);
    CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
    std::ofstream(path, std::ios::binary) << "garbage";
    CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
    CHECK_THROWS_AS(load_checkpoint((dir / "missing.ck").string()), Error);
    std::filesystem::remove_all(dir);
}
