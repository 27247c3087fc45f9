#include "cpolab/denoiser.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "cpolab/error.hpp"
#include "cpolab/rng.hpp"

namespace cpolab {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian hosts");

std::array<LayerShape, kLayerCount> layer_shapes(const Architecture& a) {
    return {LayerShape{a.hidden, a.input_dim()}, LayerShape{a.hidden, a.hidden}, LayerShape{a.hidden, a.hidden},
            LayerShape{a.data_dim, a.hidden}};
}

std::size_t parameter_count(const Architecture& a) {
    std::size_t n = 0;
    for (const auto& s : layer_shapes(a)) n += s.rows * s.cols + s.rows;
    return n;
}

namespace {

std::size_t weight_offset(const Architecture& a, std::size_t layer) {
    const auto shapes = layer_shapes(a);
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer; ++l) off += shapes[l].rows * shapes[l].cols + shapes[l].rows;
    return off;
}

double sigmoid(double x) {
    return 1.0 / (1.0 + std::exp(-x));
}

double silu(double x) {
    return x * sigmoid(x);
}

double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

void affine(std::span<const double> w, std::span<const double> b, std::span<const double> in, std::span<double> out) {
    const std::size_t cols = in.size();
    for (std::size_t r = 0; r < out.size(); ++r) {
        const double* row = w.data() + r * cols;
        double acc = b[r];
        for (std::size_t c = 0; c < cols; ++c) acc += row[c] * in[c];
        out[r] = acc;
    }
}

}  // namespace

std::span<double> ParamArrays::weight(std::size_t layer) {
    const auto s = layer_shapes(arch)[layer];
    return {values.data() + weight_offset(arch, layer), s.rows * s.cols};
}

std::span<const double> ParamArrays::weight(std::size_t layer) const {
    const auto s = layer_shapes(arch)[layer];
    return {values.data() + weight_offset(arch, layer), s.rows * s.cols};
}

std::span<double> ParamArrays::bias(std::size_t layer) {
    const auto s = layer_shapes(arch)[layer];
    return {values.data() + weight_offset(arch, layer) + s.rows * s.cols, s.rows};
}

std::span<const double> ParamArrays::bias(std::size_t layer) const {
    const auto s = layer_shapes(arch)[layer];
    return {values.data() + weight_offset(arch, layer) + s.rows * s.cols, s.rows};
}

GradientBundle& GradientBundle::operator+=(const GradientBundle& other) {
    if (!(arch == other.arch)) throw ValidationError("gradient bundles with different architectures");
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += other.values[i];
    return *this;
}

GradientBundle& GradientBundle::operator*=(double s) {
    for (double& v : values) v *= s;
    return *this;
}

Vec time_embedding(int t, int total_steps, std::size_t dim) {
    Vec out(dim);
    const double u = static_cast<double>(t) / static_cast<double>(total_steps);
    const std::size_t half = dim / 2;
    for (std::size_t k = 0; k < half; ++k) {
        const double angle = u * (std::numbers::pi / 2.0) * std::ldexp(1.0, static_cast<int>(k));
        out[k] = std::sin(angle);
        out[half + k] = std::cos(angle);
    }
    return out;
}

std::vector<double> noise_skip(const NoiseSchedule& sched) {
    std::vector<double> c;
    for (int t = 1; t <= sched.steps(); ++t) c.push_back(sched.sigma(t));
    return c;
}

Vec forward(const DenoiserParams& params, std::span<const double> x_t, int t, std::span<const double> cond,
            ForwardTape* tape) {
    const Architecture& a = params.arch;
    if (x_t.size() != a.data_dim) throw ValidationError("forward: x_t has wrong dimension");
    if (cond.size() != a.cond_dim) throw ValidationError("forward: condition has wrong width");
    if (params.values.size() != parameter_count(a)) throw ValidationError("forward: parameter buffer size");
    if (!a.skip.empty() && (a.skip.size() != static_cast<std::size_t>(a.total_steps) || t < 1 || t > a.total_steps)) {
        throw ValidationError("forward: skip table needs 1 <= t <= T entries");
    }

    Vec input;
    input.reserve(a.input_dim());
    input.insert(input.end(), x_t.begin(), x_t.end());
    const Vec emb = time_embedding(t, a.total_steps, a.time_dim);
    input.insert(input.end(), emb.begin(), emb.end());
    input.insert(input.end(), cond.begin(), cond.end());

    std::array<Vec, kLayerCount - 1> pre, act;
    const Vec* in = &input;
    for (std::size_t l = 0; l + 1 < kLayerCount; ++l) {
        pre[l].resize(a.hidden);
        affine(params.weight(l), params.bias(l), *in, pre[l]);
        act[l].resize(a.hidden);
        for (std::size_t i = 0; i < a.hidden; ++i) act[l][i] = silu(pre[l][i]);
        in = &act[l];
    }
    Vec out(a.data_dim);
    affine(params.weight(kLayerCount - 1), params.bias(kLayerCount - 1), *in, out);
    if (!a.skip.empty()) {
        const double c = a.skip[static_cast<std::size_t>(t - 1)];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * x_t[i];
    }

    if (tape != nullptr) {
        tape->input = std::move(input);
        tape->pre = std::move(pre);
        tape->act = std::move(act);
    }
    return out;
}

void accumulate_backward(const DenoiserParams& params, const ForwardTape& tape, std::span<const double> adjoint,
                         GradientBundle& grads) {
    const Architecture& a = params.arch;
    if (adjoint.size() != a.data_dim) throw ValidationError("backward: adjoint has wrong dimension");
    if (!(grads.arch == a)) throw ValidationError("backward: gradient bundle architecture mismatch");

    Vec delta(adjoint.begin(), adjoint.end());
    for (std::size_t l = kLayerCount; l-- > 0;) {
        const std::span<const double> in = (l == 0) ? std::span<const double>(tape.input) : tape.act[l - 1];
        const std::size_t cols = in.size();
        std::span<double> gw = grads.weight(l);
        std::span<double> gb = grads.bias(l);
        for (std::size_t r = 0; r < delta.size(); ++r) {
            const double d = delta[r];
            gb[r] += d;
            if (d == 0.0) continue;
            double* row = gw.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) row[c] += d * in[c];
        }
        if (l == 0) break;

        const std::span<const double> w = params.weight(l);
        Vec next(cols, 0.0);
        for (std::size_t r = 0; r < delta.size(); ++r) {
            const double d = delta[r];
            if (d == 0.0) continue;
            const double* row = w.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) next[c] += d * row[c];
        }
        for (std::size_t c = 0; c < cols; ++c) next[c] *= silu_grad(tape.pre[l - 1][c]);
        delta = std::move(next);
    }
}

GradientBundle backward(const DenoiserParams& params, const ForwardTape& tape, std::span<const double> adjoint) {
    GradientBundle g(params.arch);
    accumulate_backward(params, tape, adjoint, g);
    return g;
}

DenoiserParams init_params(std::uint64_t seed, const Architecture& arch) {
    DenoiserParams p(arch);
    Rng rng{derive_seed(seed, "init")};
    const auto shapes = layer_shapes(arch);
    for (std::size_t l = 0; l + 1 < kLayerCount; ++l) {
        const double limit = std::sqrt(6.0 / static_cast<double>(shapes[l].cols));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (double& w : p.weight(l)) w = dist(rng);
    }
    return p;
}

NoisePredictor as_predictor(const DenoiserParams& params, std::vector<double> cond) {
    return [&params, cond = std::move(cond)](std::span<const double> x, int t) { return forward(params, x, t, cond); };
}

AdamState AdamState::zeros_like(const DenoiserParams& params) {
    AdamState s;
    s.m.assign(params.values.size(), 0.0);
    s.v.assign(params.values.size(), 0.0);
    return s;
}

void adam_step(DenoiserParams& params, const GradientBundle& grads, AdamState& state, const AdamConfig& cfg) {
    const std::size_t n = params.values.size();
    if (grads.values.size() != n || state.m.size() != n || state.v.size() != n) {
        throw ValidationError("adam_step: shape mismatch");
    }
    state.step += 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grads.values[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        params.values[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

namespace {

constexpr char kMagic[8] = {'C', 'P', 'O', 'L', 'A', 'B', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 2;

template <class T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::ifstream& in, const std::string& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ValidationError("truncated checkpoint: " + path);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const DenoiserParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    const Architecture& a = params.arch;
    put<std::uint64_t>(out, a.data_dim);
    put<std::uint64_t>(out, a.time_dim);
    put<std::uint64_t>(out, a.cond_dim);
    put<std::uint64_t>(out, a.hidden);
    put<std::int64_t>(out, a.total_steps);
    put<std::uint64_t>(out, a.skip.size());
    for (double c : a.skip) put<double>(out, c);
    put<std::uint64_t>(out, params.values.size());
    out.write(reinterpret_cast<const char*>(params.values.data()),
              static_cast<std::streamsize>(params.values.size() * sizeof(double)));
    if (!out) throw Error("write failed: " + path);
}

DenoiserParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint: " + path);
    char magic[sizeof kMagic];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw ValidationError("not a checkpoint file: " + path);
    }
    if (get<std::uint32_t>(in, path) != kCheckpointVersion) {
        throw ValidationError("unsupported checkpoint version: " + path);
    }
    Architecture a;
    a.data_dim = get<std::uint64_t>(in, path);
    a.time_dim = get<std::uint64_t>(in, path);
    a.cond_dim = get<std::uint64_t>(in, path);
    a.hidden = get<std::uint64_t>(in, path);
    a.total_steps = static_cast<int>(get<std::int64_t>(in, path));
    const auto skip_count = get<std::uint64_t>(in, path);
    if (skip_count != 0 && skip_count != static_cast<std::uint64_t>(a.total_steps)) {
        throw ValidationError("checkpoint skip table does not match T: " + path);
    }
    for (std::uint64_t i = 0; i < skip_count; ++i) a.skip.push_back(get<double>(in, path));
    const auto count = get<std::uint64_t>(in, path);
    if (count != parameter_count(a)) throw ValidationError("checkpoint shape header mismatch: " + path);
    DenoiserParams p(a);
    if (!in.read(reinterpret_cast<char*>(p.values.data()), static_cast<std::streamsize>(count * sizeof(double)))) {
        throw ValidationError("truncated checkpoint: " + path);
    }
    return p;
}

}  // namespace cpolab
