#pragma once

// Conditional noise-prediction MLP eps_theta(x_t, t, c) with hand-written
// reverse-mode gradients and an Adam optimizer.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cpolab/diffusion.hpp"

namespace cpolab {

struct Architecture {
    std::size_t data_dim = 64;
    std::size_t time_dim = 16;
    std::size_t cond_dim = 0;
    std::size_t hidden = 128;
    /// T of the schedule; the time embedding is a function of t / T.
    int total_steps = 100;
    /// Optional per-step coefficients c_t (t = 1..T): the output becomes
    /// network(x_t, t, c) + c_t x_t. Empty means no skip term.
    std::vector<double> skip;

    std::size_t input_dim() const { return data_dim + time_dim + cond_dim; }
    bool operator==(const Architecture&) const = default;
};

/// Input, two hidden and output affine maps; SiLU after the first three.
inline constexpr std::size_t kLayerCount = 4;

struct LayerShape {
    std::size_t rows = 0;  // fan-out
    std::size_t cols = 0;  // fan-in
};

std::array<LayerShape, kLayerCount> layer_shapes(const Architecture& arch);
std::size_t parameter_count(const Architecture& arch);

/// Flat row-major storage of all weight matrices and bias vectors, in layer
/// order (W0, b0, W1, b1, ...).
struct ParamArrays {
    Architecture arch;
    std::vector<double> values;

    std::span<double> weight(std::size_t layer);
    std::span<const double> weight(std::size_t layer) const;
    std::span<double> bias(std::size_t layer);
    std::span<const double> bias(std::size_t layer) const;

    bool operator==(const ParamArrays&) const = default;

protected:
    ParamArrays() = default;
    explicit ParamArrays(const Architecture& a) : arch(a), values(parameter_count(a), 0.0) {}
};

struct DenoiserParams : ParamArrays {
    DenoiserParams() = default;
    explicit DenoiserParams(const Architecture& a) : ParamArrays(a) {}
};

struct GradientBundle : ParamArrays {
    GradientBundle() = default;
    explicit GradientBundle(const Architecture& a) : ParamArrays(a) {}

    GradientBundle& operator+=(const GradientBundle& other);
    GradientBundle& operator*=(double s);
};

/// sin/cos of (t / T) * (pi / 2) * 2^k for k = 0 .. dim/2 - 1.
Vec time_embedding(int t, int total_steps, std::size_t dim);

/// sigma_t = sqrt(1 - alpha_bar_t) for t = 1..T, the skip coefficients that
/// make a zero network output the linear noise estimate for unit-variance data.
std::vector<double> noise_skip(const NoiseSchedule& sched);

/// Intermediate values needed by the backward pass.
struct ForwardTape {
    Vec input;
    std::array<Vec, kLayerCount - 1> pre;
    std::array<Vec, kLayerCount - 1> act;
};

/// Throws ValidationError on shape mismatch.
Vec forward(const DenoiserParams& params, std::span<const double> x_t, int t, std::span<const double> cond,
            ForwardTape* tape = nullptr);

/// grads += d(adjoint . forward) / d(params) for the recorded forward pass.
void accumulate_backward(const DenoiserParams& params, const ForwardTape& tape, std::span<const double> adjoint,
                         GradientBundle& grads);

GradientBundle backward(const DenoiserParams& params, const ForwardTape& tape, std::span<const double> adjoint);

/// He-uniform weights (limit sqrt(6 / fan_in)), zero biases, zero output layer.
DenoiserParams init_params(std::uint64_t seed, const Architecture& arch);

NoisePredictor as_predictor(const DenoiserParams& params, std::vector<double> cond);

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Vec m;
    Vec v;
    long step = 0;

    static AdamState zeros_like(const DenoiserParams& params);
};

/// Bias-corrected Adam update; increments state.step.
void adam_step(DenoiserParams& params, const GradientBundle& grads, AdamState& state, const AdamConfig& cfg);

/// Versioned binary container: magic, version, architecture header, then the
/// flat parameter array as little-endian IEEE doubles.
void save_checkpoint(const std::string& path, const DenoiserParams& params);
DenoiserParams load_checkpoint(const std::string& path);

}  // namespace cpolab
