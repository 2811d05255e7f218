#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace norm {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ValueError : std::runtime_error {
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

/// Dense row-major double tensor, the value carrier for features,
/// weights and gradients. grad is empty until ensure_grad().
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;

    Tensor() = default;

    explicit Tensor(Shape s, double fill = 0.0, bool rg = false)
        : shape(std::move(s)), data(shape_numel(shape), fill), requires_grad(rg) {}

    Tensor(Shape s, std::vector<double> values, bool rg = false)
        : shape(std::move(s)), data(std::move(values)), requires_grad(rg) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    std::size_t numel() const { return data.size(); }

    std::size_t dim(std::size_t i) const { return shape.at(i); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }

    bool is_scalar() const { return numel() == 1; }

    double scalar() const {
        if (!is_scalar()) throw ShapeError("expected scalar tensor, got " + shape_str(shape));
        return data[0];
    }

    // flat index for a [B,H,W,C] tensor
    std::size_t index4(std::size_t b, std::size_t h, std::size_t w, std::size_t c) const {
        return ((b * shape[1] + h) * shape[2] + w) * shape[3] + c;
    }

    // flat index for a [R,C] tensor
    std::size_t index2(std::size_t r, std::size_t c) const { return r * shape[1] + c; }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Shape s, double fill = 0.0, bool rg = false) {
    return std::make_shared<Tensor>(std::move(s), fill, rg);
}

inline TensorPtr make_tensor(Shape s, std::vector<double> values, bool rg = false) {
    return std::make_shared<Tensor>(std::move(s), std::move(values), rg);
}

inline TensorPtr clone_tensor(const Tensor& t) {
    auto out = std::make_shared<Tensor>();
    out->shape = t.shape;
    out->data = t.data;
    out->requires_grad = t.requires_grad;
    return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
}

// ---------------------------------------------------------------------------
// Seeding. All randomness in the repo flows from a 64-bit seed through
// derive_seed(seed, tag) into an mt19937_64 stream, so every consumer of
// randomness has its own documented sub-stream.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    // FNV-1a over the tag, mixed with the base seed through splitmix64
    std::uint64_t h = 14695981039346656037ULL;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return splitmix64(seed ^ splitmix64(h));
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view tag) {
    return std::mt19937_64(derive_seed(seed, tag));
}

inline void fill_uniform(Tensor& t, double lo, double hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.data) v = dist(rng);
}

// fan-in scaled uniform init: [-b, b], b = sqrt(6 / fan_in)
inline void fill_fan_in_uniform(Tensor& t, std::size_t fan_in, std::mt19937_64& rng) {
    const double b = std::sqrt(6.0 / static_cast<double>(fan_in));
    fill_uniform(t, -b, b, rng);
}

}  // namespace norm
