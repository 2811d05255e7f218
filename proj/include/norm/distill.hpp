#pragma once

#include <optional>
#include <utility>

#include "norm/autodiff.hpp"

namespace norm {

enum class SplitMode { Sequential, Random };
enum class NormalizeMode { SumOverAllDivN, MeanPerElement };

/// The student feature transform: a 1x1 expand conv (C_s -> N*C_t) followed
/// by a 1x1 contract conv (N*C_t -> C_s), optionally with an identity
/// residual. Strictly linear end to end, which is what makes it absorbable
/// into the classifier after training.
struct FTModule {
    TensorPtr w_se;  // [1,1,C_s,N*C_t]
    TensorPtr w_sc;  // [1,1,N*C_t,C_s]
    bool residual = true;
    int n = 1;
    int c_t = 0;
    int c_s = 0;

    static FTModule create(int n, int c_t, int c_s, bool residual, std::uint64_t seed) {
        if (n < 1 || c_t < 1 || c_s < 1)
            throw ValueError("FTModule: n, c_t, c_s must be positive");
        FTModule ft;
        ft.n = n;
        ft.c_t = c_t;
        ft.c_s = c_s;
        ft.residual = residual;
        const std::size_t nct = static_cast<std::size_t>(n) * c_t;
        ft.w_se = make_tensor(Shape{1, 1, static_cast<std::size_t>(c_s), nct}, 0.0, true);
        ft.w_sc = make_tensor(Shape{1, 1, nct, static_cast<std::size_t>(c_s)}, 0.0, true);
        auto rng = make_rng(seed, "ft.init");
        fill_fan_in_uniform(*ft.w_se, static_cast<std::size_t>(c_s), rng);
        fill_fan_in_uniform(*ft.w_sc, nct, rng);
        return ft;
    }

    void validate() const {
        const std::size_t nct = static_cast<std::size_t>(n) * c_t;
        const std::size_t cs = static_cast<std::size_t>(c_s);
        if (!w_se || w_se->shape != Shape{1, 1, cs, nct})
            throw ShapeError("FTModule: w_se shape inconsistent with (n,c_t,c_s)");
        if (!w_sc || w_sc->shape != Shape{1, 1, nct, cs})
            throw ShapeError("FTModule: w_sc shape inconsistent with (n,c_t,c_s)");
    }

    FTModule clone() const {
        FTModule ft = *this;
        ft.w_se = clone_tensor(*w_se);
        ft.w_sc = clone_tensor(*w_sc);
        return ft;
    }
};

/// All knobs of the matching losses.
struct DistillConfig {
    int n = 8;
    double alpha = 10.0;
    double beta = 4.0;
    double temperature = 8.0;  // softened-logit temperature; picked by pilot runs at desk scale
    Metric metric = Metric::L2Sq;
    SplitMode split = SplitMode::Sequential;
    std::uint64_t split_seed = 0;
    int match_segments = 8;  // m in [1, n]; only the first m segments enter the loss
    // per-element mean keeps alpha=10 on the same footing across tap shapes
    NormalizeMode normalize = NormalizeMode::MeanPerElement;
    bool residual = true;

    void validate() const {
        if (n < 1) throw ValueError("DistillConfig: n must be positive");
        if (alpha <= 0.0) throw ValueError("DistillConfig: alpha must be positive");
        if (beta < 0.0) throw ValueError("DistillConfig: beta must be non-negative");
        if (temperature <= 0.0) throw ValueError("DistillConfig: temperature must be positive");
        if (match_segments < 1 || match_segments > n)
            throw ValueError("DistillConfig: match_segments must be in [1, n]");
    }
};

/// F_se = W_se * F_s ; F_sc = W_sc * F_se ; f_out = F_sc (+ F_s if residual).
inline std::pair<TensorPtr, TensorPtr> ft_forward(Graph& g, const FTModule& ft,
                                                  const TensorPtr& f_s) {
    if (f_s->shape.size() != 4 || f_s->shape[3] != static_cast<std::size_t>(ft.c_s))
        throw ShapeError("ft_forward: input channels " + shape_str(f_s->shape) +
                         " do not match FT c_s=" + std::to_string(ft.c_s));
    TensorPtr f_se = g.conv2d(f_s, ft.w_se, 1, 0);
    TensorPtr f_sc = g.conv2d(f_se, ft.w_sc, 1, 0);
    TensorPtr f_out = ft.residual ? g.add(f_sc, f_s) : f_sc;
    return {f_se, f_out};
}

inline std::vector<std::size_t> split_permutation(std::size_t channels, SplitMode mode,
                                                  std::uint64_t seed) {
    std::vector<std::size_t> perm(channels);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (mode == SplitMode::Random) {
        auto rng = make_rng(seed, "split.permutation");
        for (std::size_t i = channels; i > 1; --i) {
            std::uniform_int_distribution<std::size_t> d(0, i - 1);
            std::swap(perm[i - 1], perm[d(rng)]);
        }
    }
    return perm;
}

/// Split the expanded representation into n non-overlapping C_t-channel
/// segments. Sequential keeps channel order; Random applies one fixed
/// seeded permutation first.
inline std::vector<TensorPtr> split_segments(Graph& g, const TensorPtr& f_se, int n, int c_t,
                                             SplitMode mode, std::uint64_t seed = 0) {
    if (f_se->shape.size() != 4)
        throw ShapeError("split_segments: input must be 4-D");
    const std::size_t C = f_se->shape[3];
    if (C != static_cast<std::size_t>(n) * c_t)
        throw ShapeError("split_segments: channel count " + std::to_string(C) +
                         " is not n*c_t = " + std::to_string(n) + "*" + std::to_string(c_t));
    TensorPtr base = f_se;
    if (mode == SplitMode::Random) base = g.permute_channels(f_se, split_permutation(C, mode, seed));
    std::vector<TensorPtr> segments;
    segments.reserve(n);
    for (int i = 0; i < n; ++i)
        segments.push_back(g.slice_channels(base, static_cast<std::size_t>(i) * c_t,
                                            static_cast<std::size_t>(i + 1) * c_t));
    return segments;
}

/// L_norm = (1/m) sum_i d(F_se^i, F_t) over the first m = match_segments
/// segments, mean over the batch. MeanPerElement additionally divides by
/// H*W*C_t.
inline TensorPtr norm_loss(Graph& g, const std::vector<TensorPtr>& segments, const TensorPtr& f_t,
                           const DistillConfig& cfg) {
    if (segments.empty()) throw ValueError("norm_loss: no segments");
    const int m = std::min<int>(cfg.match_segments, static_cast<int>(segments.size()));
    if (m < 1) throw ValueError("norm_loss: match_segments must be at least 1");
    for (const auto& s : segments) check_same_shape(*s, *f_t, "norm_loss");
    const std::size_t B = f_t->shape[0];
    double denom = static_cast<double>(m) * static_cast<double>(B);
    if (cfg.normalize == NormalizeMode::MeanPerElement)
        denom *= static_cast<double>(f_t->shape[1] * f_t->shape[2] * f_t->shape[3]);
    TensorPtr acc;
    for (int i = 0; i < m; ++i) {
        TensorPtr d = g.distance(segments[i], f_t, cfg.metric);
        acc = acc ? g.add(acc, d) : d;
    }
    return g.scale(acc, 1.0 / denom);
}

/// L_total = L_ce + alpha * L_norm
inline TensorPtr total_loss(Graph& g, const TensorPtr& l_ce, const TensorPtr& l_norm,
                            const DistillConfig& cfg) {
    return g.add(l_ce, g.scale(l_norm, cfg.alpha));
}

/// L_total = L_ce + alpha * L_norm + beta * L_kd
inline TensorPtr total_loss_augmented(Graph& g, const TensorPtr& l_ce, const TensorPtr& l_norm,
                                      const TensorPtr& l_kd, const DistillConfig& cfg) {
    return g.add(g.add(l_ce, g.scale(l_norm, cfg.alpha)), g.scale(l_kd, cfg.beta));
}

/// Single-route matching baseline: identical to norm_loss with one segment.
inline TensorPtr orm_loss_baseline(Graph& g, const TensorPtr& f_s_projected, const TensorPtr& f_t,
                                   Metric metric,
                                   NormalizeMode normalize = NormalizeMode::SumOverAllDivN) {
    DistillConfig cfg;
    cfg.n = 1;
    cfg.match_segments = 1;
    cfg.metric = metric;
    cfg.normalize = normalize;
    return norm_loss(g, {f_s_projected}, f_t, cfg);
}

}  // namespace norm
