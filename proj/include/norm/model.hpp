#pragma once

#include <map>
#include <optional>

#include <nlohmann/json.hpp>

#include "norm/distill.hpp"

namespace norm {

using json = nlohmann::json;

enum class LayerKind { Conv, ReLU, AvgPool, GAP, FC };

struct LayerSpec {
    LayerKind kind = LayerKind::ReLU;
    // Conv
    int kh = 0, kw = 0, cout = 0, stride = 1, padding = 0;
    // AvgPool
    int window = 0, pool_stride = 1;
    // FC
    int fc_out = 0;

    static LayerSpec conv(int kh, int kw, int cout, int stride = 1, int padding = 0) {
        LayerSpec l;
        l.kind = LayerKind::Conv;
        l.kh = kh; l.kw = kw; l.cout = cout; l.stride = stride; l.padding = padding;
        return l;
    }
    static LayerSpec relu() { LayerSpec l; l.kind = LayerKind::ReLU; return l; }
    static LayerSpec avg_pool(int window, int stride) {
        LayerSpec l;
        l.kind = LayerKind::AvgPool;
        l.window = window; l.pool_stride = stride;
        return l;
    }
    static LayerSpec gap() { LayerSpec l; l.kind = LayerKind::GAP; return l; }
    static LayerSpec fc(int cout) { LayerSpec l; l.kind = LayerKind::FC; l.fc_out = cout; return l; }
};

enum class FeatureTap { Pre, Post };

/// Declarative CNN: conv/relu/pool body, then exactly one GAP immediately
/// followed by exactly one FC at the tail (the structure the merge relies on).
struct NetworkSpec {
    std::vector<LayerSpec> layers;
    int in_h = 0, in_w = 0, in_c = 0;
    int num_classes = 0;
    FeatureTap feature_tap = FeatureTap::Post;

    /// Per-layer output shapes (as [H,W,C]; FC/GAP outputs use H=W=1 slots).
    /// Throws on any inconsistency.
    std::vector<std::array<int, 3>> propagate_shapes() const {
        if (in_h < 1 || in_w < 1 || in_c < 1)
            throw ShapeError("NetworkSpec: input shape must be positive");
        if (num_classes < 1) throw ShapeError("NetworkSpec: num_classes must be positive");
        if (layers.size() < 2 || layers[layers.size() - 2].kind != LayerKind::GAP ||
            layers.back().kind != LayerKind::FC)
            throw ShapeError("NetworkSpec: tail must be GAP followed by FC");
        for (std::size_t i = 0; i + 2 < layers.size(); ++i)
            if (layers[i].kind == LayerKind::GAP || layers[i].kind == LayerKind::FC)
                throw ShapeError("NetworkSpec: GAP/FC allowed only at the tail");
        if (layers.back().fc_out != num_classes)
            throw ShapeError("NetworkSpec: FC Cout " + std::to_string(layers.back().fc_out) +
                             " does not match num_classes " + std::to_string(num_classes));
        std::vector<std::array<int, 3>> shapes;
        int h = in_h, w = in_w, c = in_c;
        for (const auto& l : layers) {
            switch (l.kind) {
                case LayerKind::Conv: {
                    if (l.kh < 1 || l.kw < 1 || l.cout < 1 || l.stride < 1 || l.padding < 0)
                        throw ShapeError("NetworkSpec: invalid conv parameters");
                    if (l.kh > h + 2 * l.padding || l.kw > w + 2 * l.padding)
                        throw ShapeError("NetworkSpec: conv kernel exceeds padded input");
                    h = (h + 2 * l.padding - l.kh) / l.stride + 1;
                    w = (w + 2 * l.padding - l.kw) / l.stride + 1;
                    c = l.cout;
                    break;
                }
                case LayerKind::ReLU:
                    break;
                case LayerKind::AvgPool:
                    if (l.window < 1 || l.pool_stride < 1)
                        throw ShapeError("NetworkSpec: invalid pool parameters");
                    if (l.window > h || l.window > w)
                        throw ShapeError("NetworkSpec: pool window exceeds spatial dims");
                    h = (h - l.window) / l.pool_stride + 1;
                    w = (w - l.window) / l.pool_stride + 1;
                    break;
                case LayerKind::GAP:
                    h = 1; w = 1;
                    break;
                case LayerKind::FC:
                    c = l.fc_out;
                    break;
            }
            shapes.push_back({h, w, c});
        }
        return shapes;
    }

    /// [H,W,C] of the map entering GAP (FT insertion point).
    std::array<int, 3> tap_shape() const {
        auto shapes = propagate_shapes();
        return shapes[shapes.size() - 3];
    }
};

inline json layer_to_json(const LayerSpec& l) {
    switch (l.kind) {
        case LayerKind::Conv:
            return {{"type", "conv"}, {"kh", l.kh}, {"kw", l.kw}, {"cout", l.cout},
                    {"stride", l.stride}, {"padding", l.padding}};
        case LayerKind::ReLU:
            return {{"type", "relu"}};
        case LayerKind::AvgPool:
            return {{"type", "avg_pool"}, {"window", l.window}, {"stride", l.pool_stride}};
        case LayerKind::GAP:
            return {{"type", "gap"}};
        case LayerKind::FC:
            return {{"type", "fc"}, {"cout", l.fc_out}};
    }
    throw ValueError("layer_to_json: unknown layer kind");
}

inline void check_keys(const json& j, const std::vector<std::string>& allowed,
                       const std::string& where);

inline LayerSpec layer_from_json(const json& j) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "conv") {
        check_keys(j, {"type", "kh", "kw", "cout", "stride", "padding"}, "layer conv");
        return LayerSpec::conv(j.at("kh"), j.at("kw"), j.at("cout"),
                               j.value("stride", 1), j.value("padding", 0));
    }
    if (type == "relu") {
        check_keys(j, {"type"}, "layer relu");
        return LayerSpec::relu();
    }
    if (type == "avg_pool") {
        check_keys(j, {"type", "window", "stride"}, "layer avg_pool");
        return LayerSpec::avg_pool(j.at("window"), j.at("stride"));
    }
    if (type == "gap") {
        check_keys(j, {"type"}, "layer gap");
        return LayerSpec::gap();
    }
    if (type == "fc") {
        check_keys(j, {"type", "cout"}, "layer fc");
        return LayerSpec::fc(j.at("cout"));
    }
    throw ValueError("layer_from_json: unknown layer type '" + type + "'");
}

inline void check_keys(const json& j, const std::vector<std::string>& allowed,
                       const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ValueError("unknown key '" + it.key() + "' in " + where);
}

inline json spec_to_json(const NetworkSpec& spec) {
    json layers = json::array();
    for (const auto& l : spec.layers) layers.push_back(layer_to_json(l));
    return {{"layers", layers},
            {"input_shape", {spec.in_h, spec.in_w, spec.in_c}},
            {"num_classes", spec.num_classes},
            {"feature_tap", spec.feature_tap == FeatureTap::Post ? "post" : "pre"}};
}

inline NetworkSpec spec_from_json(const json& j) {
    check_keys(j, {"layers", "input_shape", "num_classes", "feature_tap"}, "network spec");
    NetworkSpec spec;
    for (const auto& l : j.at("layers")) spec.layers.push_back(layer_from_json(l));
    const auto& is = j.at("input_shape");
    if (!is.is_array() || is.size() != 3)
        throw ValueError("network spec: input_shape must be [H,W,C]");
    spec.in_h = is[0];
    spec.in_w = is[1];
    spec.in_c = is[2];
    spec.num_classes = j.at("num_classes");
    const std::string tap = j.value("feature_tap", "post");
    if (tap == "post") spec.feature_tap = FeatureTap::Post;
    else if (tap == "pre") spec.feature_tap = FeatureTap::Pre;
    else throw ValueError("network spec: feature_tap must be 'pre' or 'post'");
    return spec;
}

/// Instantiated parameter set over a NetworkSpec, with an optional FT module
/// sitting right before GAP. Value-like: clone() deep-copies parameters.
struct Network {
    NetworkSpec spec;
    std::map<std::string, TensorPtr> params;
    std::optional<FTModule> ft;

    Network clone() const {
        Network n;
        n.spec = spec;
        for (const auto& [k, v] : params) n.params[k] = clone_tensor(*v);
        if (ft) n.ft = ft->clone();
        return n;
    }

    std::vector<TensorPtr> trainable_params() const {
        std::vector<TensorPtr> out;
        for (const auto& [k, v] : params) out.push_back(v);
        if (ft) {
            out.push_back(ft->w_se);
            out.push_back(ft->w_sc);
        }
        return out;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [k, v] : params) n += v->numel();
        if (ft) n += ft->w_se->numel() + ft->w_sc->numel();
        return n;
    }

    void set_requires_grad(bool rg) {
        for (auto& [k, v] : params) v->requires_grad = rg;
        if (ft) {
            ft->w_se->requires_grad = rg;
            ft->w_sc->requires_grad = rg;
        }
    }
};

inline Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
    auto shapes = spec.propagate_shapes();  // validates
    Network net;
    net.spec = spec;
    auto rng = make_rng(seed, "net.init");
    int c = spec.in_c;
    int conv_idx = 0;
    for (const auto& l : spec.layers) {
        if (l.kind == LayerKind::Conv) {
            auto w = make_tensor(Shape{static_cast<std::size_t>(l.kh), static_cast<std::size_t>(l.kw),
                                       static_cast<std::size_t>(c), static_cast<std::size_t>(l.cout)},
                                 0.0, true);
            fill_fan_in_uniform(*w, static_cast<std::size_t>(l.kh) * l.kw * c, rng);
            net.params["conv" + std::to_string(conv_idx++) + ".weight"] = w;
            c = l.cout;
        } else if (l.kind == LayerKind::FC) {
            auto w = make_tensor(Shape{static_cast<std::size_t>(l.fc_out), static_cast<std::size_t>(c)},
                                 0.0, true);
            fill_fan_in_uniform(*w, static_cast<std::size_t>(c), rng);
            net.params["fc.weight"] = w;
            net.params["fc.bias"] = make_tensor(Shape{static_cast<std::size_t>(l.fc_out)}, 0.0, true);
            c = l.fc_out;
        }
    }
    return net;
}

struct ForwardResult {
    TensorPtr features;  // F_s at the tap point (pre-FT)
    TensorPtr pre_gap;   // map entering the FT module (== features when tap is post)
    TensorPtr f_se;      // expanded representation, present when an FT module ran
    TensorPtr logits;
};

/// One pass through the net. The FT module, when present, is applied to the
/// map entering GAP; `features` reports the pre-FT map selected by
/// spec.feature_tap (post = input to GAP / FT, pre = raw last conv output).
inline ForwardResult forward(Graph& g, const Network& net, const TensorPtr& batch) {
    if (batch->shape.size() != 4 || batch->shape[1] != static_cast<std::size_t>(net.spec.in_h) ||
        batch->shape[2] != static_cast<std::size_t>(net.spec.in_w) ||
        batch->shape[3] != static_cast<std::size_t>(net.spec.in_c))
        throw ShapeError("forward: batch shape " + shape_str(batch->shape) +
                         " does not match spec input " + std::to_string(net.spec.in_h) + "x" +
                         std::to_string(net.spec.in_w) + "x" + std::to_string(net.spec.in_c));
    ForwardResult res;
    TensorPtr x = batch;
    TensorPtr last_conv_out;
    int conv_idx = 0;
    for (const auto& l : net.spec.layers) {
        switch (l.kind) {
            case LayerKind::Conv:
                x = g.conv2d(x, net.params.at("conv" + std::to_string(conv_idx++) + ".weight"),
                             l.stride, l.padding);
                last_conv_out = x;
                break;
            case LayerKind::ReLU:
                x = g.relu(x);
                break;
            case LayerKind::AvgPool:
                x = g.avg_pool2d(x, l.window, l.pool_stride);
                break;
            case LayerKind::GAP: {
                res.pre_gap = x;
                res.features = (net.spec.feature_tap == FeatureTap::Post) ? x : last_conv_out;
                if (net.ft) {
                    auto [f_se, f_out] = ft_forward(g, *net.ft, x);
                    res.f_se = f_se;
                    x = f_out;
                }
                x = g.global_avg_pool(x);
                break;
            }
            case LayerKind::FC:
                x = g.fully_connected(x, net.params.at("fc.weight"), net.params.at("fc.bias"));
                break;
        }
    }
    res.logits = x;
    return res;
}

// Reference specs: a wide teacher and a narrow student over 16x16x3 inputs,
// chosen so the teacher tap width (128) exceeds the student's (32).
inline NetworkSpec reference_teacher_spec(int num_classes = 10) {
    NetworkSpec spec;
    spec.in_h = 16; spec.in_w = 16; spec.in_c = 3;
    spec.num_classes = num_classes;
    spec.layers = {
        LayerSpec::conv(3, 3, 32, 1, 1), LayerSpec::relu(), LayerSpec::avg_pool(2, 2),
        LayerSpec::conv(3, 3, 64, 1, 1), LayerSpec::relu(), LayerSpec::avg_pool(2, 2),
        LayerSpec::conv(3, 3, 128, 1, 1), LayerSpec::relu(),
        LayerSpec::gap(), LayerSpec::fc(num_classes),
    };
    return spec;
}

inline NetworkSpec reference_student_spec(int num_classes = 10) {
    NetworkSpec spec;
    spec.in_h = 16; spec.in_w = 16; spec.in_c = 3;
    spec.num_classes = num_classes;
    spec.layers = {
        LayerSpec::conv(3, 3, 8, 1, 1), LayerSpec::relu(), LayerSpec::avg_pool(2, 2),
        LayerSpec::conv(3, 3, 16, 1, 1), LayerSpec::relu(), LayerSpec::avg_pool(2, 2),
        LayerSpec::conv(3, 3, 32, 1, 1), LayerSpec::relu(),
        LayerSpec::gap(), LayerSpec::fc(num_classes),
    };
    return spec;
}

}  // namespace norm
