#pragma once

#include <algorithm>
#include <fstream>

#include "norm/tensor.hpp"

namespace norm {

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Dataset {
    Tensor images;  // [N,H,W,C], values in [0,1] (or standardized)
    std::vector<int> labels;
    int num_classes = 0;
    std::string name;

    std::size_t size() const { return labels.size(); }

    TensorPtr sample_batch(const std::vector<std::size_t>& indices) const {
        const std::size_t H = images.shape[1], W = images.shape[2], C = images.shape[3];
        auto out = make_tensor(Shape{indices.size(), H, W, C});
        const std::size_t stride = H * W * C;
        for (std::size_t i = 0; i < indices.size(); ++i)
            std::copy(&images.data[indices[i] * stride], &images.data[indices[i] * stride + stride],
                      &out->data[i * stride]);
        return out;
    }

    std::vector<int> sample_labels(const std::vector<std::size_t>& indices) const {
        std::vector<int> out(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
        return out;
    }
};

struct BinaryMeta {
    int h = 0, w = 0, c = 0;
    int num_classes = 0;
    bool standardize = false;
};

/// CIFAR-style binary records: 1 label byte then C*H*W pixel bytes,
/// channel-planar row-major. Pixels scaled to [0,1] by /255.
inline Dataset load_binary_dataset(const std::string& path, const BinaryMeta& meta) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    const std::size_t record =
        1 + static_cast<std::size_t>(meta.c) * meta.h * meta.w;
    if (bytes.size() % record != 0)
        throw DataError("truncated dataset file: " + std::to_string(bytes.size()) +
                        " bytes is not a multiple of record size " + std::to_string(record));
    const std::size_t n = bytes.size() / record;
    Dataset ds;
    ds.num_classes = meta.num_classes;
    ds.name = path;
    ds.images = Tensor(Shape{n, static_cast<std::size_t>(meta.h), static_cast<std::size_t>(meta.w),
                             static_cast<std::size_t>(meta.c)});
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = &bytes[i * record];
        if (rec[0] >= meta.num_classes)
            throw DataError("record " + std::to_string(i) + ": label byte " +
                            std::to_string(rec[0]) + " >= num_classes " +
                            std::to_string(meta.num_classes));
        ds.labels[i] = rec[0];
        for (int c = 0; c < meta.c; ++c)
            for (int h = 0; h < meta.h; ++h)
                for (int w = 0; w < meta.w; ++w)
                    ds.images.data[ds.images.index4(i, h, w, c)] =
                        rec[1 + (c * meta.h + h) * meta.w + w] / 255.0;
    }
    if (meta.standardize && n > 0) {
        const std::size_t per_ch = n * meta.h * meta.w;
        for (int c = 0; c < meta.c; ++c) {
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                for (int h = 0; h < meta.h; ++h)
                    for (int w = 0; w < meta.w; ++w)
                        mean += ds.images.data[ds.images.index4(i, h, w, c)];
            mean /= static_cast<double>(per_ch);
            double var = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                for (int h = 0; h < meta.h; ++h)
                    for (int w = 0; w < meta.w; ++w) {
                        const double d = ds.images.data[ds.images.index4(i, h, w, c)] - mean;
                        var += d * d;
                    }
            const double sd = std::sqrt(var / static_cast<double>(per_ch));
            const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
            for (std::size_t i = 0; i < n; ++i)
                for (int h = 0; h < meta.h; ++h)
                    for (int w = 0; w < meta.w; ++w) {
                        double& v = ds.images.data[ds.images.index4(i, h, w, c)];
                        v = (v - mean) * inv;
                    }
        }
    }
    return ds;
}

/// Writer for the same record format (test fixtures and tooling).
inline void save_binary_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write dataset file: " + path);
    const std::size_t H = ds.images.shape[1], W = ds.images.shape[2], C = ds.images.shape[3];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out.put(static_cast<char>(ds.labels[i]));
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    const double v = ds.images.data[ds.images.index4(i, h, w, c)];
                    const int byte = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
                    out.put(static_cast<char>(byte));
                }
    }
}

/// Per class k: one template drawn uniformly in [0,1] from the (seed, k)
/// stream; each sample is clamp(template + N(0, sigma), 0, 1). split_tag
/// selects the noise sub-stream, so "train" and "test" splits share class
/// templates but never share noise.
inline Dataset generate_synthetic(int num_classes, int per_class, int h, int w, int c,
                                  double noise_sigma, std::uint64_t seed,
                                  const std::string& split_tag = "") {
    if (num_classes < 1 || per_class < 1 || h < 1 || w < 1 || c < 1)
        throw ValueError("generate_synthetic: all sizes must be positive");
    if (noise_sigma < 0.0) throw ValueError("generate_synthetic: noise_sigma must be >= 0");
    const std::size_t n = static_cast<std::size_t>(num_classes) * per_class;
    const std::size_t pix = static_cast<std::size_t>(h) * w * c;
    Dataset ds;
    ds.num_classes = num_classes;
    ds.name = "synthetic";
    ds.images = Tensor(Shape{n, static_cast<std::size_t>(h), static_cast<std::size_t>(w),
                             static_cast<std::size_t>(c)});
    ds.labels.resize(n);
    std::size_t idx = 0;
    for (int k = 0; k < num_classes; ++k) {
        auto trng = make_rng(seed, "synthetic.template." + std::to_string(k));
        std::vector<double> tmpl(pix);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (double& v : tmpl) v = u(trng);
        auto nrng = make_rng(seed, "synthetic.noise." + split_tag + "." + std::to_string(k));
        std::normal_distribution<double> g(0.0, 1.0);
        for (int s = 0; s < per_class; ++s, ++idx) {
            ds.labels[idx] = k;
            double* dst = &ds.images.data[idx * pix];
            if (noise_sigma == 0.0) {
                std::copy(tmpl.begin(), tmpl.end(), dst);
            } else {
                for (std::size_t p = 0; p < pix; ++p)
                    dst[p] = std::clamp(tmpl[p] + noise_sigma * g(nrng), 0.0, 1.0);
            }
        }
    }
    return ds;
}

struct Batch {
    std::vector<std::size_t> indices;
};

/// Seeded Fisher-Yates shuffle keyed by (shuffle_seed, epoch); every sample
/// appears exactly once, the final partial batch included.
inline std::vector<Batch> make_batches(std::size_t num_samples, std::size_t batch_size,
                                       std::uint64_t shuffle_seed, int epoch) {
    if (batch_size < 1) throw ValueError("make_batches: batch_size must be >= 1");
    std::vector<std::size_t> order(num_samples);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = make_rng(shuffle_seed, "shuffle.epoch." + std::to_string(epoch));
    for (std::size_t i = num_samples; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> d(0, i - 1);
        std::swap(order[i - 1], order[d(rng)]);
    }
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < num_samples; start += batch_size) {
        Batch b;
        const std::size_t end = std::min(start + batch_size, num_samples);
        b.indices.assign(order.begin() + start, order.begin() + end);
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace norm
