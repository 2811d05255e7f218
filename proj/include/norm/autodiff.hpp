#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <functional>
#include <utility>

#include "norm/tensor.hpp"

namespace norm {

enum class Metric { L2Sq, L1 };

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

/// Reverse-mode tape. Ops append nodes in execution order, so the node list
/// is topologically sorted by construction; backward() walks it in reverse.
/// A non-recording graph evaluates forward only and never allocates grads
/// (teacher / inference paths).
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    std::size_t num_nodes() const { return nodes_.size(); }

    /// Propagates d loss / d tensor into every requires_grad tensor reachable
    /// from `loss`. Grad buffers accumulate; callers zero them between steps.
    /// A graph can be consumed once.
    void backward(const TensorPtr& loss) {
        if (!loss->is_scalar())
            throw ShapeError("backward: loss must be scalar, got " + shape_str(loss->shape));
        if (consumed_) throw ValueError("backward: graph already consumed");
        consumed_ = true;
        loss->ensure_grad();
        loss->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->output->grad.empty()) continue;  // not on a path to the loss
            it->backward();
        }
    }

    // ---- elementwise and reduction ops ----

    TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
        check_same_shape(*a, *b, "add");
        auto out = make_tensor(a->shape);
        for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
        record(out, {a, b}, [out, a, b] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i) b->grad[i] += out->grad[i];
            }
        });
        return out;
    }

    TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
        check_same_shape(*a, *b, "mul");
        auto out = make_tensor(a->shape);
        for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
        record(out, {a, b}, [out, a, b] {
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i)
                    a->grad[i] += out->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->numel(); ++i)
                    b->grad[i] += out->grad[i] * a->data[i];
            }
        });
        return out;
    }

    TensorPtr scale(const TensorPtr& a, double c) {
        auto out = make_tensor(a->shape);
        for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * c;
        record(out, {a}, [out, a, c] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] * c;
        });
        return out;
    }

    TensorPtr sum(const TensorPtr& a) {
        auto out = make_tensor(Shape{1});
        out->data[0] = std::accumulate(a->data.begin(), a->data.end(), 0.0);
        record(out, {a}, [out, a] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[0];
        });
        return out;
    }

    TensorPtr relu(const TensorPtr& a) {
        auto out = make_tensor(a->shape);
        for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = std::max(0.0, a->data[i]);
        record(out, {a}, [out, a] {
            if (!a->requires_grad) return;
            a->ensure_grad();
            // subgradient 0 at exactly 0
            for (std::size_t i = 0; i < out->numel(); ++i)
                if (a->data[i] > 0.0) a->grad[i] += out->grad[i];
        });
        return out;
    }

    // ---- convolution / pooling / linear ----

    /// Cross-correlation (no kernel flip). input [B,H,W,Cin], kernel
    /// [kh,kw,Cin,Cout]; H' = floor((H + 2p - kh)/stride) + 1.
    TensorPtr conv2d(const TensorPtr& input, const TensorPtr& kernel, int stride, int padding) {
        if (input->shape.size() != 4)
            throw ShapeError("conv2d: input must be 4-D, got " + shape_str(input->shape));
        if (kernel->shape.size() != 4)
            throw ShapeError("conv2d: kernel must be 4-D, got " + shape_str(kernel->shape));
        if (stride < 1) throw ValueError("conv2d: stride must be positive");
        if (padding < 0) throw ValueError("conv2d: padding must be non-negative");
        const std::size_t B = input->shape[0], H = input->shape[1], W = input->shape[2],
                          Cin = input->shape[3];
        const std::size_t kh = kernel->shape[0], kw = kernel->shape[1],
                          kcin = kernel->shape[2], cout = kernel->shape[3];
        if (kcin != Cin)
            throw ShapeError("conv2d: kernel Cin " + std::to_string(kcin) +
                             " does not match input Cin " + std::to_string(Cin));
        if (kh > H + 2 * static_cast<std::size_t>(padding))
            throw ShapeError("conv2d: kernel height " + std::to_string(kh) +
                             " exceeds padded input height");
        if (kw > W + 2 * static_cast<std::size_t>(padding))
            throw ShapeError("conv2d: kernel width " + std::to_string(kw) +
                             " exceeds padded input width");
        const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
        const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;

        // im2col, then one GEMM over the whole batch
        auto cols = std::make_shared<RowMat>(RowMat::Zero(
            static_cast<Eigen::Index>(B * Ho * Wo), static_cast<Eigen::Index>(kh * kw * Cin)));
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oh = 0; oh < Ho; ++oh)
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    const std::size_t row = (b * Ho + oh) * Wo + ow;
                    for (std::size_t dh = 0; dh < kh; ++dh) {
                        const long ih = static_cast<long>(oh * stride + dh) - padding;
                        if (ih < 0 || ih >= static_cast<long>(H)) continue;
                        for (std::size_t dw = 0; dw < kw; ++dw) {
                            const long iw = static_cast<long>(ow * stride + dw) - padding;
                            if (iw < 0 || iw >= static_cast<long>(W)) continue;
                            const double* src = &input->data[input->index4(b, ih, iw, 0)];
                            double* dst = &(*cols)(row, static_cast<Eigen::Index>((dh * kw + dw) * Cin));
                            std::copy(src, src + Cin, dst);
                        }
                    }
                }

        auto out = make_tensor(Shape{B, Ho, Wo, cout});
        {
            ConstRowMap kmat(kernel->data.data(), static_cast<Eigen::Index>(kh * kw * Cin),
                             static_cast<Eigen::Index>(cout));
            RowMap omat(out->data.data(), cols->rows(), static_cast<Eigen::Index>(cout));
            omat.noalias() = (*cols) * kmat;
        }

        record(out, {input, kernel}, [out, input, kernel, cols, stride, padding, B, H, W, Cin,
                                      kh, kw, cout, Ho, Wo] {
            ConstRowMap gout(out->grad.data(), cols->rows(), static_cast<Eigen::Index>(cout));
            if (kernel->requires_grad) {
                kernel->ensure_grad();
                RowMap gk(kernel->grad.data(), static_cast<Eigen::Index>(kh * kw * Cin),
                          static_cast<Eigen::Index>(cout));
                gk.noalias() += cols->transpose() * gout;
            }
            if (input->requires_grad) {
                input->ensure_grad();
                ConstRowMap kmat(kernel->data.data(), static_cast<Eigen::Index>(kh * kw * Cin),
                                 static_cast<Eigen::Index>(cout));
                RowMat gcols = gout * kmat.transpose();  // col2im scatter below
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t oh = 0; oh < Ho; ++oh)
                        for (std::size_t ow = 0; ow < Wo; ++ow) {
                            const std::size_t row = (b * Ho + oh) * Wo + ow;
                            for (std::size_t dh = 0; dh < kh; ++dh) {
                                const long ih = static_cast<long>(oh * stride + dh) - padding;
                                if (ih < 0 || ih >= static_cast<long>(H)) continue;
                                for (std::size_t dw = 0; dw < kw; ++dw) {
                                    const long iw = static_cast<long>(ow * stride + dw) - padding;
                                    if (iw < 0 || iw >= static_cast<long>(W)) continue;
                                    double* dst = &input->grad[input->index4(b, ih, iw, 0)];
                                    const double* src =
                                        &gcols(row, static_cast<Eigen::Index>((dh * kw + dw) * Cin));
                                    for (std::size_t c = 0; c < Cin; ++c) dst[c] += src[c];
                                }
                            }
                        }
            }
        });
        return out;
    }

    TensorPtr avg_pool2d(const TensorPtr& input, int window, int stride) {
        if (input->shape.size() != 4)
            throw ShapeError("avg_pool2d: input must be 4-D, got " + shape_str(input->shape));
        if (window < 1 || stride < 1)
            throw ValueError("avg_pool2d: window and stride must be positive");
        const std::size_t B = input->shape[0], H = input->shape[1], W = input->shape[2],
                          C = input->shape[3];
        const std::size_t win = static_cast<std::size_t>(window);
        if (win > H || win > W)
            throw ShapeError("avg_pool2d: window " + std::to_string(win) +
                             " larger than spatial dims " + shape_str(input->shape));
        const std::size_t Ho = (H - win) / stride + 1;
        const std::size_t Wo = (W - win) / stride + 1;
        auto out = make_tensor(Shape{B, Ho, Wo, C});
        const double inv = 1.0 / static_cast<double>(win * win);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oh = 0; oh < Ho; ++oh)
                for (std::size_t ow = 0; ow < Wo; ++ow)
                    for (std::size_t dh = 0; dh < win; ++dh)
                        for (std::size_t dw = 0; dw < win; ++dw) {
                            const double* src =
                                &input->data[input->index4(b, oh * stride + dh, ow * stride + dw, 0)];
                            double* dst = &out->data[out->index4(b, oh, ow, 0)];
                            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c] * inv;
                        }
        record(out, {input}, [out, input, win, stride, inv, B, Ho, Wo, C] {
            if (!input->requires_grad) return;
            input->ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t oh = 0; oh < Ho; ++oh)
                    for (std::size_t ow = 0; ow < Wo; ++ow)
                        for (std::size_t dh = 0; dh < win; ++dh)
                            for (std::size_t dw = 0; dw < win; ++dw) {
                                double* dst = &input->grad[input->index4(
                                    b, oh * stride + dh, ow * stride + dw, 0)];
                                const double* src = &out->grad[out->index4(b, oh, ow, 0)];
                                for (std::size_t c = 0; c < C; ++c) dst[c] += src[c] * inv;
                            }
        });
        return out;
    }

    /// [B,H,W,C] -> [B,C], per-channel spatial mean.
    TensorPtr global_avg_pool(const TensorPtr& input) {
        if (input->shape.size() != 4)
            throw ShapeError("global_avg_pool: input must be 4-D, got " + shape_str(input->shape));
        const std::size_t B = input->shape[0], H = input->shape[1], W = input->shape[2],
                          C = input->shape[3];
        auto out = make_tensor(Shape{B, C});
        const double inv = 1.0 / static_cast<double>(H * W);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    const double* src = &input->data[input->index4(b, h, w, 0)];
                    double* dst = &out->data[out->index2(b, 0)];
                    for (std::size_t c = 0; c < C; ++c) dst[c] += src[c] * inv;
                }
        record(out, {input}, [out, input, inv, B, H, W, C] {
            if (!input->requires_grad) return;
            input->ensure_grad();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t w = 0; w < W; ++w) {
                        double* dst = &input->grad[input->index4(b, h, w, 0)];
                        const double* src = &out->grad[out->index2(b, 0)];
                        for (std::size_t c = 0; c < C; ++c) dst[c] += src[c] * inv;
                    }
        });
        return out;
    }

    /// input [B,Cin], weight [Cout,Cin], optional bias [Cout] -> [B,Cout]
    TensorPtr fully_connected(const TensorPtr& input, const TensorPtr& weight,
                              const TensorPtr& bias = nullptr) {
        if (input->shape.size() != 2 || weight->shape.size() != 2)
            throw ShapeError("fully_connected: input and weight must be 2-D");
        const std::size_t B = input->shape[0], Cin = input->shape[1];
        const std::size_t cout = weight->shape[0], wcin = weight->shape[1];
        if (wcin != Cin)
            throw ShapeError("fully_connected: weight Cin " + std::to_string(wcin) +
                             " does not match input Cin " + std::to_string(Cin));
        if (bias && (bias->shape.size() != 1 || bias->shape[0] != cout))
            throw ShapeError("fully_connected: bias shape " + shape_str(bias->shape) +
                             " does not match Cout " + std::to_string(cout));
        auto out = make_tensor(Shape{B, cout});
        {
            ConstRowMap x(input->data.data(), static_cast<Eigen::Index>(B),
                          static_cast<Eigen::Index>(Cin));
            ConstRowMap w(weight->data.data(), static_cast<Eigen::Index>(cout),
                          static_cast<Eigen::Index>(Cin));
            RowMap o(out->data.data(), static_cast<Eigen::Index>(B),
                     static_cast<Eigen::Index>(cout));
            o.noalias() = x * w.transpose();
            if (bias)
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < cout; ++c) out->data[out->index2(b, c)] += bias->data[c];
        }
        record(out, {input, weight, bias}, [out, input, weight, bias, B, Cin, cout] {
            ConstRowMap gout(out->grad.data(), static_cast<Eigen::Index>(B),
                             static_cast<Eigen::Index>(cout));
            if (weight->requires_grad) {
                weight->ensure_grad();
                ConstRowMap x(input->data.data(), static_cast<Eigen::Index>(B),
                              static_cast<Eigen::Index>(Cin));
                RowMap gw(weight->grad.data(), static_cast<Eigen::Index>(cout),
                          static_cast<Eigen::Index>(Cin));
                gw.noalias() += gout.transpose() * x;
            }
            if (input->requires_grad) {
                input->ensure_grad();
                ConstRowMap w(weight->data.data(), static_cast<Eigen::Index>(cout),
                              static_cast<Eigen::Index>(Cin));
                RowMap gx(input->grad.data(), static_cast<Eigen::Index>(B),
                          static_cast<Eigen::Index>(Cin));
                gx.noalias() += gout * w;
            }
            if (bias && bias->requires_grad) {
                bias->ensure_grad();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < cout; ++c)
                        bias->grad[c] += out->grad[out->index2(b, c)];
            }
        });
        return out;
    }

    // ---- losses ----

    /// Mean over the batch of -log softmax(logits)[label], max-subtracted.
    TensorPtr softmax_cross_entropy(const TensorPtr& logits, const std::vector<int>& labels) {
        if (logits->shape.size() != 2)
            throw ShapeError("softmax_cross_entropy: logits must be 2-D, got " +
                             shape_str(logits->shape));
        const std::size_t B = logits->shape[0], K = logits->shape[1];
        if (labels.size() != B)
            throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                             " labels for batch " + std::to_string(B));
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= K)
                throw ValueError("softmax_cross_entropy: label " + std::to_string(y) +
                                 " out of range [0," + std::to_string(K) + ")");
        auto probs = std::make_shared<std::vector<double>>(B * K);
        double loss = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            const double* z = &logits->data[b * K];
            double m = z[0];
            for (std::size_t k = 1; k < K; ++k) m = std::max(m, z[k]);
            double sum = 0.0;
            for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - m);
            const double logsum = std::log(sum) + m;
            for (std::size_t k = 0; k < K; ++k) (*probs)[b * K + k] = std::exp(z[k] - logsum);
            loss -= z[labels[b]] - logsum;
        }
        auto out = make_tensor(Shape{1});
        out->data[0] = loss / static_cast<double>(B);
        record(out, {logits}, [out, logits, probs, labels, B, K] {
            if (!logits->requires_grad) return;
            logits->ensure_grad();
            const double g = out->grad[0] / static_cast<double>(B);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t k = 0; k < K; ++k) {
                    double p = (*probs)[b * K + k];
                    if (k == static_cast<std::size_t>(labels[b])) p -= 1.0;
                    logits->grad[b * K + k] += g * p;
                }
        });
        return out;
    }

    /// T^2 * mean over batch of KL(softmax(z_t/T) || softmax(z_s/T)).
    /// Teacher logits are constant; only the student side gets gradients.
    TensorPtr kd_divergence(const TensorPtr& student_logits, const TensorPtr& teacher_logits,
                            double temperature) {
        if (temperature <= 0.0)
            throw ValueError("kd_divergence: temperature must be positive, got " +
                             std::to_string(temperature));
        check_same_shape(*student_logits, *teacher_logits, "kd_divergence");
        if (student_logits->shape.size() != 2)
            throw ShapeError("kd_divergence: logits must be 2-D");
        const std::size_t B = student_logits->shape[0], K = student_logits->shape[1];
        auto ps = std::make_shared<std::vector<double>>(B * K);
        auto pt = std::make_shared<std::vector<double>>(B * K);
        auto log_softmax_into = [K](const double* z, double T, double* p, double* logp) {
            double m = z[0];
            for (std::size_t k = 1; k < K; ++k) m = std::max(m, z[k]);
            double sum = 0.0;
            for (std::size_t k = 0; k < K; ++k) sum += std::exp((z[k] - m) / T);
            const double logsum = std::log(sum);
            for (std::size_t k = 0; k < K; ++k) {
                logp[k] = (z[k] - m) / T - logsum;
                p[k] = std::exp(logp[k]);
            }
        };
        std::vector<double> logps(K), logpt(K);
        double loss = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
            log_softmax_into(&student_logits->data[b * K], temperature, &(*ps)[b * K], logps.data());
            log_softmax_into(&teacher_logits->data[b * K], temperature, &(*pt)[b * K], logpt.data());
            for (std::size_t k = 0; k < K; ++k)
                loss += (*pt)[b * K + k] * (logpt[k] - logps[k]);
        }
        auto out = make_tensor(Shape{1});
        out->data[0] = temperature * temperature * loss / static_cast<double>(B);
        record(out, {student_logits}, [out, student_logits, ps, pt, temperature, B, K] {
            if (!student_logits->requires_grad) return;
            student_logits->ensure_grad();
            const double g = out->grad[0] * temperature / static_cast<double>(B);
            for (std::size_t i = 0; i < B * K; ++i)
                student_logits->grad[i] += g * ((*ps)[i] - (*pt)[i]);
        });
        return out;
    }

    /// Sum over all elements (batch included); caller normalizes.
    /// Gradients flow to `a` only; `b` is treated as constant.
    TensorPtr distance(const TensorPtr& a, const TensorPtr& b, Metric metric) {
        check_same_shape(*a, *b, "distance");
        auto out = make_tensor(Shape{1});
        double acc = 0.0;
        if (metric == Metric::L2Sq) {
            for (std::size_t i = 0; i < a->numel(); ++i) {
                const double d = a->data[i] - b->data[i];
                acc += d * d;
            }
        } else {
            for (std::size_t i = 0; i < a->numel(); ++i) acc += std::abs(a->data[i] - b->data[i]);
        }
        out->data[0] = acc;
        record(out, {a, b}, [out, a, b, metric] {
            const double g = out->grad[0];
            if (a->requires_grad) a->ensure_grad();
            if (b->requires_grad) b->ensure_grad();
            for (std::size_t i = 0; i < a->numel(); ++i) {
                const double d = a->data[i] - b->data[i];
                double da;
                if (metric == Metric::L2Sq) da = g * 2.0 * d;
                else da = d > 0.0 ? g : (d < 0.0 ? -g : 0.0);
                if (a->requires_grad) a->grad[i] += da;
                if (b->requires_grad) b->grad[i] -= da;
            }
        });
        return out;
    }

    // ---- channel plumbing for segment splitting ----

    /// Slice channels [c0, c1) of a [B,H,W,C] tensor.
    TensorPtr slice_channels(const TensorPtr& input, std::size_t c0, std::size_t c1) {
        if (input->shape.size() != 4)
            throw ShapeError("slice_channels: input must be 4-D");
        const std::size_t C = input->shape[3];
        if (c0 >= c1 || c1 > C)
            throw ShapeError("slice_channels: invalid range [" + std::to_string(c0) + "," +
                             std::to_string(c1) + ") for C=" + std::to_string(C));
        const std::size_t B = input->shape[0], H = input->shape[1], W = input->shape[2];
        const std::size_t Cs = c1 - c0;
        auto out = make_tensor(Shape{B, H, W, Cs});
        const std::size_t pixels = B * H * W;
        for (std::size_t p = 0; p < pixels; ++p)
            std::copy(&input->data[p * C + c0], &input->data[p * C + c1], &out->data[p * Cs]);
        record(out, {input}, [out, input, c0, C, Cs, pixels] {
            if (!input->requires_grad) return;
            input->ensure_grad();
            for (std::size_t p = 0; p < pixels; ++p)
                for (std::size_t c = 0; c < Cs; ++c)
                    input->grad[p * C + c0 + c] += out->grad[p * Cs + c];
        });
        return out;
    }

    /// out[..., j] = input[..., perm[j]] over the channel dimension.
    TensorPtr permute_channels(const TensorPtr& input, std::vector<std::size_t> perm) {
        if (input->shape.size() != 4)
            throw ShapeError("permute_channels: input must be 4-D");
        const std::size_t C = input->shape[3];
        if (perm.size() != C)
            throw ShapeError("permute_channels: permutation length " +
                             std::to_string(perm.size()) + " does not match C=" + std::to_string(C));
        auto out = make_tensor(input->shape);
        const std::size_t pixels = input->numel() / C;
        for (std::size_t p = 0; p < pixels; ++p)
            for (std::size_t j = 0; j < C; ++j) out->data[p * C + j] = input->data[p * C + perm[j]];
        record(out, {input}, [out, input, perm, C, pixels] {
            if (!input->requires_grad) return;
            input->ensure_grad();
            for (std::size_t p = 0; p < pixels; ++p)
                for (std::size_t j = 0; j < C; ++j)
                    input->grad[p * C + perm[j]] += out->grad[p * C + j];
        });
        return out;
    }

private:
    struct Node {
        TensorPtr output;
        std::function<void()> backward;
    };

    void record(const TensorPtr& out, std::initializer_list<TensorPtr> inputs,
                std::function<void()> backward) {
        bool any = false;
        for (const auto& in : inputs)
            if (in && in->requires_grad) any = true;
        if (!recording_ || !any) return;
        out->requires_grad = true;
        nodes_.push_back({out, std::move(backward)});
    }

    std::vector<Node> nodes_;
    bool recording_;
    bool consumed_ = false;
};

/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v
inline void sgd_step(const std::vector<TensorPtr>& params, std::vector<Tensor>& velocities,
                     double lr, double momentum, double weight_decay) {
    if (velocities.size() != params.size())
        throw ShapeError("sgd_step: velocity count does not match parameter count");
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        Tensor& v = velocities[i];
        if (p.grad.size() != p.data.size())
            throw ValueError("sgd_step: parameter " + std::to_string(i) + " has no gradient");
        if (v.data.size() != p.data.size())
            throw ShapeError("sgd_step: velocity " + std::to_string(i) + " shape mismatch");
        for (std::size_t j = 0; j < p.data.size(); ++j) {
            v.data[j] = momentum * v.data[j] + p.grad[j] + weight_decay * p.data[j];
            p.data[j] -= lr * v.data[j];
        }
    }
}

inline void zero_grads(const std::vector<TensorPtr>& params) {
    for (const auto& p : params) p->zero_grad();
}

/// Rescale gradients so their joint L2 norm is at most max_norm.
/// max_norm <= 0 disables clipping. Returns the pre-clip norm.
inline double clip_grads(const std::vector<TensorPtr>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params)
        for (double x : p->grad) sq += x * x;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& p : params)
            for (double& x : p->grad) x *= s;
    }
    return norm;
}

}  // namespace norm
