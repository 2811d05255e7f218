#pragma once

#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "norm/data.hpp"
#include "norm/merge.hpp"

namespace norm {

struct TrainConfig {
    int epochs = 60;
    int batch_size = 64;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::vector<int> lr_decay_epochs = {38, 45, 52};
    double lr_decay_factor = 0.1;
    double grad_clip = 1.0;  // global L2 norm cap; <= 0 disables
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ValueError("TrainConfig: epochs must be positive");
        if (batch_size < 1) throw ValueError("TrainConfig: batch_size must be positive");
        // decay epochs beyond the run length are allowed; they never fire
        for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
            if (lr_decay_epochs[i] < 1)
                throw ValueError("TrainConfig: lr_decay_epochs must be positive");
            if (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1])
                throw ValueError("TrainConfig: lr_decay_epochs must be strictly increasing");
        }
    }

    double lr_at(int epoch) const {
        double e = lr;
        for (int d : lr_decay_epochs)
            if (d <= epoch) e *= lr_decay_factor;
        return e;
    }
};

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

struct EvalResult {
    double top1_accuracy = 0.0;
    double mean_loss = 0.0;
};

/// Argmax accuracy over the full dataset; ties break toward the lowest
/// class index.
inline EvalResult evaluate(const Network& net, const Dataset& ds) {
    if (ds.num_classes != net.spec.num_classes)
        throw ShapeError("evaluate: class counts differ");
    EvalResult res;
    const std::size_t n = ds.size();
    if (n == 0) return res;
    const std::size_t chunk = 256;
    std::size_t correct = 0;
    double loss = 0.0;
    for (std::size_t start = 0; start < n; start += chunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(start + chunk, n); ++i) idx.push_back(i);
        Graph g(false);
        auto logits = forward(g, net, ds.sample_batch(idx)).logits;
        auto labels = ds.sample_labels(idx);
        const std::size_t K = logits->shape[1];
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const double* z = &logits->data[b * K];
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (z[k] > z[best]) best = k;
            if (best == static_cast<std::size_t>(labels[b])) ++correct;
            double m = z[0];
            for (std::size_t k = 1; k < K; ++k) m = std::max(m, z[k]);
            double sum = 0.0;
            for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - m);
            loss -= z[labels[b]] - m - std::log(sum);
        }
    }
    res.top1_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    res.mean_loss = loss / static_cast<double>(n);
    return res;
}

inline void check_finite_loss(double loss, int epoch) {
    if (!std::isfinite(loss) || loss > 1e6)
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                              ": loss = " + std::to_string(loss));
}

inline void write_metrics_header(std::ostream* csv) {
    if (csv) *csv << "epoch,lr,train_loss,l_ce,l_norm,l_kd,eval_top1\n";
}

inline void write_metrics_row(std::ostream* csv, int epoch, double lr, double train_loss,
                              double l_ce, double l_norm, double l_kd, double top1) {
    if (!csv) return;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", epoch, lr,
                  train_loss, l_ce, l_norm, l_kd, top1);
    *csv << buf;
}

/// Plain cross-entropy training, the pre-training stage of two-stage KD and
/// the individually-trained baseline student.
inline Network pretrain_teacher(const NetworkSpec& spec, const Dataset& ds, const TrainConfig& cfg,
                                std::ostream* metrics_csv = nullptr,
                                const Dataset* eval_ds = nullptr) {
    cfg.validate();
    if (spec.num_classes != ds.num_classes)
        throw ShapeError("pretrain_teacher: spec num_classes does not match dataset");
    Network net = build_network(spec, derive_seed(cfg.seed, "teacher.init"));
    auto params = net.trainable_params();
    std::vector<Tensor> velocities;
    for (const auto& p : params) velocities.emplace_back(p->shape);
    write_metrics_header(metrics_csv);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr_at(epoch);
        double epoch_loss = 0.0;
        std::size_t nb = 0;
        for (const auto& batch :
             make_batches(ds.size(), cfg.batch_size, derive_seed(cfg.seed, "teacher.shuffle"), epoch)) {
            Graph g;
            auto images = ds.sample_batch(batch.indices);
            auto labels = ds.sample_labels(batch.indices);
            auto res = forward(g, net, images);
            auto loss = g.softmax_cross_entropy(res.logits, labels);
            check_finite_loss(loss->scalar(), epoch);
            zero_grads(params);
            g.backward(loss);
            clip_grads(params, cfg.grad_clip);
            sgd_step(params, velocities, lr, cfg.momentum, cfg.weight_decay);
            epoch_loss += loss->scalar();
            ++nb;
        }
        epoch_loss /= static_cast<double>(nb);
        const double top1 = evaluate(net, eval_ds ? *eval_ds : ds).top1_accuracy;
        write_metrics_row(metrics_csv, epoch, lr, epoch_loss, epoch_loss, 0.0, 0.0, top1);
    }
    return net;
}

/// Teacher tap features and logits for every sample, computed once. The
/// teacher is frozen, so this equals recomputing per batch.
struct TeacherSnapshot {
    Tensor features;  // [N,H,W,C_t]
    Tensor logits;    // [N,K]

    static TeacherSnapshot capture(const Network& teacher, const Dataset& ds) {
        TeacherSnapshot snap;
        const std::size_t n = ds.size();
        auto tap = teacher.spec.tap_shape();
        snap.features = Tensor(Shape{n, static_cast<std::size_t>(tap[0]),
                                     static_cast<std::size_t>(tap[1]),
                                     static_cast<std::size_t>(tap[2])});
        snap.logits = Tensor(Shape{n, static_cast<std::size_t>(teacher.spec.num_classes)});
        const std::size_t chunk = 256;
        for (std::size_t start = 0; start < n; start += chunk) {
            std::vector<std::size_t> idx;
            for (std::size_t i = start; i < std::min(start + chunk, n); ++i) idx.push_back(i);
            Graph g(false);
            auto res = forward(g, teacher, ds.sample_batch(idx));
            const std::size_t fstride = res.features->numel() / idx.size();
            const std::size_t lstride = res.logits->shape[1];
            for (std::size_t b = 0; b < idx.size(); ++b) {
                std::copy(&res.features->data[b * fstride], &res.features->data[(b + 1) * fstride],
                          &snap.features.data[idx[b] * fstride]);
                std::copy(&res.logits->data[b * lstride], &res.logits->data[(b + 1) * lstride],
                          &snap.logits.data[idx[b] * lstride]);
            }
        }
        return snap;
    }

    TensorPtr gather_features(const std::vector<std::size_t>& indices) const {
        const std::size_t stride = features.numel() / features.shape[0];
        auto out = make_tensor(Shape{indices.size(), features.shape[1], features.shape[2],
                                     features.shape[3]});
        for (std::size_t i = 0; i < indices.size(); ++i)
            std::copy(&features.data[indices[i] * stride], &features.data[(indices[i] + 1) * stride],
                      &out->data[i * stride]);
        return out;
    }

    TensorPtr gather_logits(const std::vector<std::size_t>& indices) const {
        const std::size_t K = logits.shape[1];
        auto out = make_tensor(Shape{indices.size(), K});
        for (std::size_t i = 0; i < indices.size(); ++i)
            std::copy(&logits.data[indices[i] * K], &logits.data[(indices[i] + 1) * K],
                      &out->data[i * K]);
        return out;
    }
};

/// NORM distillation: attaches an FT module to the student, trains with
/// L_ce + alpha*L_norm (+ beta*L_kd when beta > 0) through the FT path
/// against a frozen teacher, and returns the student with the FT module
/// still attached. Merging is a separate explicit step.
inline Network distill_student(const NetworkSpec& student_spec, const Network& teacher,
                               const Dataset& ds, const DistillConfig& dcfg,
                               const TrainConfig& tcfg, std::ostream* metrics_csv = nullptr,
                               const Dataset* eval_ds = nullptr) {
    tcfg.validate();
    dcfg.validate();
    auto s_tap = student_spec.tap_shape();
    auto t_tap = teacher.spec.tap_shape();
    if (s_tap[0] != t_tap[0] || s_tap[1] != t_tap[1])
        throw ShapeError("distill_student: student tap " + std::to_string(s_tap[0]) + "x" +
                         std::to_string(s_tap[1]) + " and teacher tap " + std::to_string(t_tap[0]) +
                         "x" + std::to_string(t_tap[1]) + " spatial sizes differ");

    Network teacher_frozen = teacher.clone();
    teacher_frozen.set_requires_grad(false);

    Network student = build_network(student_spec, derive_seed(tcfg.seed, "student.init"));
    student.ft = FTModule::create(dcfg.n, t_tap[2], s_tap[2], dcfg.residual,
                                  derive_seed(tcfg.seed, "student.ft"));

    TeacherSnapshot snap = TeacherSnapshot::capture(teacher_frozen, ds);

    auto params = student.trainable_params();
    std::vector<Tensor> velocities;
    for (const auto& p : params) velocities.emplace_back(p->shape);
    write_metrics_header(metrics_csv);
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        const double lr = tcfg.lr_at(epoch);
        double e_total = 0.0, e_ce = 0.0, e_norm = 0.0, e_kd = 0.0;
        std::size_t nb = 0;
        for (const auto& batch : make_batches(ds.size(), tcfg.batch_size,
                                              derive_seed(tcfg.seed, "student.shuffle"), epoch)) {
            Graph g;
            auto images = ds.sample_batch(batch.indices);
            auto labels = ds.sample_labels(batch.indices);
            auto f_t = snap.gather_features(batch.indices);       // constant
            auto res = forward(g, student, images);
            auto segments = split_segments(g, res.f_se, dcfg.n, static_cast<int>(f_t->shape[3]),
                                           dcfg.split, dcfg.split_seed);
            auto l_norm = norm_loss(g, segments, f_t, dcfg);
            auto l_ce = g.softmax_cross_entropy(res.logits, labels);
            TensorPtr loss;
            double kd_val = 0.0;
            if (dcfg.beta > 0.0) {
                auto l_kd = g.kd_divergence(res.logits, snap.gather_logits(batch.indices),
                                            dcfg.temperature);
                kd_val = l_kd->scalar();
                loss = total_loss_augmented(g, l_ce, l_norm, l_kd, dcfg);
            } else {
                loss = total_loss(g, l_ce, l_norm, dcfg);
            }
            check_finite_loss(loss->scalar(), epoch);
            zero_grads(params);
            g.backward(loss);
            clip_grads(params, tcfg.grad_clip);
            sgd_step(params, velocities, lr, tcfg.momentum, tcfg.weight_decay);
            e_total += loss->scalar();
            e_ce += l_ce->scalar();
            e_norm += l_norm->scalar();
            e_kd += kd_val;
            ++nb;
        }
        const double inv = 1.0 / static_cast<double>(nb);
        const double top1 = evaluate(student, eval_ds ? *eval_ds : ds).top1_accuracy;
        write_metrics_row(metrics_csv, epoch, lr, e_total * inv, e_ce * inv, e_norm * inv,
                          e_kd * inv, top1);
    }
    return student;
}

// ---------------------------------------------------------------------------
// Checkpoint format: "NORMCKPT" magic, u32 version, u64 JSON length + JSON
// (network spec plus optional FT descriptor), u64 tensor count, then per
// tensor: u64 name length, name bytes, u64 ndim, u64 dims, f64 LE payload.
// ---------------------------------------------------------------------------

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};
struct CheckpointMagicError : CheckpointError {
    explicit CheckpointMagicError(const std::string& msg) : CheckpointError(msg) {}
};
struct CheckpointVersionError : CheckpointError {
    explicit CheckpointVersionError(const std::string& msg) : CheckpointError(msg) {}
};
struct CheckpointTruncationError : CheckpointError {
    explicit CheckpointTruncationError(const std::string& msg) : CheckpointError(msg) {}
};

inline constexpr char kCheckpointMagic[8] = {'N', 'O', 'R', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size())
            throw CheckpointTruncationError("checkpoint truncated at byte " + std::to_string(pos));
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

inline void save_checkpoint(const Network& net, const std::string& path) {
    json meta = {{"spec", spec_to_json(net.spec)}};
    if (net.ft)
        meta["ft"] = {{"n", net.ft->n}, {"c_t", net.ft->c_t}, {"c_s", net.ft->c_s},
                      {"residual", net.ft->residual}};
    const std::string meta_str = meta.dump();

    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (const auto& [k, v] : net.params) tensors.emplace_back(k, v.get());
    if (net.ft) {
        tensors.emplace_back("ft.w_se", net.ft->w_se.get());
        tensors.emplace_back("ft.w_sc", net.ft->w_sc.get());
    }
    std::sort(tensors.begin(), tensors.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    std::string out;
    out.append(kCheckpointMagic, 8);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, meta_str.size());
    out.append(meta_str);
    detail::put_u64(out, tensors.size());
    for (const auto& [name, t] : tensors) {
        detail::put_u64(out, name.size());
        out.append(name);
        detail::put_u64(out, t->shape.size());
        for (std::size_t d : t->shape) detail::put_u64(out, d);
        for (double v : t->data) detail::put_f64(out, v);
    }

    // atomic write: temp file in the same directory, then rename
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot write checkpoint: " + tmp);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
    }
    std::filesystem::rename(tmp, path);
}

inline Network load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::Reader r{buf};
    const std::string magic = r.bytes(8);
    if (std::memcmp(magic.data(), kCheckpointMagic, 8) != 0)
        throw CheckpointMagicError("bad checkpoint magic in " + path);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version));
    const std::uint64_t meta_len = r.u64();
    json meta = json::parse(r.bytes(meta_len));

    Network net;
    net.spec = spec_from_json(meta.at("spec"));
    std::map<std::string, TensorPtr> tensors;
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t name_len = r.u64();
        const std::string name = r.bytes(name_len);
        const std::uint64_t ndim = r.u64();
        Shape shape(ndim);
        for (std::uint64_t d = 0; d < ndim; ++d) shape[d] = r.u64();
        auto t = make_tensor(shape, 0.0, true);
        for (double& v : t->data) v = r.f64();
        tensors[name] = t;
    }
    if (meta.contains("ft")) {
        const auto& fj = meta.at("ft");
        FTModule ft;
        ft.n = fj.at("n");
        ft.c_t = fj.at("c_t");
        ft.c_s = fj.at("c_s");
        ft.residual = fj.at("residual");
        auto se = tensors.find("ft.w_se");
        auto sc = tensors.find("ft.w_sc");
        if (se == tensors.end() || sc == tensors.end())
            throw CheckpointError("checkpoint FT descriptor present but FT tensors missing");
        ft.w_se = se->second;
        ft.w_sc = sc->second;
        tensors.erase(se);
        tensors.erase(sc);
        ft.validate();
        net.ft = ft;
    }
    net.params = std::move(tensors);
    net.spec.propagate_shapes();
    return net;
}

}  // namespace norm
