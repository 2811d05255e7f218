#pragma once

#include "norm/model.hpp"

namespace norm {

struct MergeReport {
    double max_abs_diff = 0.0;
    double max_rel_diff = 0.0;
    int num_probes = 0;
    bool passed = false;
    double tolerance = 1e-9;
};

inline json merge_report_to_json(const MergeReport& r) {
    return {{"max_abs_diff", r.max_abs_diff}, {"max_rel_diff", r.max_rel_diff},
            {"num_probes", r.num_probes}, {"passed", r.passed}, {"tolerance", r.tolerance}};
}

/// Folds the FT module into the FC layer: W_fc' = W_fc (W_sc W_se + r I),
/// r = 1 for the residual variant. Both 1x1 kernels [1,1,Cin,Cout] are read
/// as Cout x Cin matrices. Bias untouched (the FT path is bias-free).
/// Returns a new network with no FT module; the input is not modified.
inline Network merge_ft_into_fc(const Network& net) {
    if (!net.ft) throw ValueError("merge_ft_into_fc: network has no FT module");
    net.spec.propagate_shapes();  // guarantees the GAP->FC tail
    net.ft->validate();
    const FTModule& ft = *net.ft;
    const std::size_t cs = static_cast<std::size_t>(ft.c_s);
    const std::size_t nct = static_cast<std::size_t>(ft.n) * ft.c_t;

    // kernel [1,1,Cin,Cout] stored row-major is a Cin x Cout matrix; its
    // transpose view is the Cout x Cin linear map.
    ConstRowMap se(ft.w_se->data.data(), static_cast<Eigen::Index>(cs),
                   static_cast<Eigen::Index>(nct));  // maps C_s -> N*C_t (as se^T)
    ConstRowMap sc(ft.w_sc->data.data(), static_cast<Eigen::Index>(nct),
                   static_cast<Eigen::Index>(cs));

    const TensorPtr& fcw = net.params.at("fc.weight");
    if (fcw->shape[1] != cs)
        throw ShapeError("merge_ft_into_fc: FC input width " + std::to_string(fcw->shape[1]) +
                         " does not match FT c_s " + std::to_string(cs));
    ConstRowMap fc(fcw->data.data(), static_cast<Eigen::Index>(fcw->shape[0]),
                   static_cast<Eigen::Index>(cs));

    RowMat combined = sc.transpose() * se.transpose();  // C_s x C_s
    if (ft.residual) combined += RowMat::Identity(combined.rows(), combined.cols());

    Network merged = net.clone();
    merged.ft.reset();
    TensorPtr new_fcw = merged.params.at("fc.weight");
    RowMap out(new_fcw->data.data(), fc.rows(), fc.cols());
    out.noalias() = fc * combined;
    return merged;
}

/// Probe-based certificate that two networks compute the same logits.
inline MergeReport verify_equivalence(const Network& before, const Network& after, int num_probes,
                                      double tolerance, std::uint64_t seed) {
    if (before.spec.in_h != after.spec.in_h || before.spec.in_w != after.spec.in_w ||
        before.spec.in_c != after.spec.in_c || before.spec.num_classes != after.spec.num_classes)
        throw ShapeError("verify_equivalence: input shapes or class counts differ");
    MergeReport report;
    report.num_probes = num_probes;
    report.tolerance = tolerance;
    auto rng = make_rng(seed, "verify.probes");
    for (int p = 0; p < num_probes; ++p) {
        auto probe = make_tensor(Shape{1, static_cast<std::size_t>(before.spec.in_h),
                                       static_cast<std::size_t>(before.spec.in_w),
                                       static_cast<std::size_t>(before.spec.in_c)});
        fill_uniform(*probe, 0.0, 1.0, rng);
        Graph ga(false), gb(false);
        auto la = forward(ga, before, probe).logits;
        auto lb = forward(gb, after, probe).logits;
        for (std::size_t i = 0; i < la->numel(); ++i) {
            const double diff = std::abs(la->data[i] - lb->data[i]);
            const double scale = std::max(std::abs(la->data[i]), std::abs(lb->data[i]));
            report.max_abs_diff = std::max(report.max_abs_diff, diff);
            if (scale > 0.0) report.max_rel_diff = std::max(report.max_rel_diff, diff / scale);
        }
    }
    report.passed = report.max_abs_diff <= tolerance;
    return report;
}

}  // namespace norm
