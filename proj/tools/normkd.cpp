// normkd: teacher pretraining, NORM distillation, FT merge and verification,
// evaluation, and the N-sweep ablation, all driven by a JSON config.

#include <CLI11.hpp>
#include <iostream>

#include "norm/config.hpp"

namespace {

constexpr int kExitConfigError = 1;
constexpr int kExitRuntimeError = 2;
constexpr int kExitVerifyFailed = 3;

std::ofstream open_metrics_csv(const norm::RunConfig& cfg, const std::string& name) {
    std::filesystem::create_directories(cfg.output_dir);
    const auto path = std::filesystem::path(cfg.output_dir) / name;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw norm::ConfigError("cannot write metrics CSV: " + path.string());
    return out;
}

int cmd_train_teacher(const std::string& config_path, const std::string& out_path) {
    auto cfg = norm::load_run_config(config_path);
    auto train_ds = norm::build_train_dataset(cfg.dataset);
    auto csv = open_metrics_csv(cfg, "teacher_metrics.csv");
    auto teacher = norm::pretrain_teacher(cfg.teacher_spec, train_ds, cfg.train, &csv);
    norm::save_checkpoint(teacher, out_path);
    auto eval = norm::evaluate(teacher, train_ds);
    std::cout << norm::json{{"checkpoint", out_path}, {"train_top1", eval.top1_accuracy}}.dump()
              << "\n";
    return 0;
}

int cmd_distill(const std::string& config_path, const std::string& teacher_path,
                const std::string& out_path) {
    auto cfg = norm::load_run_config(config_path);
    auto teacher = norm::load_checkpoint(teacher_path);
    auto train_ds = norm::build_train_dataset(cfg.dataset);
    auto csv = open_metrics_csv(cfg, "student_metrics.csv");
    auto student = norm::distill_student(cfg.student_spec, teacher, train_ds, cfg.distill,
                                         cfg.train, &csv);
    norm::save_checkpoint(student, out_path);
    auto eval = norm::evaluate(student, train_ds);
    std::cout << norm::json{{"checkpoint", out_path}, {"train_top1", eval.top1_accuracy}}.dump()
              << "\n";
    return 0;
}

int cmd_merge(const std::string& in_path, const std::string& out_path, double tolerance,
              int probes) {
    auto net = norm::load_checkpoint(in_path);
    auto merged = norm::merge_ft_into_fc(net);
    auto report = norm::verify_equivalence(net, merged, probes, tolerance, /*seed=*/0);
    norm::save_checkpoint(merged, out_path);
    std::cout << norm::merge_report_to_json(report).dump() << "\n";
    return report.passed ? 0 : kExitVerifyFailed;
}

int cmd_eval(const std::string& in_path, const std::string& config_path) {
    auto cfg = norm::load_run_config(config_path);
    auto net = norm::load_checkpoint(in_path);
    auto ds = norm::build_test_dataset(cfg.dataset);
    auto res = norm::evaluate(net, ds);
    std::cout << norm::json{{"top1_accuracy", res.top1_accuracy}, {"mean_loss", res.mean_loss}}.dump()
              << "\n";
    return 0;
}

int cmd_verify(const std::string& a_path, const std::string& b_path, int probes, double tolerance) {
    auto a = norm::load_checkpoint(a_path);
    auto b = norm::load_checkpoint(b_path);
    auto report = norm::verify_equivalence(a, b, probes, tolerance, /*seed=*/0);
    std::cout << norm::merge_report_to_json(report).dump() << "\n";
    return report.passed ? 0 : kExitVerifyFailed;
}

int cmd_ablate_n(const std::string& config_path, const std::string& values_csv, int num_seeds) {
    auto cfg = norm::load_run_config(config_path);
    std::vector<int> values;
    {
        std::stringstream ss(values_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty()) continue;
            values.push_back(std::stoi(tok));
        }
    }
    if (values.empty()) throw norm::ConfigError("ablate-n: no N values given");
    if (num_seeds < 1) throw norm::ConfigError("ablate-n: --seeds must be >= 1");

    auto train_ds = norm::build_train_dataset(cfg.dataset);
    auto test_ds = norm::build_test_dataset(cfg.dataset);
    auto teacher = norm::pretrain_teacher(cfg.teacher_spec, train_ds, cfg.train);

    std::filesystem::create_directories(cfg.output_dir);
    const auto csv_path = std::filesystem::path(cfg.output_dir) / "ablate_n.csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    csv << "n,mean_top1,std_top1\n";
    std::cout << "n,mean_top1,std_top1\n";
    for (int n : values) {
        std::vector<double> accs;
        for (int s = 0; s < num_seeds; ++s) {
            auto dcfg = cfg.distill;
            dcfg.n = n;
            dcfg.match_segments = n;
            auto tcfg = cfg.train;
            tcfg.seed = norm::derive_seed(cfg.train.seed, "ablate.seed." + std::to_string(s));
            auto student =
                norm::distill_student(cfg.student_spec, teacher, train_ds, dcfg, tcfg);
            accs.push_back(norm::evaluate(student, test_ds).top1_accuracy);
        }
        double mean = 0.0;
        for (double a : accs) mean += a;
        mean /= static_cast<double>(accs.size());
        double var = 0.0;
        for (double a : accs) var += (a - mean) * (a - mean);
        const double sd = std::sqrt(var / static_cast<double>(accs.size()));
        char line[128];
        std::snprintf(line, sizeof(line), "%d,%.17g,%.17g\n", n, mean, sd);
        csv << line;
        std::cout << line;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"NORM knowledge distillation toolkit"};
    app.require_subcommand(1);

    std::string config_path, in_path, out_path, teacher_path, a_path, b_path, values = "1,2,4,8";
    double tolerance = 1e-9;
    int probes = 100;
    int seeds = 5;

    auto* train_teacher = app.add_subcommand("train-teacher", "pretrain the teacher network");
    train_teacher->add_option("--config", config_path)->required();
    train_teacher->add_option("--out", out_path)->required();

    auto* distill = app.add_subcommand("distill", "distill the student with NORM");
    distill->add_option("--config", config_path)->required();
    distill->add_option("--teacher", teacher_path)->required();
    distill->add_option("--out", out_path)->required();

    auto* merge = app.add_subcommand("merge", "fold the FT module into the FC layer and verify");
    merge->add_option("--in", in_path)->required();
    merge->add_option("--out", out_path)->required();
    merge->add_option("--tolerance", tolerance);
    merge->add_option("--probes", probes);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    eval->add_option("--in", in_path)->required();
    eval->add_option("--config", config_path)->required();

    auto* verify = app.add_subcommand("verify", "logit-equivalence report for two checkpoints");
    verify->add_option("--a", a_path)->required();
    verify->add_option("--b", b_path)->required();
    verify->add_option("--probes", probes);
    verify->add_option("--tolerance", tolerance);

    auto* ablate = app.add_subcommand("ablate-n", "sweep N over multiple seeds, emit CSV");
    ablate->add_option("--config", config_path)->required();
    ablate->add_option("--values", values);
    ablate->add_option("--seeds", seeds);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitConfigError;
    }

    try {
        if (train_teacher->parsed()) return cmd_train_teacher(config_path, out_path);
        if (distill->parsed()) return cmd_distill(config_path, teacher_path, out_path);
        if (merge->parsed()) return cmd_merge(in_path, out_path, tolerance, probes);
        if (eval->parsed()) return cmd_eval(in_path, config_path);
        if (verify->parsed()) return cmd_verify(a_path, b_path, probes, tolerance);
        if (ablate->parsed()) return cmd_ablate_n(config_path, values, seeds);
    } catch (const norm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const norm::CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntimeError;
    }
    return kExitConfigError;
}
