#pragma once

#include <fstream>

#include "norm/train.hpp"

namespace norm {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DatasetConfig {
    std::string source = "synthetic";  // synthetic | binary
    // synthetic
    int num_classes = 10;
    int per_class_train = 200;
    int per_class_test = 100;
    int height = 16, width = 16, channels = 3;
    double noise_sigma = 0.25;
    std::uint64_t seed = 1;
    // binary
    std::string train_path;
    std::string test_path;
    bool standardize = false;
};

struct RunConfig {
    DatasetConfig dataset;
    NetworkSpec teacher_spec = reference_teacher_spec();
    NetworkSpec student_spec = reference_student_spec();
    DistillConfig distill;
    TrainConfig train;
    std::string output_dir = ".";
};

inline DatasetConfig dataset_from_json(const json& j) {
    DatasetConfig d;
    d.source = j.value("source", d.source);
    if (d.source == "synthetic") {
        check_keys(j, {"source", "num_classes", "per_class_train", "per_class_test", "height",
                       "width", "channels", "noise_sigma", "seed"},
                   "dataset (synthetic)");
        d.num_classes = j.value("num_classes", d.num_classes);
        d.per_class_train = j.value("per_class_train", d.per_class_train);
        d.per_class_test = j.value("per_class_test", d.per_class_test);
        d.height = j.value("height", d.height);
        d.width = j.value("width", d.width);
        d.channels = j.value("channels", d.channels);
        d.noise_sigma = j.value("noise_sigma", d.noise_sigma);
        d.seed = j.value("seed", d.seed);
    } else if (d.source == "binary") {
        check_keys(j, {"source", "num_classes", "height", "width", "channels", "train_path",
                       "test_path", "standardize"},
                   "dataset (binary)");
        d.num_classes = j.at("num_classes");
        d.height = j.at("height");
        d.width = j.at("width");
        d.channels = j.at("channels");
        d.train_path = j.at("train_path");
        d.test_path = j.value("test_path", std::string());
        d.standardize = j.value("standardize", false);
    } else {
        throw ConfigError("dataset.source must be 'synthetic' or 'binary', got '" + d.source + "'");
    }
    return d;
}

inline Metric metric_from_string(const std::string& s) {
    if (s == "l2sq") return Metric::L2Sq;
    if (s == "l1") return Metric::L1;
    throw ConfigError("distill.metric must be 'l2sq' or 'l1', got '" + s + "'");
}

inline DistillConfig distill_from_json(const json& j) {
    check_keys(j, {"n", "alpha", "beta", "temperature", "metric", "split", "split_seed",
                   "match_segments", "normalize", "residual"},
               "distill");
    DistillConfig d;
    d.n = j.value("n", d.n);
    d.alpha = j.value("alpha", d.alpha);
    d.beta = j.value("beta", d.beta);
    d.temperature = j.value("temperature", d.temperature);
    if (j.contains("metric")) d.metric = metric_from_string(j.at("metric"));
    if (j.contains("split")) {
        const std::string s = j.at("split");
        if (s == "sequential") d.split = SplitMode::Sequential;
        else if (s == "random") d.split = SplitMode::Random;
        else throw ConfigError("distill.split must be 'sequential' or 'random', got '" + s + "'");
    }
    d.split_seed = j.value("split_seed", d.split_seed);
    d.match_segments = j.value("match_segments", d.n);
    if (j.contains("normalize")) {
        const std::string s = j.at("normalize");
        if (s == "sum_over_all_div_n") d.normalize = NormalizeMode::SumOverAllDivN;
        else if (s == "mean_per_element") d.normalize = NormalizeMode::MeanPerElement;
        else
            throw ConfigError(
                "distill.normalize must be 'sum_over_all_div_n' or 'mean_per_element', got '" + s +
                "'");
    }
    d.residual = j.value("residual", d.residual);
    d.validate();
    return d;
}

inline TrainConfig train_from_json(const json& j) {
    check_keys(j, {"epochs", "batch_size", "lr", "momentum", "weight_decay", "lr_decay_epochs",
                   "lr_decay_factor", "grad_clip", "seed"},
               "train");
    TrainConfig t;
    t.epochs = j.value("epochs", t.epochs);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.lr = j.value("lr", t.lr);
    t.momentum = j.value("momentum", t.momentum);
    t.weight_decay = j.value("weight_decay", t.weight_decay);
    if (j.contains("lr_decay_epochs"))
        t.lr_decay_epochs = j.at("lr_decay_epochs").get<std::vector<int>>();
    t.lr_decay_factor = j.value("lr_decay_factor", t.lr_decay_factor);
    t.grad_clip = j.value("grad_clip", t.grad_clip);
    t.seed = j.value("seed", t.seed);
    t.validate();
    return t;
}

inline RunConfig run_config_from_json(const json& j) {
    check_keys(j, {"dataset", "teacher_spec", "student_spec", "distill", "train", "output_dir"},
               "run config");
    RunConfig cfg;
    if (j.contains("dataset")) cfg.dataset = dataset_from_json(j.at("dataset"));
    if (j.contains("teacher_spec")) cfg.teacher_spec = spec_from_json(j.at("teacher_spec"));
    if (j.contains("student_spec")) cfg.student_spec = spec_from_json(j.at("student_spec"));
    if (j.contains("distill")) cfg.distill = distill_from_json(j.at("distill"));
    if (j.contains("train")) cfg.train = train_from_json(j.at("train"));
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    if (cfg.dataset.source == "synthetic") {
        // keep class counts coherent across the config
        cfg.teacher_spec.num_classes = cfg.dataset.num_classes;
        cfg.student_spec.num_classes = cfg.dataset.num_classes;
    }
    if (cfg.dataset.source == "binary" && !std::filesystem::exists(cfg.dataset.train_path))
        throw ConfigError("dataset.train_path does not exist: " + cfg.dataset.train_path);
    if (cfg.dataset.source == "binary" && !cfg.dataset.test_path.empty() &&
        !std::filesystem::exists(cfg.dataset.test_path))
        throw ConfigError("dataset.test_path does not exist: " + cfg.dataset.test_path);
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError("malformed JSON in " + path + ": " + e.what());
    }
    try {
        return run_config_from_json(j);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("invalid config " + path + ": " + e.what());
    }
}

inline Dataset build_train_dataset(const DatasetConfig& d) {
    if (d.source == "synthetic")
        return generate_synthetic(d.num_classes, d.per_class_train, d.height, d.width, d.channels,
                                  d.noise_sigma, d.seed, "train");
    BinaryMeta meta{d.height, d.width, d.channels, d.num_classes, d.standardize};
    return load_binary_dataset(d.train_path, meta);
}

inline Dataset build_test_dataset(const DatasetConfig& d) {
    if (d.source == "synthetic")
        return generate_synthetic(d.num_classes, d.per_class_test, d.height, d.width, d.channels,
                                  d.noise_sigma, d.seed, "test");
    if (d.test_path.empty()) throw ConfigError("dataset.test_path is required for 'binary'");
    BinaryMeta meta{d.height, d.width, d.channels, d.num_classes, d.standardize};
    return load_binary_dataset(d.test_path, meta);
}

}  // namespace norm
