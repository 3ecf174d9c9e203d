#pragma once

// Experiment orchestration: per-kind convergence runs (epochs to the 95%
// validation target), the 3x3 train-kind x test-kind error matrix, the COMB
// run with a per-error-kind breakdown, and the MNIST reference. Finished
// runs are cached on disk (checkpoint + summary keyed by a config hash) and
// matrix cells are always evaluated from the saved checkpoint, so re-running
// reproduces every cell from the artifacts alone.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "kanizsa/common.hpp"
#include "kanizsa/dataset.hpp"
#include "kanizsa/mnist.hpp"
#include "kanizsa/nn.hpp"

namespace kanizsa {

struct ExperimentConfig {
    std::string data_dir;             // root containing offs/ angle/ rot/ comb/
    std::string out_dir;              // runs/, matrix.csv, convergence.csv, ...
    nn::TrainConfig train;
    int input_size = 64;              // network input; stored images are mean-pooled down
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    bool use_float64 = false;
    bool reuse_cached = true;         // skip runs whose summary matches the config hash
};

inline std::string config_hash(const ExperimentConfig& cfg) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "size=%d;lr=%.17g;batch=%d;epochs=%d;target=%.17g;every=%d;"
                  "patience=%d;f64=%d",
                  cfg.input_size, cfg.train.learning_rate, cfg.train.batch_size,
                  cfg.train.max_epochs, cfg.train.target_val_accuracy, cfg.train.eval_every,
                  cfg.train.patience_after_target, cfg.use_float64 ? 1 : 0);
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (const char* p = buf; *p; ++p) {
        h ^= static_cast<std::uint8_t>(*p);
        h *= 0x100000001b3ULL;
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

template <typename T>
struct KindData {
    nn::DataView<T> train, val, test;
};

inline std::string dataset_dir(const std::string& data_dir, DatasetKind kind) {
    return (std::filesystem::path(data_dir) / to_string(kind)).string();
}

template <typename T>
KindData<T> load_kind(const std::string& data_dir, DatasetKind kind, int input_size) {
    auto dir = std::filesystem::path(dataset_dir(data_dir, kind));
    for (const char* split : {"train.knz", "val.knz", "test.knz"}) {
        if (!std::filesystem::exists(dir / split)) {
            throw MissingDataset("missing " + (dir / split).string() +
                                 " (run `generate` first)");
        }
    }
    KindData<T> data;
    data.train = nn::kanizsa_dataview<T>(load_packed((dir / "train.knz").string()), input_size);
    data.val = nn::kanizsa_dataview<T>(load_packed((dir / "val.knz").string()), input_size);
    data.test = nn::kanizsa_dataview<T>(load_packed((dir / "test.knz").string()), input_size);
    return data;
}

// ---------------------------------------------------------------------------
// Cached training runs
// ---------------------------------------------------------------------------

struct RunSummary {
    DatasetKind kind = DatasetKind::Offs;
    std::uint64_t seed = 0;
    std::string status;          // "reached_target" | "exhausted" | "diverged"
    int epochs_to_target = -1;
    int best_epoch = -1;
    int epochs_trained = 0;
    std::string checkpoint;     // relative to the run directory; empty if diverged
    std::string hash;
    std::map<std::string, double> test_error_percent;  // by test-kind name

    bool succeeded() const { return status == "reached_target"; }
};

namespace detail {

inline std::string run_dir(const ExperimentConfig& cfg, DatasetKind kind, std::uint64_t seed) {
    return (std::filesystem::path(cfg.out_dir) / "runs" /
            (std::string(to_string(kind)) + "_seed" + std::to_string(seed)))
        .string();
}

inline void save_summary(const std::string& dir, const RunSummary& s) {
    nlohmann::json j;
    j["kind"] = to_string(s.kind);
    j["seed"] = s.seed;
    j["status"] = s.status;
    j["epochs_to_target"] = s.epochs_to_target;
    j["best_epoch"] = s.best_epoch;
    j["epochs_trained"] = s.epochs_trained;
    j["checkpoint"] = s.checkpoint;
    j["config_hash"] = s.hash;
    j["test_error_percent"] = s.test_error_percent;
    std::ofstream f(std::filesystem::path(dir) / "summary.json",
                    std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write summary in " + dir);
    f << j.dump(2) << "\n";
}

inline std::optional<RunSummary> load_summary(const std::string& dir) {
    std::ifstream f(std::filesystem::path(dir) / "summary.json", std::ios::binary);
    if (!f) return std::nullopt;
    nlohmann::json j;
    try {
        f >> j;
        RunSummary s;
        std::string kind = j.at("kind").get<std::string>();
        for (DatasetKind k : {DatasetKind::Offs, DatasetKind::Angle, DatasetKind::Rot,
                              DatasetKind::Comb}) {
            if (kind == to_string(k)) s.kind = k;
        }
        s.seed = j.at("seed").get<std::uint64_t>();
        s.status = j.at("status").get<std::string>();
        s.epochs_to_target = j.at("epochs_to_target").get<int>();
        s.best_epoch = j.at("best_epoch").get<int>();
        s.epochs_trained = j.at("epochs_trained").get<int>();
        s.checkpoint = j.at("checkpoint").get<std::string>();
        s.hash = j.at("config_hash").get<std::string>();
        if (j.contains("test_error_percent")) {
            s.test_error_percent =
                j.at("test_error_percent").get<std::map<std::string, double>>();
        }
        return s;
    } catch (const nlohmann::json::exception&) {
        return std::nullopt;
    }
}

template <typename T>
RunSummary train_one(const ExperimentConfig& cfg, DatasetKind kind, std::uint64_t seed,
                     const KindData<T>& data) {
    const std::string dir = run_dir(cfg, kind, seed);
    std::filesystem::create_directories(dir);

    RunSummary summary;
    summary.kind = kind;
    summary.seed = seed;
    summary.hash = config_hash(cfg);

    nn::NetworkSpec arch = nn::NetworkSpec::default_conv(cfg.input_size, cfg.input_size, 2);
    nn::Network<T> net(arch, seed);
    nn::TrainConfig tc = cfg.train;
    tc.seed = seed;
    try {
        nn::TrainReport report = nn::train(net, data.train, data.val, tc);
        summary.status =
            report.outcome.status == nn::TrainStatus::ReachedTarget ? "reached_target"
                                                                    : "exhausted";
        summary.epochs_to_target = report.outcome.epochs_to_target;
        summary.best_epoch = report.best_epoch;
        summary.epochs_trained = static_cast<int>(report.records.size());
        summary.checkpoint = "model.knzm";
        nn::save_checkpoint((std::filesystem::path(dir) / summary.checkpoint).string(), net);
        nn::write_epoch_csv((std::filesystem::path(dir) / "epochs.csv").string(),
                            report.records);
    } catch (const NumericalDivergence&) {
        summary.status = "diverged";
    }
    save_summary(dir, summary);
    return summary;
}

/// Returns the cached summary when it matches the current config hash,
/// otherwise (re)trains.
template <typename T>
RunSummary run_training(const ExperimentConfig& cfg, DatasetKind kind, std::uint64_t seed,
                        const KindData<T>& data) {
    const std::string dir = run_dir(cfg, kind, seed);
    if (cfg.reuse_cached) {
        auto cached = load_summary(dir);
        if (cached && cached->hash == config_hash(cfg) && cached->kind == kind &&
            cached->seed == seed &&
            (cached->checkpoint.empty() ||
             std::filesystem::exists(std::filesystem::path(dir) / cached->checkpoint))) {
            return *cached;
        }
    }
    return train_one(cfg, kind, seed, data);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convergence
// ---------------------------------------------------------------------------

struct ConvergenceOutcome {
    std::uint64_t seed = 0;
    std::string status;
    int epochs_to_target = -1;
};

struct ConvergenceReport {
    DatasetKind kind = DatasetKind::Offs;
    std::vector<ConvergenceOutcome> outcomes;
    double median_epochs = std::numeric_limits<double>::quiet_NaN();  // over successes
    int failures = 0;  // diverged or never reached the target
};

namespace detail {

inline void finalize_report(ConvergenceReport& report) {
    std::vector<int> successes;
    for (const auto& o : report.outcomes) {
        if (o.status == "reached_target") {
            successes.push_back(o.epochs_to_target);
        } else {
            report.failures += 1;
        }
    }
    if (!successes.empty()) {
        std::sort(successes.begin(), successes.end());
        size_t m = successes.size() / 2;
        report.median_epochs = successes.size() % 2 == 1
                                   ? successes[m]
                                   : (successes[m - 1] + successes[m]) / 2.0;
    }
}

template <typename T>
std::vector<ConvergenceReport> run_convergence_impl(const std::vector<DatasetKind>& kinds,
                                                    const ExperimentConfig& cfg) {
    std::vector<ConvergenceReport> reports;
    for (DatasetKind kind : kinds) {
        KindData<T> data = load_kind<T>(cfg.data_dir, kind, cfg.input_size);
        ConvergenceReport report;
        report.kind = kind;
        for (std::uint64_t seed : cfg.seeds) {
            RunSummary s = detail::run_training(cfg, kind, seed, data);
            report.outcomes.push_back({seed, s.status, s.epochs_to_target});
        }
        finalize_report(report);
        reports.push_back(std::move(report));
    }
    return reports;
}

}  // namespace detail

inline std::vector<ConvergenceReport> run_convergence(const std::vector<DatasetKind>& kinds,
                                                      const ExperimentConfig& cfg) {
    return cfg.use_float64 ? detail::run_convergence_impl<double>(kinds, cfg)
                           : detail::run_convergence_impl<float>(kinds, cfg);
}

inline void write_convergence_csv(const std::string& path,
                                  const std::vector<ConvergenceReport>& reports) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "kind,seed,status,epochs_to_target\n";
    for (const auto& r : reports) {
        for (const auto& o : r.outcomes) {
            f << to_string(r.kind) << ',' << o.seed << ',' << o.status << ','
              << o.epochs_to_target << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-evaluation matrix
// ---------------------------------------------------------------------------

struct MatrixCell {
    DatasetKind train_kind = DatasetKind::Offs;
    DatasetKind test_kind = DatasetKind::Offs;
    double error_rate_percent = std::numeric_limits<double>::quiet_NaN();
    int epochs_trained = 0;
    std::string checkpoint_id;
};

struct ErrorMatrix {
    std::array<std::array<MatrixCell, 3>, 3> cells;  // [train][test], order OFFS/ANGLE/ROT
    std::vector<std::uint64_t> seeds;
    std::string hash;
    std::string arch;
};

inline constexpr std::array<DatasetKind, 3> matrix_kinds = {DatasetKind::Offs, DatasetKind::Angle,
                                                            DatasetKind::Rot};

namespace detail {

/// Evaluates one saved checkpoint on a test set; the summary caches results.
template <typename T>
double eval_cell(const ExperimentConfig& cfg, RunSummary& summary, DatasetKind test_kind,
                 const nn::DataView<T>& test_set) {
    auto it = summary.test_error_percent.find(to_string(test_kind));
    if (cfg.reuse_cached && it != summary.test_error_percent.end()) return it->second;
    const std::string dir = run_dir(cfg, summary.kind, summary.seed);
    nn::Network<T> net =
        nn::load_checkpoint<T>((std::filesystem::path(dir) / summary.checkpoint).string());
    nn::EvalResult res = nn::evaluate(net, test_set, 64, cfg.train.threads);
    double percent = res.error_rate() * 100.0;
    summary.test_error_percent[to_string(test_kind)] = percent;
    save_summary(dir, summary);
    return percent;
}

template <typename T>
ErrorMatrix run_matrix_impl(const ExperimentConfig& cfg) {
    ErrorMatrix matrix;
    matrix.seeds = cfg.seeds;
    matrix.hash = config_hash(cfg);
    matrix.arch = nn::NetworkSpec::default_conv(cfg.input_size, cfg.input_size, 2).describe();

    std::array<nn::DataView<T>, 3> test_sets;
    std::array<KindData<T>, 3> datasets;
    for (size_t i = 0; i < 3; ++i) {
        datasets[i] = load_kind<T>(cfg.data_dir, matrix_kinds[i], cfg.input_size);
        test_sets[i] = datasets[i].test;
    }

    for (size_t row = 0; row < 3; ++row) {
        std::vector<RunSummary> summaries;
        for (std::uint64_t seed : cfg.seeds) {
            summaries.push_back(detail::run_training(cfg, matrix_kinds[row], seed, datasets[row]));
        }
        for (size_t col = 0; col < 3; ++col) {
            MatrixCell& cell = matrix.cells[row][col];
            cell.train_kind = matrix_kinds[row];
            cell.test_kind = matrix_kinds[col];
            double err_sum = 0.0;
            int epoch_sum = 0;
            int available = 0;
            for (auto& s : summaries) {
                if (s.checkpoint.empty()) continue;  // diverged run
                err_sum += eval_cell(cfg, s, matrix_kinds[col], test_sets[col]);
                epoch_sum += s.best_epoch;
                available += 1;
                if (!cell.checkpoint_id.empty()) cell.checkpoint_id += ';';
                cell.checkpoint_id += std::string(to_string(s.kind)) + "_seed" +
                                      std::to_string(s.seed) + "/" + s.checkpoint;
            }
            if (available > 0) {
                cell.error_rate_percent = err_sum / available;
                cell.epochs_trained =
                    static_cast<int>(std::lround(static_cast<double>(epoch_sum) / available));
            }
        }
    }
    return matrix;
}

}  // namespace detail

inline ErrorMatrix run_matrix(const ExperimentConfig& cfg) {
    return cfg.use_float64 ? detail::run_matrix_impl<double>(cfg)
                           : detail::run_matrix_impl<float>(cfg);
}

inline void write_matrix_csv(const std::string& path, const ErrorMatrix& m) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "train_kind,test_kind,error_rate_percent,epochs_trained,checkpoints\n";
    char buf[64];
    for (const auto& row : m.cells) {
        for (const auto& cell : row) {
            std::snprintf(buf, sizeof(buf), "%.4f", cell.error_rate_percent);
            f << to_string(cell.train_kind) << ',' << to_string(cell.test_kind) << ',' << buf
              << ',' << cell.epochs_trained << ',' << cell.checkpoint_id << '\n';
        }
    }
}

inline void write_matrix_markdown(const std::string& path, const ErrorMatrix& m) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "Test error rates [%], mean over seeds";
    for (size_t i = 0; i < m.seeds.size(); ++i) f << (i ? "," : " {") << m.seeds[i];
    f << "}. Checkpoints: lowest validation loss after the accuracy target.\n\n";
    f << "| # epochs | trained on \\ tested on | OFFS | ANGLE | ROT |\n";
    f << "|---:|---|---:|---:|---:|\n";
    char buf[64];
    static const char* names[3] = {"OFFS", "ANGLE", "ROT"};
    for (size_t row = 0; row < 3; ++row) {
        f << "| " << m.cells[row][0].epochs_trained << " | **" << names[row] << "** |";
        for (size_t col = 0; col < 3; ++col) {
            std::snprintf(buf, sizeof(buf), " %.1f |", m.cells[row][col].error_rate_percent);
            f << buf;
        }
        f << '\n';
    }
    f << "\narchitecture: `" << m.arch << "`; config hash " << m.hash << "\n";
}

// ---------------------------------------------------------------------------
// COMB
// ---------------------------------------------------------------------------

struct CombReport {
    ConvergenceReport convergence;
    // Mean over seeds of test error on valid samples and on each invalid
    // error family.
    double valid_error_percent = std::numeric_limits<double>::quiet_NaN();
    std::array<double, 3> invalid_error_percent = {
        std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
        std::numeric_limits<double>::quiet_NaN()};  // offset, angle, rot
    double overall_error_percent = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

template <typename T>
CombReport run_comb_impl(const ExperimentConfig& cfg) {
    KindData<T> data = load_kind<T>(cfg.data_dir, DatasetKind::Comb, cfg.input_size);
    Manifest manifest = parse_manifest_csv(
        (std::filesystem::path(dataset_dir(cfg.data_dir, DatasetKind::Comb)) / "manifest.csv")
            .string());
    std::vector<const ManifestRow*> test_rows;
    for (const auto& row : manifest.rows) {
        if (row.split == Split::Test) test_rows.push_back(&row);
    }
    if (static_cast<int>(test_rows.size()) != data.test.count()) {
        throw FormatError("comb manifest test rows do not match packed test set");
    }

    CombReport report;
    report.convergence.kind = DatasetKind::Comb;
    double valid_err = 0.0, overall_err = 0.0;
    std::array<double, 3> invalid_err = {0.0, 0.0, 0.0};
    int evaluated = 0;

    for (std::uint64_t seed : cfg.seeds) {
        RunSummary s = detail::run_training(cfg, DatasetKind::Comb, seed, data);
        report.convergence.outcomes.push_back({seed, s.status, s.epochs_to_target});
        if (s.checkpoint.empty()) continue;
        const std::string dir = run_dir(cfg, DatasetKind::Comb, seed);
        nn::Network<T> net =
            nn::load_checkpoint<T>((std::filesystem::path(dir) / s.checkpoint).string());
        std::vector<std::uint8_t> pred = nn::predict_labels(net, data.test, 64, cfg.train.threads);

        long valid_n = 0, valid_wrong = 0, wrong = 0;
        std::array<long, 3> kind_n = {0, 0, 0}, kind_wrong = {0, 0, 0};
        for (size_t i = 0; i < pred.size(); ++i) {
            bool miss = pred[i] != data.test.labels[i];
            wrong += miss;
            const ManifestRow& row = *test_rows[i];
            if (row.label == Label::Valid) {
                valid_n += 1;
                valid_wrong += miss;
            } else {
                int k = row.record.kind == PerturbKind::Offset  ? 0
                        : row.record.kind == PerturbKind::Angle ? 1
                                                                : 2;
                kind_n[k] += 1;
                kind_wrong[k] += miss;
            }
        }
        overall_err += 100.0 * wrong / pred.size();
        valid_err += valid_n ? 100.0 * valid_wrong / valid_n : 0.0;
        for (int k = 0; k < 3; ++k) {
            invalid_err[k] += kind_n[k] ? 100.0 * kind_wrong[k] / kind_n[k] : 0.0;
        }
        evaluated += 1;
    }
    finalize_report(report.convergence);
    if (evaluated > 0) {
        report.overall_error_percent = overall_err / evaluated;
        report.valid_error_percent = valid_err / evaluated;
        for (int k = 0; k < 3; ++k) {
            report.invalid_error_percent[k] = invalid_err[k] / evaluated;
        }
    }
    return report;
}

}  // namespace detail

inline CombReport run_comb(const ExperimentConfig& cfg) {
    return cfg.use_float64 ? detail::run_comb_impl<double>(cfg)
                           : detail::run_comb_impl<float>(cfg);
}

// ---------------------------------------------------------------------------
// MNIST reference
// ---------------------------------------------------------------------------

struct MnistReport {
    int epochs_to_5pct_test = -1;
    int epochs_to_95_val = -1;
    std::vector<nn::EpochRecord> records;
    std::vector<double> test_error_percent;  // per epoch
};

namespace detail {

template <typename T>
MnistReport run_mnist_impl(const ExperimentConfig& cfg, const std::string& mnist_dir) {
    namespace fs = std::filesystem;
    auto need = [&](const char* name) {
        fs::path p = fs::path(mnist_dir) / name;
        if (!fs::exists(p)) {
            throw MissingDataset("missing MNIST IDX file: " + p.string());
        }
        return p.string();
    };
    LabeledImages full_train = read_idx_pair(need("train-images-idx3-ubyte"),
                                             need("train-labels-idx1-ubyte"));
    LabeledImages original_val =
        read_idx_pair(need("t10k-images-idx3-ubyte"), need("t10k-labels-idx1-ubyte"));
    std::uint64_t seed = cfg.seeds.empty() ? 1 : cfg.seeds.front();
    MnistSubset subset = mnist_subset(full_train, original_val, seed);

    nn::DataView<T> train_view = nn::mnist_dataview<T>(subset.train);
    nn::DataView<T> val_view = nn::mnist_dataview<T>(subset.val);
    nn::DataView<T> test_view = nn::mnist_dataview<T>(subset.test);

    nn::Network<T> net(nn::NetworkSpec::default_conv(subset.train.rows, subset.train.cols, 10),
                       seed);
    nn::TrainConfig tc = cfg.train;
    tc.seed = seed;
    tc.patience_after_target = 0;

    MnistReport report;
    auto on_epoch = [&](nn::Network<T>& model, const nn::EpochRecord& rec) {
        nn::EvalResult test = nn::evaluate(model, test_view, 64, tc.threads);
        report.test_error_percent.push_back(test.error_rate() * 100.0);
        if (report.epochs_to_5pct_test < 0 && test.error_rate() < 0.05) {
            report.epochs_to_5pct_test = rec.epoch;
        }
        if (report.epochs_to_95_val < 0 && rec.val_acc >= tc.target_val_accuracy) {
            report.epochs_to_95_val = rec.epoch;
        }
        // Keep training only while one of the two thresholds is unmet.
        return report.epochs_to_5pct_test < 0 || report.epochs_to_95_val < 0;
    };
    nn::TrainReport tr = nn::train(net, train_view, val_view, tc,
                                   std::function<bool(nn::Network<T>&, const nn::EpochRecord&)>(
                                       on_epoch));
    report.records = tr.records;

    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        nn::write_epoch_csv((fs::path(cfg.out_dir) / "mnist_epochs.csv").string(), tr.records);
        nn::save_checkpoint((fs::path(cfg.out_dir) / "mnist_model.knzm").string(), net);
    }
    return report;
}

}  // namespace detail

inline MnistReport run_mnist_reference(const ExperimentConfig& cfg, const std::string& mnist_dir) {
    return cfg.use_float64 ? detail::run_mnist_impl<double>(cfg, mnist_dir)
                           : detail::run_mnist_impl<float>(cfg, mnist_dir);
}

// ---------------------------------------------------------------------------
// Chance-level control
// ---------------------------------------------------------------------------

/// Error rate of `net` against labels replaced by a seeded shuffle of
/// themselves. Shuffling breaks any image-label association while keeping the
/// class balance, so a sound evaluator must land near 50% on balanced data.
template <typename T>
double shuffled_label_control(const nn::Network<T>& net, const nn::DataView<T>& data,
                              std::uint64_t seed, int threads = 1) {
    std::vector<std::uint8_t> pred = nn::predict_labels(net, data, 64, threads);
    std::vector<std::uint8_t> shuffled = data.labels;
    SplitMix64 rng(mix64(seed));
    for (size_t i = shuffled.size(); i > 1; --i) {
        size_t j = rng.next_below(i);
        std::swap(shuffled[i - 1], shuffled[j]);
    }
    long wrong = 0;
    for (size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != shuffled[i];
    return pred.empty() ? 0.0 : static_cast<double>(wrong) / pred.size();
}

}  // namespace kanizsa
