#pragma once

#include <string>
#include <vector>

#include "rgtn/metrics.hpp"
#include "rgtn/train.hpp"

namespace rgtn {

// Noise-robustness study: per noise level, generate the dataset, train every
// requested model on it, and evaluate on that level's test split.

struct SweepResult {
    std::vector<ModelKind> kinds;
    std::vector<double> levels;
    // accuracy[level][kind], fractions in [0, 1]
    std::vector<std::vector<double>> accuracy;

    double at(double level, ModelKind kind) const {
        for (std::size_t l = 0; l < levels.size(); ++l)
            if (levels[l] == level)
                for (std::size_t k = 0; k < kinds.size(); ++k)
                    if (kinds[k] == kind) return accuracy[l][k];
        throw std::invalid_argument("sweep: no such cell");
    }

    std::string to_csv() const {
        std::string out = "noise";
        for (ModelKind k : kinds) out += "," + to_string(k);
        out += "\n";
        for (std::size_t l = 0; l < levels.size(); ++l) {
            char head[32];
            std::snprintf(head, sizeof head, "%.2f", levels[l]);
            out += head;
            for (std::size_t k = 0; k < kinds.size(); ++k) {
                char cell[32];
                std::snprintf(cell, sizeof cell, ",%.4f", accuracy[l][k]);
                out += cell;
            }
            out += "\n";
        }
        return out;
    }
};

// `base` supplies the shared training protocol; per-model kind and per-level
// datasets vary. Deterministic under base.seed.
inline SweepResult noise_sweep(const SystemGraph& graph, const std::vector<ModelKind>& kinds,
                               const std::vector<double>& levels, const TrainConfig& base,
                               bool verbose = false) {
    check(!kinds.empty(), "noise_sweep: no models requested");
    check(!levels.empty(), "noise_sweep: no noise levels requested");
    SweepResult out;
    out.kinds = kinds;
    out.levels = levels;
    for (double level : levels) {
        Dataset ds = generate_dataset(graph, base.seed, level);
        const std::vector<TimeSeriesSample> test_norm =
            normalized_split(ds.test, ds.manifest.stats);
        std::vector<double> row;
        for (ModelKind kind : kinds) {
            TrainConfig cfg = base;
            cfg.kind = kind;
            cfg.checkpoint_dir.clear();
            cfg.resume_from.clear();
            TrainResult r = train(graph, ds, cfg);
            const double acc = accuracy_of(r.best_params, graph, test_norm,
                                           cfg.eval_batch_size);
            row.push_back(acc);
            if (verbose)
                std::fprintf(stderr, "sweep: noise %.2f  %-5s  accuracy %.4f\n", level,
                             to_string(kind).c_str(), acc);
        }
        out.accuracy.push_back(std::move(row));
    }
    return out;
}

}  // namespace rgtn
