#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "rgtn/dataset.hpp"
#include "rgtn/model.hpp"
#include "rgtn/parallel.hpp"

namespace rgtn {

// Rows are true labels, columns are predictions.
struct ConfusionMatrix {
    std::array<std::array<std::int64_t, kNumClasses>, kNumClasses> counts{};

    void add(int truth, int predicted, std::int64_t n = 1) {
        check(truth >= 0 && truth < kNumClasses && predicted >= 0 && predicted < kNumClasses,
              "confusion matrix: label out of range");
        counts[static_cast<std::size_t>(truth)][static_cast<std::size_t>(predicted)] += n;
    }

    std::int64_t at(int truth, int predicted) const {
        return counts[static_cast<std::size_t>(truth)][static_cast<std::size_t>(predicted)];
    }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (const auto& row : counts)
            for (auto v : row) t += v;
        return t;
    }

    std::int64_t trace() const {
        std::int64_t t = 0;
        for (int c = 0; c < kNumClasses; ++c) t += at(c, c);
        return t;
    }

    void merge(const ConfusionMatrix& other) {
        for (int i = 0; i < kNumClasses; ++i)
            for (int j = 0; j < kNumClasses; ++j)
                counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] +=
                    other.at(i, j);
    }

    bool operator==(const ConfusionMatrix& o) const { return counts == o.counts; }
};

struct Metrics {
    double accuracy = 0.0;
    double recall = 0.0;     // macro average
    double precision = 0.0;  // macro average
    double f1 = 0.0;         // harmonic mean of the macro averages
    std::vector<int> degenerate_classes;  // zero-denominator classes, worth a warning
};

// Accuracy is trace/total; recall and precision are macro averages over the
// classes with at least one true or predicted instance (a class with a zero
// denominator contributes 0 and is reported as degenerate). F1 is the
// harmonic mean of the macro precision and recall, 0 when both vanish.
inline Metrics compute_metrics(const ConfusionMatrix& cm) {
    const std::int64_t total = cm.total();
    check(total > 0, "compute_metrics: empty confusion matrix");
    Metrics m;
    m.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
    double recall_sum = 0.0, precision_sum = 0.0;
    int active = 0;
    for (int c = 0; c < kNumClasses; ++c) {
        std::int64_t tp = cm.at(c, c), row = 0, col = 0;
        for (int j = 0; j < kNumClasses; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        if (row == 0 && col == 0) continue;  // class absent from this evaluation
        ++active;
        if (row == 0 || col == 0) m.degenerate_classes.push_back(c);
        recall_sum += row > 0 ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
        precision_sum += col > 0 ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
    }
    check(active > 0, "compute_metrics: no active classes");
    m.recall = recall_sum / active;
    m.precision = precision_sum / active;
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

// Batched evaluation with dropout disabled. The split is processed in two
// fixed halves per batch so a second core can help; tallies merge in a fixed
// order and results do not depend on the thread schedule.
inline ConfusionMatrix evaluate(ModelParameters& params, const SystemGraph& graph,
                                const std::vector<TimeSeriesSample>& split,
                                int batch_size = 32) {
    check(!split.empty(), "evaluate: empty split");
    check(batch_size >= 1, "evaluate: batch size must be at least 1");
    ConfusionMatrix cm;
    Tape tapes[2];

    auto run_range = [&](int tape_id, const std::vector<const TimeSeriesSample*>& group,
                         ConfusionMatrix* out) {
        if (group.empty()) return;
        Tape& tape = tapes[tape_id];
        tape.reset();
        BoundModel bm = bind_model(tape, params);
        BatchInput in = make_batch(group, params.kind, params.cfg);
        Var logits = forward_batch(tape, params, bm, graph, in, false, nullptr);
        const auto& vals = tape.val(logits);
        for (std::size_t s = 0; s < group.size(); ++s) {
            int best = 0;
            for (int c = 1; c < params.cfg.classes; ++c)
                if (vals[s * static_cast<std::size_t>(params.cfg.classes) + static_cast<std::size_t>(c)] >
                    vals[s * static_cast<std::size_t>(params.cfg.classes) + static_cast<std::size_t>(best)])
                    best = c;
            out->add(group[s]->label, best);
        }
    };

    for (std::size_t start = 0; start < split.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(split.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<const TimeSeriesSample*> group;
        for (std::size_t i = start; i < end; ++i) group.push_back(&split[i]);
        const std::size_t half = (group.size() + 1) / 2;
        std::vector<const TimeSeriesSample*> first(group.begin(),
                                                   group.begin() + static_cast<std::ptrdiff_t>(half));
        std::vector<const TimeSeriesSample*> second(group.begin() + static_cast<std::ptrdiff_t>(half),
                                                    group.end());
        ConfusionMatrix cm0, cm1;
        DuoPool::shared().run_pair([&] { run_range(0, first, &cm0); },
                                   [&] { run_range(1, second, &cm1); });
        cm.merge(cm0);
        cm.merge(cm1);
    }
    return cm;
}

inline double accuracy_of(ModelParameters& params, const SystemGraph& graph,
                          const std::vector<TimeSeriesSample>& split, int batch_size = 32) {
    ConfusionMatrix cm = evaluate(params, graph, split, batch_size);
    return static_cast<double>(cm.trace()) / static_cast<double>(cm.total());
}

}  // namespace rgtn
