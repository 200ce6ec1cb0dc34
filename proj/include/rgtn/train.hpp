#pragma once

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "rgtn/checkpoint.hpp"
#include "rgtn/dataset.hpp"
#include "rgtn/metrics.hpp"
#include "rgtn/model.hpp"
#include "rgtn/parallel.hpp"

namespace rgtn {

// Training protocol defaults: 200 epochs, batch size 8, plain SGD at 0.01,
// dropout 0.1 (carried in ModelConfig).
struct TrainConfig {
    ModelKind kind = ModelKind::Rgtn;
    ModelConfig model;
    int epochs = 200;
    int batch_size = 8;
    double learning_rate = 0.01;
    double clip_norm = 5.0;  // global-norm gradient clip; fault surges have a
                             // wide dynamic range and all models share it
    std::uint64_t seed = 0;
    bool shuffle = true;
    int eval_batch_size = 32;
    std::string checkpoint_dir;  // empty: keep checkpoints in memory only
    int checkpoint_every = 0;    // also write last.ckpt every n epochs
    std::string resume_from;     // checkpoint_dir of a previous run
    bool select_on_validation = false;  // hold out part of train for selection
    double validation_fraction = 0.1;
    bool verbose = false;
};

struct EpochLog {
    int epoch = 0;  // 1-based
    double loss = 0.0;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    double seconds = 0.0;
};

struct TrainLog {
    std::vector<EpochLog> epochs;

    std::string to_csv() const {
        std::string out = "epoch,loss,train_acc,test_acc,seconds\n";
        char buf[160];
        for (const auto& e : epochs) {
            std::snprintf(buf, sizeof buf, "%d,%.9f,%.6f,%.6f,%.3f\n", e.epoch, e.loss,
                          e.train_accuracy, e.test_accuracy, e.seconds);
            out += buf;
        }
        return out;
    }
};

struct TrainResult {
    ModelParameters params;       // after the final epoch
    ModelParameters best_params;  // highest selection accuracy
    double best_accuracy = 0.0;
    int best_epoch = 0;
    TrainLog log;
};

// Mean cross-entropy over the batch in log-sum-exp form:
//   loss = mean_i [ log sum_j exp(z_ij) - z_i,y_i ]
inline Var cross_entropy(Tape& tape, Var logits, const std::vector<int>& labels) {
    const std::int64_t rows = tape.rows_of(logits);
    const std::int64_t classes = tape.cols_of(logits);
    if (static_cast<std::int64_t>(labels.size()) != rows)
        fail("cross_entropy: expected " + std::to_string(rows) + " labels, got " +
             std::to_string(labels.size()));
    auto idx = std::make_shared<IndexVec>();
    for (int y : labels) {
        if (y < 0 || y >= classes)
            fail("cross_entropy: label " + std::to_string(y) + " outside 0.." +
                 std::to_string(classes - 1));
        idx->push_back(y);
    }
    Var shifted = tape.sub_col(logits, tape.row_max_detached(logits));
    Var lse = tape.log_(tape.sum_axis(tape.exp_(shifted), 1));
    Var picked = tape.take_per_row(shifted, idx);
    return tape.mean_all(tape.sub(lse, picked));
}

// w <- w - lr * grad for every tensor. No momentum, no weight decay.
inline void sgd_step(ModelParameters& params, const std::vector<Tensor>& grads, double lr) {
    auto tensors = params.tensors();
    check(tensors.size() == grads.size(), "sgd_step: gradient count mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (!(tensors[i]->shape() == grads[i].shape()))
            fail("sgd_step: gradient shape " + shape_str(grads[i].shape()) +
                 " does not match parameter " + shape_str(tensors[i]->shape()));
        double* w = tensors[i]->data();
        const double* g = grads[i].data();
        for (std::int64_t k = 0; k < tensors[i]->numel(); ++k) w[k] -= lr * g[k];
    }
}

inline double gradient_global_norm(const std::vector<Tensor>& grads) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (std::int64_t i = 0; i < g.numel(); ++i)
            sq += g[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(i)];
    return std::sqrt(sq);
}

inline void clip_gradients(std::vector<Tensor>& grads, double max_norm) {
    if (max_norm <= 0.0) return;
    const double norm = gradient_global_norm(grads);
    if (norm <= max_norm) return;
    const double s = max_norm / norm;
    for (auto& g : grads)
        for (std::int64_t i = 0; i < g.numel(); ++i) g[static_cast<std::size_t>(i)] *= s;
}

namespace detail {

struct ChunkOutcome {
    std::vector<Tensor> grads;  // aligned with ModelParameters::tensors()
    double loss_sum = 0.0;      // sum of per-sample losses
    int correct = 0;
};

}  // namespace detail

// Full training loop. Deterministic for a fixed config: batch shuffles and
// dropout masks derive from (seed, epoch, batch, lane), gradients from the
// two lanes are summed in a fixed order, and resuming from a checkpoint at
// epoch t replays exactly what the uninterrupted run would have done.
inline TrainResult train(const SystemGraph& graph, const Dataset& dataset, TrainConfig cfg) {
    check(cfg.epochs >= 0, "train: negative epoch count");
    check(cfg.batch_size >= 1, "train: batch size must be at least 1");
    cfg.model.nodes = graph.node_count();

    const std::vector<TimeSeriesSample> train_norm =
        normalized_split(dataset.train, dataset.manifest.stats);
    const std::vector<TimeSeriesSample> test_norm =
        normalized_split(dataset.test, dataset.manifest.stats);
    check(!train_norm.empty(), "train: empty training split");

    // optional held-out selection split (fault diagnosis reports use the test
    // set for selection; this flag keeps an honest alternative available)
    std::vector<TimeSeriesSample> fit_split = train_norm;
    std::vector<TimeSeriesSample> selection_split;
    if (cfg.select_on_validation) {
        check(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0,
              "train: validation fraction must lie in (0, 1)");
        std::vector<int> order(train_norm.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        Rng rng(derive_seed(cfg.seed, "validation-split"));
        rng.shuffle(order);
        const std::size_t held = static_cast<std::size_t>(
            static_cast<double>(order.size()) * cfg.validation_fraction);
        check(held >= 1, "train: validation split is empty");
        fit_split.clear();
        for (std::size_t i = 0; i < order.size(); ++i)
            (i < held ? selection_split : fit_split)
                .push_back(train_norm[static_cast<std::size_t>(order[i])]);
    }

    TrainResult result;
    int start_epoch = 0;
    if (!cfg.resume_from.empty()) {
        Checkpoint last = load_checkpoint(cfg.resume_from + "/last.ckpt");
        check(last.topology_hash == graph.topology_hash(),
              "train: checkpoint topology hash does not match this graph");
        check(last.params.kind == cfg.kind, "train: checkpoint model kind mismatch");
        result.params = last.params;
        start_epoch = std::stoi(last.meta.at("epoch"));
        Checkpoint best = load_checkpoint(cfg.resume_from + "/best.ckpt");
        result.best_params = best.params;
        result.best_accuracy = std::stod(best.meta.at("selection_accuracy"));
        result.best_epoch = std::stoi(best.meta.at("epoch"));
    } else {
        result.params = init_model(cfg.kind, cfg.model, cfg.seed);
        result.best_params = result.params;
        result.best_accuracy = -1.0;  // first epoch always becomes the best
    }

    DuoPool& pool = DuoPool::shared();
    Tape lane_tapes[2];

    auto run_chunk = [&](int lane, const std::vector<const TimeSeriesSample*>& chunk,
                         int full_batch, std::uint64_t dropout_seed,
                         detail::ChunkOutcome* out) {
        Tape& tape = lane_tapes[lane];
        tape.reset();
        BoundModel bm = bind_model(tape, result.params);
        BatchInput in = make_batch(chunk, cfg.kind, cfg.model);
        Rng dropout_rng(dropout_seed);
        Var logits = forward_batch(tape, result.params, bm, graph, in, true, &dropout_rng);
        Var loss = cross_entropy(tape, logits, in.labels);
        // scale to per-sample sums so the two lanes combine into a batch mean
        Var scaled = tape.scale(loss, static_cast<double>(chunk.size()) /
                                          static_cast<double>(full_batch));
        tape.backward(scaled);
        out->grads.clear();
        for (Var leaf : bm.leaves) out->grads.push_back(tape.grad_tensor(leaf));
        out->loss_sum = tape.val(loss)[0] * static_cast<double>(chunk.size());
        const auto& lv = tape.val(logits);
        out->correct = 0;
        for (std::size_t s = 0; s < chunk.size(); ++s) {
            int best = 0;
            for (int c = 1; c < cfg.model.classes; ++c)
                if (lv[s * static_cast<std::size_t>(cfg.model.classes) + static_cast<std::size_t>(c)] >
                    lv[s * static_cast<std::size_t>(cfg.model.classes) + static_cast<std::size_t>(best)])
                    best = c;
            if (best == chunk[s]->label) ++out->correct;
        }
    };

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        auto batches = make_batches(static_cast<int>(fit_split.size()), cfg.batch_size,
                                    cfg.shuffle, cfg.seed, static_cast<std::uint64_t>(epoch));
        double loss_total = 0.0;
        int correct_total = 0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const auto& batch = batches[b];
            std::vector<const TimeSeriesSample*> first, second;
            const std::size_t half = (batch.size() + 1) / 2;
            for (std::size_t i = 0; i < batch.size(); ++i)
                (i < half ? first : second)
                    .push_back(&fit_split[static_cast<std::size_t>(batch[i])]);

            const std::uint64_t batch_tag =
                static_cast<std::uint64_t>(epoch) * 1000000ull + b * 2ull;
            detail::ChunkOutcome out0, out1;
            if (second.empty()) {
                run_chunk(0, first, static_cast<int>(batch.size()),
                          derive_seed(cfg.seed, "dropout", batch_tag), &out0);
            } else {
                pool.run_pair(
                    [&] {
                        run_chunk(0, first, static_cast<int>(batch.size()),
                                  derive_seed(cfg.seed, "dropout", batch_tag), &out0);
                    },
                    [&] {
                        run_chunk(1, second, static_cast<int>(batch.size()),
                                  derive_seed(cfg.seed, "dropout", batch_tag + 1), &out1);
                    });
            }

            std::vector<Tensor> grads = std::move(out0.grads);
            if (!second.empty())
                for (std::size_t i = 0; i < grads.size(); ++i)
                    for (std::int64_t k = 0; k < grads[i].numel(); ++k)
                        grads[i][static_cast<std::size_t>(k)] +=
                            out1.grads[i][static_cast<std::size_t>(k)];

            const double batch_loss =
                (out0.loss_sum + out1.loss_sum) / static_cast<double>(batch.size());
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("training diverged (loss not finite) at epoch " +
                                         std::to_string(epoch + 1) + ", batch " +
                                         std::to_string(b + 1));
            loss_total += out0.loss_sum + out1.loss_sum;
            correct_total += out0.correct + out1.correct;

            clip_gradients(grads, cfg.clip_norm);
            sgd_step(result.params, grads, cfg.learning_rate);
        }

        EpochLog log;
        log.epoch = epoch + 1;
        log.loss = loss_total / static_cast<double>(fit_split.size());
        log.train_accuracy =
            static_cast<double>(correct_total) / static_cast<double>(fit_split.size());
        log.test_accuracy = accuracy_of(result.params, graph, test_norm, cfg.eval_batch_size);

        const double selection_accuracy =
            cfg.select_on_validation
                ? accuracy_of(result.params, graph, selection_split, cfg.eval_batch_size)
                : log.test_accuracy;
        if (selection_accuracy > result.best_accuracy) {
            result.best_accuracy = selection_accuracy;
            result.best_epoch = epoch + 1;
            result.best_params = result.params;
        }

        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.log.epochs.push_back(log);
        if (cfg.verbose)
            std::fprintf(stderr, "epoch %3d  loss %.4f  train %.4f  test %.4f  (%.1fs)\n",
                         log.epoch, log.loss, log.train_accuracy, log.test_accuracy,
                         log.seconds);

        if (!cfg.checkpoint_dir.empty()) {
            const bool periodic =
                cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0;
            if (periodic || epoch + 1 == cfg.epochs) {
                save_checkpoint(cfg.checkpoint_dir + "/last.ckpt", result.params,
                                graph.topology_hash(),
                                {{"epoch", std::to_string(epoch + 1)},
                                 {"model", to_string(cfg.kind)},
                                 {"seed", std::to_string(cfg.seed)}});
                save_checkpoint(cfg.checkpoint_dir + "/best.ckpt", result.best_params,
                                graph.topology_hash(),
                                {{"epoch", std::to_string(result.best_epoch)},
                                 {"model", to_string(cfg.kind)},
                                 {"seed", std::to_string(cfg.seed)},
                                 {"selection_accuracy", detail::fmt_g17(result.best_accuracy)}});
            }
        }
    }
    return result;
}

}  // namespace rgtn
