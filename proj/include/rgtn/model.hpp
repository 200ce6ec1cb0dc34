#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rgtn/graph.hpp"
#include "rgtn/layers.hpp"
#include "rgtn/random.hpp"
#include "rgtn/tape.hpp"

namespace rgtn {

enum class ModelKind { Rgtn, Mlp, Gcn, Gat, Gtn };

inline ModelKind model_kind_from(const std::string& s) {
    if (s == "rgtn") return ModelKind::Rgtn;
    if (s == "mlp") return ModelKind::Mlp;
    if (s == "gcn") return ModelKind::Gcn;
    if (s == "gat") return ModelKind::Gat;
    if (s == "gtn") return ModelKind::Gtn;
    throw std::invalid_argument("unknown model kind: " + s);
}

inline std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::Rgtn: return "rgtn";
        case ModelKind::Mlp: return "mlp";
        case ModelKind::Gcn: return "gcn";
        case ModelKind::Gat: return "gat";
        case ModelKind::Gtn: return "gtn";
    }
    return "?";
}

struct ModelConfig {
    int nodes = 20;
    int window = kWindowSteps;
    int input_dim = 1;
    int gru_hidden = 32;
    int heads = 4;
    int head_dim = 16;
    int gtn_layers = 2;
    int mlp_hidden = 64;
    int gcn_hidden = 64;
    int stats_dim = 4;  // per-node summary features for the spatial baselines
    int classes = kNumClasses;
    double dropout = 0.1;
    Neighborhood neighborhood = Neighborhood::Global;
};

// All trainable state of one model. Tensor traversal order is canonical:
// it defines checkpoint layout, gradient packing and SGD update order.
struct ModelParameters {
    ModelKind kind = ModelKind::Rgtn;
    ModelConfig cfg;

    GruParams gru;                    // rgtn only
    std::vector<GtnLayerParams> gtn;  // rgtn / gtn / gat
    std::vector<Tensor> gcn_w;        // gcn
    LinearParams mlp_in;              // mlp
    LinearParams head;                // shared classifier

    template <typename F>
    void for_each_tensor(F&& f) {
        if (kind == ModelKind::Rgtn) {
            f("gru.w_r", gru.w_r);
            f("gru.w_z", gru.w_z);
            f("gru.w_h", gru.w_h);
            f("gru.b_r", gru.b_r);
            f("gru.b_z", gru.b_z);
            f("gru.b_h", gru.b_h);
        }
        if (kind == ModelKind::Rgtn || kind == ModelKind::Gtn || kind == ModelKind::Gat) {
            for (std::size_t l = 0; l < gtn.size(); ++l)
                for (std::size_t c = 0; c < gtn[l].heads.size(); ++c) {
                    auto& h = gtn[l].heads[c];
                    const std::string p =
                        "gtn." + std::to_string(l) + ".head." + std::to_string(c) + ".";
                    f(p + "w_q", h.w_q);
                    f(p + "w_k", h.w_k);
                    f(p + "w_v", h.w_v);
                    f(p + "b_q", h.b_q);
                    f(p + "b_k", h.b_k);
                    f(p + "b_v", h.b_v);
                    f(p + "w_e", h.w_e);
                    f(p + "b_e", h.b_e);
                }
        }
        if (kind == ModelKind::Gcn)
            for (std::size_t l = 0; l < gcn_w.size(); ++l)
                f("gcn." + std::to_string(l) + ".w", gcn_w[l]);
        if (kind == ModelKind::Mlp) {
            f("mlp.w", mlp_in.w);
            f("mlp.b", mlp_in.b);
        }
        f("head.w", head.w);
        f("head.b", head.b);
    }

    std::vector<Tensor*> tensors() {
        std::vector<Tensor*> out;
        for_each_tensor([&](const std::string&, Tensor& t) { out.push_back(&t); });
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for_each_tensor([&](const std::string&, Tensor& t) {
            n += static_cast<std::size_t>(t.numel());
        });
        return n;
    }
};

namespace detail {

inline Tensor glorot(Shape shape, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t[static_cast<std::size_t>(i)] = rng.uniform(-limit, limit);
    return t;
}

inline LinearParams init_linear(int out, int in, Rng& rng) {
    return {glorot({out, in}, in, out, rng), Tensor({out}, 0.0)};
}

inline GtnLayerParams init_gtn_layer(int heads, int head_dim, int in, Rng& rng) {
    GtnLayerParams layer;
    for (int c = 0; c < heads; ++c) {
        GtnHeadParams h;
        h.w_q = glorot({head_dim, in}, in, head_dim, rng);
        h.w_k = glorot({head_dim, in}, in, head_dim, rng);
        h.w_v = glorot({head_dim, in}, in, head_dim, rng);
        h.b_q = Tensor({head_dim}, 0.0);
        h.b_k = Tensor({head_dim}, 0.0);
        h.b_v = Tensor({head_dim}, 0.0);
        h.w_e = glorot({head_dim, SystemGraph::kEdgeFeatureDim},
                       SystemGraph::kEdgeFeatureDim, head_dim, rng);
        h.b_e = Tensor({head_dim}, 0.0);
        layer.heads.push_back(std::move(h));
    }
    return layer;
}

}  // namespace detail

inline ModelParameters init_model(ModelKind kind, const ModelConfig& cfg, std::uint64_t seed) {
    ModelParameters p;
    p.kind = kind;
    p.cfg = cfg;
    Rng rng(derive_seed(seed, "init", static_cast<std::uint64_t>(kind)));
    const int attn_out = cfg.heads * cfg.head_dim;
    switch (kind) {
        case ModelKind::Rgtn: {
            const int hf = cfg.gru_hidden + cfg.input_dim;
            p.gru.w_r = detail::glorot({cfg.gru_hidden, hf}, hf, cfg.gru_hidden, rng);
            p.gru.w_z = detail::glorot({cfg.gru_hidden, hf}, hf, cfg.gru_hidden, rng);
            p.gru.w_h = detail::glorot({cfg.gru_hidden, hf}, hf, cfg.gru_hidden, rng);
            p.gru.b_r = Tensor({cfg.gru_hidden}, 0.0);
            p.gru.b_z = Tensor({cfg.gru_hidden}, 0.0);
            p.gru.b_h = Tensor({cfg.gru_hidden}, 0.0);
            int in = cfg.gru_hidden;
            for (int l = 0; l < cfg.gtn_layers; ++l) {
                p.gtn.push_back(detail::init_gtn_layer(cfg.heads, cfg.head_dim, in, rng));
                in = attn_out;
            }
            p.head = detail::init_linear(cfg.classes, attn_out, rng);
            break;
        }
        case ModelKind::Gtn:
        case ModelKind::Gat: {
            int in = cfg.stats_dim;
            for (int l = 0; l < cfg.gtn_layers; ++l) {
                p.gtn.push_back(detail::init_gtn_layer(cfg.heads, cfg.head_dim, in, rng));
                in = attn_out;
            }
            p.head = detail::init_linear(cfg.classes, attn_out, rng);
            break;
        }
        case ModelKind::Gcn: {
            p.gcn_w.push_back(detail::glorot({cfg.stats_dim, cfg.gcn_hidden}, cfg.stats_dim,
                                             cfg.gcn_hidden, rng));
            p.gcn_w.push_back(detail::glorot({cfg.gcn_hidden, cfg.gcn_hidden}, cfg.gcn_hidden,
                                             cfg.gcn_hidden, rng));
            p.head = detail::init_linear(cfg.classes, cfg.gcn_hidden, rng);
            break;
        }
        case ModelKind::Mlp: {
            const int flat_dim = cfg.window * cfg.nodes * cfg.input_dim;
            p.mlp_in = detail::init_linear(cfg.mlp_hidden, flat_dim, rng);
            p.head = detail::init_linear(cfg.classes, cfg.mlp_hidden, rng);
            break;
        }
    }
    return p;
}

// ---------------------------------------------------------------------------
// Batched forward passes
// ---------------------------------------------------------------------------

// Model-ready view of a group of samples. Rows are stacked node-major:
// row s*N + n is node n of sample s.
struct BatchInput {
    int batch = 0;
    Tensor gru_window;  // [K*B*N x F], step-major blocks of B*N rows
    Tensor stats;       // [B*N x stats_dim]
    Tensor flat;        // [B x K*N*F]
    std::vector<int> labels;
};

inline BatchInput make_batch(const std::vector<const TimeSeriesSample*>& samples,
                             ModelKind kind, const ModelConfig& cfg) {
    check(!samples.empty(), "make_batch: empty batch");
    BatchInput in;
    in.batch = static_cast<int>(samples.size());
    const int n = cfg.nodes, k = cfg.window;
    for (const auto* s : samples) {
        check(s->node_count == n, "make_batch: sample node count mismatch");
        check(s->steps == k, "make_batch: sample window length mismatch");
        in.labels.push_back(s->label);
    }
    const std::int64_t rows = static_cast<std::int64_t>(in.batch) * n;
    if (kind == ModelKind::Rgtn) {
        in.gru_window = Tensor({static_cast<std::int64_t>(k) * rows, 1});
        for (int t = 0; t < k; ++t)
            for (int s = 0; s < in.batch; ++s)
                for (int node = 0; node < n; ++node)
                    in.gru_window[static_cast<std::size_t>(t) * static_cast<std::size_t>(rows) +
                                  static_cast<std::size_t>(s * n + node)] =
                        samples[static_cast<std::size_t>(s)]->at(t, node);
    } else if (kind == ModelKind::Mlp) {
        in.flat = Tensor({static_cast<std::int64_t>(in.batch), static_cast<std::int64_t>(k) * n});
        for (int s = 0; s < in.batch; ++s)
            for (int t = 0; t < k; ++t)
                for (int node = 0; node < n; ++node)
                    in.flat.at(s, static_cast<std::int64_t>(t) * n + node) =
                        samples[static_cast<std::size_t>(s)]->at(t, node);
    } else {
        // per-node temporal summary: mean, std, min, max over the window
        in.stats = Tensor({rows, cfg.stats_dim});
        for (int s = 0; s < in.batch; ++s)
            for (int node = 0; node < n; ++node) {
                double mean = 0.0, lo = 1e300, hi = -1e300;
                for (int t = 0; t < k; ++t) {
                    const double v = samples[static_cast<std::size_t>(s)]->at(t, node);
                    mean += v;
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
                mean /= k;
                double var = 0.0;
                for (int t = 0; t < k; ++t) {
                    const double d = samples[static_cast<std::size_t>(s)]->at(t, node) - mean;
                    var += d * d;
                }
                const std::int64_t r = static_cast<std::int64_t>(s) * n + node;
                in.stats.at(r, 0) = mean;
                in.stats.at(r, 1) = std::sqrt(var / k);
                in.stats.at(r, 2) = lo;
                in.stats.at(r, 3) = hi;
            }
    }
    return in;
}

// Per-tape parameter bindings, in the canonical tensor order. GRU leaves
// stay untransposed; the fused window encoder consumes them directly.
struct GruLeafVars {
    Var w_r, w_z, w_h, b_r, b_z, b_h;
};

struct BoundModel {
    std::vector<Var> leaves;  // aligned with ModelParameters::tensors()
    GruLeafVars gru;
    std::vector<GtnLayerLeaves> gtn;
    std::vector<Var> gcn_w;
    LinearVars mlp_in;
    LinearVars head;
};

inline BoundModel bind_model(Tape& tape, ModelParameters& p) {
    BoundModel bm;
    p.for_each_tensor(
        [&](const std::string&, Tensor& t) { bm.leaves.push_back(tape.leaf(t, true)); });
    std::size_t i = 0;
    auto next = [&]() { return bm.leaves.at(i++); };
    if (p.kind == ModelKind::Rgtn)
        bm.gru = {next(), next(), next(), next(), next(), next()};
    if (p.kind == ModelKind::Rgtn || p.kind == ModelKind::Gtn || p.kind == ModelKind::Gat) {
        for (auto& layer : p.gtn) {
            GtnLayerLeaves lv;
            for (std::size_t c = 0; c < layer.heads.size(); ++c) {
                Var wq = next(), wk = next(), wv = next();
                Var bq = next(), bk = next(), bv = next();
                Var we = next(), be = next();
                lv.heads.push_back({wq, wk, wv, bq, bk, bv, we, be});
            }
            bm.gtn.push_back(std::move(lv));
        }
    }
    if (p.kind == ModelKind::Gcn)
        for (std::size_t l = 0; l < p.gcn_w.size(); ++l) bm.gcn_w.push_back(next());
    if (p.kind == ModelKind::Mlp) {
        Var w = next();
        bm.mlp_in = {tape.transpose(w), next()};
    }
    Var hw = next();
    bm.head = {tape.transpose(hw), next()};
    check(i == bm.leaves.size(), "bind_model: traversal order out of sync");
    return bm;
}

// Forward pass to logits [B x classes]. `dropout_rng` must be non-null when
// training with a positive dropout rate.
inline Var forward_batch(Tape& tape, ModelParameters& params, const BoundModel& bm,
                         const SystemGraph& graph, const BatchInput& in, bool training,
                         Rng* dropout_rng, AttentionCapture* capture = nullptr) {
    const ModelConfig& cfg = params.cfg;
    auto maybe_dropout = [&](Var h) {
        if (!training || cfg.dropout == 0.0) return h;
        check(dropout_rng != nullptr, "forward_batch: training dropout needs an rng");
        return tape.dropout(h, cfg.dropout, true, *dropout_rng);
    };

    Var features{};
    switch (params.kind) {
        case ModelKind::Mlp: {
            Var x = tape.leaf(in.flat, false);
            Var h = maybe_dropout(tape.relu(linear(tape, x, bm.mlp_in)));
            return linear(tape, h, bm.head);
        }
        case ModelKind::Rgtn: {
            Var window = tape.leaf(in.gru_window, false);
            features = tape.gru_encode_fused(window, bm.gru.w_r, bm.gru.w_z, bm.gru.w_h,
                                             bm.gru.b_r, bm.gru.b_z, bm.gru.b_h,
                                             static_cast<std::int64_t>(in.batch) * cfg.nodes);
            break;
        }
        case ModelKind::Gtn:
        case ModelKind::Gat:
        case ModelKind::Gcn:
            features = tape.leaf(in.stats, false);
            break;
    }

    Var h = features;
    if (params.kind == ModelKind::Gcn) {
        h = gcn_layer(tape, h, graph, bm.gcn_w.at(0));
        h = maybe_dropout(h);
        h = gcn_layer(tape, h, graph, bm.gcn_w.at(1));
    } else {
        const bool edge_terms = params.kind != ModelKind::Gat;
        for (std::size_t l = 0; l < bm.gtn.size(); ++l) {
            h = gtn_layer_fused(tape, h, graph, bm.gtn[l], cfg.neighborhood, in.batch,
                                edge_terms, l == 0 ? capture : nullptr);
            h = tape.relu(h);
            if (l == 0) h = maybe_dropout(h);
        }
    }
    Var pooled = node_mean_pool(tape, h, in.batch, cfg.nodes);
    return linear(tape, pooled, bm.head);
}

// Single-sample logits [classes], evaluation mode.
inline Tensor forward_single(ModelParameters& params, const SystemGraph& graph,
                             const TimeSeriesSample& sample) {
    Tape tape;
    BoundModel bm = bind_model(tape, params);
    BatchInput in = make_batch({&sample}, params.kind, params.cfg);
    Var logits = forward_batch(tape, params, bm, graph, in, false, nullptr);
    Tensor out = tape.value_tensor(logits);
    return Tensor({out.numel()}, out.vec());
}

// Class probabilities via softmax over the logits.
inline Tensor predict_probabilities(ModelParameters& params, const SystemGraph& graph,
                                    const TimeSeriesSample& sample) {
    Tape tape;
    BoundModel bm = bind_model(tape, params);
    BatchInput in = make_batch({&sample}, params.kind, params.cfg);
    Var logits = forward_batch(tape, params, bm, graph, in, false, nullptr);
    Tensor probs = tape.value_tensor(tape.softmax(logits, 1));
    return Tensor({probs.numel()}, probs.vec());
}

inline int argmax(const Tensor& t) {
    int best = 0;
    for (std::int64_t i = 1; i < t.numel(); ++i)
        if (t[static_cast<std::size_t>(i)] > t[static_cast<std::size_t>(best)])
            best = static_cast<int>(i);
    return best;
}

}  // namespace rgtn
