#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "rgtn/graph.hpp"
#include "rgtn/tape.hpp"
#include "rgtn/tensor.hpp"

namespace rgtn {

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

// Weights stored as [out x in], applied to row-major activations [R x in].
struct LinearParams {
    Tensor w;  // [out x in]
    Tensor b;  // [out]
};

struct LinearVars {
    Var w_t;  // transposed once per tape
    Var b;
};

inline LinearVars bind(Tape& tape, LinearParams& p) {
    return {tape.transpose(tape.leaf(p.w, true)), tape.leaf(p.b, true)};
}

inline Var linear(Tape& tape, Var x, const LinearVars& v) {
    return tape.add_row(tape.matmul(x, v.w_t), v.b);
}

// ---------------------------------------------------------------------------
// Gated recurrent unit
// ---------------------------------------------------------------------------

// Gate weights act on the concatenation [h_{t-1}, x_t], so each W is
// [hidden x (hidden + input)]. Weights are shared across nodes: the row
// dimension of the activations can be any multiple of the node count.
struct GruParams {
    Tensor w_r, w_z, w_h;  // [H x (H+F)]
    Tensor b_r, b_z, b_h;  // [H]

    int hidden() const { return static_cast<int>(w_r.dim(0)); }
    int input() const { return static_cast<int>(w_r.dim(1) - w_r.dim(0)); }
};

struct GruVars {
    Var w_r_t, w_z_t, w_h_t;  // [(H+F) x H]
    Var b_r, b_z, b_h;
};

inline GruVars bind(Tape& tape, GruParams& p) {
    return {tape.transpose(tape.leaf(p.w_r, true)),
            tape.transpose(tape.leaf(p.w_z, true)),
            tape.transpose(tape.leaf(p.w_h, true)),
            tape.leaf(p.b_r, true),
            tape.leaf(p.b_z, true),
            tape.leaf(p.b_h, true)};
}

// One recurrence step:
//   r = sigmoid(W_r [h, x] + b_r)
//   z = sigmoid(W_z [h, x] + b_z)
//   hc = tanh(W_h [r*h, x] + b_h)
//   h' = (1 - z) * h + z * hc   (equivalently h + z * (hc - h))
inline Var gru_step(Tape& tape, Var x_t, Var h_prev, const GruVars& p) {
    Var cat = tape.concat({h_prev, x_t}, 1);
    Var r = tape.sigmoid(tape.add_row(tape.matmul(cat, p.w_r_t), p.b_r));
    Var z = tape.sigmoid(tape.add_row(tape.matmul(cat, p.w_z_t), p.b_z));
    Var cat_reset = tape.concat({tape.mul(r, h_prev), x_t}, 1);
    Var h_cand = tape.tanh_(tape.add_row(tape.matmul(cat_reset, p.w_h_t), p.b_h));
    return tape.add(h_prev, tape.mul(z, tape.sub(h_cand, h_prev)));
}

// Folds gru_step over the window and returns the final hidden state. The
// initial state is zero.
inline Var gru_encode(Tape& tape, const std::vector<Var>& x_steps, const GruVars& p,
                      std::int64_t rows, int hidden) {
    check(!x_steps.empty(), "gru_encode: empty window (K = 0)");
    Var h = tape.leaf_zeros({rows, hidden}, false);
    for (Var x : x_steps) h = gru_step(tape, x, h, p);
    return h;
}

// ---------------------------------------------------------------------------
// Graph convolution (spatial baseline)
// ---------------------------------------------------------------------------

// relu(S H W) with S = D^{-1/2} (A+I) D^{-1/2} applied block-wise per sample.
// W is [in x out]; no bias term.
inline Var gcn_layer(Tape& tape, Var h, const SystemGraph& graph, Var w) {
    Var mixed = tape.block_mat_const(h, graph.norm_operator());
    return tape.relu(tape.matmul(mixed, w));
}

// ---------------------------------------------------------------------------
// Graph transformer layer
// ---------------------------------------------------------------------------

struct GtnHeadParams {
    Tensor w_q, w_k, w_v;  // [d x in]
    Tensor b_q, b_k, b_v;  // [d]
    Tensor w_e;            // [d x edge-feature-dim]
    Tensor b_e;            // [d]
};

struct GtnLayerParams {
    std::vector<GtnHeadParams> heads;

    int head_dim() const { return static_cast<int>(heads.at(0).w_q.dim(0)); }
    int input_dim() const { return static_cast<int>(heads.at(0).w_q.dim(1)); }
    int output_dim() const { return static_cast<int>(heads.size()) * head_dim(); }
};

struct GtnHeadVars {
    Var w_q_t, w_k_t, w_v_t, b_q, b_k, b_v, w_e_t, b_e;
};

struct GtnLayerVars {
    std::vector<GtnHeadVars> heads;
};

inline GtnLayerVars bind(Tape& tape, GtnLayerParams& p) {
    GtnLayerVars v;
    for (auto& h : p.heads)
        v.heads.push_back({tape.transpose(tape.leaf(h.w_q, true)),
                           tape.transpose(tape.leaf(h.w_k, true)),
                           tape.transpose(tape.leaf(h.w_v, true)),
                           tape.leaf(h.b_q, true), tape.leaf(h.b_k, true),
                           tape.leaf(h.b_v, true),
                           tape.transpose(tape.leaf(h.w_e, true)),
                           tape.leaf(h.b_e, true)});
    return v;
}

// Gather/segment maps that batch the per-sample pair list over stacked node
// rows. Row r = s*N + n holds node n of sample s.
struct AttentionIndex {
    IndexPtr q_rows;    // pair -> query row i
    IndexPtr kv_rows;   // pair -> source row j
    IndexPtr e_rows;    // pair -> edge-feature row (pair id within sample)
    IndexPtr segments;  // pair -> output row i
    std::int32_t segment_count = 0;
    std::int64_t pairs_per_sample = 0;
};

inline AttentionIndex build_attention_index(const SystemGraph& graph, Neighborhood nb,
                                            int batch) {
    const auto& pairs = graph.pairs(nb);
    const int n = graph.node_count();
    const std::int64_t p = static_cast<std::int64_t>(pairs.size());
    auto q = std::make_shared<IndexVec>();
    auto kv = std::make_shared<IndexVec>();
    auto ef = std::make_shared<IndexVec>();
    q->reserve(static_cast<std::size_t>(p) * batch);
    kv->reserve(static_cast<std::size_t>(p) * batch);
    ef->reserve(static_cast<std::size_t>(p) * batch);
    std::vector<int> per_segment(static_cast<std::size_t>(n), 0);
    for (const auto& pr : pairs) ++per_segment[static_cast<std::size_t>(pr.i)];
    for (int count : per_segment)
        check(count > 0, "attention: node with empty neighborhood");
    for (int s = 0; s < batch; ++s)
        for (std::int64_t e = 0; e < p; ++e) {
            q->push_back(static_cast<std::int32_t>(s * n + pairs[static_cast<std::size_t>(e)].i));
            kv->push_back(static_cast<std::int32_t>(s * n + pairs[static_cast<std::size_t>(e)].j));
            ef->push_back(static_cast<std::int32_t>(e));
        }
    AttentionIndex ix;
    ix.q_rows = q;
    ix.kv_rows = kv;
    ix.e_rows = ef;
    ix.segments = ix.q_rows;  // output row is the query row
    ix.segment_count = static_cast<std::int32_t>(batch * n);
    ix.pairs_per_sample = p;
    return ix;
}

// Optional capture of the attention coefficients for inspection/tests.
struct AttentionCapture {
    // one [batch*pairs x 1] tensor per head
    std::vector<Tensor> alphas;
    IndexPtr segments;
    std::int32_t segment_count = 0;
};

// Multi-head attention over the chosen neighborhood.
//
// Per head c and directed pair (i <- j):
//   q_i = W_q h_i + b_q,  k_j = W_k h_j + b_k,  e_ij = W_e f_ij + b_e
//   alpha_ij = exp(q_i . (k_j + e_ij) / sqrt(d)), normalized over j in N(i)
//   out_i = sum_j alpha_ij (v_j + e_ij)
// Heads are concatenated. `edge_terms = false` drops e_ij from both the
// scores and the aggregation (the edge-blind attention baseline).
inline Var gtn_layer(Tape& tape, Var h, const SystemGraph& graph, const GtnLayerVars& params,
                     Neighborhood nb, int batch, bool edge_terms = true,
                     AttentionCapture* capture = nullptr) {
    check(!params.heads.empty(), "gtn_layer: no attention heads");
    const AttentionIndex ix = build_attention_index(graph, nb, batch);
    if (tape.rows_of(h) != static_cast<std::int64_t>(ix.segment_count))
        fail("gtn_layer: activation rows " + std::to_string(tape.rows_of(h)) +
             " do not match batch*nodes " + std::to_string(ix.segment_count));
    const double inv_sqrt_d =
        1.0 / std::sqrt(static_cast<double>(tape.cols_of(params.heads[0].b_q)));

    Var edge_feats = tape.leaf(graph.pair_features(nb), false);
    if (capture) {
        capture->alphas.clear();
        capture->segments = ix.segments;
        capture->segment_count = ix.segment_count;
    }

    std::vector<Var> head_outputs;
    for (const auto& head : params.heads) {
        Var q = tape.add_row(tape.matmul(h, head.w_q_t), head.b_q);
        Var k = tape.add_row(tape.matmul(h, head.w_k_t), head.b_k);
        Var v = tape.add_row(tape.matmul(h, head.w_v_t), head.b_v);

        Var qg = tape.gather_rows(q, ix.q_rows);
        Var kg = tape.gather_rows(k, ix.kv_rows);
        Var vg = tape.gather_rows(v, ix.kv_rows);

        Var key_side = kg;
        Var value_side = vg;
        if (edge_terms) {
            Var e_enc = tape.add_row(tape.matmul(edge_feats, head.w_e_t), head.b_e);
            Var eg = tape.gather_rows(e_enc, ix.e_rows);
            key_side = tape.add(kg, eg);
            value_side = tape.add(vg, eg);
        }

        Var scores = tape.scale(tape.sum_axis(tape.mul(qg, key_side), 1), inv_sqrt_d);
        Var seg_max = tape.segment_max_detached(scores, ix.segments, ix.segment_count);
        Var shifted = tape.sub(scores, tape.gather_rows(seg_max, ix.segments));
        Var weights = tape.exp_(shifted);
        Var denom = tape.segment_sum(weights, ix.segments, ix.segment_count);
        Var alpha = tape.div(weights, tape.gather_rows(denom, ix.segments));

        if (capture) capture->alphas.push_back(tape.value_tensor(alpha));

        head_outputs.push_back(
            tape.segment_sum(tape.mul_col(value_side, alpha), ix.segments, ix.segment_count));
    }
    return head_outputs.size() == 1 ? head_outputs[0] : tape.concat(head_outputs, 1);
}

// Raw-leaf bindings for the fused attention path (weights untransposed).
struct GtnHeadLeaves {
    Var w_q, w_k, w_v, b_q, b_k, b_v, w_e, b_e;
};

struct GtnLayerLeaves {
    std::vector<GtnHeadLeaves> heads;
};

// Multi-head attention via the fused per-head op; one tape node per head
// plus the final concatenation. Same semantics as gtn_layer.
inline Var gtn_layer_fused(Tape& tape, Var h, const SystemGraph& graph,
                           const GtnLayerLeaves& params, Neighborhood nb, int batch,
                           bool edge_terms = true, AttentionCapture* capture = nullptr) {
    check(!params.heads.empty(), "gtn_layer: no attention heads");
    std::vector<Var> heads;
    for (const auto& head : params.heads)
        heads.push_back(tape.attention_head(h, head.w_q, head.w_k, head.w_v, head.b_q,
                                            head.b_k, head.b_v, head.w_e, head.b_e,
                                            graph.attention_plan(nb),
                                            graph.pair_features_ptr(nb), batch, edge_terms));
    if (capture) {
        capture->alphas.clear();
        const auto& plan = *graph.attention_plan(nb);
        const int n = graph.node_count();
        auto seg = std::make_shared<IndexVec>();
        for (int s = 0; s < batch; ++s)
            for (int i = 0; i < n; ++i)
                for (std::int32_t p = plan[static_cast<std::size_t>(i)];
                     p < plan[static_cast<std::size_t>(i) + 1]; ++p)
                    seg->push_back(static_cast<std::int32_t>(s * n + i));
        capture->segments = seg;
        capture->segment_count = batch * n;
        for (Var head : heads) capture->alphas.push_back(tape.attention_alpha(head));
    }
    return heads.size() == 1 ? heads[0] : tape.concat(heads, 1);
}

// Mean over each sample's node rows: [B*N x F] -> [B x F].
inline Var node_mean_pool(Tape& tape, Var h, int batch, int nodes) {
    auto seg = std::make_shared<IndexVec>();
    seg->reserve(static_cast<std::size_t>(batch) * nodes);
    for (int s = 0; s < batch; ++s)
        for (int n = 0; n < nodes; ++n) seg->push_back(static_cast<std::int32_t>(s));
    Var sum = tape.segment_sum(h, seg, batch);
    return tape.scale(sum, 1.0 / static_cast<double>(nodes));
}

}  // namespace rgtn
