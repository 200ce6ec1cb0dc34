#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <queue>
#include <string>
#include <vector>

#include "rgtn/io.hpp"
#include "rgtn/random.hpp"
#include "rgtn/tensor.hpp"

namespace rgtn {

enum class NodeKind { Pgm, Pcm, Switchboard, LoadCenter };

inline NodeKind node_kind_from(const std::string& s) {
    if (s == "pgm") return NodeKind::Pgm;
    if (s == "pcm") return NodeKind::Pcm;
    if (s == "swbd") return NodeKind::Switchboard;
    if (s == "load_center") return NodeKind::LoadCenter;
    throw std::runtime_error("unknown node kind: " + s);
}

struct GraphNode {
    std::string name;
    NodeKind kind;
    int zone;
};

// One physical line segment. Also serves as the line model for the fault
// simulator (series resistance + inductance between two measurement nodes).
struct GraphEdge {
    int a, b;
    double resistance;  // ohm
    double inductance;  // henry
};

struct SourceSpec {
    int node;
    double voltage;       // V
    double rating;        // A
    double limit_factor;  // clamp at limit_factor * rating
};

struct LoadSpec {
    int node;
    double power;  // W at nominal voltage
};

// Parsed topology file; see topology/mvdc4zone.cfg for the shipped default.
struct TopologyConfig {
    std::string name;
    double nominal_voltage = 0.0;
    std::vector<GraphNode> nodes;
    std::vector<GraphEdge> edges;
    std::vector<SourceSpec> sources;
    std::vector<LoadSpec> loads;
    std::map<int, int> fault_position_edges;  // position (1-based) -> edge index
    std::string raw_text;

    static TopologyConfig parse(const std::string& text);
    static TopologyConfig parse_file(const std::string& path) {
        return parse(read_text_file(path));
    }
};

// Directed attention pair: query node i aggregates from node j.
struct NodePair {
    std::int32_t i, j;
};

enum class Neighborhood { Local, Global };

inline Neighborhood neighborhood_from(const std::string& s) {
    if (s == "local") return Neighborhood::Local;
    if (s == "global") return Neighborhood::Global;
    throw std::runtime_error("unknown neighborhood: " + s);
}

inline std::string to_string(Neighborhood n) {
    return n == Neighborhood::Local ? "local" : "global";
}

// Static measurement-network graph. Immutable after construction; shared by
// the model layers and the simulator.
//
// Edge features are 3-vectors [normalized resistance, normalized inductance,
// virtual flag]. True directed edges carry their line impedances with flag 0;
// self-loops and the virtual pairs that complete global attention carry zeros
// with flag 1.
class SystemGraph {
public:
    static constexpr int kEdgeFeatureDim = 3;

    // Generic constructor: validates indices, duplicates and impedance signs
    // but imposes no size constraints (unit tests build small graphs).
    static SystemGraph from_parts(std::vector<GraphNode> nodes, std::vector<GraphEdge> edges) {
        SystemGraph g;
        g.nodes_ = std::move(nodes);
        g.edges_ = std::move(edges);
        g.n_ = static_cast<int>(g.nodes_.size());
        check(g.n_ > 0, "graph: needs at least one node");
        std::map<std::pair<int, int>, bool> seen;
        for (const auto& e : g.edges_) {
            check(e.a >= 0 && e.a < g.n_ && e.b >= 0 && e.b < g.n_,
                  "graph: edge endpoint out of range");
            check(e.a != e.b, "graph: explicit self-edges are not allowed");
            check(e.resistance > 0.0, "graph: edge resistance must be positive");
            check(e.inductance >= 0.0, "graph: edge inductance must be nonnegative");
            auto key = std::make_pair(std::min(e.a, e.b), std::max(e.a, e.b));
            check(!seen.count(key), "graph: duplicate edge " + std::to_string(e.a) + "-" +
                                        std::to_string(e.b));
            seen[key] = true;
        }
        g.finish();
        return g;
    }

    // Generic electrical network from a parsed config: any size, with the
    // source/load/fault annotations attached and validated.
    static SystemGraph from_config(const TopologyConfig& config) {
        SystemGraph g = from_parts(config.nodes, config.edges);
        check(config.nominal_voltage > 0.0, "graph: nominal voltage must be positive");
        for (const auto& s : config.sources)
            check(s.node >= 0 && s.node < g.n_ && s.voltage > 0 && s.rating > 0 &&
                      s.limit_factor > 0,
                  "graph: invalid source spec");
        for (const auto& l : config.loads)
            check(l.node >= 0 && l.node < g.n_ && l.power > 0, "graph: invalid load spec");
        for (const auto& [pos, edge] : config.fault_position_edges)
            check(edge >= 0 && edge < static_cast<int>(g.edges_.size()),
                  "graph: fault position maps to a nonexistent edge");
        g.name_ = config.name;
        g.nominal_voltage_ = config.nominal_voltage;
        g.sources_ = config.sources;
        g.loads_ = config.loads;
        g.fault_position_edges_ = config.fault_position_edges;
        g.topo_hash_ = fnv1a64(config.raw_text);
        return g;
    }

    int node_count() const { return n_; }
    const std::vector<GraphNode>& nodes() const { return nodes_; }
    const std::vector<GraphEdge>& edges() const { return edges_; }
    const std::vector<SourceSpec>& sources() const { return sources_; }
    const std::vector<LoadSpec>& loads() const { return loads_; }
    double nominal_voltage() const { return nominal_voltage_; }
    const std::map<int, int>& fault_position_edges() const { return fault_position_edges_; }
    std::uint64_t topology_hash() const { return topo_hash_; }
    const std::string& name() const { return name_; }

    const Tensor& adjacency() const { return adjacency_; }
    const std::vector<double>& degrees() const { return degrees_; }

    // D^{-1/2} (A + I) D^{-1/2}, shared so the tape can hold it by pointer.
    const std::shared_ptr<const Tensor>& norm_operator() const { return norm_operator_; }

    const std::vector<NodePair>& pairs(Neighborhood nb) const {
        return nb == Neighborhood::Local ? local_pairs_ : global_pairs_;
    }

    // Per-pair edge features, [pair count x 3], aligned with pairs(nb).
    const Tensor& pair_features(Neighborhood nb) const {
        return nb == Neighborhood::Local ? *local_features_ : *global_features_;
    }

    const std::shared_ptr<const Tensor>& pair_features_ptr(Neighborhood nb) const {
        return nb == Neighborhood::Local ? local_features_ : global_features_;
    }

    // Packed pair plan for the fused attention op: [N+1 offsets | j per pair],
    // pairs grouped by destination node in index order.
    const std::shared_ptr<const std::vector<std::int32_t>>& attention_plan(Neighborhood nb) const {
        return nb == Neighborhood::Local ? local_plan_ : global_plan_;
    }

    bool connected() const {
        std::vector<char> seen(static_cast<std::size_t>(n_), 0);
        std::queue<int> q;
        q.push(0);
        seen[0] = 1;
        int visited = 1;
        while (!q.empty()) {
            int u = q.front();
            q.pop();
            for (const auto& e : edges_) {
                int v = -1;
                if (e.a == u) v = e.b;
                if (e.b == u) v = e.a;
                if (v >= 0 && !seen[static_cast<std::size_t>(v)]) {
                    seen[static_cast<std::size_t>(v)] = 1;
                    ++visited;
                    q.push(v);
                }
            }
        }
        return visited == n_;
    }

    int edge_between(int a, int b) const {
        for (std::size_t k = 0; k < edges_.size(); ++k)
            if ((edges_[k].a == a && edges_[k].b == b) || (edges_[k].a == b && edges_[k].b == a))
                return static_cast<int>(k);
        return -1;
    }

private:
    void finish() {
        adjacency_ = Tensor({n_, n_});
        for (int i = 0; i < n_; ++i) adjacency_.at(i, i) = 1.0;  // self-loops
        for (const auto& e : edges_) {
            adjacency_.at(e.a, e.b) = 1.0;
            adjacency_.at(e.b, e.a) = 1.0;
        }
        degrees_.assign(static_cast<std::size_t>(n_), 0.0);
        for (int i = 0; i < n_; ++i) {
            double d = 0.0;
            for (int j = 0; j < n_; ++j) d += adjacency_.at(i, j);
            degrees_[static_cast<std::size_t>(i)] = d;
        }
        auto op = std::make_shared<Tensor>(Shape{n_, n_});
        for (int i = 0; i < n_; ++i)
            for (int j = 0; j < n_; ++j)
                op->at(i, j) = adjacency_.at(i, j) /
                               std::sqrt(degrees_[static_cast<std::size_t>(i)] *
                                         degrees_[static_cast<std::size_t>(j)]);
        norm_operator_ = std::move(op);

        double max_r = 0.0, max_l = 0.0;
        for (const auto& e : edges_) {
            max_r = std::max(max_r, e.resistance);
            max_l = std::max(max_l, e.inductance);
        }
        auto feature_for = [&](int i, int j, double* out) {
            int e = i == j ? -1 : edge_between(i, j);
            if (e < 0) {  // self-loop or virtual pair
                out[0] = 0.0;
                out[1] = 0.0;
                out[2] = 1.0;
            } else {
                out[0] = edges_[static_cast<std::size_t>(e)].resistance / max_r;
                out[1] = max_l > 0.0 ? edges_[static_cast<std::size_t>(e)].inductance / max_l : 0.0;
                out[2] = 0.0;
            }
        };

        auto build = [&](Neighborhood nb) {
            std::vector<NodePair>& list = nb == Neighborhood::Local ? local_pairs_ : global_pairs_;
            list.clear();
            for (int i = 0; i < n_; ++i)
                for (int j = 0; j < n_; ++j)
                    if (nb == Neighborhood::Global || i == j || adjacency_.at(i, j) != 0.0)
                        list.push_back({i, j});
            auto feats = std::make_shared<Tensor>(
                Shape{static_cast<std::int64_t>(list.size()), kEdgeFeatureDim});
            for (std::size_t p = 0; p < list.size(); ++p)
                feature_for(list[p].i, list[p].j, feats->data() + p * kEdgeFeatureDim);
            auto plan = std::make_shared<std::vector<std::int32_t>>();
            plan->assign(static_cast<std::size_t>(n_) + 1, 0);
            for (const auto& pr : list) ++(*plan)[static_cast<std::size_t>(pr.i) + 1];
            for (int i = 0; i < n_; ++i)
                (*plan)[static_cast<std::size_t>(i) + 1] += (*plan)[static_cast<std::size_t>(i)];
            for (const auto& pr : list) plan->push_back(pr.j);
            if (nb == Neighborhood::Local) {
                local_features_ = std::move(feats);
                local_plan_ = std::move(plan);
            } else {
                global_features_ = std::move(feats);
                global_plan_ = std::move(plan);
            }
        };
        build(Neighborhood::Local);
        build(Neighborhood::Global);
    }

    int n_ = 0;
    std::string name_;
    double nominal_voltage_ = 0.0;
    std::vector<GraphNode> nodes_;
    std::vector<GraphEdge> edges_;
    std::vector<SourceSpec> sources_;
    std::vector<LoadSpec> loads_;
    std::map<int, int> fault_position_edges_;
    std::uint64_t topo_hash_ = 0;

    Tensor adjacency_;
    std::vector<double> degrees_;
    std::shared_ptr<const Tensor> norm_operator_;
    std::vector<NodePair> local_pairs_, global_pairs_;
    std::shared_ptr<const Tensor> local_features_, global_features_;
    std::shared_ptr<const std::vector<std::int32_t>> local_plan_, global_plan_;
};

inline TopologyConfig TopologyConfig::parse(const std::string& text) {
    CfgFile cfg = CfgFile::parse(text, "topology");
    TopologyConfig tc;
    tc.raw_text = text;
    const auto& sys = cfg.section("system");
    tc.name = sys.get("name");
    tc.nominal_voltage = sys.get_f64("nominal_voltage_v");

    for (const auto& rec : cfg.section("nodes").records) {
        check(rec.size() == 4, "topology [nodes]: expected 'index name kind zone'");
        int idx = std::stoi(rec[0]);
        check(idx == static_cast<int>(tc.nodes.size()),
              "topology [nodes]: indices must be consecutive from 0");
        tc.nodes.push_back({rec[1], node_kind_from(rec[2]), std::stoi(rec[3])});
    }
    for (const auto& rec : cfg.section("edges").records) {
        check(rec.size() == 4, "topology [edges]: expected 'src dst resistance inductance'");
        tc.edges.push_back({std::stoi(rec[0]), std::stoi(rec[1]), std::stod(rec[2]),
                            std::stod(rec[3])});
    }
    for (const auto& rec : cfg.section("sources").records) {
        check(rec.size() == 4, "topology [sources]: expected 'node voltage rating limit_factor'");
        tc.sources.push_back({std::stoi(rec[0]), std::stod(rec[1]), std::stod(rec[2]),
                              std::stod(rec[3])});
    }
    for (const auto& rec : cfg.section("loads").records) {
        check(rec.size() == 2, "topology [loads]: expected 'node power_w'");
        tc.loads.push_back({std::stoi(rec[0]), std::stod(rec[1])});
    }
    for (const auto& rec : cfg.section("fault_positions").records) {
        check(rec.size() == 3, "topology [fault_positions]: expected 'position src dst'");
        int pos = std::stoi(rec[0]);
        int a = std::stoi(rec[1]), b = std::stoi(rec[2]);
        int e = -1;
        for (std::size_t k = 0; k < tc.edges.size(); ++k)
            if ((tc.edges[k].a == a && tc.edges[k].b == b) ||
                (tc.edges[k].a == b && tc.edges[k].b == a))
                e = static_cast<int>(k);
        check(e >= 0, "topology [fault_positions]: position " + std::to_string(pos) +
                          " references a nonexistent edge " + std::to_string(a) + "-" +
                          std::to_string(b));
        tc.fault_position_edges[pos] = e;
    }
    return tc;
}

// Builds and validates the shipboard measurement graph: 20 nodes, 30 edges,
// connected, with the seven mapped fault positions.
inline SystemGraph build_topology(const TopologyConfig& config) {
    check(config.nodes.size() == 20, "build_topology: expected 20 nodes, got " +
                                         std::to_string(config.nodes.size()));
    check(config.edges.size() == 30, "build_topology: expected 30 edges, got " +
                                         std::to_string(config.edges.size()));
    SystemGraph g = SystemGraph::from_config(config);
    check(g.connected(), "build_topology: the ship network must be connected");
    check(config.fault_position_edges.size() == 7,
          "build_topology: expected 7 mapped fault positions, got " +
              std::to_string(config.fault_position_edges.size()));
    for (const auto& [pos, edge] : config.fault_position_edges)
        check(pos >= 1 && pos <= 7, "build_topology: fault positions must be 1..7");
    check(!config.sources.empty(), "build_topology: at least one source required");
    check(!config.loads.empty(), "build_topology: at least one load required");
    return g;
}

// ---------------------------------------------------------------------------
// Labeled time-series samples
// ---------------------------------------------------------------------------

constexpr int kWindowSteps = 60;  // 0.6 s at 100 Hz
constexpr int kNumClasses = 10;
constexpr double kSampleInterval = 0.01;  // s

// Scenario record kept alongside each sample.
struct ScenarioMeta {
    std::vector<int> fault_positions;  // ordered, 0-3 entries from 1..7
    std::vector<double> onset_times;   // s, aligned with fault_positions
    double fault_impedance = 0.0;      // ohm
    std::vector<double> load_scales;   // one factor per configured load
    double noise_level = 0.0;
    std::uint64_t seed = 0;
    double min_fault_bus_voltage = 0.0;  // V, lowest faulted-bus voltage seen
};

// Expected class for a fault-position list (0 normal, 1..7 single fault,
// 8 the double (1,4), 9 the triple (1,3,5)).
inline int label_for_positions(const std::vector<int>& positions) {
    if (positions.empty()) return 0;
    if (positions.size() == 1) {
        check(positions[0] >= 1 && positions[0] <= 7, "fault position must be 1..7");
        return positions[0];
    }
    if (positions == std::vector<int>{1, 4}) return 8;
    if (positions == std::vector<int>{1, 3, 5}) return 9;
    throw std::invalid_argument("unsupported multi-fault position set");
}

// One labeled example: per-node current window [K x N] (single channel).
struct TimeSeriesSample {
    int steps = kWindowSteps;
    int node_count = 0;
    std::vector<double> features;  // steps * node_count, time-major
    int label = 0;
    ScenarioMeta meta;

    double at(int k, int n) const {
        return features[static_cast<std::size_t>(k * node_count + n)];
    }
    double& at(int k, int n) {
        return features[static_cast<std::size_t>(k * node_count + n)];
    }

    Shape shape() const { return {steps, node_count, 1}; }
};

// Per-node standardization statistics, computed from the training split only.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;

    static constexpr double kStdFloor = 1e-8;

    static NormStats from_samples(const std::vector<TimeSeriesSample>& samples) {
        check(!samples.empty(), "NormStats: no samples");
        const int n = samples[0].node_count;
        NormStats st;
        st.mean.assign(static_cast<std::size_t>(n), 0.0);
        st.std.assign(static_cast<std::size_t>(n), 0.0);
        std::uint64_t count = 0;
        for (const auto& s : samples) {
            check(s.node_count == n, "NormStats: inconsistent node counts");
            for (int k = 0; k < s.steps; ++k)
                for (int j = 0; j < n; ++j) st.mean[static_cast<std::size_t>(j)] += s.at(k, j);
            count += static_cast<std::uint64_t>(s.steps);
        }
        for (auto& m : st.mean) m /= static_cast<double>(count);
        for (const auto& s : samples)
            for (int k = 0; k < s.steps; ++k)
                for (int j = 0; j < n; ++j) {
                    const double d = s.at(k, j) - st.mean[static_cast<std::size_t>(j)];
                    st.std[static_cast<std::size_t>(j)] += d * d;
                }
        for (auto& v : st.std) v = std::sqrt(v / static_cast<double>(count));
        return st;
    }
};

// Standardizes each node channel: (x - mean) / max(std, floor). Applying the
// stats twice is deliberately not idempotent; callers track what they pass in.
inline TimeSeriesSample normalize_features(const TimeSeriesSample& raw, const NormStats& stats) {
    check(static_cast<int>(stats.mean.size()) == raw.node_count &&
              static_cast<int>(stats.std.size()) == raw.node_count,
          "normalize_features: stats are for " + std::to_string(stats.mean.size()) +
              " nodes, sample has " + std::to_string(raw.node_count));
    TimeSeriesSample out = raw;
    for (int j = 0; j < raw.node_count; ++j) {
        const double mu = stats.mean[static_cast<std::size_t>(j)];
        const double sd = std::max(stats.std[static_cast<std::size_t>(j)], NormStats::kStdFloor);
        for (int k = 0; k < raw.steps; ++k) out.at(k, j) = (raw.at(k, j) - mu) / sd;
    }
    return out;
}

}  // namespace rgtn
