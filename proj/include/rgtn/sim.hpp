#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rgtn/graph.hpp"
#include "rgtn/random.hpp"
#include "rgtn/tensor.hpp"

namespace rgtn {

// Lumped-parameter DC simulator for the measurement network. Faults are
// pole-to-pole shorts at the midpoint of a line segment; each network state
// (pre-fault, after each successive onset) is a nodal steady state, and the
// sampled waveforms blend states with first-order RL responses plus a
// converter-limit relaxation. Device-level electromagnetic transients are
// deliberately out of scope; the goal is realistic classification
// signatures, not component-accurate waveforms.

// Line-to-line fault current through a fault path: the two line sections in
// series with the fault impedance.
inline double fault_current(double v1, double v2, double z_f, double z_l1, double z_l2) {
    const double total = z_f + z_l1 + z_l2;
    check(total > 0.0, "fault_current: total path impedance must be positive");
    return (v1 - v2) / total;
}

struct FaultScenario {
    std::vector<int> positions;       // ordered, 0-3 entries from 1..7
    std::vector<double> onsets;       // s, successive faults 50 ms apart
    double fault_impedance = 0.05;    // ohm
    std::vector<double> load_scales;  // one factor in [0.7, 1.3] per load
    double noise_level = 0.0;         // one of {0, 0.05, 0.08, 0.10}
    std::uint64_t seed = 0;
};

inline void validate_scenario(const SystemGraph& graph, const FaultScenario& sc) {
    check(sc.positions.size() <= 3, "scenario: at most three successive faults");
    (void)label_for_positions(sc.positions);  // throws on unsupported sets
    for (int p : sc.positions)
        check(graph.fault_position_edges().count(p) != 0,
              "scenario: fault position " + std::to_string(p) + " is not mapped");
    check(sc.onsets.size() == sc.positions.size(),
          "scenario: onsets must align with fault positions");
    const double window = kWindowSteps * kSampleInterval;
    for (std::size_t m = 0; m < sc.onsets.size(); ++m) {
        check(sc.onsets[m] >= 0.1 - 1e-12 && sc.onsets[m] < window,
              "scenario: fault onset " + std::to_string(sc.onsets[m]) +
                  " outside the window (needs 0.1 s pre-fault, window " +
                  std::to_string(window) + " s)");
        if (m > 0)
            check(std::fabs(sc.onsets[m] - sc.onsets[m - 1] - 0.050) < 1e-9,
                  "scenario: successive onsets must be exactly 50 ms apart");
    }
    if (!sc.positions.empty())
        check(sc.fault_impedance > 0.0, "scenario: fault impedance must be positive");
    check(sc.load_scales.size() == graph.loads().size(),
          "scenario: expected " + std::to_string(graph.loads().size()) + " load scales");
    for (double s : sc.load_scales)
        check(s >= 0.7 - 1e-12 && s <= 1.3 + 1e-12,
              "scenario: load scales must lie in [0.7, 1.3]");
    const bool known_noise = sc.noise_level == 0.0 || sc.noise_level == 0.05 ||
                             sc.noise_level == 0.08 || sc.noise_level == 0.10;
    check(known_noise, "scenario: noise level must be one of {0, 0.05, 0.08, 0.10}");
}

struct ActiveFault {
    int position;
    double z_f;
};

// One solved operating point.
struct SteadyState {
    std::vector<double> node_voltage;    // per measurement node
    std::vector<double> fault_voltage;   // per scenario fault (midpoint voltage;
                                         // inactive faults report the healthy
                                         // midpoint of their segment)
    std::vector<double> fault_current;   // per scenario fault, 0 when inactive
    std::vector<double> source_current;  // per configured source
    std::vector<double> load_current;    // per configured load
    std::vector<double> measurement;     // per node: terminal throughput, amps
    double max_kcl_residual = 0.0;       // amps, over internal nodes
    std::vector<bool> source_clamped;
};

namespace detail {

// Dense Gaussian elimination with partial pivoting. The systems are tiny
// (at most 23 unknowns) and diagonally dominant, so no refinement is needed
// to keep nodal current residuals far below a microampere.
inline std::vector<double> lu_solve(std::vector<double> a, std::vector<double> b, int n) {
    for (int col = 0; col < n; ++col) {
        int best = col;
        double mag = std::fabs(a[static_cast<std::size_t>(col * n + col)]);
        for (int r = col + 1; r < n; ++r) {
            const double m = std::fabs(a[static_cast<std::size_t>(r * n + col)]);
            if (m > mag) {
                mag = m;
                best = r;
            }
        }
        check(mag > 1e-30, "singular conductance matrix");
        if (best != col) {
            for (int c = 0; c < n; ++c)
                std::swap(a[static_cast<std::size_t>(col * n + c)],
                          a[static_cast<std::size_t>(best * n + c)]);
            std::swap(b[static_cast<std::size_t>(col)], b[static_cast<std::size_t>(best)]);
        }
        for (int r = col + 1; r < n; ++r) {
            const double f = a[static_cast<std::size_t>(r * n + col)] /
                             a[static_cast<std::size_t>(col * n + col)];
            a[static_cast<std::size_t>(r * n + col)] = f;
            for (int c = col + 1; c < n; ++c)
                a[static_cast<std::size_t>(r * n + c)] -= f * a[static_cast<std::size_t>(col * n + c)];
            b[static_cast<std::size_t>(r)] -= f * b[static_cast<std::size_t>(col)];
        }
    }
    std::vector<double> x = b;
    for (int r = n - 1; r >= 0; --r) {
        double s = x[static_cast<std::size_t>(r)];
        for (int c = r + 1; c < n; ++c)
            s -= a[static_cast<std::size_t>(r * n + c)] * x[static_cast<std::size_t>(c)];
        x[static_cast<std::size_t>(r)] = s / a[static_cast<std::size_t>(r * n + r)];
    }
    return x;
}

}  // namespace detail

// Solves one operating point of the network under the given load scaling and
// active faults. `apply_limits` enables the converter current clamps
// (sources switch from stiff voltage sources to constant-current injections
// at limit_factor * rating).
inline SteadyState solve_steady_state(const SystemGraph& graph,
                                      const std::vector<double>& load_scales,
                                      const std::vector<ActiveFault>& faults,
                                      bool apply_limits = true) {
    const int n_meas = graph.node_count();
    const auto& loads = graph.loads();
    const auto& sources = graph.sources();
    check(load_scales.size() == loads.size(),
          "solve_steady_state: expected " + std::to_string(loads.size()) + " load scales");
    const double vnom = graph.nominal_voltage();
    check(vnom > 0.0, "solve_steady_state: graph has no nominal voltage");
    for (const auto& l : loads) check(l.power > 0.0, "solve_steady_state: load power must be positive");

    const int n_total = n_meas + static_cast<int>(faults.size());

    // branch list with faulted edges split at their midpoint
    struct Branch {
        int a, b;
        double g;
    };
    std::vector<Branch> branches;
    std::vector<bool> edge_faulted(graph.edges().size(), false);
    std::vector<int> fault_node(faults.size());
    for (std::size_t m = 0; m < faults.size(); ++m) {
        auto it = graph.fault_position_edges().find(faults[m].position);
        check(it != graph.fault_position_edges().end(),
              "solve_steady_state: unmapped fault position");
        check(!edge_faulted[static_cast<std::size_t>(it->second)],
              "solve_steady_state: duplicate fault on one segment");
        edge_faulted[static_cast<std::size_t>(it->second)] = true;
        fault_node[m] = n_meas + static_cast<int>(m);
    }
    // near-zero line resistances are clamped so degenerate test networks
    // stay solvable without wrecking the conditioning of the system
    auto conductance_of = [](double r) { return r < 1e-8 ? 1e8 : 1.0 / r; };
    for (std::size_t e = 0; e < graph.edges().size(); ++e) {
        const auto& ed = graph.edges()[e];
        if (!edge_faulted[e]) {
            branches.push_back({ed.a, ed.b, conductance_of(ed.resistance)});
        } else {
            for (std::size_t m = 0; m < faults.size(); ++m) {
                auto it = graph.fault_position_edges().find(faults[m].position);
                if (it->second == static_cast<int>(e)) {
                    branches.push_back({ed.a, fault_node[m], conductance_of(ed.resistance / 2.0)});
                    branches.push_back({fault_node[m], ed.b, conductance_of(ed.resistance / 2.0)});
                }
            }
        }
    }

    // shunt conductances to the return pole
    std::vector<double> shunt(static_cast<std::size_t>(n_total), 0.0);
    for (std::size_t l = 0; l < loads.size(); ++l)
        shunt[static_cast<std::size_t>(loads[l].node)] +=
            loads[l].power * load_scales[l] / (vnom * vnom);
    for (std::size_t m = 0; m < faults.size(); ++m) {
        check(faults[m].z_f > 0.0, "solve_steady_state: fault impedance must be positive");
        shunt[static_cast<std::size_t>(fault_node[m])] += 1.0 / faults[m].z_f;
    }

    std::vector<bool> clamped(sources.size(), false);
    std::vector<double> voltage(static_cast<std::size_t>(n_total), 0.0);
    std::vector<double> src_current(sources.size(), 0.0);

    for (int iteration = 0; iteration < 32; ++iteration) {
        // unknowns: every node that is not an unclamped source terminal
        std::vector<int> unknown_of(static_cast<std::size_t>(n_total), -1);
        std::vector<int> node_of;
        std::vector<double> fixed_v(static_cast<std::size_t>(n_total), 0.0);
        std::vector<bool> dirichlet(static_cast<std::size_t>(n_total), false);
        for (std::size_t s = 0; s < sources.size(); ++s)
            if (!clamped[s]) {
                dirichlet[static_cast<std::size_t>(sources[s].node)] = true;
                fixed_v[static_cast<std::size_t>(sources[s].node)] = sources[s].voltage;
            }
        for (int i = 0; i < n_total; ++i)
            if (!dirichlet[static_cast<std::size_t>(i)]) {
                unknown_of[static_cast<std::size_t>(i)] = static_cast<int>(node_of.size());
                node_of.push_back(i);
            }
        const int nu = static_cast<int>(node_of.size());
        check(nu > 0 || !sources.empty(), "solve_steady_state: empty system");

        std::vector<double> a(static_cast<std::size_t>(nu) * nu, 0.0);
        std::vector<double> rhs(static_cast<std::size_t>(nu), 0.0);
        for (int i = 0; i < nu; ++i)
            a[static_cast<std::size_t>(i * nu + i)] += shunt[static_cast<std::size_t>(node_of[static_cast<std::size_t>(i)])];
        for (const auto& br : branches) {
            const int ua = unknown_of[static_cast<std::size_t>(br.a)];
            const int ub = unknown_of[static_cast<std::size_t>(br.b)];
            if (ua >= 0) a[static_cast<std::size_t>(ua * nu + ua)] += br.g;
            if (ub >= 0) a[static_cast<std::size_t>(ub * nu + ub)] += br.g;
            if (ua >= 0 && ub >= 0) {
                a[static_cast<std::size_t>(ua * nu + ub)] -= br.g;
                a[static_cast<std::size_t>(ub * nu + ua)] -= br.g;
            } else if (ua >= 0) {
                rhs[static_cast<std::size_t>(ua)] += br.g * fixed_v[static_cast<std::size_t>(br.b)];
            } else if (ub >= 0) {
                rhs[static_cast<std::size_t>(ub)] += br.g * fixed_v[static_cast<std::size_t>(br.a)];
            }
        }
        for (std::size_t s = 0; s < sources.size(); ++s)
            if (clamped[s]) {
                const int u = unknown_of[static_cast<std::size_t>(sources[s].node)];
                if (u >= 0)
                    rhs[static_cast<std::size_t>(u)] +=
                        sources[s].rating * sources[s].limit_factor;
            }

        std::vector<double> x;
        if (nu > 0) x = detail::lu_solve(a, rhs, nu);
        for (int i = 0; i < n_total; ++i)
            voltage[static_cast<std::size_t>(i)] =
                dirichlet[static_cast<std::size_t>(i)]
                    ? fixed_v[static_cast<std::size_t>(i)]
                    : x[static_cast<std::size_t>(unknown_of[static_cast<std::size_t>(i)])];

        // source terminal currents
        bool changed = false;
        for (std::size_t s = 0; s < sources.size(); ++s) {
            const int node = sources[s].node;
            const double limit = sources[s].rating * sources[s].limit_factor;
            if (clamped[s]) {
                src_current[s] = limit;
                if (voltage[static_cast<std::size_t>(node)] > sources[s].voltage * (1.0 + 1e-9)) {
                    clamped[s] = false;  // injection would overdrive the bus
                    changed = true;
                }
                continue;
            }
            double out = shunt[static_cast<std::size_t>(node)] * voltage[static_cast<std::size_t>(node)];
            for (const auto& br : branches) {
                if (br.a == node)
                    out += br.g * (voltage[static_cast<std::size_t>(node)] -
                                   voltage[static_cast<std::size_t>(br.b)]);
                else if (br.b == node)
                    out += br.g * (voltage[static_cast<std::size_t>(node)] -
                                   voltage[static_cast<std::size_t>(br.a)]);
            }
            src_current[s] = out;
            if (apply_limits && out > limit * (1.0 + 1e-9)) {
                clamped[s] = true;
                changed = true;
            }
        }
        if (!changed) break;
    }

    SteadyState st;
    st.node_voltage.assign(voltage.begin(), voltage.begin() + n_meas);
    st.source_clamped = clamped;
    st.source_current = src_current;

    // per-node terminal throughput: half the absolute branch currents plus
    // the local shunt/source current
    std::vector<double> traffic(static_cast<std::size_t>(n_total), 0.0);
    for (const auto& br : branches) {
        const double i = br.g * (voltage[static_cast<std::size_t>(br.a)] -
                                 voltage[static_cast<std::size_t>(br.b)]);
        traffic[static_cast<std::size_t>(br.a)] += std::fabs(i);
        traffic[static_cast<std::size_t>(br.b)] += std::fabs(i);
    }
    for (int i = 0; i < n_total; ++i)
        traffic[static_cast<std::size_t>(i)] +=
            std::fabs(shunt[static_cast<std::size_t>(i)] * voltage[static_cast<std::size_t>(i)]);
    for (std::size_t s = 0; s < sources.size(); ++s)
        traffic[static_cast<std::size_t>(sources[s].node)] += std::fabs(src_current[s]);
    st.measurement.resize(static_cast<std::size_t>(n_meas));
    for (int i = 0; i < n_meas; ++i)
        st.measurement[static_cast<std::size_t>(i)] = 0.5 * traffic[static_cast<std::size_t>(i)];

    st.load_current.resize(loads.size());
    for (std::size_t l = 0; l < loads.size(); ++l)
        st.load_current[l] = loads[l].power * load_scales[l] / (vnom * vnom) *
                             voltage[static_cast<std::size_t>(loads[l].node)];

    st.fault_voltage.resize(faults.size());
    st.fault_current.resize(faults.size());
    for (std::size_t m = 0; m < faults.size(); ++m) {
        st.fault_voltage[m] = voltage[static_cast<std::size_t>(fault_node[m])];
        st.fault_current[m] = st.fault_voltage[m] / faults[m].z_f;
    }

    // KCL residual over internal (non-source) measurement nodes
    for (int i = 0; i < n_total; ++i) {
        bool is_source = false;
        for (const auto& s : sources)
            if (s.node == i) is_source = true;
        if (is_source) continue;
        double net = -shunt[static_cast<std::size_t>(i)] * voltage[static_cast<std::size_t>(i)];
        for (const auto& br : branches) {
            if (br.a == i)
                net -= br.g * (voltage[static_cast<std::size_t>(i)] -
                               voltage[static_cast<std::size_t>(br.b)]);
            else if (br.b == i)
                net -= br.g * (voltage[static_cast<std::size_t>(i)] -
                               voltage[static_cast<std::size_t>(br.a)]);
        }
        st.max_kcl_residual = std::max(st.max_kcl_residual, std::fabs(net));
    }
    return st;
}

// Full sampled window with voltage traces kept for inspection.
struct WindowTrace {
    TimeSeriesSample sample;
    std::vector<std::vector<double>> node_voltage;      // [K][N]
    std::vector<std::vector<double>> fault_bus_voltage; // [faults][K]
};

namespace detail {

constexpr double kLimiterTau = 0.035;  // s, converter limit engagement

struct ChannelPiecewise {
    // per segment m: start time, clamped target, unclamped overshoot
    std::vector<double> start, target, overshoot, rise_tau;

    double eval(double t) const {
        std::size_t m = 0;
        while (m + 1 < start.size() && t >= start[m + 1]) ++m;
        return eval_segment(m, t);
    }

    double eval_segment(std::size_t m, double t) const {
        if (m == 0) return target[0];
        const double prev = eval_segment(m - 1, start[m]);
        const double dt = t - start[m];
        const double rise = std::exp(-dt / rise_tau[m]);
        const double spike = (overshoot[m] - target[m]) * (1.0 - rise) *
                             std::exp(-dt / kLimiterTau);
        return target[m] + (prev - target[m]) * rise + spike;
    }
};

}  // namespace detail

inline WindowTrace simulate_window_trace(const SystemGraph& graph, const FaultScenario& sc) {
    validate_scenario(graph, sc);
    const int n = graph.node_count();
    const int n_faults = static_cast<int>(sc.positions.size());

    // operating points: state m has faults 0..m-1 active. Clamped solutions
    // are the targets; unclamped solutions give the prospective surge.
    std::vector<SteadyState> clamped_states, unclamped_states;
    std::vector<double> rise_tau(static_cast<std::size_t>(n_faults) + 1, 1.0);
    for (int m = 0; m <= n_faults; ++m) {
        std::vector<ActiveFault> active;
        for (int f = 0; f < m; ++f) active.push_back({sc.positions[static_cast<std::size_t>(f)], sc.fault_impedance});
        clamped_states.push_back(solve_steady_state(graph, sc.load_scales, active, true));
        unclamped_states.push_back(solve_steady_state(graph, sc.load_scales, active, false));
        if (m > 0) {
            const auto& edge = graph.edges()[static_cast<std::size_t>(
                graph.fault_position_edges().at(sc.positions[static_cast<std::size_t>(m - 1)]))];
            const double tau = edge.inductance / (sc.fault_impedance + edge.resistance);
            rise_tau[static_cast<std::size_t>(m)] = std::min(0.020, std::max(0.001, tau));
        }
    }

    // fault-bus voltage per state, defined for every scenario fault: healthy
    // segments report their midpoint voltage
    auto fault_bus_voltage = [&](const SteadyState& st, int state_faults, int fault) {
        if (fault < state_faults) return st.fault_voltage[static_cast<std::size_t>(fault)];
        const auto& edge = graph.edges()[static_cast<std::size_t>(
            graph.fault_position_edges().at(sc.positions[static_cast<std::size_t>(fault)]))];
        return 0.5 * (st.node_voltage[static_cast<std::size_t>(edge.a)] +
                      st.node_voltage[static_cast<std::size_t>(edge.b)]);
    };

    auto build_channel = [&](auto&& value_of) {
        detail::ChannelPiecewise ch;
        for (int m = 0; m <= n_faults; ++m) {
            ch.start.push_back(m == 0 ? -1.0 : sc.onsets[static_cast<std::size_t>(m - 1)]);
            ch.target.push_back(value_of(clamped_states[static_cast<std::size_t>(m)], m));
            ch.overshoot.push_back(value_of(unclamped_states[static_cast<std::size_t>(m)], m));
            ch.rise_tau.push_back(rise_tau[static_cast<std::size_t>(m)]);
        }
        return ch;
    };

    WindowTrace out;
    out.sample.steps = kWindowSteps;
    out.sample.node_count = n;
    out.sample.features.assign(static_cast<std::size_t>(kWindowSteps) * n, 0.0);
    out.node_voltage.assign(kWindowSteps, std::vector<double>(static_cast<std::size_t>(n), 0.0));
    out.fault_bus_voltage.assign(static_cast<std::size_t>(n_faults),
                                 std::vector<double>(kWindowSteps, 0.0));

    for (int node = 0; node < n; ++node) {
        auto meas = build_channel([&](const SteadyState& st, int) {
            return st.measurement[static_cast<std::size_t>(node)];
        });
        auto volt = build_channel([&](const SteadyState& st, int) {
            return st.node_voltage[static_cast<std::size_t>(node)];
        });
        for (int k = 0; k < kWindowSteps; ++k) {
            const double t = k * kSampleInterval;
            out.sample.at(k, node) = meas.eval(t);
            out.node_voltage[static_cast<std::size_t>(k)][static_cast<std::size_t>(node)] =
                volt.eval(t);
        }
    }
    double min_fault_v = graph.nominal_voltage();
    for (int f = 0; f < n_faults; ++f) {
        auto ch = build_channel([&](const SteadyState& st, int m) {
            return fault_bus_voltage(st, m, f);
        });
        for (int k = 0; k < kWindowSteps; ++k) {
            const double v = ch.eval(k * kSampleInterval);
            out.fault_bus_voltage[static_cast<std::size_t>(f)][static_cast<std::size_t>(k)] = v;
            min_fault_v = std::min(min_fault_v, v);
        }
    }

    out.sample.label = label_for_positions(sc.positions);
    out.sample.meta.fault_positions = sc.positions;
    out.sample.meta.onset_times = sc.onsets;
    out.sample.meta.fault_impedance = n_faults > 0 ? sc.fault_impedance : 0.0;
    out.sample.meta.load_scales = sc.load_scales;
    out.sample.meta.noise_level = sc.noise_level;
    out.sample.meta.seed = sc.seed;
    out.sample.meta.min_fault_bus_voltage = min_fault_v;
    return out;
}

// Additive zero-mean Gaussian measurement noise, std = p * per-channel RMS of
// the clean signal. Deterministic under the seed; p = 0 returns the sample
// unchanged.
inline TimeSeriesSample add_noise(const TimeSeriesSample& sample, double p, std::uint64_t seed) {
    check(p >= 0.0 && p <= 0.2, "add_noise: noise level must lie in [0, 0.2]");
    if (p == 0.0) return sample;
    TimeSeriesSample out = sample;
    Rng rng(derive_seed(seed, "measurement-noise"));
    for (int node = 0; node < sample.node_count; ++node) {
        double ms = 0.0;
        for (int k = 0; k < sample.steps; ++k) ms += sample.at(k, node) * sample.at(k, node);
        const double rms = std::sqrt(ms / sample.steps);
        const double sigma = p * rms;
        for (int k = 0; k < sample.steps; ++k) out.at(k, node) += rng.normal(0.0, sigma);
    }
    out.meta.noise_level = p;
    return out;
}

// Samples a labeled window; applies scenario noise when requested.
inline TimeSeriesSample simulate_window(const SystemGraph& graph, const FaultScenario& sc) {
    TimeSeriesSample s = simulate_window_trace(graph, sc).sample;
    if (sc.noise_level > 0.0) s = add_noise(s, sc.noise_level, sc.seed);
    return s;
}

}  // namespace rgtn
