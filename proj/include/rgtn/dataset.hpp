#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "rgtn/graph.hpp"
#include "rgtn/io.hpp"
#include "rgtn/random.hpp"
#include "rgtn/sim.hpp"

namespace rgtn {

// Dataset composition: 200 normal windows, 350 per single-fault position,
// 350 double-fault and 350 triple-fault windows; 3350 total with a
// stratified 2700/650 train/test split.

constexpr std::array<int, kNumClasses> kClassCounts = {200, 350, 350, 350, 350,
                                                       350, 350, 350, 350, 350};
constexpr int kTotalSamples = 3350;
constexpr int kTestSamples = 650;
constexpr int kTrainSamples = kTotalSamples - kTestSamples;

struct DatasetManifest {
    std::uint32_t version = 1;
    std::uint64_t topology_hash = 0;
    std::uint64_t seed = 0;
    double noise_level = 0.0;
    std::array<int, kNumClasses> class_counts{};
    std::vector<int> train_indices;  // scenario ids, ascending
    std::vector<int> test_indices;
    NormStats stats;  // computed from the training split only
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<TimeSeriesSample> train;
    std::vector<TimeSeriesSample> test;
};

namespace detail {

inline std::vector<int> class_of_scenario() {
    std::vector<int> cls;
    cls.reserve(kTotalSamples);
    for (int c = 0; c < kNumClasses; ++c)
        for (int i = 0; i < kClassCounts[static_cast<std::size_t>(c)]; ++i) cls.push_back(c);
    return cls;
}

// Largest-remainder allocation of the test budget across classes.
inline std::array<int, kNumClasses> test_allocation() {
    std::array<int, kNumClasses> alloc{};
    std::array<double, kNumClasses> frac{};
    int assigned = 0;
    for (int c = 0; c < kNumClasses; ++c) {
        const double quota = static_cast<double>(kClassCounts[static_cast<std::size_t>(c)]) *
                             kTestSamples / kTotalSamples;
        alloc[static_cast<std::size_t>(c)] = static_cast<int>(quota);
        frac[static_cast<std::size_t>(c)] = quota - alloc[static_cast<std::size_t>(c)];
        assigned += alloc[static_cast<std::size_t>(c)];
    }
    while (assigned < kTestSamples) {
        int best = 0;
        for (int c = 1; c < kNumClasses; ++c)
            if (frac[static_cast<std::size_t>(c)] > frac[static_cast<std::size_t>(best)]) best = c;
        ++alloc[static_cast<std::size_t>(best)];
        frac[static_cast<std::size_t>(best)] = -1.0;
        ++assigned;
    }
    return alloc;
}

}  // namespace detail

// Scenario for dataset slot `index` (0..3349). Deterministic under the seed.
inline FaultScenario scenario_for_index(const SystemGraph& graph, std::uint64_t seed,
                                        double noise_level, int index) {
    static const std::vector<int> cls = detail::class_of_scenario();
    check(index >= 0 && index < kTotalSamples, "scenario index out of range");
    const int c = cls[static_cast<std::size_t>(index)];
    Rng rng(derive_seed(seed, "scenario", static_cast<std::uint64_t>(index)));
    FaultScenario sc;
    sc.noise_level = noise_level;
    sc.seed = derive_seed(seed, "scenario-noise", static_cast<std::uint64_t>(index));
    sc.load_scales.resize(graph.loads().size());
    for (auto& s : sc.load_scales) s = rng.uniform(0.7, 1.3);
    if (c == 0) return sc;
    if (c <= 7)
        sc.positions = {c};
    else if (c == 8)
        sc.positions = {1, 4};
    else
        sc.positions = {1, 3, 5};
    sc.fault_impedance = rng.uniform(0.01, 0.2);
    // first onset on the sampling grid in [0.10, 0.35] s; successive faults
    // follow at exactly 50 ms
    const double t0 = 0.10 + 0.01 * static_cast<double>(rng.below(26));
    for (std::size_t m = 0; m < sc.positions.size(); ++m)
        sc.onsets.push_back(t0 + 0.05 * static_cast<double>(m));
    return sc;
}

// Simulates the full composition and splits it. Raw amperes are stored; the
// manifest carries the train-split normalization statistics.
inline Dataset generate_dataset(const SystemGraph& graph, std::uint64_t seed,
                                double noise_level) {
    const bool known_noise = noise_level == 0.0 || noise_level == 0.05 ||
                             noise_level == 0.08 || noise_level == 0.10;
    check(known_noise, "generate_dataset: noise level must be one of {0, 0.05, 0.08, 0.10}");

    Dataset ds;
    ds.manifest.topology_hash = graph.topology_hash();
    ds.manifest.seed = seed;
    ds.manifest.noise_level = noise_level;
    ds.manifest.class_counts = kClassCounts;

    std::vector<TimeSeriesSample> all;
    all.reserve(kTotalSamples);
    for (int i = 0; i < kTotalSamples; ++i)
        all.push_back(simulate_window(graph, scenario_for_index(graph, seed, noise_level, i)));

    // stratified split: shuffle each class's slots, first test_alloc go to test
    const std::vector<int> cls = detail::class_of_scenario();
    const auto alloc = detail::test_allocation();
    std::vector<char> in_test(kTotalSamples, 0);
    for (int c = 0; c < kNumClasses; ++c) {
        std::vector<int> ids;
        for (int i = 0; i < kTotalSamples; ++i)
            if (cls[static_cast<std::size_t>(i)] == c) ids.push_back(i);
        Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(c)));
        rng.shuffle(ids);
        for (int k = 0; k < alloc[static_cast<std::size_t>(c)]; ++k)
            in_test[static_cast<std::size_t>(ids[static_cast<std::size_t>(k)])] = 1;
    }
    for (int i = 0; i < kTotalSamples; ++i) {
        if (in_test[static_cast<std::size_t>(i)]) {
            ds.manifest.test_indices.push_back(i);
            ds.test.push_back(all[static_cast<std::size_t>(i)]);
        } else {
            ds.manifest.train_indices.push_back(i);
            ds.train.push_back(all[static_cast<std::size_t>(i)]);
        }
    }
    ds.manifest.stats = NormStats::from_samples(ds.train);
    return ds;
}

inline std::array<int, kNumClasses> class_histogram(const std::vector<TimeSeriesSample>& a,
                                                    const std::vector<TimeSeriesSample>& b = {}) {
    std::array<int, kNumClasses> h{};
    for (const auto& s : a) ++h[static_cast<std::size_t>(s.label)];
    for (const auto& s : b) ++h[static_cast<std::size_t>(s.label)];
    return h;
}

// ---------------------------------------------------------------------------
// Persistence: manifest.cfg + train.bin + test.bin
// ---------------------------------------------------------------------------

constexpr char kSplitMagic[9] = "RGTNDAT1";

namespace detail {

// shortest round-trip decimal form of a double
inline std::string fmt_g17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void save_split(const std::string& path, const std::vector<TimeSeriesSample>& split,
                       std::size_t load_count) {
    BinaryWriter w(path);
    w.magic(kSplitMagic);
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(split.size()));
    w.u32(kWindowSteps);
    w.u32(split.empty() ? 0 : static_cast<std::uint32_t>(split[0].node_count));
    w.u32(1);  // feature channels
    w.u32(static_cast<std::uint32_t>(load_count));
    for (const auto& s : split) {
        w.u8(static_cast<std::uint8_t>(s.label));
        w.u8(static_cast<std::uint8_t>(s.meta.fault_positions.size()));
        for (int p : s.meta.fault_positions) w.u8(static_cast<std::uint8_t>(p));
        for (double t : s.meta.onset_times) w.f64(t);
        w.f64(s.meta.fault_impedance);
        for (double v : s.meta.load_scales) w.f64(v);
        w.f64(s.meta.noise_level);
        w.u64(s.meta.seed);
        w.f64(s.meta.min_fault_bus_voltage);
        w.f64_array(s.features.data(), s.features.size());
    }
    w.close();
}

inline std::vector<TimeSeriesSample> load_split(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic(kSplitMagic);
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw std::runtime_error(path + ": unsupported split version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    const std::uint32_t steps = r.u32();
    const std::uint32_t nodes = r.u32();
    const std::uint32_t channels = r.u32();
    const std::uint32_t load_count = r.u32();
    if (channels != 1) throw std::runtime_error(path + ": unsupported channel count");
    std::vector<TimeSeriesSample> split(count);
    for (auto& s : split) {
        s.steps = static_cast<int>(steps);
        s.node_count = static_cast<int>(nodes);
        s.label = r.u8();
        const int nf = r.u8();
        s.meta.fault_positions.resize(static_cast<std::size_t>(nf));
        for (auto& p : s.meta.fault_positions) p = r.u8();
        s.meta.onset_times.resize(static_cast<std::size_t>(nf));
        for (auto& t : s.meta.onset_times) t = r.f64();
        s.meta.fault_impedance = r.f64();
        s.meta.load_scales.resize(load_count);
        for (auto& v : s.meta.load_scales) v = r.f64();
        s.meta.noise_level = r.f64();
        s.meta.seed = r.u64();
        s.meta.min_fault_bus_voltage = r.f64();
        s.features.resize(static_cast<std::size_t>(steps) * nodes);
        r.f64_array(s.features.data(), s.features.size());
    }
    return split;
}

}  // namespace detail

inline void save_dataset(const std::string& dir, const Dataset& ds) {
    const DatasetManifest& m = ds.manifest;
    std::string text;
    text += "[dataset]\n";
    text += "version = " + std::to_string(m.version) + "\n";
    char hash_buf[24];
    std::snprintf(hash_buf, sizeof hash_buf, "%016llx",
                  static_cast<unsigned long long>(m.topology_hash));
    text += "topology_hash = " + std::string(hash_buf) + "\n";
    text += "seed = " + std::to_string(m.seed) + "\n";
    text += "noise_level = " + detail::fmt_g17(m.noise_level) + "\n";
    text += "total = " + std::to_string(ds.train.size() + ds.test.size()) + "\n";
    text += "train = " + std::to_string(ds.train.size()) + "\n";
    text += "test = " + std::to_string(ds.test.size()) + "\n";
    text += "\n[class_counts]\n";
    for (int c = 0; c < kNumClasses; ++c)
        text += std::to_string(c) + " " +
                std::to_string(m.class_counts[static_cast<std::size_t>(c)]) + "\n";
    text += "\n[normalization]\n";
    for (std::size_t n = 0; n < m.stats.mean.size(); ++n)
        text += std::to_string(n) + " " + detail::fmt_g17(m.stats.mean[n]) + " " +
                detail::fmt_g17(m.stats.std[n]) + "\n";
    auto write_indices = [&](const char* name, const std::vector<int>& idx) {
        text += "\n[" + std::string(name) + "]\n";
        for (std::size_t i = 0; i < idx.size(); ++i)
            text += std::to_string(idx[i]) + ((i + 1) % 20 == 0 || i + 1 == idx.size() ? "\n" : " ");
    };
    write_indices("split_train", m.train_indices);
    write_indices("split_test", m.test_indices);
    write_text_file(dir + "/manifest.cfg", text);
    detail::save_split(dir + "/train.bin", ds.train,
                       ds.train.empty() ? 0 : ds.train[0].meta.load_scales.size());
    detail::save_split(dir + "/test.bin", ds.test,
                       ds.test.empty() ? 0 : ds.test[0].meta.load_scales.size());
}

inline Dataset load_dataset(const std::string& dir) {
    Dataset ds;
    CfgFile cfg = CfgFile::parse_file(dir + "/manifest.cfg");
    const auto& d = cfg.section("dataset");
    ds.manifest.version = static_cast<std::uint32_t>(d.get_i64("version"));
    ds.manifest.topology_hash = std::stoull(d.get("topology_hash"), nullptr, 16);
    ds.manifest.seed = d.get_u64("seed");
    ds.manifest.noise_level = d.get_f64("noise_level");
    for (const auto& rec : cfg.section("class_counts").records) {
        check(rec.size() == 2, "manifest [class_counts]: expected 'class count'");
        ds.manifest.class_counts[static_cast<std::size_t>(std::stoi(rec[0]))] = std::stoi(rec[1]);
    }
    for (const auto& rec : cfg.section("normalization").records) {
        check(rec.size() == 3, "manifest [normalization]: expected 'node mean std'");
        ds.manifest.stats.mean.push_back(std::stod(rec[1]));
        ds.manifest.stats.std.push_back(std::stod(rec[2]));
    }
    for (const auto& rec : cfg.section("split_train").records)
        for (const auto& f : rec) ds.manifest.train_indices.push_back(std::stoi(f));
    for (const auto& rec : cfg.section("split_test").records)
        for (const auto& f : rec) ds.manifest.test_indices.push_back(std::stoi(f));
    ds.train = detail::load_split(dir + "/train.bin");
    ds.test = detail::load_split(dir + "/test.bin");
    check(ds.train.size() == ds.manifest.train_indices.size(),
          "dataset: train split size does not match manifest");
    check(ds.test.size() == ds.manifest.test_indices.size(),
          "dataset: test split size does not match manifest");
    return ds;
}

// Standardized copies of a split using the manifest statistics.
inline std::vector<TimeSeriesSample> normalized_split(const std::vector<TimeSeriesSample>& split,
                                                      const NormStats& stats) {
    std::vector<TimeSeriesSample> out;
    out.reserve(split.size());
    for (const auto& s : split) out.push_back(normalize_features(s, stats));
    return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

// Index batches for one epoch. Every sample appears exactly once; the last
// batch may be smaller. Shuffling is deterministic per (seed, epoch).
inline std::vector<std::vector<int>> make_batches(int sample_count, int batch_size,
                                                  bool shuffle, std::uint64_t seed,
                                                  std::uint64_t epoch) {
    check(sample_count > 0, "make_batches: empty split");
    check(batch_size >= 1, "make_batches: batch size must be at least 1");
    std::vector<int> order(static_cast<std::size_t>(sample_count));
    for (int i = 0; i < sample_count; ++i) order[static_cast<std::size_t>(i)] = i;
    if (shuffle) {
        Rng rng(derive_seed(seed, "shuffle", epoch));
        rng.shuffle(order);
    }
    std::vector<std::vector<int>> batches;
    for (int start = 0; start < sample_count; start += batch_size) {
        const int end = std::min(sample_count, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

}  // namespace rgtn
