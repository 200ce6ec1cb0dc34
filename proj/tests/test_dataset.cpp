#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "rgtn/dataset.hpp"

using namespace rgtn;

namespace {

SystemGraph ship_graph() {
    return build_topology(
        TopologyConfig::parse_file(std::string(RGTN_SOURCE_DIR) + "/topology/mvdc4zone.cfg"));
}

std::string fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "rgtn_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

}  // namespace

TEST_CASE("generated dataset matches the composition table") {
    SystemGraph g = ship_graph();
    Dataset ds = generate_dataset(g, 1234, 0.0);

    CHECK(ds.train.size() == 2700u);
    CHECK(ds.test.size() == 650u);

    auto hist = class_histogram(ds.train, ds.test);
    CHECK(hist[0] == 200);
    for (int c = 1; c < 10; ++c) CHECK(hist[static_cast<std::size_t>(c)] == 350);

    // stratified: each class's test share is 650/3350 of its count, +-1
    auto test_hist = class_histogram(ds.test);
    for (int c = 0; c < 10; ++c) {
        const double quota = kClassCounts[static_cast<std::size_t>(c)] * 650.0 / 3350.0;
        CHECK(std::fabs(test_hist[static_cast<std::size_t>(c)] - quota) <= 1.0);
    }
    int test_total = 0;
    for (int c : test_hist) test_total += c;
    CHECK(test_total == 650);

    // split indices are disjoint and cover everything
    std::set<int> seen(ds.manifest.train_indices.begin(), ds.manifest.train_indices.end());
    for (int i : ds.manifest.test_indices) CHECK(seen.insert(i).second);
    CHECK(seen.size() == 3350u);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 3349);

    // every sample's label matches its fault-position metadata
    for (const auto& s : ds.train) CHECK(s.label == label_for_positions(s.meta.fault_positions));
    for (const auto& s : ds.test) CHECK(s.label == label_for_positions(s.meta.fault_positions));

    // load factors within the randomization range
    for (const auto& s : ds.train)
        for (double f : s.meta.load_scales) {
            CHECK(f >= 0.7);
            CHECK(f <= 1.3);
        }
}

TEST_CASE("same seed regenerates byte-identical dataset files") {
    SystemGraph g = ship_graph();
    const std::string dir_a = fresh_dir("det_a");
    const std::string dir_b = fresh_dir("det_b");
    save_dataset(dir_a, generate_dataset(g, 77, 0.05));
    save_dataset(dir_b, generate_dataset(g, 77, 0.05));
    for (const char* f : {"manifest.cfg", "train.bin", "test.bin"}) {
        CAPTURE(f);
        CHECK(read_text_file(dir_a + "/" + f) == read_text_file(dir_b + "/" + f));
    }
    // a different seed must differ
    const std::string dir_c = fresh_dir("det_c");
    save_dataset(dir_c, generate_dataset(g, 78, 0.05));
    CHECK(read_text_file(dir_a + "/train.bin") != read_text_file(dir_c + "/train.bin"));
}

TEST_CASE("dataset round-trips losslessly through disk") {
    SystemGraph g = ship_graph();
    Dataset ds = generate_dataset(g, 9, 0.10);
    const std::string dir = fresh_dir("roundtrip");
    save_dataset(dir, ds);
    Dataset back = load_dataset(dir);

    CHECK(back.manifest.topology_hash == ds.manifest.topology_hash);
    CHECK(back.manifest.seed == ds.manifest.seed);
    CHECK(back.manifest.noise_level == ds.manifest.noise_level);
    CHECK(back.manifest.train_indices == ds.manifest.train_indices);
    CHECK(back.manifest.test_indices == ds.manifest.test_indices);
    CHECK(back.manifest.stats.mean == ds.manifest.stats.mean);
    CHECK(back.manifest.stats.std == ds.manifest.stats.std);

    REQUIRE(back.train.size() == ds.train.size());
    REQUIRE(back.test.size() == ds.test.size());
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(back.train[i].features == ds.train[i].features);
        CHECK(back.train[i].label == ds.train[i].label);
        CHECK(back.train[i].meta.fault_positions == ds.train[i].meta.fault_positions);
        CHECK(back.train[i].meta.onset_times == ds.train[i].meta.onset_times);
        CHECK(back.train[i].meta.load_scales == ds.train[i].meta.load_scales);
        CHECK(back.train[i].meta.seed == ds.train[i].meta.seed);
    }
}

TEST_CASE("normalization statistics come from the training split only") {
    SystemGraph g = ship_graph();
    Dataset ds = generate_dataset(g, 5, 0.0);

    NormStats train_only = NormStats::from_samples(ds.train);
    CHECK(ds.manifest.stats.mean == train_only.mean);
    CHECK(ds.manifest.stats.std == train_only.std);

    std::vector<TimeSeriesSample> everything = ds.train;
    everything.insert(everything.end(), ds.test.begin(), ds.test.end());
    NormStats full = NormStats::from_samples(everything);
    double diff = 0.0;
    for (std::size_t n = 0; n < full.mean.size(); ++n)
        diff = std::max(diff, std::fabs(full.mean[n] - train_only.mean[n]));
    CHECK(diff > 0.0);  // full-data stats must not silently replace them
}

TEST_CASE("noisy datasets record and apply their noise level") {
    SystemGraph g = ship_graph();
    Dataset clean = generate_dataset(g, 21, 0.0);
    Dataset noisy = generate_dataset(g, 21, 0.05);
    CHECK(noisy.manifest.noise_level == 0.05);
    CHECK(noisy.train[0].meta.noise_level == 0.05);
    // identical scenarios, perturbed measurements
    CHECK(noisy.train[0].meta.load_scales == clean.train[0].meta.load_scales);
    CHECK(noisy.train[0].features != clean.train[0].features);
    CHECK_THROWS_AS(generate_dataset(g, 21, 0.07), std::invalid_argument);
}

TEST_CASE("batching") {
    SUBCASE("2700 samples at batch size 8 gives 338 batches, last of 4") {
        auto batches = make_batches(2700, 8, true, 42, 0);
        CHECK(batches.size() == 338u);
        CHECK(batches.back().size() == 4u);
        for (std::size_t b = 0; b + 1 < batches.size(); ++b) CHECK(batches[b].size() == 8u);
    }

    SUBCASE("shuffle off preserves order") {
        auto batches = make_batches(10, 4, false, 42, 3);
        CHECK(batches[0] == std::vector<int>{0, 1, 2, 3});
        CHECK(batches[1] == std::vector<int>{4, 5, 6, 7});
        CHECK(batches[2] == std::vector<int>{8, 9});
    }

    SUBCASE("one epoch visits every sample exactly once") {
        auto batches = make_batches(101, 8, true, 7, 5);
        std::set<int> seen;
        std::size_t total = 0;
        for (const auto& b : batches) {
            total += b.size();
            for (int i : b) CHECK(seen.insert(i).second);
        }
        CHECK(total == 101u);
        CHECK(seen.size() == 101u);
    }

    SUBCASE("shuffles are deterministic per (seed, epoch)") {
        CHECK(make_batches(64, 8, true, 9, 2) == make_batches(64, 8, true, 9, 2));
        CHECK(make_batches(64, 8, true, 9, 2) != make_batches(64, 8, true, 9, 3));
    }

    SUBCASE("degenerate inputs are errors") {
        CHECK_THROWS_AS(make_batches(0, 8, true, 1, 0), std::invalid_argument);
        CHECK_THROWS_AS(make_batches(10, 0, true, 1, 0), std::invalid_argument);
    }
}
