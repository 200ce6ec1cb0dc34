#pragma once

#include <map>
#include <string>

#include "rgtn/io.hpp"
#include "rgtn/model.hpp"

namespace rgtn {

// Checkpoint container: architecture hyperparameters, the topology-config
// hash the model was trained against, free-form metadata (epoch counters,
// accuracies), and every tensor in canonical order. All reals are raw
// binary64, so save/load round-trips are bit-exact.

constexpr char kCheckpointMagic[9] = "RGTNCKP1";
constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelParameters params;
    std::uint64_t topology_hash = 0;
    std::map<std::string, std::string> meta;
};

inline void save_checkpoint(const std::string& path, ModelParameters& params,
                            std::uint64_t topology_hash,
                            const std::map<std::string, std::string>& meta = {}) {
    BinaryWriter w(path);
    w.magic(kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.str(to_string(params.kind));
    w.u64(topology_hash);
    const ModelConfig& c = params.cfg;
    w.i64(c.nodes);
    w.i64(c.window);
    w.i64(c.input_dim);
    w.i64(c.gru_hidden);
    w.i64(c.heads);
    w.i64(c.head_dim);
    w.i64(c.gtn_layers);
    w.i64(c.mlp_hidden);
    w.i64(c.gcn_hidden);
    w.i64(c.stats_dim);
    w.i64(c.classes);
    w.f64(c.dropout);
    w.str(to_string(c.neighborhood));
    w.u32(static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        w.str(k);
        w.str(v);
    }
    std::uint32_t count = 0;
    params.for_each_tensor([&](const std::string&, Tensor&) { ++count; });
    w.u32(count);
    params.for_each_tensor([&](const std::string& name, Tensor& t) { w.tensor(name, t); });
    w.close();
}

inline Checkpoint load_checkpoint(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic(kCheckpointMagic);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));
    Checkpoint ck;
    const ModelKind kind = model_kind_from(r.str());
    ck.topology_hash = r.u64();
    ModelConfig c;
    c.nodes = static_cast<int>(r.i64());
    c.window = static_cast<int>(r.i64());
    c.input_dim = static_cast<int>(r.i64());
    c.gru_hidden = static_cast<int>(r.i64());
    c.heads = static_cast<int>(r.i64());
    c.head_dim = static_cast<int>(r.i64());
    c.gtn_layers = static_cast<int>(r.i64());
    c.mlp_hidden = static_cast<int>(r.i64());
    c.gcn_hidden = static_cast<int>(r.i64());
    c.stats_dim = static_cast<int>(r.i64());
    c.classes = static_cast<int>(r.i64());
    c.dropout = r.f64();
    c.neighborhood = neighborhood_from(r.str());
    const std::uint32_t nmeta = r.u32();
    for (std::uint32_t i = 0; i < nmeta; ++i) {
        std::string k = r.str();
        ck.meta[k] = r.str();
    }
    ck.params = init_model(kind, c, 0);  // shapes only; data overwritten below
    const std::uint32_t count = r.u32();
    std::uint32_t expected = 0;
    ck.params.for_each_tensor([&](const std::string&, Tensor&) { ++expected; });
    if (count != expected)
        throw std::runtime_error(path + ": checkpoint holds " + std::to_string(count) +
                                 " tensors, architecture needs " + std::to_string(expected));
    ck.params.for_each_tensor([&](const std::string& name, Tensor& t) {
        auto [got_name, got] = r.tensor();
        if (got_name != name)
            throw std::runtime_error(path + ": tensor order mismatch: expected " + name +
                                     ", found " + got_name);
        if (!(got.shape() == t.shape()))
            throw std::runtime_error(path + ": tensor " + name + " has shape " +
                                     shape_str(got.shape()) + ", expected " +
                                     shape_str(t.shape()));
        t = std::move(got);
    });
    return ck;
}

}  // namespace rgtn
