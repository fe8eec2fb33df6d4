#pragma once

#include "visprior/optim.hpp"
#include "visprior/sha256.hpp"

namespace vp {

struct RngState {
    uint64_t seed = 0;
    uint64_t counter = 0; // step counter for counter-derived streams
};

// Versioned binary container: magic "VPCK", version, config snapshot, rng and
// step state, optional optimizer moments, named tensor table, raw f32 data,
// trailing sha256. load(save(x)) is byte-exact and the hash is verified on
// load.
struct CheckpointBundle {
    uint32_t version = 1;
    std::string config_text;
    ParameterStore weights;
    bool has_optimizer = false;
    AdamWConfig opt_hp;
    int64_t opt_step = 0;
    ParameterStore opt_m;
    ParameterStore opt_v;
    RngState rng;
    int64_t step = 0;
    std::string content_hash; // filled by save/load

    void save(const std::string& path);
    static CheckpointBundle load(const std::string& path);

    void set_optimizer(const OptimizerState& st) {
        has_optimizer = true;
        opt_hp = st.hp;
        opt_step = st.step;
        opt_m = st.m.clone();
        opt_v = st.v.clone();
    }
    OptimizerState optimizer() const {
        VP_CHECK(has_optimizer, "checkpoint: no optimizer state stored");
        OptimizerState st;
        st.hp = opt_hp;
        st.step = opt_step;
        st.m = opt_m.clone();
        st.v = opt_v.clone();
        return st;
    }
};

} // namespace vp
