#include "visprior/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace vp {

namespace {

void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }
void put_f32(std::string& out, float v) { out.append(reinterpret_cast<const char*>(&v), 4); }

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    explicit Reader(const std::string& b) : buf(b) {}
    void need(size_t n) const {
        VP_CHECK(pos + n <= buf.size(), "checkpoint: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v;
        std::memcpy(&v, buf.data() + pos, 8);
        pos += 8;
        return v;
    }
    float f32() {
        need(4);
        float v;
        std::memcpy(&v, buf.data() + pos, 4);
        pos += 4;
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

void put_table(std::string& out, const ParameterStore& store) {
    put_u32(out, uint32_t(store.size()));
    for (const auto& name : store.names()) {
        const Tensor& t = store.get(name);
        VP_CHECK(name.size() < 65536, "checkpoint: parameter name too long");
        uint16_t len = uint16_t(name.size());
        out.append(reinterpret_cast<const char*>(&len), 2);
        out.append(name);
        put_u32(out, uint32_t(t.shape.size()));
        for (int d : t.shape) put_u32(out, uint32_t(d));
    }
}

ParameterStore read_table(Reader& r) {
    ParameterStore store;
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        r.need(2);
        uint16_t len;
        std::memcpy(&len, r.buf.data() + r.pos, 2);
        r.pos += 2;
        std::string name = r.bytes(len);
        const uint32_t rank = r.u32();
        VP_CHECK(rank <= 8, "checkpoint: implausible tensor rank");
        Shape shape(rank);
        for (uint32_t k = 0; k < rank; ++k) shape[k] = int(r.u32());
        store.add(name, Tensor::zeros(shape));
    }
    return store;
}

void put_data(std::string& out, const ParameterStore& store) {
    for (const auto& name : store.names()) {
        const Tensor& t = store.get(name);
        out.append(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(float));
    }
}

void read_data(Reader& r, ParameterStore& store) {
    for (const auto& name : store.names()) {
        Tensor& t = store.get(name);
        r.need(t.numel() * sizeof(float));
        std::memcpy(t.ptr(), r.buf.data() + r.pos, t.numel() * sizeof(float));
        r.pos += t.numel() * sizeof(float);
    }
}

} // namespace

void CheckpointBundle::save(const std::string& path) {
    std::string out;
    out.append("VPCK");
    put_u32(out, version);
    put_u64(out, uint64_t(config_text.size()));
    out.append(config_text);
    put_u64(out, uint64_t(step));
    put_u64(out, rng.seed);
    put_u64(out, rng.counter);
    out.push_back(has_optimizer ? 1 : 0);
    if (has_optimizer) {
        put_f32(out, opt_hp.lr);
        put_f32(out, opt_hp.weight_decay);
        put_f32(out, opt_hp.beta1);
        put_f32(out, opt_hp.beta2);
        put_f32(out, opt_hp.eps);
        put_u64(out, uint64_t(opt_step));
    }
    put_table(out, weights);
    put_data(out, weights);
    if (has_optimizer) {
        put_data(out, opt_m);
        put_data(out, opt_v);
    }
    content_hash = sha256_hex(out);
    out.append(content_hash);

    std::ofstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "checkpoint: cannot write " + path);
    f.write(out.data(), std::streamsize(out.size()));
}

CheckpointBundle CheckpointBundle::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "checkpoint: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();
    VP_CHECK(buf.size() > 64 + 4, "checkpoint: file too small: " + path);

    const std::string body = buf.substr(0, buf.size() - 64);
    const std::string stored_hash = buf.substr(buf.size() - 64);
    VP_CHECK(sha256_hex(body) == stored_hash, "checkpoint: content hash mismatch in " + path);

    Reader r(body);
    VP_CHECK(r.bytes(4) == "VPCK", "checkpoint: bad magic in " + path);
    CheckpointBundle b;
    b.version = r.u32();
    VP_CHECK(b.version == 1, "checkpoint: unsupported version");
    const uint64_t cfg_len = r.u64();
    b.config_text = r.bytes(cfg_len);
    b.step = int64_t(r.u64());
    b.rng.seed = r.u64();
    b.rng.counter = r.u64();
    b.has_optimizer = r.bytes(1)[0] != 0;
    if (b.has_optimizer) {
        b.opt_hp.lr = r.f32();
        b.opt_hp.weight_decay = r.f32();
        b.opt_hp.beta1 = r.f32();
        b.opt_hp.beta2 = r.f32();
        b.opt_hp.eps = r.f32();
        b.opt_step = int64_t(r.u64());
    }
    b.weights = read_table(r);
    read_data(r, b.weights);
    if (b.has_optimizer) {
        // moments align with the weight table by construction
        b.opt_m = b.weights.clone();
        b.opt_v = b.weights.clone();
        read_data(r, b.opt_m);
        read_data(r, b.opt_v);
    }
    VP_CHECK(r.pos == body.size(), "checkpoint: trailing bytes in " + path);
    b.content_hash = stored_hash;
    return b;
}

} // namespace vp
