#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "clom/errors.hpp"
#include "clom/model.hpp"

namespace clom {

// Checkpoint file: magic "CLOM", format version u32, then a sequence of
// named tensor records (u32 name length, name bytes, u32 rows, u32 cols,
// rows*cols little-endian 64-bit reals) until end of file. Architecture
// metadata travels as 1-row tensors under meta/ names so the round trip is
// bit-exact with no side channel.

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool read_u32(std::istream& is, uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
        (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    return true;
}

inline void write_f64(std::ostream& os, double d) {
    uint64_t v = std::bit_cast<uint64_t>(d);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline bool read_f64(std::istream& is, double& d) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    d = std::bit_cast<double>(v);
    return true;
}

inline void write_record(std::ostream& os, const std::string& name,
                         const Tensor& t) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(t.rows()));
    write_u32(os, static_cast<uint32_t>(t.cols()));
    for (double v : t.data()) write_f64(os, v);
}

inline Tensor vec_record(const std::vector<double>& v) {
    return Tensor::from_vec(1, v.size(), v);
}

}  // namespace detail

inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const ModelState& st, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open for writing: " + path);
    os.write("CLOM", 4);
    detail::write_u32(os, kCheckpointVersion);

    const ModelConfig& c = st.cfg;
    std::vector<double> arch = {static_cast<double>(c.input_dim),
                                static_cast<double>(c.d),
                                static_cast<double>(c.d_pm)};
    for (size_t h : c.hidden) arch.push_back(static_cast<double>(h));
    detail::write_record(os, "meta/arch", detail::vec_record(arch));
    detail::write_record(
        os, "meta/flags",
        detail::vec_record({c.use_head ? 1.0 : 0.0, c.use_batchnorm ? 1.0 : 0.0,
                            c.renormalize_prototypes ? 1.0 : 0.0,
                            st.frozen ? 1.0 : 0.0}));
    detail::write_record(os, "meta/bn",
                         detail::vec_record({c.bn_eps, c.bn_momentum}));
    std::vector<double> ids(st.class_ids.begin(), st.class_ids.end());
    detail::write_record(os, "meta/class_ids", detail::vec_record(ids));
    detail::write_record(os, "meta/n_base",
                         detail::vec_record({static_cast<double>(st.n_base)}));

    auto bn_records = [&](const std::string& prefix, const BatchNormLayer& bn) {
        detail::write_record(os, prefix + "/gamma", bn.gamma);
        detail::write_record(os, prefix + "/beta", bn.beta);
        detail::write_record(os, prefix + "/running_mean", bn.running_mean);
        detail::write_record(os, prefix + "/running_var", bn.running_var);
    };
    for (size_t i = 0; i < st.blocks.size(); ++i) {
        std::string p = "backbone/" + std::to_string(i);
        detail::write_record(os, p + "/W", st.blocks[i].W);
        detail::write_record(os, p + "/b", st.blocks[i].b);
        bn_records(p + "/bn", st.block_bn[i]);
    }
    detail::write_record(os, "proj/W", st.proj.W);
    detail::write_record(os, "proj/b", st.proj.b);
    detail::write_record(os, "classifier/nm", st.w_nm);
    if (c.use_head) {
        detail::write_record(os, "head/W", st.head.W);
        detail::write_record(os, "head/b", st.head.b);
        bn_records("head/bn", st.head_bn);
        detail::write_record(os, "classifier/pm", st.w_pm);
    }
    if (!os) throw IoError("checkpoint: write failed: " + path);
}

inline ModelState load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "CLOM", 4) != 0)
        throw IoError("checkpoint: bad magic");
    uint32_t version;
    if (!detail::read_u32(is, version)) throw IoError("checkpoint: truncated header");
    if (version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version));

    std::map<std::string, Tensor> records;
    while (true) {
        uint32_t name_len;
        if (!detail::read_u32(is, name_len)) break;  // clean EOF
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len))
            throw IoError("checkpoint: truncated record name");
        uint32_t rows, cols;
        if (!detail::read_u32(is, rows) || !detail::read_u32(is, cols))
            throw IoError("checkpoint: truncated record header for " + name);
        Tensor t(rows, cols);
        for (size_t i = 0; i < t.size(); ++i)
            if (!detail::read_f64(is, t.data()[i]))
                throw IoError("checkpoint: truncated data for " + name);
        records.emplace(name, t);
    }

    auto get = [&](const std::string& name) -> Tensor {
        auto it = records.find(name);
        if (it == records.end())
            throw IoError("checkpoint: missing record " + name);
        return it->second;
    };

    Tensor arch = get("meta/arch");
    if (arch.size() < 3) throw IoError("checkpoint: malformed meta/arch");
    Tensor flags = get("meta/flags");
    if (flags.size() != 4) throw IoError("checkpoint: malformed meta/flags");
    Tensor bn_meta = get("meta/bn");

    ModelState st;
    st.cfg.input_dim = static_cast<size_t>(arch.data()[0]);
    st.cfg.d = static_cast<size_t>(arch.data()[1]);
    st.cfg.d_pm = static_cast<size_t>(arch.data()[2]);
    for (size_t i = 3; i < arch.size(); ++i)
        st.cfg.hidden.push_back(static_cast<size_t>(arch.data()[i]));
    st.cfg.use_head = flags.data()[0] != 0.0;
    st.cfg.use_batchnorm = flags.data()[1] != 0.0;
    st.cfg.renormalize_prototypes = flags.data()[2] != 0.0;
    st.frozen = flags.data()[3] != 0.0;
    st.cfg.bn_eps = bn_meta.data()[0];
    st.cfg.bn_momentum = bn_meta.data()[1];
    for (double v : get("meta/class_ids").data())
        st.class_ids.push_back(static_cast<int>(v));
    st.n_base = static_cast<size_t>(get("meta/n_base").data()[0]);

    bool rg = !st.frozen;
    auto load_bn = [&](const std::string& prefix) {
        BatchNormLayer bn;
        bn.gamma = get(prefix + "/gamma");
        bn.gamma.set_requires_grad(rg);
        bn.beta = get(prefix + "/beta");
        bn.beta.set_requires_grad(rg);
        bn.running_mean = get(prefix + "/running_mean");
        bn.running_var = get(prefix + "/running_var");
        return bn;
    };
    for (size_t i = 0; i < st.cfg.hidden.size(); ++i) {
        std::string p = "backbone/" + std::to_string(i);
        DenseBlock blk;
        blk.W = get(p + "/W");
        blk.W.set_requires_grad(rg);
        blk.b = get(p + "/b");
        blk.b.set_requires_grad(rg);
        st.blocks.push_back(blk);
        st.block_bn.push_back(load_bn(p + "/bn"));
    }
    st.proj.W = get("proj/W");
    st.proj.W.set_requires_grad(rg);
    st.proj.b = get("proj/b");
    st.proj.b.set_requires_grad(rg);
    st.w_nm = get("classifier/nm");
    st.w_nm.set_requires_grad(rg);
    if (st.cfg.use_head) {
        st.head.W = get("head/W");
        st.head.W.set_requires_grad(rg);
        st.head.b = get("head/b");
        st.head.b.set_requires_grad(rg);
        st.head_bn = load_bn("head/bn");
        st.w_pm = get("classifier/pm");
        st.w_pm.set_requires_grad(rg);
    }
    if (st.w_nm.cols() != st.class_ids.size())
        throw IoError("checkpoint: classifier column count mismatch");
    return st;
}

}  // namespace clom
