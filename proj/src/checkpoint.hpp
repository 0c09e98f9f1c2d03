#ifndef DV_CHECKPOINT_HPP
#define DV_CHECKPOINT_HPP

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "params.hpp"
#include "tensor.hpp"

// Checkpoint container and its on-disk format:
//   magic "CVXK1", version u32, tensor count u32, then per tensor
//   [name_len u16][name utf-8][dtype u8 (0 = f32)][rank u8][dims u64 each]
//   [raw f32 data], and a trailing CRC32 of everything before it.
// All integers little-endian. Non-tensor training state (step counters, RNG
// states, Adam moments) rides along as bit-cast f32 tensors, so one format
// covers exact resume.

namespace dv {

struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::map<std::string, size_t> index;

    void put(const std::string& name, Tensor t) {
        check(index.find(name) == index.end(), "checkpoint: duplicate tensor " + name);
        index[name] = tensors.size();
        tensors.emplace_back(name, std::move(t));
    }
    bool has(const std::string& name) const { return index.find(name) != index.end(); }
    const Tensor& at(const std::string& name) const {
        auto it = index.find(name);
        check(it != index.end(), "checkpoint: missing tensor " + name);
        return tensors[it->second].second;
    }
};

namespace detail {

inline void put_bytes(std::string& buf, const void* p, size_t n) {
    buf.append(static_cast<const char*>(p), n);
}
template <class T>
void put_le(std::string& buf, T v) {
    for (size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
template <class T>
T get_le(const std::string& buf, size_t& at) {
    check(at + sizeof(T) <= buf.size(), "checkpoint: truncated file");
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i)
        v |= static_cast<T>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    at += sizeof(T);
    return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    std::string buf;
    detail::put_bytes(buf, "CVXK1", 5);
    detail::put_le<uint32_t>(buf, 1);  // format version
    detail::put_le<uint32_t>(buf, static_cast<uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        check(name.size() <= 0xffff, "checkpoint: tensor name too long");
        detail::put_le<uint16_t>(buf, static_cast<uint16_t>(name.size()));
        detail::put_bytes(buf, name.data(), name.size());
        buf.push_back(0);  // dtype f32
        buf.push_back(static_cast<char>(t.rank()));
        for (int64_t d : t.shape) detail::put_le<uint64_t>(buf, static_cast<uint64_t>(d));
        for (int64_t i = 0; i < t.numel(); ++i) {
            uint32_t bits;
            std::memcpy(&bits, &t[i], 4);
            detail::put_le<uint32_t>(buf, bits);
        }
    }
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
    detail::put_le<uint32_t>(buf, crc);
    return buf;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf) {
    check(buf.size() >= 5 + 4 + 4 + 4, "checkpoint: truncated file");
    const size_t body = buf.size() - 4;
    size_t at = body;
    const uint32_t stored = detail::get_le<uint32_t>(buf, at);
    const uint32_t actual = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(body)));
    check(stored == actual, "checkpoint: crc mismatch");

    at = 0;
    check(buf.compare(0, 5, "CVXK1") == 0, "checkpoint: bad magic");
    at = 5;
    const uint32_t version = detail::get_le<uint32_t>(buf, at);
    check(version == 1, "checkpoint: unsupported version");
    const uint32_t count = detail::get_le<uint32_t>(buf, at);
    Checkpoint ck;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = detail::get_le<uint16_t>(buf, at);
        check(at + name_len <= body, "checkpoint: truncated file");
        std::string name = buf.substr(at, name_len);
        at += name_len;
        const uint8_t dtype = detail::get_le<uint8_t>(buf, at);
        check(dtype == 0, "checkpoint: unsupported dtype");
        const uint8_t rank = detail::get_le<uint8_t>(buf, at);
        std::vector<int64_t> shape(rank);
        for (auto& d : shape) d = static_cast<int64_t>(detail::get_le<uint64_t>(buf, at));
        Tensor t(shape);
        for (int64_t j = 0; j < t.numel(); ++j) {
            const uint32_t bits = detail::get_le<uint32_t>(buf, at);
            std::memcpy(&t[j], &bits, 4);
        }
        ck.put(name, std::move(t));
    }
    check(at == body, "checkpoint: trailing garbage");
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    const std::string buf = serialize_checkpoint(ck);
    FILE* f = std::fopen(path.c_str(), "wb");
    check(f != nullptr, "checkpoint: cannot open " + path + " for writing");
    const size_t n = std::fwrite(buf.data(), 1, buf.size(), f);
    std::fclose(f);
    check(n == buf.size(), "checkpoint: short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    check(f != nullptr, "checkpoint: cannot open " + path);
    std::string buf;
    char chunk[1 << 16];
    size_t n;
    while ((n = std::fread(chunk, 1, sizeof chunk, f)) > 0) buf.append(chunk, n);
    std::fclose(f);
    return deserialize_checkpoint(buf);
}

// Integer and RNG state travels as f32 tensors holding the raw bit pattern,
// one u64 per pair of floats. The values are never used arithmetically.
inline Tensor u64s_to_tensor(const std::vector<uint64_t>& vals) {
    Tensor t({static_cast<int64_t>(vals.size()), 2});
    for (size_t i = 0; i < vals.size(); ++i) {
        const uint32_t lo = static_cast<uint32_t>(vals[i]);
        const uint32_t hi = static_cast<uint32_t>(vals[i] >> 32);
        std::memcpy(&t[2 * (int64_t)i], &lo, 4);
        std::memcpy(&t[2 * (int64_t)i + 1], &hi, 4);
    }
    return t;
}

inline std::vector<uint64_t> tensor_to_u64s(const Tensor& t) {
    check(t.rank() == 2 && t.shape[1] == 2, "checkpoint: bad u64 tensor shape");
    std::vector<uint64_t> vals(static_cast<size_t>(t.shape[0]));
    for (size_t i = 0; i < vals.size(); ++i) {
        uint32_t lo, hi;
        std::memcpy(&lo, &t[2 * (int64_t)i], 4);
        std::memcpy(&hi, &t[2 * (int64_t)i + 1], 4);
        vals[i] = (static_cast<uint64_t>(hi) << 32) | lo;
    }
    return vals;
}

// Parameter values plus Adam moments under a prefix. '#' separates the slot
// suffix so it cannot collide with parameter names.
inline void params_to_checkpoint(Checkpoint& ck, const ParamStore& ps,
                                 const std::string& prefix) {
    for (const auto& e : ps.entries) {
        ck.put(prefix + e.name, e.value);
        Tensor m(e.value.shape), v(e.value.shape);
        for (int64_t i = 0; i < m.numel(); ++i) {
            m[i] = e.m[i];
            v[i] = e.v[i];
        }
        ck.put(prefix + e.name + "#m", std::move(m));
        ck.put(prefix + e.name + "#v", std::move(v));
    }
}

inline void params_from_checkpoint(const Checkpoint& ck, ParamStore& ps,
                                   const std::string& prefix) {
    for (auto& e : ps.entries) {
        const Tensor& val = ck.at(prefix + e.name);
        check(val.shape == e.value.shape, "checkpoint: shape mismatch for " + e.name);
        e.value = val;
        const Tensor& m = ck.at(prefix + e.name + "#m");
        const Tensor& v = ck.at(prefix + e.name + "#v");
        check(m.shape == e.value.shape && v.shape == e.value.shape,
              "checkpoint: moment shape mismatch for " + e.name);
        for (int64_t i = 0; i < m.numel(); ++i) {
            e.m[i] = m[i];
            e.v[i] = v[i];
        }
    }
}

}  // namespace dv

#endif  // DV_CHECKPOINT_HPP
