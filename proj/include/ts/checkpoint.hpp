#pragma once

#include <map>
#include <string>

#include "ts/autodiff.hpp"

namespace ts::nn {

// Named parameter registry. Models register every trainable tensor here so
// training, checkpointing and gradient checks see one flat list.
template <class T>
struct ParamSet {
    std::vector<std::pair<std::string, VarT<T>>> items;

    VarT<T> add(const std::string& name, TensorT<T> init) {
        for (auto& [n, v] : items)
            if (n == name) throw ContractError("duplicate parameter name: " + name);
        auto p = parameter(std::move(init));
        items.emplace_back(name, p);
        return p;
    }

    std::vector<VarT<T>> vars() const {
        std::vector<VarT<T>> out;
        out.reserve(items.size());
        for (auto& [n, v] : items) out.push_back(v);
        return out;
    }

    VarT<T> find(const std::string& name) const {
        for (auto& [n, v] : items)
            if (n == name) return v;
        throw ContractError("unknown parameter: " + name);
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (auto& [k, v] : items) n += v->value.numel();
        return n;
    }

    void zero_grads() const {
        for (auto& [n, v] : items) v->zero_grad();
    }
};

// Checkpoint container: format "TSCK" v1, little endian.
//   magic "TSCK" | u16 version | u32 config_len | config JSON (UTF-8)
//   | u32 param_count | records { u16 name_len | name | u32 rank
//                                 | u64 dims[rank] | f32 data[numel] }
struct Checkpoint {
    std::string config_json;
    std::vector<std::pair<std::string, Tensor>> params;

    std::string serialize() const {
        std::string out;
        out += "TSCK";
        put_u16(out, 1);
        put_u32(out, static_cast<uint32_t>(config_json.size()));
        out += config_json;
        put_u32(out, static_cast<uint32_t>(params.size()));
        for (const auto& [name, t] : params) {
            put_u16(out, static_cast<uint16_t>(name.size()));
            out += name;
            put_u32(out, static_cast<uint32_t>(t.rank()));
            for (int64_t d : t.shape) put_u64(out, static_cast<uint64_t>(d));
            for (float v : t.data) put_f32(out, v);
        }
        return out;
    }

    static Checkpoint deserialize(const std::string& bytes) {
        ByteReader r(bytes);
        if (r.bytes(4) != "TSCK") throw DataError("not a TSCK checkpoint");
        uint16_t version = r.u16();
        if (version != 1) throw DataError("unsupported checkpoint version");
        Checkpoint ck;
        ck.config_json = r.bytes(r.u32());
        uint32_t count = r.u32();
        for (uint32_t i = 0; i < count; ++i) {
            std::string name = r.bytes(r.u16());
            uint32_t rank = r.u32();
            Shape shape(rank);
            for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int64_t>(r.u64());
            Tensor t(shape);
            for (auto& v : t.data) v = r.f32();
            ck.params.emplace_back(std::move(name), std::move(t));
        }
        if (r.remaining() != 0) throw DataError("trailing bytes in checkpoint");
        return ck;
    }

    static Checkpoint from_params(const ParamSet<float>& ps, std::string config_json) {
        Checkpoint ck;
        ck.config_json = std::move(config_json);
        for (auto& [name, var] : ps.items) ck.params.emplace_back(name, var->value);
        return ck;
    }

    // Loads values into an already-built parameter set; names and shapes must
    // match the registry exactly.
    void into_params(ParamSet<float>& ps) const {
        if (params.size() != ps.items.size())
            throw DataError("checkpoint parameter count mismatch");
        std::map<std::string, const Tensor*> by_name;
        for (auto& [n, t] : params) by_name[n] = &t;
        for (auto& [name, var] : ps.items) {
            auto it = by_name.find(name);
            if (it == by_name.end()) throw DataError("checkpoint missing parameter " + name);
            if (it->second->shape != var->value.shape)
                throw DataError("checkpoint shape mismatch for " + name);
            var->value = *it->second;
        }
    }
};

}  // namespace ts::nn
