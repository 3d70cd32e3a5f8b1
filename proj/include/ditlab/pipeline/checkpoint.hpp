#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditlab/mmdit/params.hpp"
#include "ditlab/flow/synth.hpp"
#include "ditlab/flow/text_encoder.hpp"
#include "ditlab/ptd/downup.hpp"

namespace ditlab {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Binary tensor container: a fixed magic, a JSON header carrying the config,
// provenance chain and tensor directory, then a raw little-endian payload
// guarded by an FNV-1a checksum. Round trips are bit-exact.
//
//   magic "DLABCKPT" | u32 version | u64 header_len | header JSON | payload

namespace detail {
constexpr char kMagic[8] = {'D', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

inline uint64_t fnv1a64(const std::vector<uint8_t>& bytes) {
    uint64_t h = 1469598103934665603ull;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

inline uint32_t get_u32(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}
}  // namespace detail

struct NamedTensor {
    std::string name;
    std::string dtype;  // "f64" | "i64"
    std::vector<size_t> shape;
    std::vector<double> f64;
    std::vector<int64_t> i64;

    size_t numel() const {
        size_t n = 1;
        for (size_t s : shape) n *= s;
        return n;
    }
};

struct Checkpoint {
    std::string kind;                     // "model" | "encoder" | "dataset"
    uint64_t seed = 0;
    std::vector<std::string> provenance;  // append-only stage chain
    nlohmann::json config = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    void add(const std::string& name, const Tensor& t) {
        NamedTensor nt;
        nt.name = name;
        nt.dtype = "f64";
        nt.shape = t.shape();
        nt.f64 = t.vec();
        tensors.push_back(std::move(nt));
    }

    void add_i64(const std::string& name, std::vector<size_t> shape, std::vector<int64_t> data) {
        NamedTensor nt;
        nt.name = name;
        nt.dtype = "i64";
        nt.shape = std::move(shape);
        nt.i64 = std::move(data);
        tensors.push_back(std::move(nt));
    }

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return &t;
        }
        return nullptr;
    }

    const NamedTensor& require(const std::string& name) const {
        const NamedTensor* t = find(name);
        if (!t) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
        return *t;
    }

    Tensor tensor(const std::string& name) const {
        const NamedTensor& nt = require(name);
        if (nt.dtype != "f64") throw CheckpointError("checkpoint: '" + name + "' is not f64");
        return Tensor(nt.shape, nt.f64);
    }

    std::vector<uint8_t> serialize() const {
        std::vector<uint8_t> payload;
        nlohmann::json dir = nlohmann::json::array();
        for (const auto& t : tensors) {
            size_t offset = payload.size();
            if (t.dtype == "f64") {
                for (double v : t.f64) {
                    uint64_t bits;
                    std::memcpy(&bits, &v, 8);
                    detail::put_u64(payload, bits);
                }
            } else {
                for (int64_t v : t.i64) detail::put_u64(payload, static_cast<uint64_t>(v));
            }
            dir.push_back({{"name", t.name},
                           {"dtype", t.dtype},
                           {"shape", t.shape},
                           {"offset", offset},
                           {"bytes", payload.size() - offset}});
        }
        char cs[32];
        std::snprintf(cs, sizeof cs, "%016llx", static_cast<unsigned long long>(detail::fnv1a64(payload)));
        nlohmann::json header = {{"format_version", detail::kVersion},
                                 {"kind", kind},
                                 {"seed", seed},
                                 {"provenance", provenance},
                                 {"config", config},
                                 {"tensors", dir},
                                 {"payload_bytes", payload.size()},
                                 {"payload_fnv1a64", std::string(cs)}};
        std::string hs = header.dump();

        std::vector<uint8_t> out;
        out.insert(out.end(), detail::kMagic, detail::kMagic + 8);
        detail::put_u32(out, detail::kVersion);
        detail::put_u64(out, hs.size());
        out.insert(out.end(), hs.begin(), hs.end());
        out.insert(out.end(), payload.begin(), payload.end());
        return out;
    }

    void save(const std::string& path) const {
        std::vector<uint8_t> bytes = serialize();
        std::ofstream f(path, std::ios::binary);
        if (!f) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw CheckpointError("checkpoint: short write to '" + path + "'");
    }

    static Checkpoint deserialize(const std::vector<uint8_t>& bytes) {
        if (bytes.size() < 20 || std::memcmp(bytes.data(), detail::kMagic, 8) != 0) {
            throw CheckpointError("checkpoint: bad magic");
        }
        uint32_t version = detail::get_u32(bytes.data() + 8);
        if (version != detail::kVersion) {
            throw CheckpointError("checkpoint: version mismatch (got " + std::to_string(version) + ")");
        }
        uint64_t hlen = detail::get_u64(bytes.data() + 12);
        if (20 + hlen > bytes.size()) throw CheckpointError("checkpoint: truncated header");
        nlohmann::json header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<long>(hlen));

        size_t payload_start = 20 + hlen;
        uint64_t payload_bytes = header.at("payload_bytes").get<uint64_t>();
        if (payload_start + payload_bytes != bytes.size()) throw CheckpointError("checkpoint: truncated payload");
        std::vector<uint8_t> payload(bytes.begin() + static_cast<long>(payload_start), bytes.end());
        char cs[32];
        std::snprintf(cs, sizeof cs, "%016llx", static_cast<unsigned long long>(detail::fnv1a64(payload)));
        if (header.at("payload_fnv1a64").get<std::string>() != cs) {
            throw CheckpointError("checkpoint: checksum failure");
        }

        Checkpoint c;
        c.kind = header.at("kind").get<std::string>();
        c.seed = header.at("seed").get<uint64_t>();
        c.provenance = header.at("provenance").get<std::vector<std::string>>();
        if (c.provenance.empty()) throw CheckpointError("checkpoint: empty provenance chain");
        c.config = header.at("config");
        for (const auto& e : header.at("tensors")) {
            NamedTensor nt;
            nt.name = e.at("name").get<std::string>();
            nt.dtype = e.at("dtype").get<std::string>();
            nt.shape = e.at("shape").get<std::vector<size_t>>();
            size_t offset = e.at("offset").get<size_t>();
            size_t nbytes = e.at("bytes").get<size_t>();
            if (offset + nbytes > payload.size() || nbytes != nt.numel() * 8) {
                throw CheckpointError("checkpoint: tensor '" + nt.name + "' out of bounds");
            }
            if (nt.dtype == "f64") {
                nt.f64.resize(nt.numel());
                for (size_t i = 0; i < nt.f64.size(); ++i) {
                    uint64_t bits = detail::get_u64(payload.data() + offset + 8 * i);
                    std::memcpy(&nt.f64[i], &bits, 8);
                }
            } else if (nt.dtype == "i64") {
                nt.i64.resize(nt.numel());
                for (size_t i = 0; i < nt.i64.size(); ++i) {
                    nt.i64[i] = static_cast<int64_t>(detail::get_u64(payload.data() + offset + 8 * i));
                }
            } else {
                throw CheckpointError("checkpoint: unknown dtype '" + nt.dtype + "'");
            }
            c.tensors.push_back(std::move(nt));
        }
        return c;
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw CheckpointError("checkpoint: cannot open '" + path + "'");
        std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return deserialize(bytes);
    }
};

// ---------------------------------------------------------------------------
// Model / encoder / dataset bundling
// ---------------------------------------------------------------------------

inline std::vector<std::string> with_stage(std::vector<std::string> prov, const std::string& stage) {
    prov.push_back(stage);
    return prov;
}

/// Verifies that `child` extends `parent` by exactly one stage.
inline void verify_provenance(const std::vector<std::string>& parent, const std::vector<std::string>& child) {
    if (child.size() != parent.size() + 1) throw CheckpointError("provenance: chain must grow by one stage");
    for (size_t i = 0; i < parent.size(); ++i) {
        if (parent[i] != child[i]) throw CheckpointError("provenance: chain prefix mutated");
    }
}

inline void add_model(Checkpoint& c, MMDiTParams& m, const std::string& prefix = "") {
    c.config["model"] = m.cfg;
    c.config["static_ln"] = m.uses_static_ln();
    for_each_param(m, [&](const std::string& name, Var& v) { c.add(prefix + name, v->value); });
    if (m.static_ln) {
        const StaticLnTable& tab = *m.static_ln;
        Tensor ts({tab.timesteps.size()});
        for (size_t i = 0; i < tab.timesteps.size(); ++i) ts.at(i) = tab.timesteps[i];
        c.add(prefix + "static_ln.timesteps", ts);
        for (size_t b = 0; b < tab.ds.size(); ++b)
            for (size_t s = 0; s < 12; ++s)
                c.add(prefix + "static_ln.ds." + std::to_string(b) + "." + std::to_string(s), tab.ds[b][s]);
        for (size_t b = 0; b < tab.ss.size(); ++b)
            for (size_t s = 0; s < 3; ++s)
                c.add(prefix + "static_ln.ss." + std::to_string(b) + "." + std::to_string(s), tab.ss[b][s]);
    }
}

inline MMDiTParams model_from(const Checkpoint& c, const std::string& prefix = "") {
    ModelConfig cfg = c.config.at("model").get<ModelConfig>();
    bool static_ln = c.config.value("static_ln", false);
    Rng rng(1);  // shapes only; every tensor is overwritten
    MMDiTParams m;
    m.cfg = cfg;
    // rebuild the skeleton with the right AdaLN presence
    MMDiTParams proto = init_mmdit(cfg, rng);
    m = std::move(proto);
    if (static_ln) {
        for (auto& b : m.ds) {
            b.adaln[0].reset();
            b.adaln[1].reset();
        }
        for (auto& b : m.ss) b.adaln.reset();
        StaticLnTable tab;
        Tensor ts = c.tensor(prefix + "static_ln.timesteps");
        for (size_t i = 0; i < ts.numel(); ++i) tab.timesteps.push_back(ts.at(i));
        tab.ds.resize(cfg.n_ds);
        tab.ss.resize(cfg.n_ss);
        for (size_t b = 0; b < cfg.n_ds; ++b)
            for (size_t s = 0; s < 12; ++s)
                tab.ds[b].push_back(c.tensor(prefix + "static_ln.ds." + std::to_string(b) + "." + std::to_string(s)));
        for (size_t b = 0; b < cfg.n_ss; ++b)
            for (size_t s = 0; s < 3; ++s)
                tab.ss[b].push_back(c.tensor(prefix + "static_ln.ss." + std::to_string(b) + "." + std::to_string(s)));
        m.static_ln = std::move(tab);
    }
    for_each_param(m, [&](const std::string& name, Var& v) {
        Tensor t = c.tensor(prefix + name);
        if (t.shape() != v->value.shape()) throw CheckpointError("checkpoint: shape mismatch for '" + name + "'");
        v->value = std::move(t);
    });
    return m;
}

inline void add_encoder(Checkpoint& c, ToyTextEncoder& e, const std::string& prefix = "enc.") {
    c.config["encoder"] = {{"vocab", e.cfg.vocab},       {"max_len", e.cfg.max_len},
                           {"d_enc", e.cfg.d_enc},       {"heads", e.cfg.heads},
                           {"n_layers", e.cfg.n_layers}, {"ffn_mult", e.cfg.ffn_mult},
                           {"pooled_dim", e.cfg.pooled_dim}, {"adapter_out", e.cfg.adapter_out}};
    for_each_param(e, [&](const std::string& name, Var& v) { c.add(prefix + name, v->value); });
}

inline ToyTextEncoder encoder_from(const Checkpoint& c, const std::string& prefix = "enc.") {
    const auto& j = c.config.at("encoder");
    TextEncoderConfig cfg;
    cfg.vocab = j.at("vocab").get<size_t>();
    cfg.max_len = j.at("max_len").get<size_t>();
    cfg.d_enc = j.at("d_enc").get<size_t>();
    cfg.heads = j.at("heads").get<size_t>();
    cfg.n_layers = j.at("n_layers").get<size_t>();
    cfg.ffn_mult = j.at("ffn_mult").get<size_t>();
    cfg.pooled_dim = j.at("pooled_dim").get<size_t>();
    cfg.adapter_out = j.at("adapter_out").get<size_t>();
    Rng rng(1);
    ToyTextEncoder e = init_text_encoder(cfg, rng);
    for_each_param(e, [&](const std::string& name, Var& v) {
        Tensor t = c.tensor(prefix + name);
        if (t.shape() != v->value.shape()) throw CheckpointError("checkpoint: shape mismatch for '" + name + "'");
        v->value = std::move(t);
    });
    return e;
}

inline void add_ptd(Checkpoint& c, PtdParams& p, const PtdConfig& cfg) {
    c.config["ptd"] = {{"t_thresh", cfg.t_thresh}, {"bd_begin", cfg.bd_begin}, {"bd_end", cfg.bd_end}};
    for_each_param(p, [&](const std::string& name, Var& v) { c.add("ptd." + name, v->value); });
}

inline bool has_ptd(const Checkpoint& c) { return c.config.contains("ptd"); }

inline std::pair<PtdParams, PtdConfig> ptd_from(const Checkpoint& c, MMDiTParams& m) {
    PtdConfig cfg;
    cfg.t_thresh = c.config.at("ptd").at("t_thresh").get<double>();
    cfg.bd_begin = c.config.at("ptd").at("bd_begin").get<size_t>();
    cfg.bd_end = c.config.at("ptd").at("bd_end").get<size_t>();
    Rng rng(1);
    PtdParams p = init_ptd(m.cfg, m.out_proj, rng);
    for_each_param(p, [&](const std::string& name, Var& v) {
        Tensor t = c.tensor("ptd." + name);
        if (t.shape() != v->value.shape()) throw CheckpointError("checkpoint: shape mismatch for 'ptd." + name + "'");
        v->value = std::move(t);
    });
    return {std::move(p), cfg};
}

inline Checkpoint dataset_to_checkpoint(const SynthDataset& ds, uint64_t seed) {
    Checkpoint c;
    c.kind = "dataset";
    c.seed = seed;
    c.provenance = {"gen-data"};
    c.config["spec"] = {{"grid", ds.spec.grid},
                        {"channels", ds.spec.channels},
                        {"jitter", ds.spec.jitter},
                        {"low_intensity", ds.spec.low_intensity},
                        {"high_intensity", ds.spec.high_intensity}};
    c.config["txt_len"] = ds.txt_len;
    c.config["n"] = ds.samples.size();
    size_t n = ds.samples.size();
    size_t tok = ds.spec.tokens(), ch = ds.spec.channels;
    Tensor latents({n, tok, ch});
    std::vector<int64_t> ids(n);
    size_t n_var = ds.samples.empty() ? 0 : ds.samples[0].captions.size();
    std::vector<int64_t> captions(n * n_var * ds.txt_len);
    for (size_t i = 0; i < n; ++i) {
        const auto& s = ds.samples[i];
        for (size_t j = 0; j < tok * ch; ++j) latents.at(i * tok * ch + j) = s.latent.at(j);
        ids[i] = s.prompt_id;
        for (size_t v = 0; v < n_var; ++v)
            for (size_t k = 0; k < ds.txt_len; ++k)
                captions[(i * n_var + v) * ds.txt_len + k] = s.captions[v][k];
    }
    c.add("latents", latents);
    c.add_i64("prompt_ids", {n}, std::move(ids));
    c.add_i64("captions", {n, n_var, ds.txt_len}, std::move(captions));
    return c;
}

inline SynthDataset dataset_from_checkpoint(const Checkpoint& c) {
    SynthDataset ds;
    const auto& sj = c.config.at("spec");
    ds.spec.grid = sj.at("grid").get<size_t>();
    ds.spec.channels = sj.at("channels").get<size_t>();
    ds.spec.jitter = sj.at("jitter").get<double>();
    ds.spec.low_intensity = sj.at("low_intensity").get<double>();
    ds.spec.high_intensity = sj.at("high_intensity").get<double>();
    ds.txt_len = c.config.at("txt_len").get<size_t>();
    size_t n = c.config.at("n").get<size_t>();
    Tensor latents = c.tensor("latents");
    const NamedTensor& ids = c.require("prompt_ids");
    const NamedTensor& caps = c.require("captions");
    size_t n_var = caps.shape[1];
    size_t tok = ds.spec.tokens(), ch = ds.spec.channels;
    for (size_t i = 0; i < n; ++i) {
        SynthSample s;
        s.latent = Tensor({tok, ch});
        for (size_t j = 0; j < tok * ch; ++j) s.latent.at(j) = latents.at(i * tok * ch + j);
        s.prompt_id = static_cast<int>(ids.i64[i]);
        for (size_t v = 0; v < n_var; ++v) {
            std::vector<int> cap(ds.txt_len);
            for (size_t k = 0; k < ds.txt_len; ++k)
                cap[k] = static_cast<int>(caps.i64[(i * n_var + v) * ds.txt_len + k]);
            s.captions.push_back(std::move(cap));
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace ditlab
