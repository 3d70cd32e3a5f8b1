#pragma once

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "ditlab/compress/trainer.hpp"
#include "ditlab/ptd/train.hpp"
#include "ditlab/textdistill/blockwise.hpp"
#include "ditlab/textdistill/warmup.hpp"

namespace ditlab {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void require_keys(const nlohmann::json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config " + where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) throw ConfigError("config " + where + ": unknown key '" + it.key() + "'");
    }
}
}  // namespace detail

// Stage-keyed run configuration. Every recipe value lives here; unknown keys
// are rejected so typos fail loudly. The raw resolved JSON is embedded into
// every report a run emits.
struct RunConfig {
    nlohmann::json raw;
    uint64_t seed = 1234;
    ModelConfig model;
    bool count_static_ln = false;

    // data
    SynthSpec spec;
    size_t train_n = 96, val_n = 24;

    // encoders
    TextEncoderConfig enc_teacher, enc_student;

    FlowTrainRecipe teacher;
    std::vector<size_t> step_candidates = {4, 8};

    CompressionPlan c1, c2, c3, c4;

    PtdConfig ptd;
    PtdTrainRecipe ptd_recipe;

    WarmupRecipe warmup;
    BlockwiseRecipe blockwise;

    static RunConfig parse(const nlohmann::json& j);
    static RunConfig load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("config: cannot open '" + path + "'");
        nlohmann::json j;
        try {
            f >> j;
        } catch (const std::exception& e) {
            throw ConfigError("config '" + path + "': " + e.what());
        }
        return parse(j);
    }
};

namespace detail {
inline TrainPhase parse_phase(const nlohmann::json& j, const std::string& where) {
    require_keys(j, where, {"teacher", "epochs", "batch", "lr", "cosine", "gamma"});
    TrainPhase p;
    p.teacher = j.value("teacher", std::string("stage"));
    if (p.teacher != "stage" && p.teacher != "root") throw ConfigError(where + ": teacher must be stage|root");
    p.epochs = j.value("epochs", p.epochs);
    p.batch = j.value("batch", p.batch);
    p.lr = j.value("lr", p.lr);
    p.cosine = j.value("cosine", p.cosine);
    p.gamma = j.value("gamma", p.gamma);
    return p;
}

inline std::vector<TrainPhase> parse_phases(const nlohmann::json& j, const std::string& where) {
    std::vector<TrainPhase> out;
    for (size_t i = 0; i < j.size(); ++i) out.push_back(parse_phase(j[i], where + ".phases[" + std::to_string(i) + "]"));
    return out;
}
}  // namespace detail

inline RunConfig RunConfig::parse(const nlohmann::json& j) {
    detail::require_keys(j, "(root)", {"seed", "model", "count_params", "data", "encoder", "steps",
                                       "teacher", "c1", "c2", "c3", "c4", "ptd", "textdistill"});
    RunConfig c;
    c.raw = j;
    c.seed = j.value("seed", c.seed);
    if (!j.contains("model")) throw ConfigError("config: missing 'model' section");
    c.model = j.at("model").get<ModelConfig>();

    if (j.contains("count_params")) {
        detail::require_keys(j.at("count_params"), "count_params", {"static_ln"});
        c.count_static_ln = j.at("count_params").value("static_ln", false);
    }

    c.spec.grid = c.model.img_grid;
    c.spec.channels = c.model.latent_channels;
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::require_keys(d, "data", {"train_n", "val_n", "jitter", "low_intensity", "high_intensity"});
        c.train_n = d.value("train_n", c.train_n);
        c.val_n = d.value("val_n", c.val_n);
        c.spec.jitter = d.value("jitter", c.spec.jitter);
        c.spec.low_intensity = d.value("low_intensity", c.spec.low_intensity);
        c.spec.high_intensity = d.value("high_intensity", c.spec.high_intensity);
    }

    c.enc_teacher.vocab = synth_vocab_size;
    c.enc_teacher.max_len = c.model.txt_len;
    c.enc_teacher.d_enc = c.model.txt_in_dim;
    c.enc_teacher.pooled_dim = c.model.pooled_dim;
    c.enc_student = c.enc_teacher;
    c.enc_student.adapter_out = c.model.txt_in_dim;
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        detail::require_keys(e, "encoder", {"student_d_enc", "heads", "n_layers", "ffn_mult"});
        c.enc_teacher.heads = e.value("heads", c.enc_teacher.heads);
        c.enc_teacher.n_layers = e.value("n_layers", c.enc_teacher.n_layers);
        c.enc_teacher.ffn_mult = e.value("ffn_mult", c.enc_teacher.ffn_mult);
        c.enc_student = c.enc_teacher;
        c.enc_student.d_enc = e.value("student_d_enc", c.model.txt_in_dim / 2);
        c.enc_student.adapter_out = c.model.txt_in_dim;
    }

    if (j.contains("steps")) {
        detail::require_keys(j.at("steps"), "steps", {"candidates"});
        c.step_candidates = j.at("steps").value("candidates", c.step_candidates);
    }

    if (j.contains("teacher")) {
        const auto& t = j.at("teacher");
        detail::require_keys(t, "teacher", {"epochs", "batch", "lr", "cosine", "pooled_dropout"});
        c.teacher.epochs = t.value("epochs", c.teacher.epochs);
        c.teacher.batch = t.value("batch", c.teacher.batch);
        c.teacher.lr = t.value("lr", c.teacher.lr);
        c.teacher.cosine = t.value("cosine", c.teacher.cosine);
        c.teacher.pooled_dropout = t.value("pooled_dropout", c.teacher.pooled_dropout);
    }

    auto common_plan = [&](CompressionPlan& p, const nlohmann::json& pj, const std::string& where) {
        p.step_candidates = c.step_candidates;
        if (pj.contains("phases")) p.phases = detail::parse_phases(pj.at("phases"), where);
    };
    c.c1.stage = "c1_head_prune";
    if (j.contains("c1")) {
        const auto& p = j.at("c1");
        detail::require_keys(p, "c1", {"target_H", "phases"});
        c.c1.target_H = p.value("target_H", c.model.H / 2);
        common_plan(c.c1, p, "c1");
    }
    c.c2.stage = "c2_dim_reduce";
    if (j.contains("c2")) {
        const auto& p = j.at("c2");
        detail::require_keys(p, "c2", {"target_dH", "phases"});
        c.c2.target_dH = p.value("target_dH", c.model.d_H / 2);
        common_plan(c.c2, p, "c2");
    }
    c.c3.stage = "c3_block_merge";
    if (j.contains("c3")) {
        const auto& p = j.at("c3");
        detail::require_keys(p, "c3", {"threshold_img", "threshold_txt", "merge_range",
                                       "drop_instead_of_merge", "sim_probe_items", "phases"});
        c.c3.threshold_img = p.value("threshold_img", c.c3.threshold_img);
        c.c3.threshold_txt = p.value("threshold_txt", c.c3.threshold_txt);
        if (p.contains("merge_range") && !p.at("merge_range").is_null()) {
            auto r = p.at("merge_range").get<std::vector<size_t>>();
            if (r.size() != 2) throw ConfigError("c3.merge_range: expected [begin, end)");
            c.c3.merge_range = {r[0], r[1]};
        }
        c.c3.drop_instead_of_merge = p.value("drop_instead_of_merge", false);
        c.c3.sim_probe_items = p.value("sim_probe_items", c.c3.sim_probe_items);
        common_plan(c.c3, p, "c3");
    }
    c.c4.stage = "c4_static_ln";
    if (j.contains("c4")) {
        const auto& p = j.at("c4");
        detail::require_keys(p, "c4", {"calib_samples", "phases"});
        c.c4.calib_samples = p.value("calib_samples", c.c4.calib_samples);
        common_plan(c.c4, p, "c4");
    }

    c.ptd.bd_end = c.model.n_ss;  // refreshed after C3 by the pipeline
    if (j.contains("ptd")) {
        const auto& p = j.at("ptd");
        detail::require_keys(p, "ptd", {"t_thresh", "bd_begin", "stage_epochs", "final_epochs", "batch", "lr"});
        c.ptd.t_thresh = p.value("t_thresh", c.ptd.t_thresh);
        c.ptd.bd_begin = p.value("bd_begin", c.ptd.bd_begin);
        c.ptd_recipe.stage_epochs = p.value("stage_epochs", c.ptd_recipe.stage_epochs);
        c.ptd_recipe.final_epochs = p.value("final_epochs", c.ptd_recipe.final_epochs);
        c.ptd_recipe.batch = p.value("batch", c.ptd_recipe.batch);
        c.ptd_recipe.lr = p.value("lr", c.ptd_recipe.lr);
    }

    if (j.contains("textdistill")) {
        const auto& p = j.at("textdistill");
        detail::require_keys(p, "textdistill",
                             {"warmup_epochs", "warmup_batch", "warmup_lr", "iters", "lr", "cutoff"});
        c.warmup.epochs = p.value("warmup_epochs", c.warmup.epochs);
        c.warmup.batch = p.value("warmup_batch", c.warmup.batch);
        c.warmup.lr = p.value("warmup_lr", c.warmup.lr);
        c.blockwise.iters = p.value("iters", c.blockwise.iters);
        c.blockwise.lr = p.value("lr", c.blockwise.lr);
        c.blockwise.cutoff = p.value("cutoff", c.blockwise.cutoff);
    }
    return c;
}

}  // namespace ditlab
