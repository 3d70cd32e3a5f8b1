#pragma once

#include <array>
#include <string>
#include <vector>

#include "ditlab/numkit/rng.hpp"
#include "ditlab/numkit/tensor.hpp"

namespace ditlab {

// Synthetic conditional dataset: latents are renderings of composable factor
// tuples (shape x quadrant x intensity) on a token grid, plus seeded jitter.
// Captions are short token sequences naming the factors in a few phrasings.

struct FactorTuple {
    int shape = 0;      // 0 square, 1 cross, 2 stripe
    int quadrant = 0;   // 0 TL, 1 TR, 2 BL, 3 BR
    int intensity = 0;  // 0 low, 1 high

    bool operator==(const FactorTuple& o) const {
        return shape == o.shape && quadrant == o.quadrant && intensity == o.intensity;
    }
};

struct SynthSpec {
    size_t grid = 8;
    size_t channels = 4;
    double jitter = 0.03;
    double low_intensity = 0.6;
    double high_intensity = 1.2;

    static constexpr int n_shapes = 3;
    static constexpr int n_quadrants = 4;
    static constexpr int n_intensities = 2;
    static constexpr int n_combos = n_shapes * n_quadrants * n_intensities;

    size_t tokens() const { return grid * grid; }
};

inline int combo_id(const FactorTuple& f) { return (f.shape * SynthSpec::n_quadrants + f.quadrant) * SynthSpec::n_intensities + f.intensity; }

inline FactorTuple combo_factors(int id) {
    FactorTuple f;
    f.intensity = id % SynthSpec::n_intensities;
    id /= SynthSpec::n_intensities;
    f.quadrant = id % SynthSpec::n_quadrants;
    f.shape = id / SynthSpec::n_quadrants;
    return f;
}

/// Clean rendering of a factor tuple (no jitter): the class template.
inline Tensor render_template(const SynthSpec& spec, const FactorTuple& f) {
    size_t g = spec.grid, half = g / 2;
    Tensor out({g * g, spec.channels});
    double amp = f.intensity == 0 ? spec.low_intensity : spec.high_intensity;
    size_t r0 = (f.quadrant / 2) * half;
    size_t c0 = (f.quadrant % 2) * half;
    auto put = [&](size_t r, size_t c, size_t ch, double v) { out.at((r0 + r) * g + (c0 + c), ch) = v; };
    for (size_t r = 0; r < half; ++r) {
        for (size_t c = 0; c < half; ++c) {
            bool on = false;
            switch (f.shape) {
                case 0: on = (r == 0 || c == 0 || r == half - 1 || c == half - 1); break;  // border ring
                case 1: on = (r == half / 2 || r == half / 2 - 1 || c == half / 2 || c == half / 2 - 1); break;  // plus
                case 2: on = (c % 2 == 0); break;  // stripes
            }
            if (on) {
                put(r, c, 0, amp);
                put(r, c, 1, 0.5 * amp);
            }
        }
    }
    return out;
}

inline Tensor render(const SynthSpec& spec, const FactorTuple& f, Rng& rng) {
    Tensor t = render_template(spec, f);
    for (size_t i = 0; i < t.numel(); ++i) t.at(i) += spec.jitter * rng.normal();
    return t;
}

/// Rule-based classifier: the rendering rule inverted (nearest clean template).
inline FactorTuple classify(const SynthSpec& spec, const Tensor& latent) {
    double best = 0.0;
    int best_id = -1;
    for (int id = 0; id < SynthSpec::n_combos; ++id) {
        Tensor tpl = render_template(spec, combo_factors(id));
        double d2 = 0.0;
        for (size_t i = 0; i < tpl.numel(); ++i) {
            double diff = latent.at(i) - tpl.at(i);
            d2 += diff * diff;
        }
        if (best_id < 0 || d2 < best) {
            best = d2;
            best_id = id;
        }
    }
    return combo_factors(best_id);
}

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

// token ids: 0 pad, 1 "a", 2 "the", 3 "in", 4 "zone", 5 "picture", 6 "of",
// 7..9 shapes, 10..13 quadrants, 14..15 intensities
constexpr size_t synth_vocab_size = 16;

inline std::vector<std::vector<int>> caption_variants(const FactorTuple& f, size_t txt_len) {
    int shape_w = 7 + f.shape;
    int quad_w = 10 + f.quadrant;
    int int_w = 14 + f.intensity;
    std::vector<std::vector<int>> variants = {
        {shape_w, quad_w, int_w},
        {1, int_w, shape_w, 3, quad_w, 4},
        {2, 5, 6, 1, int_w, shape_w, 3, quad_w},
    };
    for (auto& v : variants) v.resize(txt_len, 0);
    return variants;
}

struct SynthSample {
    Tensor latent;                          // [tokens x channels]
    int prompt_id = 0;                      // combo id
    std::vector<std::vector<int>> captions; // several phrasings, fixed length
};

struct SynthDataset {
    SynthSpec spec;
    size_t txt_len = 8;
    std::vector<SynthSample> samples;
};

/// Round-robin over combos (every combination appears when n >= n_combos),
/// per-item derived rng streams so generation order never matters.
inline SynthDataset make_dataset(const SynthSpec& spec, size_t n, uint64_t seed, size_t txt_len = 8) {
    if (n < 1) throw ShapeError("make_dataset: n must be >= 1");
    SynthDataset ds;
    ds.spec = spec;
    ds.txt_len = txt_len;
    ds.samples.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        int id = static_cast<int>(i % SynthSpec::n_combos);
        Rng item_rng = Rng::derive(seed, i);
        SynthSample s;
        s.prompt_id = id;
        s.latent = render(spec, combo_factors(id), item_rng);
        s.captions = caption_variants(combo_factors(id), txt_len);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace ditlab
