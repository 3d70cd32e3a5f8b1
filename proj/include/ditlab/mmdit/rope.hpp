#pragma once

#include <cmath>
#include <vector>

#include "ditlab/numkit/tensor.hpp"

namespace ditlab {

// 2-d axial rotary table. The head dim splits into two halves: pairs in the
// first half rotate by the row coordinate, pairs in the second half by the
// column coordinate. Text tokens sit in a reserved band one row past the
// full-resolution grid so they never collide with image positions.
struct Rope2D {
    size_t grid_side = 0;
    size_t txt_len = 0;
    size_t pairs = 0;          // d_H / 2
    double band_row = 0.0;     // text-band row coordinate
    Tensor img_angles;         // [grid*grid, pairs], row-major grid order
    Tensor txt_angles;         // [txt_len, pairs]

    /// Angle rows for a token sequence [txt ; img], img slots mapped through
    /// position ids into the grid (identity order when ids is null).
    Tensor sequence_angles(const std::vector<size_t>* img_position_ids = nullptr) const {
        size_t t_img = grid_side * grid_side;
        Tensor out({txt_len + t_img, pairs});
        for (size_t i = 0; i < txt_len; ++i)
            for (size_t p = 0; p < pairs; ++p) out.at(i, p) = txt_angles.at(i, p);
        for (size_t i = 0; i < t_img; ++i) {
            size_t pos = img_position_ids ? (*img_position_ids)[i] : i;
            for (size_t p = 0; p < pairs; ++p) out.at(txt_len + i, p) = img_angles.at(pos, p);
        }
        return out;
    }
};

/// Builds the rotary table for a grid of side `grid_side`. `coord_scale`
/// rescales integer grid coordinates (the coarse table uses the identity
/// scale on its own coordinates; tests cross-check against scaled fine ones).
inline Rope2D rope_table(size_t grid_side, size_t d_H, size_t txt_len, double band_row,
                         double coord_scale = 1.0, double base = 10000.0) {
    if (grid_side < 1) throw ShapeError("rope_table: grid_side must be >= 1");
    if (d_H % 4 != 0) throw ShapeError("rope_table: d_H must be divisible by 4");
    Rope2D r;
    r.grid_side = grid_side;
    r.txt_len = txt_len;
    r.pairs = d_H / 2;
    r.band_row = band_row;
    size_t per_axis = r.pairs / 2;

    std::vector<double> freq(per_axis);
    for (size_t k = 0; k < per_axis; ++k) {
        freq[k] = std::pow(base, -static_cast<double>(k) / static_cast<double>(per_axis));
    }

    auto fill_row = [&](Tensor& tab, size_t row, double y, double x) {
        for (size_t k = 0; k < per_axis; ++k) {
            tab.at(row, k) = y * freq[k];
            tab.at(row, per_axis + k) = x * freq[k];
        }
    };

    r.img_angles = Tensor({grid_side * grid_side, r.pairs});
    for (size_t i = 0; i < grid_side; ++i) {
        for (size_t j = 0; j < grid_side; ++j) {
            fill_row(r.img_angles, i * grid_side + j,
                     coord_scale * static_cast<double>(i), coord_scale * static_cast<double>(j));
        }
    }
    r.txt_angles = Tensor({txt_len, r.pairs});
    for (size_t i = 0; i < txt_len; ++i) {
        fill_row(r.txt_angles, i, band_row, static_cast<double>(i));
    }
    return r;
}

}  // namespace ditlab
