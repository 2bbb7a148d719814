#pragma once

#include <cstdint>

#include "cmsa/graph.hpp"

namespace cmsa {

/// Non-overlapping tiling of an H x W map by s x t windows.
struct WindowGrid {
    int s = 0;
    int t = 0;
    std::int64_t rows = 0;
    std::int64_t cols = 0;

    /// Throws ConfigError("window does not tile stage ...") unless s | H and t | W.
    static WindowGrid tile(std::int64_t h, std::int64_t w, int s, int t);
    std::int64_t count() const { return rows * cols; }
};

/// Multi-head attention inside co-indexed windows.
///
/// Q is [N,H,W,d]; K and V are [N,Hk,Wk,*] with Hk in {H, H/2} and Wk in
/// {W, W/2}. Query window (sq, tq) attends to the key window
/// (sq*Hk/H, tq*Wk/W) with the same grid index, so both grids must have the
/// same number of windows. Scores are scaled by 1/sqrt(d/heads).
template <typename T>
Var<T> mh_window_attention(Var<T> q, Var<T> k, Var<T> v, int sq, int tq, int heads);

}  // namespace cmsa
