#pragma once

// Shared test helpers: finite-difference gradient oracle and independent
// reference implementations used to freeze expected values. Everything here
// is deliberately written straight-line, independent of the library's
// internal computation paths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ts/adam.hpp"
#include "ts/autodiff.hpp"
#include "ts/checkpoint.hpp"

namespace tsu {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1e-3, std::abs(a), std::abs(b)});
}

// Central finite differences against reverse-mode gradients for every listed
// parameter. make_loss() must rebuild the graph from current values and be
// deterministic. Returns the worst relative error over checked coordinates.
template <class T>
double max_grad_rel_err(const std::vector<ts::nn::VarT<T>>& params,
                        const std::function<ts::nn::VarT<T>()>& make_loss, double h = 1e-5,
                        size_t max_coords_per_tensor = SIZE_MAX, uint64_t pick_seed = 7) {
    using namespace ts::nn;
    for (auto& p : params) p->zero_grad();
    auto loss = make_loss();
    backward(loss);
    std::vector<TensorT<T>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params)
        analytic.push_back(p->has_grad() ? p->grad : TensorT<T>(p->value.shape, T(0)));

    ts::Rng pick(pick_seed);
    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        int64_t n = p->value.numel();
        std::vector<int64_t> coords;
        if (static_cast<size_t>(n) <= max_coords_per_tensor) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (size_t i = 0; i < max_coords_per_tensor; ++i)
                coords.push_back(static_cast<int64_t>(pick.below(static_cast<uint64_t>(n))));
        }
        for (int64_t ci : coords) {
            T saved = p->value.data[ci];
            p->value.data[ci] = saved + static_cast<T>(h);
            double fp = static_cast<double>(make_loss()->value.data[0]);
            p->value.data[ci] = saved - static_cast<T>(h);
            double fm = static_cast<double>(make_loss()->value.data[0]);
            p->value.data[ci] = saved;
            double fd = (fp - fm) / (2.0 * h);
            worst = std::max(worst, rel_err(static_cast<double>(analytic[pi].data[ci]), fd));
        }
    }
    return worst;
}

// Hand simulation of the Adam recurrences on a scalar, kept independent of
// the library implementation.
struct ScalarAdamSim {
    double lr, b1, b2, eps;
    double m = 0, v = 0;
    int step = 0;
    double update(double p, double g) {
        step += 1;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mhat = m / (1 - std::pow(b1, step));
        double vhat = v / (1 - std::pow(b2, step));
        return p - lr * mhat / (std::sqrt(vhat) + eps);
    }
};

// Brute-force run scan: segments as maximal face-present runs where gaps of
// fewer than `gap_tol` absent frames are bridged.
struct OracleSegment {
    int64_t start, end;
    std::vector<int64_t> kept;
};

inline std::vector<OracleSegment> oracle_segments(const std::vector<bool>& mask,
                                                  int gap_tol = 3) {
    std::vector<OracleSegment> out;
    size_t i = 0;
    while (i < mask.size()) {
        if (!mask[i]) {
            ++i;
            continue;
        }
        OracleSegment seg;
        seg.start = static_cast<int64_t>(i);
        seg.end = static_cast<int64_t>(i);
        seg.kept.push_back(static_cast<int64_t>(i));
        size_t j = i + 1;
        int gap = 0;
        while (j < mask.size()) {
            if (mask[j]) {
                gap = 0;
                seg.kept.push_back(static_cast<int64_t>(j));
                seg.end = static_cast<int64_t>(j);
                ++j;
            } else {
                ++gap;
                if (gap >= gap_tol) break;
                ++j;
            }
        }
        out.push_back(std::move(seg));
        i = j + 1;
        // skip to after the gap that closed this segment
        while (i < mask.size() && !mask[i]) ++i;
    }
    return out;
}

// Enumerates window start offsets 0, stride, 2*stride, ... within one
// segment's kept frames.
inline std::vector<std::vector<int64_t>> oracle_windows(const std::vector<int64_t>& kept,
                                                        int64_t l, int64_t stride) {
    std::vector<std::vector<int64_t>> out;
    for (int64_t s = 0; s + l <= static_cast<int64_t>(kept.size()); s += stride)
        out.emplace_back(kept.begin() + s, kept.begin() + s + l);
    return out;
}

// O(n^2) pairwise AUC with half credit for ties.
inline double oracle_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    double num = 0;
    int64_t pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                num += 1.0;
            else if (scores[i] == scores[j])
                num += 0.5;
        }
    }
    return num / static_cast<double>(pairs);
}

}  // namespace tsu
