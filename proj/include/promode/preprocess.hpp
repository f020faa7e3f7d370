#pragma once

// Frame-level feature transforms applied before modeling: Savitzky-Golay
// smoothing, energy preparation (zero unvoiced, floor, log2, smooth),
// length regulation and phoneme-level pooling.

#include <optional>

#include "promode/record.hpp"

namespace promode {

namespace detail {

// Solves the small dense system A x = b in place (partial pivoting).
inline std::vector<double> solve_dense(std::vector<double> a, std::vector<double> b,
                                       size_t n) {
    for (size_t col = 0; col < n; ++col) {
        size_t piv = col;
        for (size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
        if (std::abs(a[piv * n + col]) < 1e-14)
            throw Error("savgol: singular design matrix");
        if (piv != col) {
            for (size_t c = 0; c < n; ++c) std::swap(a[col * n + c], a[piv * n + c]);
            std::swap(b[col], b[piv]);
        }
        for (size_t r = col + 1; r < n; ++r) {
            double f = a[r * n + col] / a[col * n + col];
            for (size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (size_t i = n; i-- > 0;) {
        double s = b[i];
        for (size_t c = i + 1; c < n; ++c) s -= a[i * n + c] * x[c];
        x[i] = s / a[i * n + i];
    }
    return x;
}

// Least-squares polynomial fit of `y` at positions j = 0..w-1, evaluated at
// position `at`. This is the whole Savitzky-Golay story for one window.
inline double polyfit_eval(const double* y, size_t w, int order, double at) {
    size_t n = size_t(order) + 1;
    std::vector<double> ata(n * n, 0.0), atb(n, 0.0);
    for (size_t j = 0; j < w; ++j) {
        double p = 1.0;
        std::vector<double> row(n);
        for (size_t k = 0; k < n; ++k) {
            row[k] = p;
            p *= double(j);
        }
        for (size_t r = 0; r < n; ++r) {
            for (size_t c = 0; c < n; ++c) ata[r * n + c] += row[r] * row[c];
            atb[r] += row[r] * y[j];
        }
    }
    auto coeffs = solve_dense(std::move(ata), std::move(atb), n);
    double v = 0.0, p = 1.0;
    for (size_t k = 0; k < n; ++k) {
        v += coeffs[k] * p;
        p *= at;
    }
    return v;
}

} // namespace detail

// Savitzky-Golay smoothing: per-window least-squares polynomial fit evaluated
// at the window center. Near the edges the first/last full window is fitted
// and evaluated at the off-center position, so polynomials of degree <= order
// are reproduced exactly everywhere. Sequences shorter than the window are
// returned unchanged.
inline std::vector<double> savgol_smooth(const std::vector<double>& x,
                                         size_t window, int order) {
    if (window % 2 == 0) throw Error("savgol: window must be odd");
    if (order < 0 || size_t(order) >= window)
        throw Error("savgol: order must be < window");
    size_t n = x.size();
    if (n < window) return x;
    size_t half = window / 2;
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) {
        size_t start = i < half ? 0 : (i + half >= n ? n - window : i - half);
        out[i] = detail::polyfit_eval(x.data() + start, window, order,
                                      double(i - start));
    }
    return out;
}

inline std::vector<float> savgol_smooth(const std::vector<float>& x,
                                        size_t window, int order) {
    std::vector<double> xd(x.begin(), x.end());
    auto yd = savgol_smooth(xd, window, order);
    return std::vector<float>(yd.begin(), yd.end());
}

struct PreprocessConfig {
    size_t savgol_window = 9;
    int savgol_order = 2;
    double energy_floor = 1e-5;
};

// Zero energy outside voiced regions, clamp to the floor, take log2, smooth.
inline std::vector<double> preprocess_energy(const std::vector<float>& energy_raw,
                                             const std::vector<uint8_t>& vuv,
                                             const PreprocessConfig& cfg = {}) {
    if (energy_raw.size() != vuv.size())
        throw Error("preprocess_energy: length mismatch");
    std::vector<double> e(energy_raw.size());
    for (size_t i = 0; i < e.size(); ++i) {
        if (energy_raw[i] < 0.0f)
            throw Error("preprocess_energy: negative raw energy at frame " +
                        std::to_string(i));
        double v = vuv[i] ? double(energy_raw[i]) : 0.0;
        e[i] = std::log2(std::max(v, cfg.energy_floor));
    }
    return savgol_smooth(e, cfg.savgol_window, cfg.savgol_order);
}

// Repeat each phoneme id for its duration in frames.
inline std::vector<uint32_t> length_regulate(const std::vector<uint32_t>& phoneme_ids,
                                             const std::vector<uint32_t>& durations) {
    if (phoneme_ids.size() != durations.size())
        throw Error("length_regulate: id/duration count mismatch");
    std::vector<uint32_t> out;
    for (size_t i = 0; i < phoneme_ids.size(); ++i) {
        if (durations[i] == 0) throw Error("length_regulate: zero duration");
        out.insert(out.end(), durations[i], phoneme_ids[i]);
    }
    return out;
}

// Per-phoneme means over frame values. With `vuv` given, each span averages
// only its voiced frames; an all-unvoiced span yields nullopt.
inline std::vector<std::optional<double>> phoneme_pool(
    const std::vector<double>& frame_values,
    const std::vector<uint32_t>& durations,
    const std::vector<uint8_t>* vuv = nullptr) {
    size_t total = 0;
    for (uint32_t d : durations) total += d;
    if (total != frame_values.size())
        throw Error("phoneme_pool: duration sum != value count");
    if (vuv && vuv->size() != frame_values.size())
        throw Error("phoneme_pool: vuv length mismatch");
    std::vector<std::optional<double>> out;
    size_t pos = 0;
    for (uint32_t d : durations) {
        double sum = 0.0;
        size_t cnt = 0;
        for (size_t i = pos; i < pos + d; ++i) {
            if (vuv && !(*vuv)[i]) continue;
            sum += frame_values[i];
            ++cnt;
        }
        if (cnt == 0)
            out.push_back(std::nullopt);
        else
            out.push_back(sum / double(cnt));
        pos += d;
    }
    return out;
}

} // namespace promode
