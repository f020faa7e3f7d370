#pragma once

// Minimal SVG line plots for F0/energy contours (ground truth vs prediction).

#include <fstream>

#include "promode/metrics.hpp"

namespace promode {

namespace detail {

inline std::string polyline(const std::vector<double>& y,
                            const std::vector<uint8_t>* voiced, double x0, double y0,
                            double w, double h, double lo, double hi,
                            const char* color) {
    std::string out;
    std::string pts;
    auto flush = [&]() {
        if (!pts.empty()) {
            out += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
                   "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
            pts.clear();
        }
    };
    double span = hi > lo ? hi - lo : 1.0;
    for (size_t i = 0; i < y.size(); ++i) {
        if (voiced && !(*voiced)[i]) {
            flush(); // break the line at unvoiced gaps
            continue;
        }
        double px = x0 + (y.size() > 1 ? w * double(i) / double(y.size() - 1) : 0.0);
        double py = y0 + h - h * (y[i] - lo) / span;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", px, py);
        pts += buf;
    }
    flush();
    return out;
}

} // namespace detail

// Ground truth (blue) vs prediction (red) over the continuation tail; the
// dashed line marks the prompt/continuation split.
inline std::string contour_svg(const ContinuationEval& ce, const std::string& title) {
    const double W = 720, H = 260, ml = 50, mr = 15, mt = 30, mb = 25;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (size_t i = 0; i < ce.gt_f0.size(); ++i) {
        if (!ce.gt_vuv[i]) continue;
        lo = std::min({lo, ce.gt_f0[i], ce.pred_f0_aligned[i]});
        hi = std::max({hi, ce.gt_f0[i], ce.pred_f0_aligned[i]});
    }
    if (!std::isfinite(lo)) { lo = 0; hi = 1; }
    double pad = 0.05 * (hi - lo + 1.0);
    lo -= pad;
    hi += pad;
    std::string s;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" "
                  "height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                  W, H, W, H);
    s += buf;
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"10\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">" +
         title + "</text>\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"10\" y=\"%.0f\" font-family=\"sans-serif\" "
                  "font-size=\"11\" transform=\"rotate(-90 14 %.0f)\">F0 (Hz)</text>\n",
                  H / 2, H / 2);
    s += buf;
    double pw = W - ml - mr, ph = H - mt - mb;
    std::snprintf(buf, sizeof(buf),
                  "<rect x=\"%.0f\" y=\"%.0f\" width=\"%.0f\" height=\"%.0f\" "
                  "fill=\"none\" stroke=\"#ccc\"/>\n",
                  ml, mt, pw, ph);
    s += buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" "
                  "font-size=\"10\" fill=\"#444\">%.0f</text>\n",
                  5.0, mt + 10, hi);
    s += buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" "
                  "font-size=\"10\" fill=\"#444\">%.0f</text>\n",
                  5.0, mt + ph, lo);
    s += buf;
    s += detail::polyline(ce.gt_f0, &ce.gt_vuv, ml, mt, pw, ph, lo, hi, "#2060c0");
    s += detail::polyline(ce.pred_f0_aligned, &ce.gt_vuv, ml, mt, pw, ph, lo, hi,
                          "#c03030");
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" "
                  "font-size=\"11\" fill=\"#2060c0\">ground truth</text>\n",
                  W - 200, mt + 14);
    s += buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.0f\" y=\"%.0f\" font-family=\"sans-serif\" "
                  "font-size=\"11\" fill=\"#c03030\">prediction</text>\n",
                  W - 110, mt + 14);
    s += buf;
    s += "</svg>\n";
    return s;
}

inline void write_contour_svg(const ContinuationEval& ce, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw Error("plot: cannot open " + path);
    os << contour_svg(ce, ce.id + " (continuation F0)");
}

} // namespace promode
