#pragma once

#include <algorithm>
#include <cstdio>
#include <string>
#include <vector>

#include "rgtn/metrics.hpp"

namespace rgtn {

// Minimal static SVG output for training curves and confusion heatmaps.

namespace svg_detail {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string polyline(const std::vector<double>& xs, const std::vector<double>& ys,
                            const char* color) {
    std::string pts;
    for (std::size_t i = 0; i < xs.size(); ++i)
        pts += num(xs[i]) + "," + num(ys[i]) + " ";
    return "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
}

}  // namespace svg_detail

struct CurveSeries {
    std::string name;
    std::vector<double> values;  // one per epoch
};

// Line chart over epochs; series scaled to a shared [min, max] range.
inline std::string render_curves_svg(const std::vector<CurveSeries>& series,
                                     const std::string& title) {
    const double w = 640, h = 400, ml = 50, mr = 20, mt = 40, mb = 40;
    double lo = 1e300, hi = -1e300;
    std::size_t n = 0;
    for (const auto& s : series) {
        n = std::max(n, s.values.size());
        for (double v : s.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (n == 0 || hi <= lo) {
        lo = 0;
        hi = 1;
    }
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                      svg_detail::num(w) + "\" height=\"" + svg_detail::num(h) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + svg_detail::num(w / 2) + "\" y=\"20\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"14\">" + title + "</text>\n";
    out += "<line x1=\"" + svg_detail::num(ml) + "\" y1=\"" + svg_detail::num(h - mb) +
           "\" x2=\"" + svg_detail::num(w - mr) + "\" y2=\"" + svg_detail::num(h - mb) +
           "\" stroke=\"black\"/>\n";
    out += "<line x1=\"" + svg_detail::num(ml) + "\" y1=\"" + svg_detail::num(mt) +
           "\" x2=\"" + svg_detail::num(ml) + "\" y2=\"" + svg_detail::num(h - mb) +
           "\" stroke=\"black\"/>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        std::vector<double> xs, ys;
        for (std::size_t i = 0; i < series[s].values.size(); ++i) {
            xs.push_back(ml + (w - ml - mr) * (n > 1 ? double(i) / double(n - 1) : 0.5));
            ys.push_back(h - mb - (h - mt - mb) * (series[s].values[i] - lo) / (hi - lo));
        }
        out += svg_detail::polyline(xs, ys, colors[s % 5]);
        out += "<text x=\"" + svg_detail::num(w - mr - 150) + "\" y=\"" +
               svg_detail::num(mt + 16.0 * double(s)) + "\" font-family=\"sans-serif\" "
               "font-size=\"12\" fill=\"" + colors[s % 5] + "\">" + series[s].name +
               "</text>\n";
    }
    // axis extremes
    out += "<text x=\"" + svg_detail::num(ml - 6) + "\" y=\"" + svg_detail::num(h - mb) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
           svg_detail::num(lo) + "</text>\n";
    out += "<text x=\"" + svg_detail::num(ml - 6) + "\" y=\"" + svg_detail::num(mt + 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
           svg_detail::num(hi) + "</text>\n";
    out += "</svg>\n";
    return out;
}

// Row-normalized confusion heatmap with count annotations.
inline std::string render_confusion_svg(const ConfusionMatrix& cm, const std::string& title) {
    const double cell = 44, ml = 60, mt = 60;
    const double w = ml + cell * kNumClasses + 20, h = mt + cell * kNumClasses + 20;
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                      svg_detail::num(w) + "\" height=\"" + svg_detail::num(h) + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + svg_detail::num(w / 2) + "\" y=\"24\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"14\">" + title + "</text>\n";
    for (int i = 0; i < kNumClasses; ++i) {
        double row = 0;
        for (int j = 0; j < kNumClasses; ++j) row += double(cm.at(i, j));
        for (int j = 0; j < kNumClasses; ++j) {
            const double frac = row > 0 ? double(cm.at(i, j)) / row : 0.0;
            const int blue = 255 - int(200 * frac);
            char color[16];
            std::snprintf(color, sizeof color, "#%02x%02xff", blue, blue);
            const double x = ml + cell * j, y = mt + cell * i;
            out += "<rect x=\"" + svg_detail::num(x) + "\" y=\"" + svg_detail::num(y) +
                   "\" width=\"" + svg_detail::num(cell) + "\" height=\"" +
                   svg_detail::num(cell) + "\" fill=\"" + color +
                   "\" stroke=\"#cccccc\"/>\n";
            if (cm.at(i, j) != 0)
                out += "<text x=\"" + svg_detail::num(x + cell / 2) + "\" y=\"" +
                       svg_detail::num(y + cell / 2 + 4) + "\" text-anchor=\"middle\" "
                       "font-family=\"sans-serif\" font-size=\"11\">" +
                       std::to_string(cm.at(i, j)) + "</text>\n";
        }
    }
    for (int k = 0; k < kNumClasses; ++k) {
        out += "<text x=\"" + svg_detail::num(ml + cell * k + cell / 2) + "\" y=\"" +
               svg_detail::num(mt - 8) + "\" text-anchor=\"middle\" "
               "font-family=\"sans-serif\" font-size=\"11\">" + std::to_string(k) +
               "</text>\n";
        out += "<text x=\"" + svg_detail::num(ml - 10) + "\" y=\"" +
               svg_detail::num(mt + cell * k + cell / 2 + 4) + "\" text-anchor=\"end\" "
               "font-family=\"sans-serif\" font-size=\"11\">" + std::to_string(k) +
               "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

}  // namespace rgtn
