/*
   Copyright 2026 The fmint-sde Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fmint {

class CsvError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A CSV table whose numeric columns are parsed to doubles. Columns whose
/// first data cell is not a number are kept as text.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<bool> numeric;
    std::vector<std::vector<double>> values;      // per column, empty when text
    std::vector<std::vector<std::string>> text;   // per column, empty when numeric
    std::size_t rows = 0;

    std::optional<std::size_t> column(const std::string& name) const {
        for (std::size_t c = 0; c < header.size(); ++c) {
            if (header[c] == name) return c;
        }
        return std::nullopt;
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::optional<double> parse_number(const std::string& s) {
    if (s.empty()) return std::nullopt;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size()) return std::nullopt;
    return v;
}

}  // namespace detail

inline CsvTable parse_csv(std::istream& is, const std::string& name = "<csv>") {
    CsvTable t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto cells = detail::split_csv_line(line);
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        if (cells.size() != t.header.size()) {
            throw CsvError(name + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                           " fields, found " + std::to_string(cells.size()));
        }
        if (t.rows == 0) {
            t.values.resize(cells.size());
            t.text.resize(cells.size());
            for (const auto& c : cells) t.numeric.push_back(detail::parse_number(c).has_value());
        }
        for (std::size_t c = 0; c < cells.size(); ++c) {
            if (t.numeric[c]) {
                const auto v = detail::parse_number(cells[c]);
                if (!v) {
                    throw CsvError(name + ":" + std::to_string(lineno) + ": column '" + t.header[c] + "' value '" +
                                   cells[c] + "' is not a number");
                }
                t.values[c].push_back(*v);
            } else {
                t.text[c].push_back(cells[c]);
            }
        }
        ++t.rows;
    }
    if (t.header.empty()) throw CsvError(name + ": empty CSV");
    if (t.rows == 0) throw CsvError(name + ": CSV has a header but no data rows");
    return t;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw CsvError("cannot open '" + path.string() + "'");
    return parse_csv(is, path.string());
}

enum class PlotKind { automatic, line, histogram };

struct PlotOptions {
    PlotKind kind = PlotKind::automatic;
    int width = 800;
    int height = 500;
    std::string title;
    std::string x_column;  // empty: first numeric column, or the row index
    bool log_x = false;
    bool log_y = false;
};

namespace detail {

inline std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

inline std::string fmt_px(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        switch (c) {
            case '&': o += "&amp;"; break;
            case '<': o += "&lt;"; break;
            case '>': o += "&gt;"; break;
            case '"': o += "&quot;"; break;
            default: o += c;
        }
    }
    return o;
}

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

struct Frame {
    double x0, x1, y0, y1;  // data range (already log-transformed when requested)
    double left = 70, right = 20, top = 40, bottom = 50;
    int w, h;
    double px(double x) const { return left + (x - x0) / (x1 - x0) * (w - left - right); }
    double py(double y) const { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); }
};

inline void widen(double& lo, double& hi) {
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
    }
}

inline void svg_open(std::ostream& os, const PlotOptions& o) {
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << o.width << "\" height=\"" << o.height
       << "\" viewBox=\"0 0 " << o.width << ' ' << o.height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (!o.title.empty()) {
        os << "<text x=\"" << o.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           << "font-size=\"15\">" << xml_escape(o.title) << "</text>\n";
    }
}

inline void svg_axes(std::ostream& os, const Frame& f, const std::string& xlabel, bool log_x, bool log_y) {
    const double bx = f.px(f.x0), ex = f.px(f.x1), by = f.py(f.y0), ey = f.py(f.y1);
    os << "<g stroke=\"black\" stroke-width=\"1\">\n";
    os << "<line x1=\"" << fmt_px(bx) << "\" y1=\"" << fmt_px(by) << "\" x2=\"" << fmt_px(ex) << "\" y2=\""
       << fmt_px(by) << "\"/>\n";
    os << "<line x1=\"" << fmt_px(bx) << "\" y1=\"" << fmt_px(by) << "\" x2=\"" << fmt_px(bx) << "\" y2=\""
       << fmt_px(ey) << "\"/>\n";
    os << "</g>\n<g font-family=\"sans-serif\" font-size=\"11\">\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0;
        const double yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
        os << "<text x=\"" << fmt_px(f.px(xv)) << "\" y=\"" << fmt_px(by + 16) << "\" text-anchor=\"middle\">"
           << fmt_num(log_x ? std::pow(10.0, xv) : xv) << "</text>\n";
        os << "<text x=\"" << fmt_px(bx - 6) << "\" y=\"" << fmt_px(f.py(yv) + 4) << "\" text-anchor=\"end\">"
           << fmt_num(log_y ? std::pow(10.0, yv) : yv) << "</text>\n";
    }
    if (!xlabel.empty()) {
        os << "<text x=\"" << fmt_px(0.5 * (bx + ex)) << "\" y=\"" << fmt_px(by + 36)
           << "\" text-anchor=\"middle\">" << xml_escape(xlabel) << "</text>\n";
    }
    os << "</g>\n";
}

inline bool looks_like_histogram(const CsvTable& t) {
    return t.column("bin_lo") && t.column("bin_hi") && t.column("count");
}

}  // namespace detail

/// One polyline per numeric series against the x column.
inline void render_line_svg(std::ostream& os, const CsvTable& t, const PlotOptions& o) {
    std::optional<std::size_t> xc;
    if (!o.x_column.empty()) {
        xc = t.column(o.x_column);
        if (!xc) throw CsvError("x column '" + o.x_column + "' not found");
        if (!t.numeric[*xc]) throw CsvError("x column '" + o.x_column + "' is not numeric");
    } else {
        for (std::size_t c = 0; c < t.header.size(); ++c) {
            if (t.numeric[c]) {
                xc = c;
                break;
            }
        }
        // A lone numeric column is a series over the row index.
        std::size_t n_numeric = static_cast<std::size_t>(std::count(t.numeric.begin(), t.numeric.end(), true));
        if (n_numeric < 2 || !t.numeric[0]) xc.reset();
    }
    std::vector<std::size_t> series;
    for (std::size_t c = 0; c < t.header.size(); ++c) {
        if (t.numeric[c] && (!xc || c != *xc)) series.push_back(c);
    }
    if (series.empty()) throw CsvError("CSV has no numeric series to plot");
    auto tx = [&](double v) { return o.log_x ? std::log10(v) : v; };
    auto ty = [&](double v) { return o.log_y ? std::log10(v) : v; };
    std::vector<double> xs(t.rows);
    for (std::size_t r = 0; r < t.rows; ++r) xs[r] = tx(xc ? t.values[*xc][r] : static_cast<double>(r));
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (std::size_t r = 0; r < t.rows; ++r) {
        if (!std::isfinite(xs[r])) continue;
        x0 = std::min(x0, xs[r]);
        x1 = std::max(x1, xs[r]);
        for (std::size_t c : series) {
            const double y = ty(t.values[c][r]);
            if (!std::isfinite(y)) continue;
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    }
    if (!std::isfinite(x0) || !std::isfinite(y0)) throw CsvError("CSV has no finite points to plot");
    detail::widen(x0, x1);
    detail::widen(y0, y1);
    detail::Frame f{x0, x1, y0, y1};
    f.w = o.width;
    f.h = o.height;
    detail::svg_open(os, o);
    detail::svg_axes(os, f, xc ? t.header[*xc] : "row", o.log_x, o.log_y);
    for (std::size_t i = 0; i < series.size(); ++i) {
        const std::size_t c = series[i];
        const char* colour = detail::kPalette[i % std::size(detail::kPalette)];
        os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
        bool first = true;
        for (std::size_t r = 0; r < t.rows; ++r) {
            const double y = ty(t.values[c][r]);
            if (!std::isfinite(xs[r]) || !std::isfinite(y)) continue;
            if (!first) os << ' ';
            os << detail::fmt_px(f.px(xs[r])) << ',' << detail::fmt_px(f.py(y));
            first = false;
        }
        os << "\"/>\n";
        os << "<text x=\"" << detail::fmt_px(o.width - f.right - 4) << "\" y=\"" << 40 + 14 * static_cast<int>(i)
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << colour << "\">"
           << detail::xml_escape(t.header[c]) << "</text>\n";
    }
    os << "</svg>\n";
}

/// Bar chart from bin_lo, bin_hi, count columns; any further numeric
/// columns after count are drawn as additional translucent bar sets.
inline void render_histogram_svg(std::ostream& os, const CsvTable& t, const PlotOptions& o) {
    const auto lo = t.column("bin_lo"), hi = t.column("bin_hi");
    if (!lo || !hi || !t.numeric[*lo] || !t.numeric[*hi]) {
        throw CsvError("histogram CSV needs numeric bin_lo and bin_hi columns");
    }
    std::vector<std::size_t> series;
    for (std::size_t c = 0; c < t.header.size(); ++c) {
        if (t.numeric[c] && c != *lo && c != *hi) series.push_back(c);
    }
    if (series.empty()) throw CsvError("histogram CSV has no count column");
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y1 = 0.0;
    for (std::size_t r = 0; r < t.rows; ++r) {
        x0 = std::min(x0, t.values[*lo][r]);
        x1 = std::max(x1, t.values[*hi][r]);
        for (std::size_t c : series) y1 = std::max(y1, t.values[c][r]);
    }
    double y0 = 0.0;
    detail::widen(x0, x1);
    detail::widen(y0, y1);
    detail::Frame f{x0, x1, y0, y1};
    f.w = o.width;
    f.h = o.height;
    PlotOptions linear = o;
    detail::svg_open(os, linear);
    detail::svg_axes(os, f, "error", false, false);
    const double opacity = series.size() > 1 ? 0.5 : 0.85;
    for (std::size_t i = 0; i < series.size(); ++i) {
        const std::size_t c = series[i];
        const char* colour = detail::kPalette[i % std::size(detail::kPalette)];
        os << "<g fill=\"" << colour << "\" fill-opacity=\"" << opacity << "\">\n";
        for (std::size_t r = 0; r < t.rows; ++r) {
            const double a = f.px(t.values[*lo][r]), b = f.px(t.values[*hi][r]);
            const double top = f.py(t.values[c][r]), base = f.py(0.0);
            os << "<rect x=\"" << detail::fmt_px(a) << "\" y=\"" << detail::fmt_px(top) << "\" width=\""
               << detail::fmt_px(std::max(0.0, b - a)) << "\" height=\"" << detail::fmt_px(base - top) << "\"/>\n";
        }
        os << "</g>\n";
        os << "<text x=\"" << detail::fmt_px(o.width - f.right - 4) << "\" y=\"" << 40 + 14 * static_cast<int>(i)
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << colour << "\">"
           << detail::xml_escape(t.header[c]) << "</text>\n";
    }
    os << "</svg>\n";
}

inline void render_svg(std::ostream& os, const CsvTable& t, const PlotOptions& o) {
    PlotKind k = o.kind;
    if (k == PlotKind::automatic) k = detail::looks_like_histogram(t) ? PlotKind::histogram : PlotKind::line;
    if (o.width < 100 || o.height < 100) throw std::invalid_argument("plot size must be at least 100x100");
    if (k == PlotKind::histogram) {
        render_histogram_svg(os, t, o);
    } else {
        render_line_svg(os, t, o);
    }
}

/// Reads `csv` and writes a standalone SVG to `svg`.
inline void plot_export(const std::filesystem::path& csv, const std::filesystem::path& svg, const PlotOptions& o) {
    const CsvTable t = read_csv(csv);
    std::ostringstream body;
    render_svg(body, t, o);
    std::ofstream os(svg, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + svg.string() + "' for writing");
    os << body.str();
}

}  // namespace fmint
