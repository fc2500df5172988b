#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stainforge/denoiser.hpp"
#include "stainforge/image.hpp"

namespace stainforge {

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

namespace detail {

inline std::vector<double> gaussian_kernel_1d(int window, double sigma) {
    std::vector<double> k(window);
    double sum = 0.0;
    int half = window / 2;
    for (int i = 0; i < window; ++i) {
        double d = i - half;
        k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
}

// Separable valid-mode Gaussian filter of an H x W plane.
inline std::vector<double> gaussian_filter_valid(const std::vector<double>& img, int H, int W,
                                                 const std::vector<double>& k) {
    const int win = static_cast<int>(k.size());
    const int oh = H - win + 1, ow = W - win + 1;
    std::vector<double> rows(static_cast<size_t>(H) * ow);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0;
            for (int i = 0; i < win; ++i) acc += k[i] * img[y * W + x + i];
            rows[y * ow + x] = acc;
        }
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0;
            for (int i = 0; i < win; ++i) acc += k[i] * rows[(y + i) * ow + x];
            out[y * ow + x] = acc;
        }
    return out;
}

}  // namespace detail

// Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5, k1 0.01,
// k2 0.03), computed via separable filtering in double precision.
inline double ssim(const Image& a, const Image& b, double data_range,
                   const SsimParams& p = SsimParams{}) {
    if (!a.same_dims(b))
        throw ShapeError("ssim: image dims differ");
    if (a.channels != 1) throw ShapeError("ssim expects single-channel images");
    if (data_range <= 0) throw DataError("ssim: data_range must be positive");
    if (a.height < p.window || a.width < p.window)
        throw DataError("ssim: window larger than image");

    const int H = a.height, W = a.width;
    std::vector<double> xa(a.pix.begin(), a.pix.end());
    std::vector<double> xb(b.pix.begin(), b.pix.end());
    std::vector<double> xaa(xa.size()), xbb(xb.size()), xab(xa.size());
    for (size_t i = 0; i < xa.size(); ++i) {
        xaa[i] = xa[i] * xa[i];
        xbb[i] = xb[i] * xb[i];
        xab[i] = xa[i] * xb[i];
    }
    auto k = detail::gaussian_kernel_1d(p.window, p.sigma);
    auto mu_a = detail::gaussian_filter_valid(xa, H, W, k);
    auto mu_b = detail::gaussian_filter_valid(xb, H, W, k);
    auto m_aa = detail::gaussian_filter_valid(xaa, H, W, k);
    auto m_bb = detail::gaussian_filter_valid(xbb, H, W, k);
    auto m_ab = detail::gaussian_filter_valid(xab, H, W, k);

    const double c1 = (p.k1 * data_range) * (p.k1 * data_range);
    const double c2 = (p.k2 * data_range) * (p.k2 * data_range);
    double total = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
        double va = m_aa[i] - mu_a[i] * mu_a[i];
        double vb = m_bb[i] - mu_b[i] * mu_b[i];
        double cov = m_ab[i] - mu_a[i] * mu_b[i];
        double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
        double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
        total += num / den;
    }
    return total / static_cast<double>(mu_a.size());
}

// Sample correlation over flattened pixels; zero-variance inputs map to 0.
inline double pearson_r(const Image& a, const Image& b) {
    if (!a.same_dims(b)) throw ShapeError("pearson_r: image dims differ");
    const size_t n = a.pix.size();
    if (n < 2) throw DataError("pearson_r needs at least 2 pixels");
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += a.pix[i];
        mb += b.pix[i];
    }
    ma /= n;
    mb /= n;
    double saa = 0, sbb = 0, sab = 0;
    for (size_t i = 0; i < n; ++i) {
        double da = a.pix[i] - ma, db = b.pix[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// 10*log10(range^2 / MSE); identical images return +infinity.
inline double psnr(const Image& a, const Image& b, double data_range) {
    if (!a.same_dims(b)) throw ShapeError("psnr: image dims differ");
    if (data_range <= 0) throw DataError("psnr: data_range must be positive");
    double mse = 0;
    for (size_t i = 0; i < a.pix.size(); ++i) {
        double d = static_cast<double>(a.pix[i]) - b.pix[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.pix.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / mse);
}

struct MarkerMetrics {
    int count = 0;     // patches retained for this marker
    int excluded = 0;  // dropped by the empty-vs-SSIM rule
    double ssim = 0.0;
    double pearson = 0.0;
    double psnr = 0.0;
};

struct MetricReport {
    std::vector<std::string> markers;  // panel order
    std::map<std::string, MarkerMetrics> per_marker;
    double avg_ssim = 0.0;
    double avg_pearson = 0.0;
    double avg_psnr = 0.0;
};

// Per-marker metrics with the empty-patch exclusion rule: a patch whose GT
// marker has SSIM > threshold against an all-zeros image is dropped from
// that marker's statistics. Markers with no retained patches stay in the
// report with count 0 and are omitted from the averages.
inline MetricReport evaluate(
    const MarkerPanel& panel,
    const std::map<std::string, std::map<std::string, Image>>& predictions,  // id -> marker -> img
    const std::map<std::string, std::map<std::string, Image>>& ground_truth,
    double empty_ssim_threshold = 0.8, double data_range = 1.0) {
    // A predicted marker absent from GT is a hard error.
    for (const auto& [id, preds] : predictions) {
        auto git = ground_truth.find(id);
        if (git == ground_truth.end()) throw DataError("prediction id '" + id + "' missing from GT");
        for (const auto& [marker, img] : preds)
            if (git->second.find(marker) == git->second.end())
                throw DataError("marker '" + marker + "' predicted for id '" + id +
                                "' but absent from GT");
    }

    MetricReport report;
    report.markers = panel.names;
    for (const auto& name : panel.names) {
        MarkerMetrics mm;
        double s_ssim = 0, s_r = 0, s_psnr = 0;
        for (const auto& [id, preds] : predictions) {
            auto pit = preds.find(name);
            if (pit == preds.end()) continue;
            const Image& gt = ground_truth.at(id).at(name);
            Image empty = Image::zeros(gt.channels, gt.height, gt.width);
            if (ssim(gt, empty, data_range) > empty_ssim_threshold) {
                mm.excluded += 1;
                continue;
            }
            s_ssim += ssim(pit->second, gt, data_range);
            s_r += pearson_r(pit->second, gt);
            s_psnr += psnr(pit->second, gt, data_range);
            mm.count += 1;
        }
        if (mm.count > 0) {
            mm.ssim = s_ssim / mm.count;
            mm.pearson = s_r / mm.count;
            mm.psnr = s_psnr / mm.count;
        }
        report.per_marker[name] = mm;
    }

    int used = 0;
    for (const auto& name : panel.names) {
        const auto& mm = report.per_marker[name];
        if (mm.count == 0) continue;
        report.avg_ssim += mm.ssim;
        report.avg_pearson += mm.pearson;
        report.avg_psnr += mm.psnr;
        ++used;
    }
    if (used > 0) {
        report.avg_ssim /= used;
        report.avg_pearson /= used;
        report.avg_psnr /= used;
    }
    return report;
}

inline std::string report_table(const MetricReport& r) {
    auto fmt = [](double v) {
        char buf[32];
        if (std::isinf(v))
            std::snprintf(buf, sizeof(buf), "%8s", "inf");
        else
            std::snprintf(buf, sizeof(buf), "%8.3f", v);
        return std::string(buf);
    };
    std::string out = "Metric  ";
    for (const auto& m : r.markers) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%8s", m.substr(0, 8).c_str());
        out += buf;
    }
    out += "      Avg.\n";
    out += "SSIM    ";
    for (const auto& m : r.markers) out += fmt(r.per_marker.at(m).ssim);
    out += "  " + fmt(r.avg_ssim) + "\n";
    out += "R       ";
    for (const auto& m : r.markers) out += fmt(r.per_marker.at(m).pearson);
    out += "  " + fmt(r.avg_pearson) + "\n";
    out += "PSNR    ";
    for (const auto& m : r.markers) out += fmt(r.per_marker.at(m).psnr);
    out += "  " + fmt(r.avg_psnr) + "\n";
    out += "patches ";
    for (const auto& m : r.markers) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%8d", r.per_marker.at(m).count);
        out += buf;
    }
    out += "\n";
    return out;
}

inline nlohmann::json report_json(const MetricReport& r) {
    nlohmann::json j;
    j["markers"] = r.markers;
    for (const auto& m : r.markers) {
        const auto& mm = r.per_marker.at(m);
        j["per_marker"][m] = {{"count", mm.count},
                              {"excluded", mm.excluded},
                              {"ssim", mm.ssim},
                              {"pearson_r", mm.pearson},
                              {"psnr", std::isinf(mm.psnr) ? 1e30 : mm.psnr}};
    }
    j["avg"] = {{"ssim", r.avg_ssim},
                {"pearson_r", r.avg_pearson},
                {"psnr", std::isinf(r.avg_psnr) ? 1e30 : r.avg_psnr}};
    return j;
}

}  // namespace stainforge
