#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stainforge/denoiser.hpp"
#include "stainforge/image.hpp"
#include "stainforge/image_io.hpp"
#include "stainforge/metrics.hpp"

namespace stainforge {

// One paired training example: H&E-like source, one channel per marker,
// optional binary cell mask.
struct PatchRecord {
    std::string id;
    Image source;  // [3,H,W]
    std::vector<std::pair<std::string, Image>> markers;
    std::optional<Image> mask;
    std::string split = "train";

    const Image& marker(const std::string& name) const {
        for (const auto& [n, im] : markers)
            if (n == name) return im;
        throw DataError("record '" + id + "' has no marker '" + name + "'");
    }
};

// Rendering rules for the synthetic corpus: "nuclei" fills every cell
// nucleus, "attr:K" fills the cytoplasm of cells carrying attribute K, and
// "membrane" draws every cell outline. Each marker name maps to one rule.
struct SynthSpec {
    int image_size = 48;
    std::vector<std::pair<std::string, std::string>> markers;  // name -> rule
    int cells_min = 6;
    int cells_max = 14;
    double background_prob = 0.12;  // fraction of background-dominant patches
    uint64_t seed = 0;
};

struct FilterRules {
    double min_cell_coverage = 0.25;
    double empty_ssim_threshold = 0.8;
    bool zero_ratio_enabled = true;
};

// Fraction of exactly-zero pixels after quantization to the stored depth.
inline double zero_ratio(const Image& im, int bit_depth = 8) {
    if (im.channels != 1) throw ShapeError("zero_ratio expects a single-channel image");
    int64_t zeros = 0;
    for (float v : im.pix)
        if (quantize(v, bit_depth) == 0) ++zeros;
    return static_cast<double>(zeros) / static_cast<double>(im.pix.size());
}

namespace detail {

struct SynthCell {
    double cx, cy, rx, ry, cos_t, sin_t;
    double ncx, ncy, nrx, nry;  // nucleus ellipse
    int attr;
    double jitter;  // per-cell marker intensity factor
};

inline double ellipse_rho(double x, double y, double cx, double cy, double rx, double ry,
                          double ct, double st) {
    double dx = x - cx, dy = y - cy;
    double u = ct * dx + st * dy;
    double v = -st * dx + ct * dy;
    return std::sqrt((u / rx) * (u / rx) + (v / ry) * (v / ry));
}

// 2x2 supersampled membership of a predicate over the pixel square.
template <class Pred>
double coverage(int x, int y, Pred inside) {
    static const double off[2] = {0.25, 0.75};
    int hits = 0;
    for (double oy : off)
        for (double ox : off)
            if (inside(x + ox, y + oy)) ++hits;
    return hits / 4.0;
}

inline int parse_attr_rule(const std::string& rule) {
    if (rule.rfind("attr:", 0) != 0) return 0;
    int k = std::atoi(rule.c_str() + 5);
    if (k < 1 || k > 6) throw DataError("synthetic rule '" + rule + "' out of range (attr:1..6)");
    return k;
}

}  // namespace detail

// Procedural scenes of elliptical cells on a pale tissue background. The
// source rendering encodes everything the marker rules read off: nuclei are
// dark purple, cytoplasm tint encodes the cell attribute, and each cell has
// a darker membrane rim, so every marker is a learnable function of the
// source. A background-dominant slice of the corpus keeps the dark-pixel
// bias the real datasets show.
inline std::vector<PatchRecord> generate_synthetic(const SynthSpec& spec, int n) {
    if (n < 1) throw DataError("generate_synthetic needs n >= 1");
    if (spec.markers.empty()) throw DataError("generate_synthetic: no markers configured");
    std::vector<int> attrs_used;
    bool want_nuclei = false, want_membrane = false;
    for (size_t i = 0; i < spec.markers.size(); ++i) {
        const std::string& rule = spec.markers[i].second;
        for (size_t j = i + 1; j < spec.markers.size(); ++j)
            if (spec.markers[j].second == rule)
                throw DataError("synthetic markers must use distinct rules ('" + rule + "')");
        if (rule == "nuclei")
            want_nuclei = true;
        else if (rule == "membrane")
            want_membrane = true;
        else
            attrs_used.push_back(detail::parse_attr_rule(rule));
    }
    (void)want_nuclei;
    (void)want_membrane;
    if (attrs_used.empty()) attrs_used.push_back(1);

    static const double attr_palette[6][3] = {
        {0.82, 0.50, 0.68}, {0.88, 0.64, 0.48}, {0.66, 0.52, 0.78},
        {0.55, 0.68, 0.60}, {0.85, 0.75, 0.45}, {0.60, 0.60, 0.85},
    };

    const int S = spec.image_size;
    Rng base(spec.seed);
    std::vector<PatchRecord> out;
    out.reserve(n);
    for (int rec_i = 0; rec_i < n; ++rec_i) {
        Rng rng = base.derive(static_cast<uint64_t>(rec_i));
        PatchRecord rec;
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "synth_%06d", rec_i);
        rec.id = idbuf;

        bool bg_dominant = rng.uniform() < spec.background_prob;
        int n_cells = bg_dominant
                          ? 1 + static_cast<int>(rng.uniform_int(3))
                          : spec.cells_min +
                                static_cast<int>(rng.uniform_int(spec.cells_max - spec.cells_min + 1));

        std::vector<detail::SynthCell> cells;
        for (int c = 0; c < n_cells; ++c) {
            detail::SynthCell cell;
            cell.cx = rng.uniform(3.0, S - 3.0);
            cell.cy = rng.uniform(3.0, S - 3.0);
            double scale = S / 48.0;
            cell.rx = (bg_dominant ? rng.uniform(2.2, 3.5) : rng.uniform(3.2, 6.5)) * scale;
            cell.ry = cell.rx * rng.uniform(0.7, 1.3);
            double theta = rng.uniform(0.0, M_PI);
            cell.cos_t = std::cos(theta);
            cell.sin_t = std::sin(theta);
            cell.attr = attrs_used[c % attrs_used.size()];
            cell.nrx = cell.rx * rng.uniform(0.42, 0.55);
            cell.nry = cell.ry * rng.uniform(0.42, 0.55);
            cell.ncx = cell.cx + rng.uniform(-0.15, 0.15) * cell.rx;
            cell.ncy = cell.cy + rng.uniform(-0.15, 0.15) * cell.ry;
            cell.jitter = rng.uniform(0.85, 1.0);
            cells.push_back(cell);
        }

        // Smooth background tint variation.
        double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0);
        double px = rng.uniform(0.0, 2.0 * M_PI), py = rng.uniform(0.0, 2.0 * M_PI);

        rec.source = Image::zeros(3, S, S);
        rec.mask = Image::zeros(1, S, S);
        for (const auto& [name, rule] : spec.markers) rec.markers.emplace_back(name, Image::zeros(1, S, S));

        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                double wob = 0.015 * std::sin(2 * M_PI * fx * x / S + px) +
                             0.015 * std::sin(2 * M_PI * fy * y / S + py);
                double r = 0.92 + wob, g = 0.84 + wob, b = 0.90 + wob;
                double mask_cov = 0.0;

                for (const auto& cell : cells) {
                    auto rho_cell = [&](double sx, double sy) {
                        return detail::ellipse_rho(sx, sy, cell.cx, cell.cy, cell.rx, cell.ry,
                                                   cell.cos_t, cell.sin_t);
                    };
                    auto rho_nuc = [&](double sx, double sy) {
                        return detail::ellipse_rho(sx, sy, cell.ncx, cell.ncy, cell.nrx, cell.nry,
                                                   cell.cos_t, cell.sin_t);
                    };
                    double cyto = detail::coverage(x, y, [&](double sx, double sy) {
                        return rho_cell(sx, sy) <= 1.0;
                    });
                    if (cyto > 0) {
                        const double* tint = attr_palette[cell.attr - 1];
                        double a = 0.85 * cyto;
                        r = (1 - a) * r + a * tint[0];
                        g = (1 - a) * g + a * tint[1];
                        b = (1 - a) * b + a * tint[2];
                        mask_cov = std::max(mask_cov, cyto);
                    }
                    double ring = detail::coverage(x, y, [&](double sx, double sy) {
                        double rho = rho_cell(sx, sy);
                        return rho >= 0.78 && rho <= 1.02;
                    });
                    if (ring > 0) {
                        double a = 0.7 * ring;
                        r = (1 - a) * r + a * 0.52;
                        g = (1 - a) * g + a * 0.34;
                        b = (1 - a) * b + a * 0.50;
                    }
                    double nuc = detail::coverage(x, y, [&](double sx, double sy) {
                        return rho_nuc(sx, sy) <= 1.0;
                    });
                    if (nuc > 0) {
                        double a = 0.9 * nuc;
                        r = (1 - a) * r + a * 0.32;
                        g = (1 - a) * g + a * 0.18;
                        b = (1 - a) * b + a * 0.46;
                    }

                    for (size_t mi = 0; mi < spec.markers.size(); ++mi) {
                        const std::string& rule = spec.markers[mi].second;
                        float& px_out = rec.markers[mi].second.at(0, y, x);
                        if (rule == "nuclei")
                            px_out += static_cast<float>(0.85 * cell.jitter * nuc);
                        else if (rule == "membrane")
                            px_out += static_cast<float>(0.75 * cell.jitter * ring);
                        else if (cell.attr == detail::parse_attr_rule(rule))
                            px_out += static_cast<float>(0.80 * cell.jitter * cyto);
                    }
                }

                rec.source.at(0, y, x) = static_cast<float>(std::clamp(r, 0.0, 1.0));
                rec.source.at(1, y, x) = static_cast<float>(std::clamp(g, 0.0, 1.0));
                rec.source.at(2, y, x) = static_cast<float>(std::clamp(b, 0.0, 1.0));
                rec.mask->at(0, y, x) = mask_cov >= 0.5 ? 1.0f : 0.0f;
            }
        }
        for (auto& [name, im] : rec.markers)
            for (float& v : im.pix) v = std::min(v, 1.0f);
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Curation rules
// ---------------------------------------------------------------------------

inline double mask_coverage(const PatchRecord& rec) {
    const Image* mask = rec.mask ? &*rec.mask : nullptr;
    Image derived;
    if (!mask) {
        // Fallback: threshold the first marker channel (the nuclei analog).
        if (rec.markers.empty())
            throw DataError("record '" + rec.id + "' has no mask and no marker to derive one");
        derived = rec.markers.front().second;
        for (float& v : derived.pix) v = quantize(v, 8) > 0 ? 1.0f : 0.0f;
        mask = &derived;
    }
    double on = 0;
    for (float v : mask->pix) on += v > 0.5f ? 1.0 : 0.0;
    return on / static_cast<double>(mask->pix.size());
}

inline std::vector<PatchRecord> filter_by_coverage(const std::vector<PatchRecord>& records,
                                                   const FilterRules& rules) {
    std::vector<PatchRecord> out;
    for (const auto& rec : records)
        if (mask_coverage(rec) >= rules.min_cell_coverage) out.push_back(rec);
    return out;
}

struct EmptyFilterResult {
    std::vector<PatchRecord> retained;
    int excluded = 0;
};

// Drops records whose named marker looks like the empty array: SSIM against
// all-zeros strictly above the threshold.
inline EmptyFilterResult filter_empty_by_ssim(const std::vector<PatchRecord>& records,
                                              const std::string& marker, double threshold) {
    if (threshold < 0.0 || threshold > 1.0)
        throw DataError("empty-SSIM threshold must be in [0,1]");
    EmptyFilterResult res;
    for (const auto& rec : records) {
        const Image& im = rec.marker(marker);
        Image empty = Image::zeros(im.channels, im.height, im.width);
        if (ssim(im, empty, 1.0) > threshold)
            res.excluded += 1;
        else
            res.retained.push_back(rec);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Directory corpus: source/<id>.png, markers/<name>/<id>.png, masks/<id>.png
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<int> tile_positions(int dim, int patch, int stride) {
    std::vector<int> pos;
    for (int p = 0; p + patch <= dim; p += stride) pos.push_back(p);
    // Snap the last tile to the far edge so every pixel is covered.
    if (pos.empty() || pos.back() + patch < dim) pos.push_back(dim - patch);
    return pos;
}

inline Image crop(const Image& im, int y0, int x0, int size) {
    Image out = Image::zeros(im.channels, size, size);
    for (int c = 0; c < im.channels; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) out.at(c, y, x) = im.at(c, y0 + y, x0 + x);
    return out;
}

}  // namespace detail

// Loads paired full images and tiles them into patch records. `overlap` is
// the fractional overlap between neighboring tiles (0.5 => stride of half a
// patch); edge tiles snap to the far border.
inline std::vector<PatchRecord> ingest_directory(const std::string& root, const MarkerPanel& panel,
                                                 int patch_size, double overlap,
                                                 double min_center_distance = 0.0) {
    namespace fs = std::filesystem;
    if (patch_size < 1) throw DataError("patch size must be positive");
    if (overlap < 0.0 || overlap >= 1.0) throw DataError("overlap must be in [0,1)");
    fs::path src_dir = fs::path(root) / "source";
    if (!fs::is_directory(src_dir)) throw DataError("missing source/ directory under " + root);

    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(src_dir)) {
        auto ext = e.path().extension().string();
        if (ext == ".png" || ext == ".tif" || ext == ".tiff") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("no source images found under " + src_dir.string());

    const int stride = std::max(1, static_cast<int>(std::lround(patch_size * (1.0 - overlap))));
    std::vector<PatchRecord> out;
    for (const auto& file : files) {
        std::string id = file.stem().string();
        Image source = load_image(file.string()).image;
        if (source.channels != 3)
            throw DataError("source image '" + file.string() + "' must be RGB");
        if (source.height < patch_size || source.width < patch_size)
            throw DataError("image '" + id + "' smaller than the patch size");

        std::vector<std::pair<std::string, Image>> markers;
        for (const auto& name : panel.names) {
            fs::path mp;
            for (const char* ext : {".png", ".tif", ".tiff"}) {
                fs::path cand = fs::path(root) / "markers" / name / (id + ext);
                if (fs::exists(cand)) {
                    mp = cand;
                    break;
                }
            }
            if (mp.empty())
                throw DataError("missing marker file for id '" + id + "', marker '" + name + "'");
            Image m = load_image(mp.string()).image;
            if (m.channels != 1 || m.height != source.height || m.width != source.width)
                throw DataError("marker '" + name + "' for id '" + id +
                                "' does not match the source dimensions");
            markers.emplace_back(name, std::move(m));
        }
        std::optional<Image> mask;
        for (const char* ext : {".png", ".tif", ".tiff"}) {
            fs::path cand = fs::path(root) / "masks" / (id + ext);
            if (fs::exists(cand)) {
                mask = load_image(cand.string()).image;
                break;
            }
        }

        auto ys = detail::tile_positions(source.height, patch_size, stride);
        auto xs = detail::tile_positions(source.width, patch_size, stride);
        std::vector<std::pair<double, double>> kept_centers;
        for (int y0 : ys) {
            for (int x0 : xs) {
                if (min_center_distance > 0) {
                    double cy = y0 + patch_size / 2.0, cx = x0 + patch_size / 2.0;
                    bool close = false;
                    for (auto& [ky, kx] : kept_centers)
                        close = close || std::hypot(cy - ky, cx - kx) < min_center_distance;
                    if (close) continue;
                    kept_centers.emplace_back(cy, cx);
                }
                PatchRecord rec;
                char suffix[32];
                std::snprintf(suffix, sizeof(suffix), "_y%04d_x%04d", y0, x0);
                rec.id = id + suffix;
                rec.source = detail::crop(source, y0, x0, patch_size);
                for (const auto& [name, m] : markers)
                    rec.markers.emplace_back(name, detail::crop(m, y0, x0, patch_size));
                if (mask) rec.mask = detail::crop(*mask, y0, x0, patch_size);
                out.push_back(std::move(rec));
            }
        }
    }
    return out;
}

// Writes the standard corpus layout plus a line-delimited manifest. Sources
// are 8-bit RGB PNG; markers and masks are 16-bit grayscale PNG.
inline std::string write_corpus(const std::vector<PatchRecord>& records, const std::string& dir,
                                int marker_bit_depth = 16) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "source");
    std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
    if (!manifest) throw DataError("cannot write manifest under " + dir);
    for (const auto& rec : records) {
        save_png((fs::path(dir) / "source" / (rec.id + ".png")).string(), rec.source, 8);
        nlohmann::json entry;
        entry["id"] = rec.id;
        entry["split"] = rec.split;
        entry["height"] = rec.source.height;
        entry["width"] = rec.source.width;
        entry["marker_bit_depth"] = marker_bit_depth;
        for (const auto& [name, im] : rec.markers) {
            fs::create_directories(fs::path(dir) / "markers" / name);
            save_png((fs::path(dir) / "markers" / name / (rec.id + ".png")).string(), im,
                     marker_bit_depth);
            entry["zero_ratio"][name] = zero_ratio(im, marker_bit_depth);
        }
        if (rec.mask) {
            fs::create_directories(fs::path(dir) / "masks");
            save_png((fs::path(dir) / "masks" / (rec.id + ".png")).string(), *rec.mask, 16);
            entry["coverage"] = mask_coverage(rec);
        }
        manifest << entry.dump() << "\n";
    }
    return (fs::path(dir) / "manifest.jsonl").string();
}

// Loads a corpus previously written by write_corpus, 1:1 (no re-tiling).
inline std::vector<PatchRecord> read_corpus(const std::string& dir, const MarkerPanel& panel) {
    namespace fs = std::filesystem;
    std::ifstream manifest(fs::path(dir) / "manifest.jsonl");
    if (!manifest) throw DataError("missing manifest.jsonl under " + dir);
    std::vector<PatchRecord> out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        nlohmann::json entry = nlohmann::json::parse(line);
        PatchRecord rec;
        rec.id = entry.at("id").get<std::string>();
        rec.split = entry.value("split", "train");
        rec.source = load_image((fs::path(dir) / "source" / (rec.id + ".png")).string()).image;
        for (const auto& name : panel.names) {
            fs::path p = fs::path(dir) / "markers" / name / (rec.id + ".png");
            if (!fs::exists(p))
                throw DataError("missing marker file for id '" + rec.id + "', marker '" + name + "'");
            rec.markers.emplace_back(name, load_image(p.string()).image);
        }
        fs::path maskp = fs::path(dir) / "masks" / (rec.id + ".png");
        if (fs::exists(maskp)) rec.mask = load_image(maskp.string()).image;
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace stainforge
