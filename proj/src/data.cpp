#include "tnseg/data.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <type_traits>

#include "tnseg/config.hpp"
#include "tnseg/random.hpp"

namespace tnseg {

namespace fs = std::filesystem;

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain parse_domain(const std::string& s) {
    if (s == "source") return Domain::source;
    if (s == "target") return Domain::target;
    throw std::invalid_argument("unknown domain '" + s + "'");
}

// ---------------------------------------------------------------------------------------------
// Synthetic domain pair

void SynthConfig::clear_shift() {
    shift_brightness = 0.0;
    shift_contrast = 1.0;
    shift_blur = 0.0;
    shift_texture = 0.0;
    shift_fov_radius = 0.0;
    shift_noise = 0.0;
}

void SynthConfig::validate() const {
    auto require = [](bool ok, const char* msg) {
        if (!ok) throw std::invalid_argument(std::string("synth config: ") + msg);
    };
    require(height >= 64 && width >= 64, "height and width must be at least 64");
    require(n_source >= 1 && n_target_train >= 1 && n_target_test >= 1, "image counts must be at least 1");
    require(width_min > 0.0 && width_max >= width_min, "need 0 < width_min <= width_max");
    require(taper >= 0.0 && curvature >= 0.0 && branch_prob >= 0.0 && branch_prob <= 1.0,
            "taper, curvature must be >= 0 and branch_prob in [0,1]");
    require(fov_radius > 0.0 && fov_radius + shift_fov_radius > 0.0 && fov_radius + shift_fov_radius <= 0.5,
            "FOV radius must lie in (0, 0.5]");
    require(shift_contrast > 0.0, "shift_contrast must be positive");
    require(texture >= 0.0 && texture + shift_texture >= 0.0 && noise >= 0.0 && noise + shift_noise >= 0.0 &&
                shift_blur >= 0.0,
            "texture, noise and blur must be non-negative");
}

namespace {

using SynthSetter = std::function<void(SynthConfig&, const std::string&, const std::string&)>;

template <class T>
SynthSetter set_field(T SynthConfig::*field) {
    return [field](SynthConfig& c, const std::string& k, const std::string& v) {
        if constexpr (std::is_same_v<T, double>) {
            c.*field = parse_real(k, v);
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            c.*field = parse_u64(k, v);
        } else {
            c.*field = parse_count(k, v);
        }
    };
}

const std::vector<std::pair<std::string, SynthSetter>>& synth_fields() {
    static const std::vector<std::pair<std::string, SynthSetter>> fields{
        {"height", set_field(&SynthConfig::height)},
        {"width", set_field(&SynthConfig::width)},
        {"n_source", set_field(&SynthConfig::n_source)},
        {"n_target_train", set_field(&SynthConfig::n_target_train)},
        {"n_target_test", set_field(&SynthConfig::n_target_test)},
        {"seed", set_field(&SynthConfig::seed)},
        {"trees", set_field(&SynthConfig::trees)},
        {"branch_prob", set_field(&SynthConfig::branch_prob)},
        {"width_max", set_field(&SynthConfig::width_max)},
        {"width_min", set_field(&SynthConfig::width_min)},
        {"taper", set_field(&SynthConfig::taper)},
        {"curvature", set_field(&SynthConfig::curvature)},
        {"fov_radius", set_field(&SynthConfig::fov_radius)},
        {"background", set_field(&SynthConfig::background)},
        {"vessel_contrast", set_field(&SynthConfig::vessel_contrast)},
        {"illumination", set_field(&SynthConfig::illumination)},
        {"texture", set_field(&SynthConfig::texture)},
        {"noise", set_field(&SynthConfig::noise)},
        {"shift_brightness", set_field(&SynthConfig::shift_brightness)},
        {"shift_contrast", set_field(&SynthConfig::shift_contrast)},
        {"shift_blur", set_field(&SynthConfig::shift_blur)},
        {"shift_texture", set_field(&SynthConfig::shift_texture)},
        {"shift_fov_radius", set_field(&SynthConfig::shift_fov_radius)},
        {"shift_noise", set_field(&SynthConfig::shift_noise)},
    };
    return fields;
}

}  // namespace

SynthConfig parse_synth_config(const std::string& text) {
    SynthConfig cfg;
    std::map<std::string, std::function<void(const std::string&)>> setters;
    for (const auto& [name, set] : synth_fields()) {
        setters[name] = [&cfg, name = name, set = set](const std::string& v) { set(cfg, name, v); };
    }
    apply_key_values(parse_key_values(text), setters);
    cfg.validate();
    return cfg;
}

std::map<std::string, std::string> synth_config_entries(const SynthConfig& c) {
    auto r = [](double v) { return format_real(v); };
    auto n = [](std::uint64_t v) { return std::to_string(v); };
    return {{"height", n(c.height)},
            {"width", n(c.width)},
            {"n_source", n(c.n_source)},
            {"n_target_train", n(c.n_target_train)},
            {"n_target_test", n(c.n_target_test)},
            {"seed", n(c.seed)},
            {"trees", n(c.trees)},
            {"branch_prob", r(c.branch_prob)},
            {"width_max", r(c.width_max)},
            {"width_min", r(c.width_min)},
            {"taper", r(c.taper)},
            {"curvature", r(c.curvature)},
            {"fov_radius", r(c.fov_radius)},
            {"background", r(c.background)},
            {"vessel_contrast", r(c.vessel_contrast)},
            {"illumination", r(c.illumination)},
            {"texture", r(c.texture)},
            {"noise", r(c.noise)},
            {"shift_brightness", r(c.shift_brightness)},
            {"shift_contrast", r(c.shift_contrast)},
            {"shift_blur", r(c.shift_blur)},
            {"shift_texture", r(c.shift_texture)},
            {"shift_fov_radius", r(c.shift_fov_radius)},
            {"shift_noise", r(c.shift_noise)}};
}

Tensor gaussian_blur(const Tensor& img, double sigma) {
    if (img.rank() != 2) throw ShapeError("gaussian_blur expects [H,W], got " + shape_str(img.shape()));
    if (!(sigma > 0.0)) return img;
    const std::size_t H = img.dim(0), W = img.dim(1);
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        total += k[static_cast<std::size_t>(i + radius)];
    }
    for (double& v : k) v /= total;
    // Reflect without repeating the edge sample.
    auto reflect = [](std::ptrdiff_t i, std::ptrdiff_t n) {
        while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
        return static_cast<std::size_t>(i);
    };
    Tensor tmp(img.shape()), out(img.shape());
    const auto h = static_cast<std::ptrdiff_t>(H), w = static_cast<std::ptrdiff_t>(W);
    for (std::ptrdiff_t y = 0; y < h; ++y)
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i)
                acc += k[static_cast<std::size_t>(i + radius)] * img[static_cast<std::size_t>(y) * W + reflect(x + i, w)];
            tmp[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] = acc;
        }
    for (std::ptrdiff_t y = 0; y < h; ++y)
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i)
                acc += k[static_cast<std::size_t>(i + radius)] * tmp[reflect(y + i, h) * W + static_cast<std::size_t>(x)];
            out[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] = acc;
        }
    return out;
}

namespace {

struct Walker {
    double x, y, heading, turn, width;
};

// Anti-aliased disc coverage, kept as a running maximum; shade is coverage scaled by `strength`.
void stamp(Tensor& cover, Tensor& shade, double cx, double cy, double radius, double strength) {
    const auto H = static_cast<std::ptrdiff_t>(cover.dim(0)), W = static_cast<std::ptrdiff_t>(cover.dim(1));
    const auto y0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::floor(cy - radius - 1)));
    const auto y1 = std::min<std::ptrdiff_t>(H - 1, static_cast<std::ptrdiff_t>(std::ceil(cy + radius + 1)));
    const auto x0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::floor(cx - radius - 1)));
    const auto x1 = std::min<std::ptrdiff_t>(W - 1, static_cast<std::ptrdiff_t>(std::ceil(cx + radius + 1)));
    for (std::ptrdiff_t y = y0; y <= y1; ++y)
        for (std::ptrdiff_t x = x0; x <= x1; ++x) {
            const double d = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy);
            const double c = std::clamp(radius + 0.5 - d, 0.0, 1.0);
            const auto i = static_cast<std::size_t>(y * W + x);
            cover[i] = std::max(cover[i], c);
            shade[i] = std::max(shade[i], c * strength);
        }
}

// Unit-variance smooth random field.
Tensor smooth_field(std::size_t H, std::size_t W, Rng& rng, double sigma) {
    Tensor f(Shape{H, W});
    for (double& v : f.data()) v = rng.normal();
    f = gaussian_blur(f, sigma);
    double mean = 0.0, sq = 0.0;
    for (double v : f.data()) mean += v;
    mean /= static_cast<double>(f.size());
    for (double v : f.data()) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / static_cast<double>(f.size()));
    for (double& v : f.data()) v = sd > 0.0 ? (v - mean) / sd : 0.0;
    return f;
}

}  // namespace

FundusImage synth_image(const SynthConfig& cfg, Domain domain, std::uint64_t stream, std::size_t index) {
    cfg.validate();
    const bool shifted = domain == Domain::target;
    Rng rng(derive_seed(cfg.seed, {stream, index}));
    const std::size_t H = cfg.height, W = cfg.width;
    const double side = static_cast<double>(std::min(H, W));
    const double R = (cfg.fov_radius + (shifted ? cfg.shift_fov_radius : 0.0)) * side;
    const double cy = 0.5 * static_cast<double>(H) + rng.uniform(-0.03, 0.03) * side;
    const double cx = 0.5 * static_cast<double>(W) + rng.uniform(-0.03, 0.03) * side;

    // Optic disc off-centre; trees radiate from it.
    const double disc_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ody = cy + 0.3 * R * std::sin(disc_angle);
    const double odx = cx + 0.3 * R * std::cos(disc_angle);

    Tensor cover(Shape{H, W}, 0.0);
    Tensor shade(Shape{H, W}, 0.0);
    std::vector<Walker> pending;
    for (std::size_t t = 0; t < cfg.trees; ++t) {
        const double heading = 2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(cfg.trees) +
                               rng.uniform(-0.4, 0.4);
        pending.push_back({odx + 0.05 * R * std::cos(heading), ody + 0.05 * R * std::sin(heading), heading, 0.0,
                           cfg.width_max * rng.uniform(0.75, 1.0)});
    }
    const std::size_t max_steps = 4 * (H + W);
    std::size_t segments = 0;
    while (!pending.empty() && segments < 64 * cfg.trees) {
        Walker w = pending.back();
        pending.pop_back();
        ++segments;
        for (std::size_t step = 0; step < max_steps && w.width >= cfg.width_min; ++step) {
            w.turn = 0.85 * w.turn + cfg.curvature * rng.normal();
            w.heading += w.turn;
            w.x += std::cos(w.heading);
            w.y += std::sin(w.heading);
            w.width -= cfg.taper;
            if (std::hypot(w.x - cx, w.y - cy) > R) break;
            // Thin vessels are fainter than wide ones.
            stamp(cover, shade, w.x, w.y, 0.5 * w.width, std::min(1.0, 0.45 + 0.3 * w.width));
            if (rng.uniform() < cfg.branch_prob) {
                const double side_sign = rng.coin() ? 1.0 : -1.0;
                pending.push_back({w.x, w.y, w.heading + side_sign * rng.uniform(0.4, 0.9), 0.0,
                                   w.width * rng.uniform(0.6, 0.8)});
                w.width *= 0.9;
            }
        }
    }

    const double texture_amp = cfg.texture + (shifted ? cfg.shift_texture : 0.0);
    const double noise_sd = cfg.noise + (shifted ? cfg.shift_noise : 0.0);
    const double contrast = shifted ? cfg.shift_contrast : 1.0;
    const double brightness = shifted ? cfg.shift_brightness : 0.0;
    const Tensor texture = smooth_field(H, W, rng, 0.04 * side);

    FundusImage img;
    img.domain = domain;
    img.pixels = Tensor(Shape{H, W}, 0.0);
    img.fov_mask = Tensor(Shape{H, W}, 0.0);
    Tensor label(Shape{H, W}, 0.0);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t i = y * W + x;
            const double rho = std::hypot(static_cast<double>(x) - cx, static_cast<double>(y) - cy) / R;
            if (rho > 1.0) continue;
            img.fov_mask[i] = 1.0;
            label[i] = cover[i] >= 0.5 ? 1.0 : 0.0;
            const double bg = cfg.background * (1.0 - cfg.illumination * rho * rho) + texture_amp * texture[i];
            const double v = bg - cfg.vessel_contrast * shade[i];
            img.pixels[i] = (v - cfg.background) * contrast + cfg.background + brightness;
        }
    if (shifted && cfg.shift_blur > 0.0) img.pixels = gaussian_blur(img.pixels, cfg.shift_blur);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const double v = img.fov_mask[i] > 0.0 ? img.pixels[i] + noise_sd * rng.normal() : 0.0;
        img.pixels[i] = std::round(std::clamp(v, 0.0, 255.0));
    }
    img.label = std::move(label);
    return img;
}

SynthDataset synth_domain_pair(const SynthConfig& cfg) {
    cfg.validate();
    SynthDataset ds;
    auto render = [&](std::vector<FundusImage>& out, Domain d, std::uint64_t stream, std::size_t n, const char* prefix) {
        for (std::size_t i = 0; i < n; ++i) {
            FundusImage img = synth_image(cfg, d, stream, i);
            char id[32];
            std::snprintf(id, sizeof id, "%s_%03zu", prefix, i);
            img.id = id;
            out.push_back(std::move(img));
        }
    };
    render(ds.source, Domain::source, 0, cfg.n_source, "src");
    render(ds.target_train, Domain::target, 1, cfg.n_target_train, "tgt_train");
    render(ds.target_test, Domain::target, 2, cfg.n_target_test, "tgt_test");
    return ds;
}

double vessel_fraction(const FundusImage& img) {
    if (!img.label) throw std::invalid_argument("vessel_fraction: image '" + img.id + "' has no label");
    double fov = 0.0, vessel = 0.0;
    for (std::size_t i = 0; i < img.fov_mask.size(); ++i) {
        if (img.fov_mask[i] > 0.0) {
            fov += 1.0;
            vessel += (*img.label)[i] > 0.0 ? 1.0 : 0.0;
        }
    }
    return fov > 0.0 ? vessel / fov : 0.0;
}

// ---------------------------------------------------------------------------------------------
// Preprocessing

std::vector<std::vector<double>> clahe_tile_luts(const Tensor& img, std::size_t grid, double clip_limit) {
    if (img.rank() != 2) throw ShapeError("clahe expects [H,W], got " + shape_str(img.shape()));
    const std::size_t H = img.dim(0), W = img.dim(1);
    if (grid == 0 || H < grid || W < grid) {
        throw ShapeError("clahe: image " + shape_str(img.shape()) + " smaller than a " + std::to_string(grid) + "x" +
                         std::to_string(grid) + " tile grid");
    }
    if (!(clip_limit > 0.0)) throw std::invalid_argument("clahe: clip limit must be positive");
    std::vector<std::vector<double>> luts(grid * grid, std::vector<double>(256));
    for (std::size_t ty = 0; ty < grid; ++ty) {
        const std::size_t y0 = ty * H / grid, y1 = (ty + 1) * H / grid;
        for (std::size_t tx = 0; tx < grid; ++tx) {
            const std::size_t x0 = tx * W / grid, x1 = (tx + 1) * W / grid;
            const std::size_t area = (y1 - y0) * (x1 - x0);
            std::array<std::size_t, 256> hist{};
            for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) {
                    const double v = std::clamp(std::round(img[y * W + x]), 0.0, 255.0);
                    ++hist[static_cast<std::size_t>(v)];
                }
            const auto limit = std::max<std::size_t>(
                1, static_cast<std::size_t>(clip_limit * static_cast<double>(area) / 256.0));
            std::size_t excess = 0;
            for (auto& h : hist) {
                if (h > limit) {
                    excess += h - limit;
                    h = limit;
                }
            }
            const std::size_t batch = excess / 256;
            std::size_t residual = excess - batch * 256;
            for (auto& h : hist) h += batch;
            if (residual > 0) {
                const std::size_t step = std::max<std::size_t>(256 / residual, 1);
                for (std::size_t i = 0; i < 256 && residual > 0; i += step, --residual) ++hist[i];
            }
            const double scale = 255.0 / static_cast<double>(area);
            std::size_t cdf = 0;
            auto& lut = luts[ty * grid + tx];
            for (std::size_t i = 0; i < 256; ++i) {
                cdf += hist[i];
                lut[i] = std::clamp(std::round(static_cast<double>(cdf) * scale), 0.0, 255.0);
            }
        }
    }
    return luts;
}

Tensor clahe(const Tensor& img, std::size_t grid, double clip_limit) {
    const auto luts = clahe_tile_luts(img, grid, clip_limit);
    const std::size_t H = img.dim(0), W = img.dim(1);
    const double tile_h = static_cast<double>(H) / static_cast<double>(grid);
    const double tile_w = static_cast<double>(W) / static_cast<double>(grid);
    const auto last = static_cast<std::ptrdiff_t>(grid) - 1;
    Tensor out(img.shape());
    for (std::size_t y = 0; y < H; ++y) {
        const double tyf = static_cast<double>(y) / tile_h - 0.5;
        const auto ty1r = static_cast<std::ptrdiff_t>(std::floor(tyf));
        const double ya = tyf - static_cast<double>(ty1r);
        const auto ty1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(ty1r, 0, last));
        const auto ty2 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(ty1r + 1, 0, last));
        for (std::size_t x = 0; x < W; ++x) {
            const double txf = static_cast<double>(x) / tile_w - 0.5;
            const auto tx1r = static_cast<std::ptrdiff_t>(std::floor(txf));
            const double xa = txf - static_cast<double>(tx1r);
            const auto tx1 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(tx1r, 0, last));
            const auto tx2 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(tx1r + 1, 0, last));
            const auto level = static_cast<std::size_t>(std::clamp(std::round(img[y * W + x]), 0.0, 255.0));
            const double top = luts[ty1 * grid + tx1][level] * (1.0 - xa) + luts[ty1 * grid + tx2][level] * xa;
            const double bottom = luts[ty2 * grid + tx1][level] * (1.0 - xa) + luts[ty2 * grid + tx2][level] * xa;
            out[y * W + x] = std::clamp(std::round(top * (1.0 - ya) + bottom * ya), 0.0, 255.0);
        }
    }
    return out;
}

FundusImage preprocess(const FundusImage& img, const PreprocessOptions& opt) {
    if (img.pixels.rank() != 2 || img.fov_mask.shape() != img.pixels.shape()) {
        throw ShapeError("preprocess: pixels " + shape_str(img.pixels.shape()) + " and mask " +
                         shape_str(img.fov_mask.shape()) + " must be matching [H,W]");
    }
    FundusImage out = img;
    Tensor& px = out.pixels;
    const Tensor& fov = img.fov_mask;
    double n = 0.0, mean = 0.0;
    for (std::size_t i = 0; i < px.size(); ++i) {
        if (fov[i] > 0.0) {
            n += 1.0;
            mean += px[i];
        }
    }
    if (n > 0.0) {
        mean /= n;
        double sq = 0.0;
        for (std::size_t i = 0; i < px.size(); ++i)
            if (fov[i] > 0.0) sq += (px[i] - mean) * (px[i] - mean);
        const double sd = std::sqrt(sq / n);
        if (sd > 1e-12) {
            double lo = INFINITY, hi = -INFINITY;
            for (std::size_t i = 0; i < px.size(); ++i) {
                if (fov[i] > 0.0) {
                    px[i] = (px[i] - mean) / sd;
                    lo = std::min(lo, px[i]);
                    hi = std::max(hi, px[i]);
                }
            }
            for (std::size_t i = 0; i < px.size(); ++i) {
                px[i] = fov[i] > 0.0 ? std::round(255.0 * (px[i] - lo) / (hi - lo)) : 0.0;
            }
        }
    }
    px = clahe(px, opt.grid, opt.clip_limit);
    for (std::size_t i = 0; i < px.size(); ++i)
        if (fov[i] <= 0.0) px[i] = 0.0;
    return out;
}

// ---------------------------------------------------------------------------------------------
// Patches

std::vector<std::pair<std::size_t, std::size_t>> sample_patch_origins(std::size_t height, std::size_t width,
                                                                      std::size_t count, std::size_t patch,
                                                                      std::uint64_t seed) {
    if (patch == 0 || height < patch || width < patch) {
        throw ShapeError("patch sampling: image [" + std::to_string(height) + "," + std::to_string(width) +
                         "] smaller than patch " + std::to_string(patch));
    }
    if (count == 0) throw std::invalid_argument("patch sampling: count must be positive");
    Rng rng(seed);
    std::vector<std::pair<std::size_t, std::size_t>> origins;
    origins.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t r = rng.index(height - patch + 1);
        const std::size_t c = rng.index(width - patch + 1);
        origins.emplace_back(r, c);
    }
    return origins;
}

PatchSet sample_training_patches(const FundusImage& img, std::size_t count, std::size_t patch, std::uint64_t seed) {
    const std::size_t W = img.width();
    PatchSet ps;
    ps.image_id = img.id;
    ps.origins = sample_patch_origins(img.height(), W, count, patch, seed);
    ps.patches = Tensor(Shape{count, 1, patch, patch});
    ps.masks = Tensor(Shape{count, patch, patch});
    if (img.label) ps.labels = Tensor(Shape{count, patch, patch});
    const std::size_t plane = patch * patch;
    for (std::size_t k = 0; k < count; ++k) {
        const auto [r, c] = ps.origins[k];
        for (std::size_t y = 0; y < patch; ++y)
            for (std::size_t x = 0; x < patch; ++x) {
                const std::size_t src = (r + y) * W + c + x, dst = k * plane + y * patch + x;
                ps.patches[dst] = img.pixels[src];
                ps.masks[dst] = img.fov_mask[src];
                if (img.label) (*ps.labels)[dst] = (*img.label)[src];
            }
    }
    return ps;
}

Tensor apply_dihedral(const Tensor& square, const Dihedral& op) {
    const std::size_t r = square.rank();
    if (r < 2 || square.dim(r - 1) != square.dim(r - 2)) {
        throw ShapeError("apply_dihedral expects square trailing extents, got " + shape_str(square.shape()));
    }
    const std::size_t P = square.dim(r - 1), plane = P * P, planes = square.size() / plane;
    Tensor cur = square;
    Tensor next(square.shape());
    auto remap = [&](auto src_of) {
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t i = 0; i < P; ++i)
                for (std::size_t j = 0; j < P; ++j) {
                    const auto [si, sj] = src_of(i, j);
                    next[p * plane + i * P + j] = cur[p * plane + si * P + sj];
                }
        std::swap(cur, next);
    };
    if (op.hflip) remap([&](std::size_t i, std::size_t j) { return std::pair{i, P - 1 - j}; });
    if (op.vflip) remap([&](std::size_t i, std::size_t j) { return std::pair{P - 1 - i, j}; });
    const int turns = ((op.quarter_turns % 4) + 4) % 4;
    for (int t = 0; t < turns; ++t) remap([&](std::size_t i, std::size_t j) { return std::pair{j, P - 1 - i}; });
    return cur;
}

Dihedral random_dihedral(std::uint64_t seed) {
    Rng rng(seed);
    Dihedral op;
    op.hflip = rng.coin();
    op.vflip = rng.coin();
    op.quarter_turns = static_cast<int>(rng.index(4));
    return op;
}

Augmented augment(const Tensor& patch, const std::optional<Tensor>& label, std::uint64_t seed) {
    const Dihedral op = random_dihedral(seed);
    Augmented out{apply_dihedral(patch, op), std::nullopt};
    if (label) {
        if (label->dim(label->rank() - 1) != patch.dim(patch.rank() - 1)) {
            throw ShapeError("augment: label " + shape_str(label->shape()) + " does not match patch " +
                             shape_str(patch.shape()));
        }
        out.label = apply_dihedral(*label, op);
    }
    return out;
}

std::vector<std::size_t> tile_offsets(std::size_t extent, std::size_t patch, std::size_t stride) {
    if (stride == 0) throw std::invalid_argument("tile_offsets: stride must be positive");
    if (patch == 0 || extent < patch) {
        throw ShapeError("tile_offsets: extent " + std::to_string(extent) + " smaller than patch " +
                         std::to_string(patch));
    }
    std::vector<std::size_t> offs;
    for (std::size_t o = 0; o + patch <= extent; o += stride) offs.push_back(o);
    if (offs.back() != extent - patch) offs.push_back(extent - patch);
    return offs;
}

Tensor tiled_inference(const Tensor& pixels, const PatchModel& model, std::size_t stride, std::size_t patch,
                       std::size_t batch) {
    if (pixels.rank() != 2) throw ShapeError("tiled_inference expects [H,W], got " + shape_str(pixels.shape()));
    if (batch == 0) throw std::invalid_argument("tiled_inference: batch must be positive");
    const std::size_t H = pixels.dim(0), W = pixels.dim(1);
    const auto rows = tile_offsets(H, patch, stride);
    const auto cols = tile_offsets(W, patch, stride);
    std::vector<std::pair<std::size_t, std::size_t>> origins;
    for (std::size_t r : rows)
        for (std::size_t c : cols) origins.emplace_back(r, c);

    Tensor sum(Shape{H, W}, 0.0), count(Shape{H, W}, 0.0);
    const std::size_t plane = patch * patch;
    for (std::size_t b0 = 0; b0 < origins.size(); b0 += batch) {
        const std::size_t B = std::min(batch, origins.size() - b0);
        Tensor in(Shape{B, 1, patch, patch});
        for (std::size_t k = 0; k < B; ++k) {
            const auto [r, c] = origins[b0 + k];
            for (std::size_t y = 0; y < patch; ++y)
                std::copy_n(pixels.ptr() + (r + y) * W + c, patch, in.ptr() + k * plane + y * patch);
        }
        const Tensor prob = model(in);
        if (prob.size() != B * plane) {
            throw ShapeError("tiled_inference: model returned " + shape_str(prob.shape()) + " for " +
                             std::to_string(B) + " patches of " + std::to_string(patch) + "x" + std::to_string(patch));
        }
        for (std::size_t k = 0; k < B; ++k) {
            const auto [r, c] = origins[b0 + k];
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x) {
                    sum[(r + y) * W + c + x] += prob[k * plane + y * patch + x];
                    count[(r + y) * W + c + x] += 1.0;
                }
        }
    }
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] /= count[i];
    return sum;
}

// ---------------------------------------------------------------------------------------------
// Files

void write_pgm(const fs::path& path, const Tensor& img) {
    if (img.rank() != 2) throw ShapeError("write_pgm expects [H,W], got " + shape_str(img.shape()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << "P5\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
    std::vector<unsigned char> bytes(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        bytes[i] = static_cast<unsigned char>(std::clamp(std::round(img[i]), 0.0, 255.0));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

Tensor read_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    auto token = [&]() {
        std::string t;
        char ch;
        while (in.get(ch)) {
            if (ch == '#') {
                std::string skip;
                std::getline(in, skip);
            } else if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!t.empty()) break;
            } else {
                t.push_back(ch);
            }
        }
        return t;
    };
    const std::string magic = token();
    if (magic != "P5") throw std::runtime_error("'" + path.string() + "' is not a binary PGM (P5)");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(token());
        h = std::stoul(token());
        maxval = std::stoul(token());
    } catch (const std::exception&) {
        throw std::runtime_error("'" + path.string() + "': malformed PGM header");
    }
    if (maxval != 255 || w == 0 || h == 0) {
        throw std::runtime_error("'" + path.string() + "': expected maxval 255 and non-empty extents");
    }
    std::vector<unsigned char> bytes(w * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
        throw std::runtime_error("'" + path.string() + "': truncated pixel data");
    }
    Tensor t(Shape{h, w});
    for (std::size_t i = 0; i < bytes.size(); ++i) t[i] = bytes[i];
    return t;
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest '" + path.string() + "'");
    std::vector<ManifestEntry> entries;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
        if (lineno == 1 && !fields.empty() && fields[0] == "path") continue;
        auto fail = [&](const std::string& why) {
            throw std::runtime_error("manifest '" + path.string() + "' line " + std::to_string(lineno) + ": " + why);
        };
        if (fields.size() != 3) fail("expected path,domain,has_label");
        ManifestEntry e;
        e.path = fields[0];
        try {
            e.domain = parse_domain(fields[1]);
        } catch (const std::invalid_argument& ex) {
            fail(ex.what());
        }
        if (fields[2] == "1" || fields[2] == "true") {
            e.has_label = true;
        } else if (fields[2] == "0" || fields[2] == "false") {
            e.has_label = false;
        } else {
            fail("has_label must be 0 or 1");
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << "path,domain,has_label\n";
    for (const auto& e : entries) out << e.path << "," << to_string(e.domain) << "," << (e.has_label ? 1 : 0) << "\n";
}

namespace {

std::array<std::atomic<std::size_t>, 2> g_label_reads{};

std::size_t domain_slot(Domain d) { return d == Domain::source ? 0 : 1; }

Tensor binarize(Tensor t) {
    for (double& v : t.data()) v = v >= 128.0 ? 1.0 : 0.0;
    return t;
}

}  // namespace

Tensor read_label(const fs::path& path, Domain domain) {
    g_label_reads[domain_slot(domain)].fetch_add(1);
    return binarize(read_pgm(path));
}

std::size_t label_reads(Domain domain) { return g_label_reads[domain_slot(domain)].load(); }

void reset_label_reads() {
    for (auto& c : g_label_reads) c.store(0);
}

void write_image_files(const fs::path& dir, const std::string& stem, const FundusImage& img, bool with_label) {
    write_pgm(dir / (stem + ".pgm"), img.pixels);
    Tensor mask = img.fov_mask;
    for (double& v : mask.data()) v = v > 0.0 ? 255.0 : 0.0;
    write_pgm(dir / (stem + "_mask.pgm"), mask);
    if (with_label) {
        if (!img.label) throw std::invalid_argument("write_image_files: image '" + img.id + "' has no label");
        Tensor label = *img.label;
        for (double& v : label.data()) v = v > 0.0 ? 255.0 : 0.0;
        write_pgm(dir / (stem + "_label.pgm"), label);
    }
}

std::vector<FundusImage> load_split(const fs::path& manifest) {
    const fs::path dir = manifest.parent_path();
    std::vector<FundusImage> images;
    for (const auto& e : read_manifest(manifest)) {
        const fs::path img_path = dir / e.path;
        if (img_path.extension() != ".pgm") throw std::runtime_error("manifest entry '" + e.path + "' is not a .pgm");
        const std::string stem = img_path.stem().string();
        FundusImage img;
        img.id = stem;
        img.domain = e.domain;
        img.pixels = read_pgm(img_path);
        img.fov_mask = binarize(read_pgm(img_path.parent_path() / (stem + "_mask.pgm")));
        if (img.fov_mask.shape() != img.pixels.shape()) {
            throw std::runtime_error("mask of '" + e.path + "' has shape " + shape_str(img.fov_mask.shape()));
        }
        if (e.has_label) {
            img.label = read_label(img_path.parent_path() / (stem + "_label.pgm"), e.domain);
            if (img.label->shape() != img.pixels.shape()) {
                throw std::runtime_error("label of '" + e.path + "' has shape " + shape_str(img.label->shape()));
            }
        }
        images.push_back(std::move(img));
    }
    return images;
}

void write_dataset(const fs::path& root, const SynthDataset& ds) {
    const DatasetPaths paths{root};
    fs::create_directories(root / "source");
    std::vector<ManifestEntry> src;
    for (const auto& img : ds.source) {
        write_image_files(root / "source", img.id, img, true);
        src.push_back({img.id + ".pgm", Domain::source, true});
    }
    write_manifest(paths.source_manifest(), src);

    std::vector<ManifestEntry> sealed;
    auto write_target = [&](const std::vector<FundusImage>& images, const std::string& split) {
        const fs::path dir = root / "target" / split;
        const fs::path label_dir = paths.eval_only_dir() / split;
        fs::create_directories(dir);
        fs::create_directories(label_dir);
        std::vector<ManifestEntry> entries;
        for (const auto& img : images) {
            write_image_files(dir, img.id, img, false);
            entries.push_back({img.id + ".pgm", Domain::target, false});
            if (!img.label) throw std::invalid_argument("write_dataset: target image '" + img.id + "' has no label");
            Tensor label = *img.label;
            for (double& v : label.data()) v = v > 0.0 ? 255.0 : 0.0;
            write_pgm(label_dir / (img.id + "_label.pgm"), label);
            sealed.push_back({split + "/" + img.id + "_label.pgm", Domain::target, true});
        }
        write_manifest(paths.target_manifest(split), entries);
    };
    write_target(ds.target_train, "train");
    write_target(ds.target_test, "test");
    write_manifest(paths.eval_only_dir() / "manifest.csv", sealed);
}

void attach_eval_labels(std::vector<FundusImage>& images, const DatasetPaths& paths, const std::string& split) {
    for (auto& img : images) {
        const fs::path p = paths.eval_only_dir() / split / (img.id + "_label.pgm");
        if (!fs::exists(p)) throw std::runtime_error("no held-out label for '" + img.id + "' at '" + p.string() + "'");
        img.label = read_label(p, img.domain);
        if (img.label->shape() != img.pixels.shape()) {
            throw std::runtime_error("label of '" + img.id + "' has shape " + shape_str(img.label->shape()));
        }
    }
}

}  // namespace tnseg
