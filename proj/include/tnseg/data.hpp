#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tnseg/tensor.hpp"

namespace tnseg {

enum class Domain { source, target };
std::string to_string(Domain d);
Domain parse_domain(const std::string& s);

/// Grayscale fundus image. pixels hold 8-bit intensities as reals in [0,255]; fov_mask and label are {0,1}.
struct FundusImage {
    std::string id;
    Tensor pixels;
    Tensor fov_mask;
    std::optional<Tensor> label;
    Domain domain = Domain::source;

    std::size_t height() const { return pixels.dim(0); }
    std::size_t width() const { return pixels.dim(1); }
};

// ---------------------------------------------------------------------------------------------
// Synthetic domain pair

struct SynthConfig {
    std::size_t height = 256;
    std::size_t width = 256;
    std::size_t n_source = 20;
    std::size_t n_target_train = 10;
    std::size_t n_target_test = 5;
    std::uint64_t seed = 0;

    // Vessel trees grow from an optic disc as random walks with angular momentum.
    std::size_t trees = 6;
    double branch_prob = 0.025;     // per step
    double width_max = 4.5;         // px at the root
    double width_min = 0.9;         // walk stops below this
    double taper = 0.006;           // width lost per px travelled
    double curvature = 0.015;       // std of the per-step angular acceleration
    double fov_radius = 0.46;       // fraction of the shorter extent
    double background = 150.0;
    double vessel_contrast = 40.0;  // darkening at full vessel coverage
    double illumination = 0.25;     // radial falloff of the background
    double texture = 6.0;           // std of the smooth background texture
    double noise = 2.0;             // std of pixel noise

    // Target shift; the neutral values render target images from the source process.
    double shift_brightness = -30.0;
    double shift_contrast = 0.75;
    double shift_blur = 1.0;
    double shift_texture = 6.0;
    double shift_fov_radius = 0.02;
    double shift_noise = 3.0;

    /// Sets every shift parameter to its neutral value.
    void clear_shift();
    void validate() const;
};

/// `key = value` lines; '#' starts a comment. Unknown keys and malformed values throw
/// std::invalid_argument naming the key.
SynthConfig parse_synth_config(const std::string& text);
std::map<std::string, std::string> synth_config_entries(const SynthConfig& cfg);

struct SynthDataset {
    std::vector<FundusImage> source;        // labelled
    std::vector<FundusImage> target_train;  // label holds the held-out map; never written next to the image
    std::vector<FundusImage> target_test;
};

/// Renders one image of either domain. `index` selects the image within its stream.
FundusImage synth_image(const SynthConfig& cfg, Domain domain, std::uint64_t stream, std::size_t index);
SynthDataset synth_domain_pair(const SynthConfig& cfg);

/// Fraction of FOV pixels labelled vessel.
double vessel_fraction(const FundusImage& img);

// ---------------------------------------------------------------------------------------------
// Preprocessing

struct PreprocessOptions {
    std::size_t grid = 8;
    double clip_limit = 2.0;
};

/// Standardize over the FOV, min-max to [0,255] (pixels outside the FOV are set to 0), then CLAHE.
FundusImage preprocess(const FundusImage& img, const PreprocessOptions& opt = {});

/// Contrast-limited adaptive histogram equalization of an [H,W] image with integer levels in [0,255].
Tensor clahe(const Tensor& img, std::size_t grid = 8, double clip_limit = 2.0);

/// Per-tile 256-entry lookup tables as used by clahe(); lut[ty * grid + tx][level].
std::vector<std::vector<double>> clahe_tile_luts(const Tensor& img, std::size_t grid, double clip_limit);

Tensor gaussian_blur(const Tensor& img, double sigma);

// ---------------------------------------------------------------------------------------------
// Patches

struct PatchSet {
    std::string image_id;
    Tensor patches;               // [K,1,P,P]
    std::optional<Tensor> labels; // [K,P,P]
    Tensor masks;                 // [K,P,P]
    std::vector<std::pair<std::size_t, std::size_t>> origins;
};

/// Uniform top-left corners with the patch fully inside the image.
std::vector<std::pair<std::size_t, std::size_t>> sample_patch_origins(std::size_t height, std::size_t width,
                                                                      std::size_t count, std::size_t patch,
                                                                      std::uint64_t seed);
PatchSet sample_training_patches(const FundusImage& img, std::size_t count, std::size_t patch, std::uint64_t seed);

/// Element of the dihedral group of the square.
struct Dihedral {
    bool hflip = false;
    bool vflip = false;
    int quarter_turns = 0;  // counter-clockwise, 0..3
};
/// Applies `op` to a square [P,P] tensor: horizontal flip, then vertical flip, then rotation.
Tensor apply_dihedral(const Tensor& square, const Dihedral& op);
Dihedral random_dihedral(std::uint64_t seed);

struct Augmented {
    Tensor patch;
    std::optional<Tensor> label;
};
Augmented augment(const Tensor& patch, const std::optional<Tensor>& label, std::uint64_t seed);

/// Top-left offsets at `stride` along an extent, plus the border-snapped last position.
std::vector<std::size_t> tile_offsets(std::size_t extent, std::size_t patch, std::size_t stride);

/// Maps a batch [B,1,P,P] of raw patches to vessel probabilities [B,1,P,P] (or [B,P,P]).
using PatchModel = std::function<Tensor(const Tensor& patches)>;

/// Averages the model's vessel probability over every overlapping patch covering each pixel.
Tensor tiled_inference(const Tensor& pixels, const PatchModel& model, std::size_t stride = 10, std::size_t patch = 64,
                       std::size_t batch = 16);

// ---------------------------------------------------------------------------------------------
// Files

/// Binary PGM (P5, maxval 255). Values are rounded and clamped to [0,255] on write.
void write_pgm(const std::filesystem::path& path, const Tensor& img);
Tensor read_pgm(const std::filesystem::path& path);

struct ManifestEntry {
    std::string path;  // relative to the manifest's directory
    Domain domain = Domain::source;
    bool has_label = false;
};
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

/// Image `<dir>/<stem>.pgm` with `<stem>_mask.pgm` and, when labelled, `<stem>_label.pgm`.
void write_image_files(const std::filesystem::path& dir, const std::string& stem, const FundusImage& img,
                       bool with_label);

/// Loads every manifest entry. Labels are read only for entries flagged has_label.
std::vector<FundusImage> load_split(const std::filesystem::path& manifest);

/// Reads a label map through the label gate, which counts reads per domain.
Tensor read_label(const std::filesystem::path& path, Domain domain);
std::size_t label_reads(Domain domain);
void reset_label_reads();

/// Dataset layout written by write_dataset():
///   source/manifest.csv, source/<id>{,_mask,_label}.pgm
///   target/{train,test}/manifest.csv, target/{train,test}/<id>{,_mask}.pgm
///   target/eval_only/{train,test}/<id>_label.pgm, target/eval_only/manifest.csv
struct DatasetPaths {
    std::filesystem::path root;
    std::filesystem::path source_manifest() const { return root / "source" / "manifest.csv"; }
    std::filesystem::path target_manifest(const std::string& split) const {
        return root / "target" / split / "manifest.csv";
    }
    std::filesystem::path eval_only_dir() const { return root / "target" / "eval_only"; }
};

void write_dataset(const std::filesystem::path& root, const SynthDataset& ds);

/// Attaches the sealed target labels of `split` to `images` (used by evaluation only).
void attach_eval_labels(std::vector<FundusImage>& images, const DatasetPaths& paths, const std::string& split);

}  // namespace tnseg
