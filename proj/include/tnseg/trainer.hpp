#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tnseg/data.hpp"
#include "tnseg/losses.hpp"
#include "tnseg/metrics.hpp"
#include "tnseg/networks.hpp"

namespace tnseg {

struct TrainConfig {
    std::size_t iters = 2000;
    std::size_t batch_src = 64;
    std::size_t batch_tgt = 64;
    double lr_seg = 1e-3;
    double lr_disc = 1e-4;
    double weight_decay = 3e-4;
    double lambda_d = 1e-3;
    double lambda_ent = 0.0;
    double poly_power = 0.9;
    std::uint64_t seed = 0;
    NormKind norm = NormKind::tn;
    DistanceKind distance = DistanceKind::normalized_mean;
    ProbKind prob = ProbKind::student_t;
    std::size_t checkpoint_interval = 500;  // 0 writes only the final checkpoint
    std::size_t depth = 3;
    std::size_t base_channels = 16;
    std::size_t patch = 64;
    std::size_t patches_per_image = 500;
    bool augment = true;
    double norm_momentum = 0.1;
    /// Verifies after every update that the other network's parameters are untouched.
    bool check_isolation = false;

    void validate() const;
    SegmenterConfig segmenter_config() const;
};

/// `key = value` lines mirroring TrainConfig; unknown keys and malformed values throw std::invalid_argument.
TrainConfig parse_train_config(const std::string& text);
/// Applies one `key = value` assignment to `cfg`.
void set_train_option(TrainConfig& cfg, const std::string& key, const std::string& value);
std::map<std::string, std::string> train_config_entries(const TrainConfig& cfg);
TrainConfig train_config_from_entries(const std::map<std::string, std::string>& entries);

/// base_lr * (1 - iter / max_iter)^power for 0 <= iter <= max_iter.
double poly_lr(double base_lr, std::size_t iter, std::size_t max_iter, double power = 0.9);

class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Bias-corrected Adam. Weight decay is added to the gradient of `weight` parameters only.
class Adam {
   public:
    Adam(std::vector<Parameter*> params, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    /// Updates every trainable parameter that holds a gradient, then clears the gradients.
    /// A non-finite gradient throws NumericError naming the parameter, before anything is modified.
    void step(double lr);
    void zero_grad();
    std::size_t steps() const { return t_; }
    const Tensor& first_moment(std::size_t i) const { return slots_[i].m; }
    const Tensor& second_moment(std::size_t i) const { return slots_[i].v; }

   private:
    struct Slot {
        Parameter* p;
        Tensor m;
        Tensor v;
    };
    std::vector<Slot> slots_;
    double weight_decay_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
};

/// Network inputs are pixel intensities scaled to [0,1].
inline constexpr double kInputScale = 1.0 / 255.0;

struct DomainBatch {
    Tensor src;                // [Bs,1,P,P], scaled
    Tensor src_label;          // [Bs,P,P]
    Tensor src_mask;           // [Bs,P,P]
    std::optional<Tensor> tgt; // [Bt,1,P,P], scaled
    std::optional<Tensor> tgt_mask;
};

struct TrainLogRow {
    std::size_t iter = 0;
    double l_sup = 0.0;
    std::optional<double> l_adv, l_d, l_ent;
    double lr_seg = 0.0;
    double lr_disc = 0.0;
};

/// Writes `iter,L_sup,L_adv,L_d,L_ent,lr_seg,lr_disc`; components that were not computed are left empty.
void write_train_log_header(std::ostream& out);
void write_train_log_row(std::ostream& out, const TrainLogRow& row);

/// The alternating training loop over preprocessed images. Target images must carry no labels.
class Trainer {
   public:
    Trainer(TrainConfig cfg, std::vector<FundusImage> source, std::vector<FundusImage> target);

    /// Batch of iteration `iter`: a pure function of (seed, iter).
    DomainBatch batch(std::size_t iter);
    /// Runs the next iteration: segmenter update, then discriminator update.
    TrainLogRow step();
    TrainLogRow step(const DomainBatch& batch);

    /// Whether the target domain takes part in training steps.
    bool uses_target() const;
    bool uses_discriminator() const { return cfg_.lambda_d > 0.0; }

    std::size_t iteration() const { return iter_; }
    const TrainConfig& config() const { return cfg_; }
    Segmenter& segmenter() { return seg_; }
    Discriminator& discriminator() { return disc_; }
    std::vector<Parameter*> checkpoint_parameters();
    std::map<std::string, std::string> checkpoint_config() const;

    /// Discriminator-only update on the given (detached) entropy maps; returns L_d.
    double discriminator_step(const Tensor& entropy_src, const Tensor& entropy_tgt, double lr);

   private:
    struct PatchRef {
        std::size_t image;
        std::size_t row;
        std::size_t col;
    };
    struct Pool {
        const std::vector<FundusImage>* images = nullptr;
        std::uint64_t stream = 0;
        std::size_t epoch = static_cast<std::size_t>(-1);
        std::vector<PatchRef> refs;
    };
    const PatchRef& pool_entry(Pool& pool, std::size_t index);
    void fill(Pool& pool, std::size_t first, std::size_t count, std::size_t iter, Tensor& pixels, Tensor* labels,
              Tensor& masks);

    TrainConfig cfg_;
    std::vector<FundusImage> source_;
    std::vector<FundusImage> target_;
    Segmenter seg_;
    Discriminator disc_;
    Adam adam_seg_;
    Adam adam_disc_;
    Pool src_pool_;
    Pool tgt_pool_;
    std::size_t iter_ = 0;
};

struct TrainOptions {
    bool force = false;
    std::ostream* progress = nullptr;
    std::size_t progress_interval = 100;
};

/// Trains on `<data>/source` and `<data>/target/train` and writes `<out>/train_log.csv`,
/// `<out>/ckpt_<iter>/` at the checkpoint interval and `<out>/final/`. Manifest violations and an
/// existing `out` (unless forced) throw before training starts.
void train(const TrainConfig& cfg, const std::filesystem::path& data, const std::filesystem::path& out,
           const TrainOptions& opt = {});

/// Loads and preprocesses every image of a manifest. Labels are read only where the manifest lists them.
std::vector<FundusImage> load_preprocessed(const std::filesystem::path& manifest);

/// Segmenter rebuilt from a checkpoint directory.
Segmenter load_segmenter(const std::filesystem::path& checkpoint);

/// Eval-mode vessel probabilities through the domain's normalization route.
PatchModel patch_model(Segmenter& seg, Domain domain);

struct ImageEvaluation {
    std::string id;
    Tensor prob;  // [H,W]
    MetricsReport report;
    double mean_entropy = 0.0;  // normalized prediction entropy over the FOV
};

/// Tiled inference and metrics for each (preprocessed, labelled) image.
std::vector<ImageEvaluation> evaluate_images(Segmenter& seg, const std::vector<FundusImage>& images, Domain domain,
                                             std::size_t stride = 10, std::size_t patch = 64);

/// Masked mean of the normalized two-class entropy of a probability map.
double mean_map_entropy(const Tensor& prob, const Tensor& mask);

}  // namespace tnseg
