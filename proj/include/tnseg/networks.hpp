#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "tnseg/autograd.hpp"
#include "tnseg/norm.hpp"
#include "tnseg/random.hpp"

namespace tnseg {

enum class NormKind { bn, tn };
std::string to_string(NormKind k);
NormKind parse_norm_kind(const std::string& s);

struct SegmenterConfig {
    std::size_t depth = 3;
    std::size_t base_channels = 16;
    std::size_t in_channels = 1;
    std::size_t out_channels = 2;
    NormKind norm = NormKind::bn;
    DistanceKind distance = DistanceKind::normalized_mean;
    ProbKind prob = ProbKind::student_t;
    double norm_momentum = 0.1;
    double norm_eps = 1e-5;
};

struct DiscriminatorConfig {
    std::vector<std::size_t> widths{16, 32, 64, 1};
    std::size_t kernel = 4;
    std::size_t stride = 2;
    std::size_t pad = 1;
    double slope = 0.2;
};

struct ConvLayer {
    Parameter weight;
    Parameter bias;
    std::size_t stride = 1;
    std::size_t pad = 0;

    Var operator()(Var x);
    /// Same convolution with the weights bound as constants: no gradient reaches them.
    Var frozen(Var x) const;
    void collect(std::vector<Parameter*>& out);
};

/// Conv kernels ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), bias 0.
ConvLayer make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                    std::size_t pad, Rng& rng);

/// Domain-routed activations. In bn mode only `src` is used (source and target share one batch).
struct DomainPair {
    std::optional<Var> src;
    std::optional<Var> tgt;
};

/// UNet with pluggable BN/TN after every 3x3 convolution, max-pool down, nearest-neighbour up,
/// skip concatenation, 1x1 head and channel softmax.
class Segmenter {
   public:
    Segmenter(const SegmenterConfig& cfg, std::uint64_t seed);

    /// Returns class probabilities [N,C,H,W] per present domain. In tn train mode both domains are required.
    DomainPair forward(Tape& tape, std::optional<Tensor> x_src, std::optional<Tensor> x_tgt, Mode mode);
    DomainPair forward(std::optional<Var> x_src, std::optional<Var> x_tgt, Mode mode);

    /// Trainable tensors and buffers in a deterministic order.
    std::vector<Parameter*> parameters();
    const SegmenterConfig& config() const { return cfg_; }

    std::vector<std::string> norm_layer_names() const;
    TnState* tn_layer(const std::string& name);
    /// Holds every TN layer's channel weights fixed at their stored values.
    void freeze_eta(bool frozen);

    /// Called with each normalization layer's output (before the ReLU) during forward().
    using Observer = std::function<void(const std::string& layer, const DomainPair& out)>;
    void set_observer(Observer fn) { observer_ = std::move(fn); }

   private:
    using Norm = std::variant<BnState, TnState>;
    struct Block {
        std::string name;
        ConvLayer conv1;
        Norm norm1;
        ConvLayer conv2;
        Norm norm2;
    };

    Block make_block(const std::string& name, std::size_t cin, std::size_t cout, Rng& rng);
    DomainPair run_block(Block& b, DomainPair x, Mode mode);
    DomainPair apply_norm(Norm& n, DomainPair x, Mode mode);

    SegmenterConfig cfg_;
    std::vector<Block> encoder_;
    Block bottleneck_;
    std::vector<Block> decoder_;
    ConvLayer head_;
    Observer observer_;
};

/// Fully convolutional entropy-map classifier; outputs the probability that a map is source-like.
class Discriminator {
   public:
    Discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed);

    /// [N,1,H,W] -> [N,1,H/16,W/16] scores in (0,1). H and W must be at least 16.
    /// With `frozen`, gradients still flow to the input but not to the weights.
    Var forward(Var entropy_map, bool frozen = false);
    std::vector<Parameter*> parameters();
    const DiscriminatorConfig& config() const { return cfg_; }

   private:
    DiscriminatorConfig cfg_;
    std::vector<ConvLayer> layers_;
};

/// Checkpoint directory: one tensor file pair per named parameter plus `manifest.txt` listing the
/// producing config (`key = value`) and each tensor's name and shape.
void save_checkpoint(const std::filesystem::path& dir, const std::vector<Parameter*>& params,
                     const std::map<std::string, std::string>& config);
/// Loads tensors into `params` by name. Every listed parameter must be present with a matching shape.
void load_checkpoint_tensors(const std::filesystem::path& dir, const std::vector<Parameter*>& params);
std::map<std::string, std::string> read_checkpoint_config(const std::filesystem::path& dir);

}  // namespace tnseg
