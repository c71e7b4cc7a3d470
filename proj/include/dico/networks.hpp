#pragma once

#include <torch/torch.h>

#include <memory>
#include <string>
#include <vector>

#include "dico/volume_ops.hpp"

namespace dico {

enum class BackboneKind { conv, transformer };
enum class NormKind { instance, batch, none };

std::string to_string(BackboneKind kind);
BackboneKind parse_backbone_kind(const std::string& s);
std::string to_string(NormKind kind);
NormKind parse_norm_kind(const std::string& s);

/// Shape and width parameters of one segmentation sub-network.
///
/// For the conv kind `depth` counts encoder stages (VNet style, stride-2
/// downsampling between stages). For the transformer kind it counts
/// self-attention blocks; `patch_size` sets the token grid and the number of
/// decoder upsampling levels (log2 of the patch size).
struct BackboneConfig {
  BackboneKind kind = BackboneKind::conv;
  int64_t base_channels = 16;
  int64_t depth = 4;
  int64_t patch_size = 8;
  int64_t num_classes = 2;
  int64_t in_channels = 1;
  int64_t embed_dim = 96;
  int64_t num_heads = 4;
  NormKind norm = NormKind::instance;

  void validate() const;
  /// Every spatial extent fed to the network must be a multiple of this.
  int64_t spatial_divisor() const;
};

struct DiscriminatorConfig {
  int64_t base_channels = 8;
  int64_t layers = 5;

  void validate() const;
};

/// Network pairing for one experiment. `m2_multiview` wraps the second
/// sub-network with the multi-view integration module.
struct ModelConfig {
  BackboneConfig m1{};
  BackboneConfig m2{BackboneKind::transformer};
  bool m2_multiview = true;
  ViewGeometry views{};
  DiscriminatorConfig discriminator{};

  void validate() const;
};

/// Common interface of every segmentation network: logits = head(features(x)).
/// Output spatial extents always equal input extents.
class SegNetImpl : public torch::nn::Module {
 public:
  ~SegNetImpl() override = default;

  virtual torch::Tensor features(const torch::Tensor& x) = 0;
  virtual torch::Tensor head(const torch::Tensor& features) = 0;
  virtual int64_t feature_channels() const = 0;
  virtual int64_t num_classes() const = 0;

  torch::Tensor forward(const torch::Tensor& x) { return head(features(x)); }
};
using SegNet = std::shared_ptr<SegNetImpl>;

/// Residual stack of 3x3x3 convolutions at constant width.
class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int64_t channels, int64_t convs, NormKind norm);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
  torch::nn::PReLU act_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// VNet-style encoder-decoder with residual stages and stride-2 downsampling.
class ConvBackboneImpl : public SegNetImpl {
 public:
  explicit ConvBackboneImpl(BackboneConfig config);

  torch::Tensor features(const torch::Tensor& x) override;
  torch::Tensor head(const torch::Tensor& features) override;
  int64_t feature_channels() const override { return config_.base_channels; }
  int64_t num_classes() const override { return config_.num_classes; }
  const BackboneConfig& config() const { return config_; }

 private:
  BackboneConfig config_;
  torch::nn::Sequential stem_{nullptr};
  std::vector<ResidualBlock> encoders_;
  std::vector<torch::nn::Sequential> downs_;
  std::vector<torch::nn::Sequential> ups_;
  std::vector<torch::nn::Sequential> merges_;
  std::vector<ResidualBlock> decoders_;
  torch::nn::Conv3d head_{nullptr};
};

/// Pre-norm multi-head self-attention block over a token sequence (N, T, E).
class AttentionBlockImpl : public torch::nn::Module {
 public:
  AttentionBlockImpl(int64_t embed_dim, int64_t heads, int64_t mlp_ratio = 4);
  torch::Tensor forward(const torch::Tensor& tokens);

 private:
  int64_t heads_;
  torch::nn::LayerNorm norm1_{nullptr};
  torch::nn::Linear qkv_{nullptr};
  torch::nn::Linear proj_{nullptr};
  torch::nn::LayerNorm norm2_{nullptr};
  torch::nn::Sequential mlp_{nullptr};
};
TORCH_MODULE(AttentionBlock);

/// UNETR-style network: non-overlapping 3D patch tokens, a stack of
/// attention blocks, and a convolutional decoder fed by skip projections of
/// intermediate blocks and a full-resolution convolutional stem.
class TransformerBackboneImpl : public SegNetImpl {
 public:
  explicit TransformerBackboneImpl(BackboneConfig config);

  torch::Tensor features(const torch::Tensor& x) override;
  torch::Tensor head(const torch::Tensor& features) override;
  int64_t feature_channels() const override { return config_.base_channels; }
  int64_t num_classes() const override { return config_.num_classes; }
  const BackboneConfig& config() const { return config_; }

 private:
  int64_t levels() const;
  int64_t decoder_width(int64_t level) const;

  BackboneConfig config_;
  torch::nn::Conv3d patch_embed_{nullptr};
  torch::nn::Conv3d position_{nullptr};
  std::vector<AttentionBlock> blocks_;
  std::vector<int64_t> skip_block_;  // block index feeding decoder level l (l >= 1)
  torch::nn::Sequential stem_{nullptr};
  std::vector<torch::nn::Sequential> skips_;  // indexed by level - 1
  torch::nn::Sequential bottleneck_{nullptr};
  std::vector<torch::nn::Sequential> ups_;     // ups_[l] maps level l+1 -> l
  std::vector<torch::nn::Sequential> merges_;  // merges_[l] at level l
  torch::nn::Conv3d head_{nullptr};
};

/// Forward result with the inner network's stacked view features exposed,
/// so callers can probe gradients per view branch.
struct MultiViewTrace {
  torch::Tensor logits;
  torch::Tensor view_features;  // (views * B, F, h, w, d)
  ViewGeometry geometry;
};

/// Multi-view integration around an inner network: decompose the input into
/// global + local views, run the inner network on the stacked batch,
/// recompose, smooth the reassembled locals (two convs), concatenate with the
/// upsampled global features, fuse (two convs) and segment (1x1x1 conv).
class MultiViewWrapperImpl : public SegNetImpl {
 public:
  MultiViewWrapperImpl(SegNet inner, ViewGeometry geometry);

  torch::Tensor features(const torch::Tensor& x) override;
  torch::Tensor head(const torch::Tensor& features) override;
  int64_t feature_channels() const override { return inner_->feature_channels(); }
  int64_t num_classes() const override { return inner_->num_classes(); }

  MultiViewTrace forward_traced(const torch::Tensor& x);
  /// Sets every head convolution to a centre-tap identity-like kernel (zero
  /// bias). Used to check that recomposition adds no seams of its own.
  void init_heads_identity();

  const SegNet& inner() const { return inner_; }
  const ViewGeometry& geometry() const { return geometry_; }

 private:
  torch::Tensor heads_from_views(const torch::Tensor& view_features, const ViewGeometry& g);

  SegNet inner_;
  ViewGeometry geometry_;
  torch::nn::Sequential smooth_{nullptr};
  torch::nn::Sequential fuse_{nullptr};
  torch::nn::Conv3d head_{nullptr};
};

/// Strided 2D convolutional classifier: one logit per fused (image, mask)
/// projection.
class Discriminator2DImpl : public torch::nn::Module {
 public:
  explicit Discriminator2DImpl(DiscriminatorConfig config = {});
  torch::Tensor forward(const torch::Tensor& fused);

 private:
  DiscriminatorConfig config_;
  torch::nn::Sequential body_{nullptr};
  torch::nn::Linear classifier_{nullptr};
};
TORCH_MODULE(Discriminator2D);

/// Builds a bare backbone for `config`.
SegNet make_backbone(const BackboneConfig& config);

/// Builds M1 (always bare) and M2 (wrapped with the multi-view module when
/// `m2_multiview` is set) from a model configuration.
SegNet make_m1(const ModelConfig& config);
SegNet make_m2(const ModelConfig& config);

/// Channel concatenation of a projected image and a projected mask into the
/// (B, 2, H, W) discriminator input. For multi-channel masks (projected
/// probability maps) the foreground channel 1 is used.
torch::Tensor fuse_for_discriminator(const Projection2D& image, const Projection2D& mask);

/// All learnable parameters of a module, in registration order.
std::vector<torch::Tensor> parameter_list(const torch::nn::Module& module);

}  // namespace dico
