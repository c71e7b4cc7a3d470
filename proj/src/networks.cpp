#include "dico/networks.hpp"

#include <cmath>
#include <string>

namespace dico {

namespace nn = torch::nn;

std::string to_string(BackboneKind kind) {
  return kind == BackboneKind::conv ? "conv" : "transformer";
}

BackboneKind parse_backbone_kind(const std::string& s) {
  if (s == "conv") return BackboneKind::conv;
  if (s == "transformer") return BackboneKind::transformer;
  throw ConfigError("unknown backbone kind '" + s + "' (expected conv or transformer)");
}

std::string to_string(NormKind kind) {
  switch (kind) {
    case NormKind::instance: return "instance";
    case NormKind::batch: return "batch";
    case NormKind::none: return "none";
  }
  return "none";
}

NormKind parse_norm_kind(const std::string& s) {
  if (s == "instance") return NormKind::instance;
  if (s == "batch") return NormKind::batch;
  if (s == "none") return NormKind::none;
  throw ConfigError("unknown norm kind '" + s + "' (expected instance, batch or none)");
}

namespace {

bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

int64_t log2_exact(int64_t v) {
  int64_t l = 0;
  while ((int64_t{1} << l) < v) ++l;
  return l;
}

void append_norm(nn::Sequential& seq, int64_t channels, NormKind norm) {
  switch (norm) {
    case NormKind::instance:
      seq->push_back(nn::InstanceNorm3d(nn::InstanceNorm3dOptions(channels).affine(true)));
      break;
    case NormKind::batch:
      seq->push_back(nn::BatchNorm3d(channels));
      break;
    case NormKind::none:
      break;
  }
}

nn::Sequential conv_norm_act(int64_t in, int64_t out, int64_t kernel, int64_t stride,
                             int64_t padding, NormKind norm) {
  nn::Sequential seq;
  seq->push_back(nn::Conv3d(nn::Conv3dOptions(in, out, kernel).stride(stride).padding(padding)));
  append_norm(seq, out, norm);
  seq->push_back(nn::PReLU());
  return seq;
}

nn::Sequential chain(std::initializer_list<nn::Sequential> parts) {
  nn::Sequential out;
  for (const auto& part : parts)
    for (const auto& m : *part) out->push_back(m);
  return out;
}

nn::Sequential upconv_norm_act(int64_t in, int64_t out, NormKind norm) {
  nn::Sequential seq;
  seq->push_back(nn::ConvTranspose3d(nn::ConvTranspose3dOptions(in, out, 2).stride(2)));
  append_norm(seq, out, norm);
  seq->push_back(nn::PReLU());
  return seq;
}

void require_divisible(const torch::Tensor& x, int64_t divisor, const char* who) {
  require_5d(x, who);
  const auto e = spatial_extent(x);
  for (auto v : e.as_array()) {
    if (v % divisor != 0) {
      throw ShapeError(std::string(who) + ": spatial extents (" + std::to_string(e.h) + ", " +
                       std::to_string(e.w) + ", " + std::to_string(e.d) +
                       ") must be multiples of " + std::to_string(divisor));
    }
  }
}

}  // namespace

void BackboneConfig::validate() const {
  if (depth < 2) throw ConfigError("backbone depth must be >= 2");
  if (base_channels < 4) throw ConfigError("backbone base_channels must be >= 4");
  if (num_classes < 2) throw ConfigError("backbone num_classes must be >= 2");
  if (in_channels < 1) throw ConfigError("backbone in_channels must be >= 1");
  if (kind == BackboneKind::transformer) {
    if (!is_power_of_two(patch_size) || patch_size < 2) {
      throw ConfigError("transformer patch_size must be a power of two >= 2");
    }
    if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0) {
      throw ConfigError("transformer embed_dim must be a positive multiple of num_heads");
    }
  }
}

int64_t BackboneConfig::spatial_divisor() const {
  return kind == BackboneKind::conv ? (int64_t{1} << (depth - 1)) : patch_size;
}

void DiscriminatorConfig::validate() const {
  if (base_channels < 1) throw ConfigError("discriminator base_channels must be >= 1");
  if (layers < 1) throw ConfigError("discriminator layers must be >= 1");
}

void ModelConfig::validate() const {
  m1.validate();
  m2.validate();
  discriminator.validate();
  if (m1.num_classes != m2.num_classes || m1.in_channels != m2.in_channels) {
    throw ConfigError("m1 and m2 must agree on num_classes and in_channels");
  }
  if (m2_multiview) views.validate_factors();
}

// ---------------------------------------------------------------- residual

ResidualBlockImpl::ResidualBlockImpl(int64_t channels, int64_t convs, NormKind norm) {
  body_ = nn::Sequential();
  for (int64_t i = 0; i < convs; ++i) {
    body_->push_back(nn::Conv3d(nn::Conv3dOptions(channels, channels, 3).padding(1)));
    append_norm(body_, channels, norm);
    if (i + 1 < convs) body_->push_back(nn::PReLU());
  }
  register_module("body", body_);
  act_ = register_module("act", nn::PReLU());
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  return act_(body_->forward(x) + x);
}

// -------------------------------------------------------------------- conv

ConvBackboneImpl::ConvBackboneImpl(BackboneConfig config) : config_(config) {
  config_.validate();
  const auto norm = config_.norm;
  auto width = [&](int64_t stage) { return config_.base_channels << stage; };
  auto convs = [](int64_t stage) { return std::min<int64_t>(stage + 1, 3); };

  stem_ = register_module("stem", conv_norm_act(config_.in_channels, width(0), 3, 1, 1, norm));
  for (int64_t s = 0; s < config_.depth; ++s) {
    encoders_.push_back(register_module("enc" + std::to_string(s),
                                        ResidualBlock(width(s), convs(s), norm)));
    if (s + 1 < config_.depth) {
      downs_.push_back(register_module("down" + std::to_string(s),
                                       conv_norm_act(width(s), width(s + 1), 2, 2, 0, norm)));
    }
  }
  // Decoder stage s merges the upsampled stage s+1 output with encoder skip s.
  for (int64_t s = 0; s + 1 < config_.depth; ++s) {
    ups_.push_back(
        register_module("up" + std::to_string(s), upconv_norm_act(width(s + 1), width(s), norm)));
    merges_.push_back(register_module("merge" + std::to_string(s),
                                      conv_norm_act(2 * width(s), width(s), 1, 1, 0, norm)));
    decoders_.push_back(register_module("dec" + std::to_string(s),
                                        ResidualBlock(width(s), convs(s), norm)));
  }
  head_ = register_module(
      "head", nn::Conv3d(nn::Conv3dOptions(config_.base_channels, config_.num_classes, 1)));
}

torch::Tensor ConvBackboneImpl::features(const torch::Tensor& x) {
  require_divisible(x, config_.spatial_divisor(), "conv backbone");
  if (x.size(1) != config_.in_channels) throw ShapeError("conv backbone: channel mismatch");
  std::vector<torch::Tensor> skips;
  auto h = stem_->forward(x);
  for (int64_t s = 0; s < config_.depth; ++s) {
    h = encoders_[s]->forward(h);
    if (s + 1 < config_.depth) {
      skips.push_back(h);
      h = downs_[s]->forward(h);
    }
  }
  for (int64_t s = config_.depth - 2; s >= 0; --s) {
    h = ups_[s]->forward(h);
    h = merges_[s]->forward(torch::cat({h, skips[s]}, 1));
    h = decoders_[s]->forward(h);
  }
  return h;
}

torch::Tensor ConvBackboneImpl::head(const torch::Tensor& features) { return head_(features); }

// --------------------------------------------------------------- attention

AttentionBlockImpl::AttentionBlockImpl(int64_t embed_dim, int64_t heads, int64_t mlp_ratio)
    : heads_(heads) {
  norm1_ = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({embed_dim})));
  qkv_ = register_module("qkv", nn::Linear(embed_dim, 3 * embed_dim));
  proj_ = register_module("proj", nn::Linear(embed_dim, embed_dim));
  norm2_ = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({embed_dim})));
  mlp_ = register_module("mlp", nn::Sequential(nn::Linear(embed_dim, mlp_ratio * embed_dim),
                                               nn::GELU(),
                                               nn::Linear(mlp_ratio * embed_dim, embed_dim)));
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& tokens) {
  const auto n = tokens.size(0);
  const auto t = tokens.size(1);
  const auto e = tokens.size(2);
  const auto dh = e / heads_;
  auto qkv = qkv_(norm1_(tokens)).reshape({n, t, 3, heads_, dh}).permute({2, 0, 3, 1, 4});
  auto q = qkv[0];
  auto k = qkv[1];
  auto v = qkv[2];
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(double(dh)), -1);
  auto mixed = torch::matmul(attn, v).transpose(1, 2).reshape({n, t, e});
  auto h = tokens + proj_(mixed);
  return h + mlp_->forward(norm2_(h));
}

// ------------------------------------------------------------- transformer

int64_t TransformerBackboneImpl::levels() const { return log2_exact(config_.patch_size); }

int64_t TransformerBackboneImpl::decoder_width(int64_t level) const {
  return config_.base_channels << level;
}

TransformerBackboneImpl::TransformerBackboneImpl(BackboneConfig config) : config_(config) {
  config_.validate();
  const auto norm = config_.norm;
  const auto e = config_.embed_dim;
  const auto top = levels();

  patch_embed_ = register_module(
      "patch_embed", nn::Conv3d(nn::Conv3dOptions(config_.in_channels, e, config_.patch_size)
                                    .stride(config_.patch_size)));
  // Depthwise convolution as position encoding keeps the network usable at
  // any token grid size (global and local views, sliding windows).
  position_ = register_module(
      "position", nn::Conv3d(nn::Conv3dOptions(e, e, 3).padding(1).groups(e)));
  for (int64_t b = 0; b < config_.depth; ++b) {
    blocks_.push_back(register_module("block" + std::to_string(b),
                                      AttentionBlock(e, config_.num_heads)));
  }

  stem_ = chain({conv_norm_act(config_.in_channels, decoder_width(0), 3, 1, 1, norm),
                 conv_norm_act(decoder_width(0), decoder_width(0), 3, 1, 1, norm)});
  register_module("stem", stem_);

  for (int64_t level = 1; level < top; ++level) {
    skip_block_.push_back(std::max<int64_t>(0, level * config_.depth / top - 1));
    nn::Sequential path;
    int64_t in = e;
    for (int64_t u = level; u < top; ++u) {
      const auto up = upconv_norm_act(in, decoder_width(level), norm);
      for (const auto& m : *up) path->push_back(m);
      in = decoder_width(level);
    }
    skips_.push_back(register_module("skip" + std::to_string(level), path));
  }
  bottleneck_ = register_module("bottleneck", conv_norm_act(e, decoder_width(top), 1, 1, 0, norm));
  for (int64_t level = 0; level < top; ++level) {
    ups_.push_back(register_module("up" + std::to_string(level),
                                   upconv_norm_act(decoder_width(level + 1),
                                                   decoder_width(level), norm)));
    merges_.push_back(register_module(
        "merge" + std::to_string(level),
        chain({conv_norm_act(2 * decoder_width(level), decoder_width(level), 3, 1, 1, norm),
               conv_norm_act(decoder_width(level), decoder_width(level), 3, 1, 1, norm)})));
  }
  head_ = register_module(
      "head", nn::Conv3d(nn::Conv3dOptions(config_.base_channels, config_.num_classes, 1)));
}

torch::Tensor TransformerBackboneImpl::features(const torch::Tensor& x) {
  require_divisible(x, config_.spatial_divisor(), "transformer backbone");
  if (x.size(1) != config_.in_channels) throw ShapeError("transformer backbone: channel mismatch");
  const auto top = levels();

  auto grid = patch_embed_(x);
  grid = grid + position_(grid);
  const auto n = grid.size(0);
  const auto e = grid.size(1);
  const auto g = spatial_extent(grid);
  auto to_grid = [&](const torch::Tensor& tokens) {
    return tokens.transpose(1, 2).reshape({n, e, g.h, g.w, g.d});
  };

  auto tokens = grid.flatten(2).transpose(1, 2);  // (N, T, E)
  std::vector<torch::Tensor> block_out;
  block_out.reserve(blocks_.size());
  for (auto& block : blocks_) {
    tokens = block->forward(tokens);
    block_out.push_back(tokens);
  }

  auto h = bottleneck_->forward(to_grid(tokens));
  for (int64_t level = top - 1; level >= 0; --level) {
    h = ups_[level]->forward(h);
    torch::Tensor skip = level == 0
                             ? stem_->forward(x)
                             : skips_[level - 1]->forward(to_grid(block_out[skip_block_[level - 1]]));
    h = merges_[level]->forward(torch::cat({h, skip}, 1));
  }
  return h;
}

torch::Tensor TransformerBackboneImpl::head(const torch::Tensor& features) {
  return head_(features);
}

// --------------------------------------------------------------- multiview

MultiViewWrapperImpl::MultiViewWrapperImpl(SegNet inner, ViewGeometry geometry)
    : inner_(std::move(inner)), geometry_(geometry) {
  geometry_.validate_factors();
  register_module("inner", inner_);
  const auto f = inner_->feature_channels();
  auto conv = [](int64_t in, int64_t out) {
    return nn::Conv3d(nn::Conv3dOptions(in, out, 3).padding(1));
  };
  smooth_ = register_module("smooth", nn::Sequential(conv(f, f), nn::PReLU(), conv(f, f), nn::PReLU()));
  fuse_ = register_module("fuse", nn::Sequential(conv(2 * f, f), nn::PReLU(), conv(f, f), nn::PReLU()));
  head_ = register_module("head", nn::Conv3d(nn::Conv3dOptions(f, inner_->num_classes(), 1)));
}

torch::Tensor MultiViewWrapperImpl::heads_from_views(const torch::Tensor& view_features,
                                                     const ViewGeometry& g) {
  auto parts = recompose_views(view_features, g);
  auto locals = smooth_->forward(parts.locals);
  return fuse_->forward(torch::cat({parts.global, locals}, 1));
}

torch::Tensor MultiViewWrapperImpl::features(const torch::Tensor& x) {
  auto views = decompose_views(x, geometry_);
  return heads_from_views(inner_->features(views.data), views.geometry);
}

torch::Tensor MultiViewWrapperImpl::head(const torch::Tensor& features) { return head_(features); }

MultiViewTrace MultiViewWrapperImpl::forward_traced(const torch::Tensor& x) {
  auto views = decompose_views(x, geometry_);
  auto view_features = inner_->features(views.data);
  auto logits = head_(heads_from_views(view_features, views.geometry));
  return {logits, view_features, views.geometry};
}

void MultiViewWrapperImpl::init_heads_identity() {
  torch::NoGradGuard guard;
  auto reset = [](nn::Module& m) {
    for (auto& child : m.modules(/*include_self=*/true)) {
      if (auto* conv = child->as<nn::Conv3d>()) {
        auto& w = conv->weight;
        w.zero_();
        const auto out = w.size(0);
        const auto in = w.size(1);
        const auto c = w.size(2) / 2;
        for (int64_t o = 0; o < out; ++o) w[o][o % in][c][c][c] = 1.0;
        if (conv->bias.defined()) conv->bias.zero_();
      }
    }
  };
  reset(*smooth_);
  reset(*fuse_);
  reset(*head_);
}

// ----------------------------------------------------------- discriminator

Discriminator2DImpl::Discriminator2DImpl(DiscriminatorConfig config) : config_(config) {
  config_.validate();
  body_ = nn::Sequential();
  int64_t in = 2;
  int64_t out = config_.base_channels;
  for (int64_t l = 0; l < config_.layers; ++l) {
    body_->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1)));
    body_->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
    in = out;
    out = std::min(out * 2, config_.base_channels * 8);
  }
  register_module("body", body_);
  classifier_ = register_module("classifier", nn::Linear(in, 1));
}

torch::Tensor Discriminator2DImpl::forward(const torch::Tensor& fused) {
  if (!fused.defined() || fused.dim() != 4) {
    throw ShapeError("discriminator: expected a (B, 2, H, W) input");
  }
  if (fused.size(1) != 2) {
    throw ShapeError("discriminator: expected 2 channels (image, mask), got " +
                     std::to_string(fused.size(1)));
  }
  const int64_t min_side = int64_t{1} << config_.layers;
  if (fused.size(2) < min_side || fused.size(3) < min_side) {
    throw ShapeError("discriminator: inputs must be at least " + std::to_string(min_side) +
                     " pixels per side for " + std::to_string(config_.layers) + " layers");
  }
  auto h = body_->forward(fused).mean({2, 3});
  return classifier_(h);
}

// ----------------------------------------------------------------- helpers

SegNet make_backbone(const BackboneConfig& config) {
  if (config.kind == BackboneKind::conv) return std::make_shared<ConvBackboneImpl>(config);
  return std::make_shared<TransformerBackboneImpl>(config);
}

SegNet make_m1(const ModelConfig& config) { return make_backbone(config.m1); }

SegNet make_m2(const ModelConfig& config) {
  auto inner = make_backbone(config.m2);
  if (!config.m2_multiview) return inner;
  return std::make_shared<MultiViewWrapperImpl>(std::move(inner), config.views);
}

torch::Tensor fuse_for_discriminator(const Projection2D& image, const Projection2D& mask) {
  const auto& img = image.data;
  const auto& msk = mask.data;
  if (img.dim() != 4 || msk.dim() != 4) throw ShapeError("fuse: expected (B, C, H, W) projections");
  if (img.size(0) != msk.size(0) || img.size(2) != msk.size(2) || img.size(3) != msk.size(3)) {
    throw ShapeError("fuse: image and mask projections differ in (B, H, W)");
  }
  using torch::indexing::Slice;
  auto img_channel = img.index({Slice(), Slice(0, 1)});
  auto fg = msk.size(1) == 1 ? msk : msk.index({Slice(), Slice(1, 2)});
  return torch::cat({img_channel.to(torch::kFloat), fg.to(torch::kFloat)}, 1);
}

std::vector<torch::Tensor> parameter_list(const torch::nn::Module& module) {
  return module.parameters(/*recurse=*/true);
}

}  // namespace dico
