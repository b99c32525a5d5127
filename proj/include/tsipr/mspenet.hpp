#pragma once

// Multi-scale patch embedding regression network.
//
//   image (H x W x 1)
//     -> multi-scale patch embedding       H/2  x W/2  x c
//     -> 4 x GLFIB (each /2 spatial, x2 ch) H/32 x W/32 x 16c
//     -> 3 x deconvolution (each x2)        H/4  x W/4  x d
//     -> heatmap head (1 ch) + offset head (2 ch)

#include <tsipr/core.hpp>
#include <tsipr/losses.hpp>

#include <torch/torch.h>

#include <array>
#include <cctype>
#include <cmath>
#include <string>
#include <vector>

namespace tsipr {

enum class BranchKind { Conv, Transformer };

/// Four parallel branches of one GLFIB, e.g. "CTTT".
using BranchPattern = std::array<BranchKind, 4>;

inline BranchPattern parse_branch_pattern(const std::string& text) {
  std::string letters;
  for (char ch : text)
    if (ch == 'C' || ch == 'T' || ch == 'c' || ch == 't') letters.push_back(static_cast<char>(std::toupper(ch)));
    else if (ch != ',' && ch != ' ' && ch != '[' && ch != ']')
      fail(ErrorKind::InvalidArgument, "unknown branch symbol in pattern '" + text + "'");
  if (letters.size() != 4) fail(ErrorKind::InvalidArgument, "branch pattern needs 4 entries: '" + text + "'");
  BranchPattern pattern{};
  for (std::size_t i = 0; i < 4; ++i) pattern[i] = letters[i] == 'C' ? BranchKind::Conv : BranchKind::Transformer;
  return pattern;
}

inline std::string to_string(const BranchPattern& pattern) {
  std::string out;
  for (auto kind : pattern) out.push_back(kind == BranchKind::Conv ? 'C' : 'T');
  return out;
}

struct MSPENetConfig {
  std::vector<int> patch_sizes{5, 8, 10};
  int embed_stride = 2;
  int base_channels = 32;
  std::array<BranchPattern, 4> glfib_branches{parse_branch_pattern("CTTT"), parse_branch_pattern("CTTT"),
                                              parse_branch_pattern("CTTT"), parse_branch_pattern("CTTT")};
  int attention_heads = 2;
  int input_size = 512;
  int decoder_channels = 64;
  int head_channels = 64;
  int mlp_ratio = 2;
  bool factorized_attention = true;
  bool positional_encoding = true;

  void validate() const {
    if (patch_sizes.empty()) fail(ErrorKind::Config, "mspenet needs at least one patch size");
    for (int k : patch_sizes)
      if (k < 1) fail(ErrorKind::Config, "patch sizes must be positive");
    if (embed_stride != 2) fail(ErrorKind::Config, "embed_stride must be 2 for the /4 output contract");
    if (base_channels < 1 || decoder_channels < 1 || head_channels < 1 || mlp_ratio < 1)
      fail(ErrorKind::Config, "channel widths must be positive");
    if (attention_heads < 1 || base_channels % attention_heads != 0)
      fail(ErrorKind::Config, "base_channels must be divisible by attention_heads");
    if (input_size <= 0 || input_size % 32 != 0) fail(ErrorKind::Config, "mspenet input_size must be divisible by 32");
  }
};

namespace nn_detail {

inline torch::nn::Conv2dOptions conv_opts(int64_t in, int64_t out, int64_t k, int64_t stride = 1, int64_t pad = 0,
                                          int64_t groups = 1, bool bias = true) {
  return torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).groups(groups).bias(bias);
}

inline void check_finite(const torch::Tensor& t, const std::string& stage) {
  if (!torch::isfinite(t).all().item<bool>()) fail(ErrorKind::NonFinite, stage + " produced non-finite values");
}

}  // namespace nn_detail

/// Overlapping convolutional patch embedding at several kernel sizes, fused by 1x1.
struct MultiScalePatchEmbedImpl : torch::nn::Module {
  MultiScalePatchEmbedImpl(const std::vector<int>& patch_sizes, int stride, int channels) : stride_(stride) {
    for (std::size_t i = 0; i < patch_sizes.size(); ++i) {
      const int k = patch_sizes[i];
      torch::nn::Sequential branch(
          torch::nn::Conv2d(nn_detail::conv_opts(1, channels, k, stride, (k - 1) / 2, 1, false)),
          torch::nn::BatchNorm2d(channels), torch::nn::ReLU());
      branches_.push_back(register_module("branch" + std::to_string(i) + "_k" + std::to_string(k), branch));
    }
    fuse_ = register_module(
        "fuse", torch::nn::Sequential(torch::nn::Conv2d(nn_detail::conv_opts(
                                          channels * static_cast<int64_t>(patch_sizes.size()), channels, 1, 1, 0, 1,
                                          false)),
                                      torch::nn::BatchNorm2d(channels), torch::nn::ReLU()));
  }

  /// Per-branch outputs before concatenation.
  std::vector<torch::Tensor> branch_outputs(const torch::Tensor& x) {
    std::vector<torch::Tensor> outs;
    outs.reserve(branches_.size());
    for (auto& b : branches_) outs.push_back(b->forward(x));
    for (const auto& o : outs)
      if (o.sizes() != outs.front().sizes())
        fail(ErrorKind::ShapeMismatch, "patch embedding branches disagree on output resolution");
    return outs;
  }

  torch::Tensor forward(const torch::Tensor& x) {
    if (x.size(-1) % stride_ != 0 || x.size(-2) % stride_ != 0)
      fail(ErrorKind::ShapeMismatch, "input size not divisible by the embedding stride");
    return fuse_->forward(torch::cat(branch_outputs(x), 1));
  }

 private:
  int stride_;
  std::vector<torch::nn::Sequential> branches_;
  torch::nn::Sequential fuse_{nullptr};
};
TORCH_MODULE(MultiScalePatchEmbed);

/// Depth-wise 3x3 stride-2 convolution followed by a pointwise projection.
struct ConvBranchImpl : torch::nn::Module {
  explicit ConvBranchImpl(int channels) {
    body_ = register_module(
        "body", torch::nn::Sequential(
                    torch::nn::Conv2d(nn_detail::conv_opts(channels, channels, 3, 2, 1, channels, false)),
                    torch::nn::BatchNorm2d(channels), torch::nn::ReLU(),
                    torch::nn::Conv2d(nn_detail::conv_opts(channels, channels, 1, 1, 0, 1, false)),
                    torch::nn::BatchNorm2d(channels), torch::nn::ReLU()));
  }
  torch::Tensor forward(const torch::Tensor& x) { return body_->forward(x); }

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ConvBranch);

/// Multi-head attention over a token sequence [B, N, C]. The factorized form
/// is linear in N: softmax over features of Q, softmax over tokens of K, and
/// the (d x d) context K^T V is formed before touching Q.
struct TokenAttentionImpl : torch::nn::Module {
  TokenAttentionImpl(int dim, int heads, bool factorized) : heads_(heads), factorized_(factorized) {
    qkv_ = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
    proj_ = register_module("proj", torch::nn::Linear(dim, dim));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    const auto b = x.size(0), n = x.size(1), c = x.size(2);
    const auto d = c / heads_;
    auto qkv = qkv_->forward(x).reshape({b, n, 3, heads_, d}).permute({2, 0, 3, 1, 4});
    auto q = qkv[0], k = qkv[1], v = qkv[2];
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    torch::Tensor out;
    if (factorized_) {
      auto q_soft = torch::softmax(q * scale, -1);
      auto k_soft = torch::softmax(k, -2);
      auto context = torch::matmul(k_soft.transpose(-2, -1), v);  // [B, h, d, d]
      out = torch::matmul(q_soft, context);
    } else {
      auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * scale, -1);
      out = torch::matmul(attn, v);
    }
    out = out.transpose(1, 2).reshape({b, n, c});
    return proj_->forward(out);
  }

  bool factorized() const { return factorized_; }

 private:
  int64_t heads_;
  bool factorized_;
  torch::nn::Linear qkv_{nullptr};
  torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(TokenAttention);

/// Transformer branch: 3x3 stride-2 token aggregation, optional convolutional
/// position encoding, then a pre-norm attention + MLP block.
struct TransformerBranchImpl : torch::nn::Module {
  TransformerBranchImpl(int channels, int heads, int mlp_ratio, bool factorized, bool positional,
                        bool identity_aggregation = false)
      : positional_(positional), identity_aggregation_(identity_aggregation) {
    if (!identity_aggregation_) {
      aggregate_ = register_module(
          "aggregate",
          torch::nn::Sequential(torch::nn::Conv2d(nn_detail::conv_opts(channels, channels, 3, 2, 1, channels, false)),
                                torch::nn::Conv2d(nn_detail::conv_opts(channels, channels, 1))));
    }
    if (positional_)
      pos_ = register_module("pos", torch::nn::Conv2d(nn_detail::conv_opts(channels, channels, 3, 1, 1, channels)));
    norm_tokens_ = register_module("norm_tokens", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    norm_attn_ = register_module("norm_attn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    attn_ = register_module("attn", TokenAttention(channels, heads, factorized));
    norm_mlp_ = register_module("norm_mlp", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    mlp_ = register_module("mlp", torch::nn::Sequential(torch::nn::Linear(channels, channels * mlp_ratio),
                                                        torch::nn::GELU(),
                                                        torch::nn::Linear(channels * mlp_ratio, channels)));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = identity_aggregation_ ? x : aggregate_->forward(x);
    if (positional_) y = y + pos_->forward(y);
    const auto b = y.size(0), c = y.size(1), h = y.size(2), w = y.size(3);
    auto tokens = norm_tokens_->forward(y.flatten(2).transpose(1, 2));  // [B, N, C]
    tokens = tokens + attn_->forward(norm_attn_->forward(tokens));
    tokens = tokens + mlp_->forward(norm_mlp_->forward(tokens));
    return tokens.transpose(1, 2).reshape({b, c, h, w});
  }

  /// Token-level block without aggregation or position encoding; used to
  /// check permutation equivariance.
  torch::Tensor forward_tokens(const torch::Tensor& tokens_in) {
    auto tokens = norm_tokens_->forward(tokens_in);
    tokens = tokens + attn_->forward(norm_attn_->forward(tokens));
    return tokens + mlp_->forward(norm_mlp_->forward(tokens));
  }

  TokenAttention attention() const { return attn_; }

 private:
  bool positional_;
  bool identity_aggregation_;
  torch::nn::Sequential aggregate_{nullptr};
  torch::nn::Conv2d pos_{nullptr};
  torch::nn::LayerNorm norm_tokens_{nullptr};
  torch::nn::LayerNorm norm_attn_{nullptr};
  TokenAttention attn_{nullptr};
  torch::nn::LayerNorm norm_mlp_{nullptr};
  torch::nn::Sequential mlp_{nullptr};
};
TORCH_MODULE(TransformerBranch);

/// Global-local feature interaction block: four parallel branches at half
/// resolution, concatenated to 4c and mixed by a 1x1 convolution to 2c.
struct GLFIBImpl : torch::nn::Module {
  GLFIBImpl(int channels, const BranchPattern& pattern, int heads, int mlp_ratio, bool factorized, bool positional)
      : pattern_(pattern) {
    for (std::size_t i = 0; i < pattern.size(); ++i) {
      const auto name = "branch" + std::to_string(i);
      if (pattern[i] == BranchKind::Conv)
        branches_.push_back(register_module(name, ConvBranch(channels)));
      else
        branches_.push_back(
            register_module(name, TransformerBranch(channels, heads, mlp_ratio, factorized, positional)));
    }
    fuse_ = register_module(
        "fuse", torch::nn::Sequential(torch::nn::Conv2d(nn_detail::conv_opts(4 * channels, 2 * channels, 1, 1, 0, 1,
                                                                             false)),
                                      torch::nn::BatchNorm2d(2 * channels), torch::nn::ReLU()));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    if (x.size(-1) % 2 != 0 || x.size(-2) % 2 != 0)
      fail(ErrorKind::ShapeMismatch, "GLFIB input needs even spatial dims, got " + std::to_string(x.size(-2)) + "x" +
                                         std::to_string(x.size(-1)));
    std::vector<torch::Tensor> outs;
    outs.reserve(4);
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      if (pattern_[i] == BranchKind::Conv)
        outs.push_back(std::static_pointer_cast<ConvBranchImpl>(branches_[i])->forward(x));
      else
        outs.push_back(std::static_pointer_cast<TransformerBranchImpl>(branches_[i])->forward(x));
    }
    return fuse_->forward(torch::cat(outs, 1));
  }

  const BranchPattern& pattern() const { return pattern_; }
  std::size_t attention_branch_count() const {
    return static_cast<std::size_t>(std::count(pattern_.begin(), pattern_.end(), BranchKind::Transformer));
  }

 private:
  BranchPattern pattern_;
  std::vector<std::shared_ptr<torch::nn::Module>> branches_;
  torch::nn::Sequential fuse_{nullptr};
};
TORCH_MODULE(GLFIB);

struct MSPENetImpl : torch::nn::Module {
  explicit MSPENetImpl(MSPENetConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int c = cfg_.base_channels;
    embed_ = register_module("embed", MultiScalePatchEmbed(cfg_.patch_sizes, cfg_.embed_stride, c));
    int ch = c;
    for (std::size_t i = 0; i < 4; ++i) {
      blocks_.push_back(register_module("glfib" + std::to_string(i),
                                        GLFIB(ch, cfg_.glfib_branches[i], cfg_.attention_heads, cfg_.mlp_ratio,
                                              cfg_.factorized_attention, cfg_.positional_encoding)));
      ch *= 2;
    }
    torch::nn::Sequential decoder;
    int in = ch;
    for (int i = 0; i < 3; ++i) {
      decoder->push_back(torch::nn::ConvTranspose2d(
          torch::nn::ConvTranspose2dOptions(in, cfg_.decoder_channels, 4).stride(2).padding(1).bias(false)));
      decoder->push_back(torch::nn::BatchNorm2d(cfg_.decoder_channels));
      decoder->push_back(torch::nn::ReLU());
      in = cfg_.decoder_channels;
    }
    decoder_ = register_module("decoder", decoder);

    auto head = [&](int out) {
      return torch::nn::Sequential(
          torch::nn::Conv2d(nn_detail::conv_opts(cfg_.decoder_channels, cfg_.head_channels, 3, 1, 1)),
          torch::nn::ReLU(), torch::nn::Conv2d(nn_detail::conv_opts(cfg_.head_channels, out, 1)));
    };
    heatmap_head_ = register_module("heatmap_head", head(1));
    offset_head_ = register_module("offset_head", head(2));
    // Start the heatmap near 0.1 everywhere so the focal loss is well-scaled.
    auto last = heatmap_head_->ptr<torch::nn::Conv2dImpl>(2);
    torch::NoGradGuard guard;
    last->bias.fill_(-2.19);
  }

  torch::Tensor embed(const torch::Tensor& image) { return embed_->forward(as_batch(image)); }

  torch::Tensor encode(torch::Tensor x) {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      x = blocks_[i]->forward(x);
      nn_detail::check_finite(x, "glfib" + std::to_string(i));
    }
    return x;
  }

  torch::Tensor decode(const torch::Tensor& x) { return decoder_->forward(x); }

  HeatmapPrediction heads(const torch::Tensor& x) {
    auto heat = torch::sigmoid(heatmap_head_->forward(x)).clamp(1e-4, 1.0 - 1e-4);
    return {heat, offset_head_->forward(x)};
  }

  HeatmapPrediction forward(const torch::Tensor& image) {
    const auto x = as_batch(image);
    if (x.size(-1) % 32 != 0 || x.size(-2) % 32 != 0)
      fail(ErrorKind::ShapeMismatch, "mspenet input " + std::to_string(x.size(-2)) + "x" +
                                         std::to_string(x.size(-1)) + " is not divisible by 32");
    return heads(decode(encode(embed_->forward(x))));
  }

  const MSPENetConfig& config() const { return cfg_; }
  MultiScalePatchEmbed embedding() const { return embed_; }
  GLFIB block(std::size_t i) const { return blocks_.at(i); }

  /// [H, W] / [1, H, W] / [B, 1, H, W] -> [B, 1, H, W].
  static torch::Tensor as_batch(const torch::Tensor& image) {
    if (image.dim() == 2) return image.unsqueeze(0).unsqueeze(0);
    if (image.dim() == 3) return image.unsqueeze(0);
    if (image.dim() == 4) return image;
    fail(ErrorKind::ShapeMismatch, "mspenet expects a 2D, 3D or 4D image tensor");
  }

 private:
  MSPENetConfig cfg_;
  MultiScalePatchEmbed embed_{nullptr};
  std::vector<GLFIB> blocks_;
  torch::nn::Sequential decoder_{nullptr};
  torch::nn::Sequential heatmap_head_{nullptr};
  torch::nn::Sequential offset_head_{nullptr};
};
TORCH_MODULE(MSPENet);

inline int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace tsipr
