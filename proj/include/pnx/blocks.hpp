#pragma once
// Residual sparse blocks: LSFE (three-branch with a dilated arm), D-LSFE
// (separable long-reach arm), a ConvNeXt-style inverted bottleneck, and the
// MSFE stage module chaining them behind an optional stride-2 downsample.

#include <array>
#include <vector>

#include "pnx/conv.hpp"
#include "pnx/norm.hpp"

namespace pnx {

struct NetworkConfig {
  std::array<int, 6> stage_channels = {32, 64, 128, 256, 256, 256};
  std::array<int, 6> stage_strides = {1, 2, 2, 2, 2, 2};
  int lsfe_per_stage = 2;
  std::vector<int> dilation_schedule = {2, 3};
  int fuse_channels = 256;
  int neck_repeats = 1;
  int neck_kernel = 5;
  int convnext_expand = 4;
  int num_classes = 3;
  int head_channels = 64;

  std::array<int, 6> cumulative_strides() const {
    std::array<int, 6> out{};
    int acc = 1;
    for (int i = 0; i < 6; ++i) {
      acc *= stage_strides[size_t(i)];
      out[size_t(i)] = acc;
    }
    return out;
  }

  void validate() const {
    require(stage_strides[0] == 1, Err::InvalidConfig,
            "first stage must not downsample");
    for (int s : stage_strides)
      require(s == 1 || s == 2, Err::InvalidConfig,
              "stage strides must be 1 or 2");
    for (int c : stage_channels)
      require(c > 0, Err::InvalidConfig, "stage channels must be positive");
    require(neck_kernel > 0 && neck_kernel % 2 == 1, Err::InvalidConfig,
            "neck kernel must be odd");
    require(lsfe_per_stage >= 0, Err::InvalidConfig,
            "lsfe_per_stage must be non-negative");
    require(int(dilation_schedule.size()) == lsfe_per_stage, Err::InvalidConfig,
            "dilation schedule must cover every LSFE block");
    for (int m : dilation_schedule)
      require(m >= 1, Err::InvalidConfig, "dilation rates must be >= 1");
    require(fuse_channels > 0, Err::InvalidConfig, "fuse_channels <= 0");
    require(neck_repeats >= 0, Err::InvalidConfig, "neck_repeats < 0");
    require(convnext_expand >= 1, Err::InvalidConfig, "convnext_expand < 1");
    require(num_classes >= 1, Err::InvalidConfig, "num_classes < 1");
    require(head_channels >= 1, Err::InvalidConfig, "head_channels < 1");
  }
};

// ---------------------------------------------------------------------------
// LSFE block: relu( identity + [3x3 -> BN -> relu -> 3x3 -> BN]
//                            + [3x3 dilated m -> BN] )

template <class S>
struct LsfeParams {
  int channels = 0;
  int dilation = 1;
  ConvParams<S> main1, main2, dil;
  NormParams<S> bn1, bn2, bn_dil;
};

template <class S>
inline LsfeParams<S> init_lsfe(int channels, int dilation, uint64_t seed) {
  Rng seeds = Rng::stream(seed, "lsfe");
  LsfeParams<S> p;
  p.channels = channels;
  p.dilation = dilation;
  p.main1 = init_conv_params<S>(subm2d(3, 3), channels, channels, seeds.next_u64());
  p.main2 = init_conv_params<S>(subm2d(3, 3), channels, channels, seeds.next_u64());
  p.dil = init_conv_params<S>(subm2d(3, 3, dilation), channels, channels,
                              seeds.next_u64());
  p.bn1 = init_norm_params<S>(channels);
  p.bn2 = init_norm_params<S>(channels);
  p.bn_dil = init_norm_params<S>(channels);
  return p;
}

template <class S>
inline TracedSt<S> lsfe_block(Tape<S>* tape, const TracedSt<S>& in,
                              LsfeParams<S>& p, NormMode mode) {
  require(in.channels() == p.channels, Err::ChannelMismatch,
          "lsfe_block: channel width differs from parameters");
  if (in.n() == 0) return in;
  auto rb3 = build_rulebook(in.cm, subm2d(3, 3));
  auto rbd = build_rulebook(in.cm, subm2d(3, 3, p.dilation));
  auto main = conv_forward(tape, in, rb3, p.main1);
  main = relu(tape, batchnorm_forward(tape, main, p.bn1, mode));
  main = conv_forward(tape, main, rb3, p.main2);
  main = batchnorm_forward(tape, main, p.bn2, mode);
  auto wide = batchnorm_forward(tape, conv_forward(tape, in, rbd, p.dil),
                                p.bn_dil, mode);
  return relu(tape, add(tape, add(tape, in, main), wide));
}

// ---------------------------------------------------------------------------
// D-LSFE block: relu( identity + [3x3 -> BN]
//                              + [1x9 -> BN -> relu -> 9x1 -> BN] )

template <class S>
struct DlsfeParams {
  int channels = 0;
  ConvParams<S> fine, row9, col9;
  NormParams<S> bn_fine, bn_row, bn_col;
};

template <class S>
inline DlsfeParams<S> init_dlsfe(int channels, uint64_t seed) {
  Rng seeds = Rng::stream(seed, "dlsfe");
  DlsfeParams<S> p;
  p.channels = channels;
  p.fine = init_conv_params<S>(subm2d(3, 3), channels, channels, seeds.next_u64());
  p.row9 = init_conv_params<S>(subm2d(1, 9), channels, channels, seeds.next_u64());
  p.col9 = init_conv_params<S>(subm2d(9, 1), channels, channels, seeds.next_u64());
  p.bn_fine = init_norm_params<S>(channels);
  p.bn_row = init_norm_params<S>(channels);
  p.bn_col = init_norm_params<S>(channels);
  return p;
}

template <class S>
inline TracedSt<S> dlsfe_block(Tape<S>* tape, const TracedSt<S>& in,
                               DlsfeParams<S>& p, NormMode mode) {
  require(in.channels() == p.channels, Err::ChannelMismatch,
          "dlsfe_block: channel width differs from parameters");
  if (in.n() == 0) return in;
  auto rb3 = build_rulebook(in.cm, subm2d(3, 3));
  auto rb19 = build_rulebook(in.cm, subm2d(1, 9));
  auto rb91 = build_rulebook(in.cm, subm2d(9, 1));
  auto fine = batchnorm_forward(tape, conv_forward(tape, in, rb3, p.fine),
                                p.bn_fine, mode);
  auto wide = conv_forward(tape, in, rb19, p.row9);
  wide = relu(tape, batchnorm_forward(tape, wide, p.bn_row, mode));
  wide = conv_forward(tape, wide, rb91, p.col9);
  wide = batchnorm_forward(tape, wide, p.bn_col, mode);
  return relu(tape, add(tape, add(tape, in, fine), wide));
}

// ---------------------------------------------------------------------------
// ConvNeXt-style block:
//   t + project( gelu( expand( layer_norm( depthwise5x5(t) ) ) ) )

template <class S>
struct ConvNeXtParams {
  int channels = 0;
  int kernel = 5;
  DepthwiseParams<S> dw;
  LayerNormParams<S> ln;
  ConvParams<S> expand, project;
};

template <class S>
inline ConvNeXtParams<S> init_convnext(int channels, int expand_factor,
                                       int kernel, uint64_t seed) {
  require(kernel > 0 && kernel % 2 == 1, Err::InvalidSpec,
          "convnext kernel must be odd");
  Rng seeds = Rng::stream(seed, "convnext");
  ConvNeXtParams<S> p;
  p.channels = channels;
  p.kernel = kernel;
  p.dw = init_depthwise_params<S>(subm2d(kernel, kernel), channels,
                                  seeds.next_u64());
  p.ln = init_layernorm_params<S>(channels);
  p.expand = init_conv_params<S>(subm2d(1, 1), channels,
                                 channels * expand_factor, seeds.next_u64(),
                                 /*has_bias=*/true);
  p.project = init_conv_params<S>(subm2d(1, 1), channels * expand_factor,
                                  channels, seeds.next_u64(), /*has_bias=*/true);
  return p;
}

template <class S>
inline TracedSt<S> convnext_block(Tape<S>* tape, const TracedSt<S>& in,
                                  ConvNeXtParams<S>& p, NormMode mode) {
  (void)mode;  // layer norm has no train/eval split
  require(in.channels() == p.channels, Err::ChannelMismatch,
          "convnext_block: channel width differs from parameters");
  if (in.n() == 0) return in;
  auto rbk = build_rulebook(in.cm, subm2d(p.kernel, p.kernel));
  auto rb1 = build_rulebook(in.cm, subm2d(1, 1));
  auto h = depthwise_forward(tape, in, rbk, p.dw);
  h = layernorm_forward(tape, h, p.ln);
  h = gelu(tape, conv_forward(tape, h, rb1, p.expand));
  h = conv_forward(tape, h, rb1, p.project);
  return add(tape, in, h);
}

// ---------------------------------------------------------------------------
// MSFE stage: [spatial 3x3 stride-2 conv -> BN -> relu] -> D-LSFE -> LSFEs

template <class S>
struct MsfeParams {
  bool downsample = false;
  ConvParams<S> down;
  NormParams<S> bn_down;
  DlsfeParams<S> dlsfe;
  std::vector<LsfeParams<S>> lsfes;
};

template <class S>
inline MsfeParams<S> init_msfe(int c_in, int c_out, bool downsample,
                               const std::vector<int>& dilation_schedule,
                               uint64_t seed) {
  require(downsample || c_in == c_out, Err::ChannelMismatch,
          "stage without downsample cannot change channel width");
  Rng seeds = Rng::stream(seed, "msfe");
  MsfeParams<S> p;
  p.downsample = downsample;
  if (downsample) {
    p.down = init_conv_params<S>(spatial2d(3, 3, 2, 2), c_in, c_out,
                                 seeds.next_u64());
    p.bn_down = init_norm_params<S>(c_out);
  }
  p.dlsfe = init_dlsfe<S>(c_out, seeds.next_u64());
  for (int m : dilation_schedule)
    p.lsfes.push_back(init_lsfe<S>(c_out, m, seeds.next_u64()));
  return p;
}

template <class S>
inline TracedSt<S> msfe_module(Tape<S>* tape, const TracedSt<S>& in,
                               MsfeParams<S>& p, NormMode mode) {
  TracedSt<S> h = in;
  if (p.downsample) {
    auto rbd = build_rulebook(in.cm, spatial2d(3, 3, 2, 2));
    h = conv_forward(tape, h, rbd, p.down);
    if (h.n() > 0) h = relu(tape, batchnorm_forward(tape, h, p.bn_down, mode));
  }
  h = dlsfe_block(tape, h, p.dlsfe, mode);
  for (auto& lp : p.lsfes) h = lsfe_block(tape, h, lp, mode);
  return h;
}

// ---------------------------------------------------------------------------
// Six-stage backbone

template <class S>
struct BackboneParams {
  std::vector<MsfeParams<S>> stages;  // always 6
};

template <class S>
inline BackboneParams<S> init_backbone(const NetworkConfig& cfg,
                                       uint64_t seed) {
  cfg.validate();
  Rng seeds = Rng::stream(seed, "backbone");
  BackboneParams<S> p;
  for (int i = 0; i < 6; ++i) {
    int c_in = i == 0 ? cfg.stage_channels[0] : cfg.stage_channels[size_t(i - 1)];
    p.stages.push_back(init_msfe<S>(c_in, cfg.stage_channels[size_t(i)],
                                    cfg.stage_strides[size_t(i)] == 2,
                                    cfg.dilation_schedule, seeds.next_u64()));
  }
  return p;
}

template <class S>
inline std::array<TracedSt<S>, 6> backbone_forward(Tape<S>* tape,
                                                   const TracedSt<S>& in,
                                                   BackboneParams<S>& p,
                                                   NormMode mode) {
  require(p.stages.size() == 6, Err::InvalidConfig,
          "backbone needs exactly 6 stages");
  std::array<TracedSt<S>, 6> out;
  TracedSt<S> h = in;
  for (int i = 0; i < 6; ++i) {
    h = msfe_module(tape, h, p.stages[size_t(i)], mode);
    require(h.feats.val().all_finite(), Err::NonFinite,
            "backbone stage produced a non-finite feature");
    out[size_t(i)] = h;
  }
  return out;
}

}  // namespace pnx
