#pragma once
#include <array>
#include <string>
#include <vector>

#include "maskseg/rng.hpp"
#include "maskseg/tensor.hpp"

namespace maskseg {

enum class AttentionKind { Masked, Cross };
enum class ScaleRouting { RoundRobin, Single32, Single16, Single8 };
enum class QueryInit { LearnableSupervised, LearnableUnsupervised, ZeroInit };

struct ModelConfig {
  int image_size = 64;
  int embed_dim = 64;  // C; divisible by 4 and by heads
  int queries = 20;    // N
  int repeats = 3;     // L; the decoder has 3L layers
  int heads = 8;
  int ffn_dim = 256;
  int num_classes = 6;   // real classes; index num_classes is "no object"
  int thing_classes = 4; // classes [0, thing_classes) are things, the rest stuff
  double mask_threshold = 0.5;
  std::array<int, 4> backbone_widths{32, 64, 128, 128};
  double dropout = 0.0;
  bool self_attention_first = false;  // standard decoder-layer order ablation
  AttentionKind attention = AttentionKind::Masked;
  ScaleRouting routing = ScaleRouting::RoundRobin;
  QueryInit query_init = QueryInit::LearnableSupervised;

  int decoder_layers() const { return 3 * repeats; }
  bool supervise_layer0() const { return query_init == QueryInit::LearnableSupervised; }
  std::vector<bool> is_thing_class() const {
    std::vector<bool> f(num_classes, false);
    for (int c = 0; c < thing_classes && c < num_classes; ++c) f[c] = true;
    return f;
  }
  void validate() const;
  std::string to_text() const;  // flat key=value block, embedded in checkpoints
  static ModelConfig from_text(const std::string& text);
  bool operator==(const ModelConfig&) const = default;
};

struct SegmentPrediction {
  Tensor class_logits;  // [N x (num_classes+1)]
  Tensor mask_logits;   // [N x (mask_h*mask_w)]
  int mask_h = 0, mask_w = 0;
};

struct FeaturePyramid {
  std::array<Tensor, 3> feats;  // [P_l x C], ordered 1/32, 1/16, 1/8
  std::array<int, 3> h{}, w{};
  Tensor per_pixel;  // [C x (pp_h*pp_w)], the 1/4 embedding map
  int pp_h = 0, pp_w = 0;
};

// Post-softmax cross/masked-attention weights of one decoder layer, averaged
// over heads. Rows sum to 1.
struct AttentionRecord {
  int layer = 0;        // 1-based
  int scale_index = 0;  // 0: 1/32, 1: 1/16, 2: 1/8
  int h = 0, w = 0;
  std::vector<double> weights;  // [N x (h*w)]
};

struct ForwardOptions {
  bool training = false;  // enables dropout when config.dropout > 0
  Rng* dropout_rng = nullptr;
  std::vector<AttentionRecord>* attention_out = nullptr;
};

struct ForwardResult {
  std::vector<SegmentPrediction> predictions;  // 3L+1 sets; index 0 is from X0
};

struct Param {
  std::string name;
  Tensor value;
  bool backbone = false;  // backbone learning-rate multiplier applies
};

// DETR-style normalized 2-D sine/cosine embedding, temperature 10000.
// Returns [h*w x c]; c must be divisible by 4.
Tensor sinusoidal_pos_embedding(int h, int w, int c);

// Additive attention bias from a mask-logit map: sigmoid, bilinear resize to
// (target_h, target_w), threshold at 0.5; 0 where foreground, sentinel where
// background. Rows that come out fully masked are reset to all zeros.
// Pure data transform; no gradient flows through it.
Tensor attention_bias_from_mask(const Tensor& mask_logits, int mask_h, int mask_w, int target_h,
                                int target_w);

// Multi-head attention body: per-head softmax(bias + Q K^T / sqrt(d)) V,
// heads concatenated and projected. No residual. weights/biases are
// {q, k, v, o}; bias is an optional [N x P] additive matrix shared across
// heads; mean_weights, when given, receives the head-averaged post-softmax
// attention ([N x P]).
Tensor attention_core(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                      const std::vector<Tensor>& qkvo_weights,
                      const std::vector<Tensor>& qkvo_biases, int heads, const Tensor* bias,
                      std::vector<double>* mean_weights = nullptr);

// softmax(bias + Q K^T / sqrt(d)) V + x_prev with Q from x_prev + query_pos.
// Zero (or absent) bias reduces this to standard cross-attention.
Tensor masked_attention(const Tensor& x_prev, const Tensor& query_pos, const Tensor& keys_in,
                        const Tensor& values_in, const std::vector<Tensor>& qkvo_weights,
                        const std::vector<Tensor>& qkvo_biases, int heads, const Tensor* bias,
                        std::vector<double>* mean_weights = nullptr);

// Independent plain-loop cross-attention (Eq.-1 style, residual included),
// kept as the reference the zero-bias masked path is checked against.
Tensor reference_cross_attention(const Tensor& x_prev, const Tensor& query_pos,
                                 const Tensor& keys_in, const Tensor& values_in,
                                 const std::vector<Tensor>& qkvo_weights,
                                 const std::vector<Tensor>& qkvo_biases, int heads);

std::string to_string(AttentionKind v);
std::string to_string(ScaleRouting v);
std::string to_string(QueryInit v);
AttentionKind attention_from_string(const std::string& s);
ScaleRouting routing_from_string(const std::string& s);
QueryInit query_init_from_string(const std::string& s);

class Model {
 public:
  Model(const ModelConfig& cfg, Rng rng);

  ForwardResult forward(const Tensor& image, const ForwardOptions& opts = {}) const;
  FeaturePyramid pixel_decoder_forward(const std::array<Tensor, 4>& backbone_feats) const;
  std::array<Tensor, 4> backbone_forward(const Tensor& image) const;
  SegmentPrediction predict_heads(const Tensor& x, const Tensor& per_pixel_flat, int pp_h,
                                  int pp_w) const;

  // Pyramid scale consumed by 1-based decoder layer `layer` under `routing`.
  static int scale_for_layer(int layer, ScaleRouting routing);

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }

  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  struct Attention {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct DecoderLayer {
    Attention cross, self;
    Tensor norm1_g, norm1_b, norm2_g, norm2_b, norm3_g, norm3_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };

  Tensor add_param(const std::string& name, Tensor t, bool backbone = false);
  Tensor xavier(const std::string& name, int rows, int cols, Rng& rng, bool backbone = false);
  Tensor conv_init(const std::string& name, int co, int ci, int k, Rng& rng, bool backbone);
  Attention make_attention(const std::string& prefix, Rng& rng);

  Tensor attention_forward(const Attention& at, const Tensor& q_in, const Tensor& k_in,
                           const Tensor& v_in, const Tensor* bias,
                           std::vector<double>* mean_weights) const;
  Tensor decoder_layer_forward(const DecoderLayer& layer, const Tensor& x, const Tensor& feat,
                               const Tensor& e_pos_lvl, const Tensor* bias,
                               const ForwardOptions& opts, std::vector<double>* attn_mean) const;

  ModelConfig cfg_;
  std::vector<Param> params_;

  // backbone: two stem convs then one conv per remaining stage
  std::vector<Tensor> bb_w_, bb_b_;
  std::array<Tensor, 4> lat_w_, lat_b_, smooth_w_, smooth_b_;
  std::array<Tensor, 3> level_embed_;
  Tensor query_feat_, query_pos_;
  std::vector<DecoderLayer> layers_;
  Tensor cls_w_, cls_b_;
  Tensor mask_w1_, mask_b1_, mask_w2_, mask_b2_, mask_w3_, mask_b3_;
};

}  // namespace maskseg
