#include "maskseg/model.hpp"

#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "maskseg/checkpoint.hpp"
#include "maskseg/kernels.hpp"
#include "maskseg/kvtext.hpp"

namespace maskseg {

// ---------------- config ----------------

void ModelConfig::validate() const {
  if (image_size < 32 || image_size % 32 != 0)
    throw std::invalid_argument("model: image_size must be a positive multiple of 32");
  if (embed_dim < 4 || embed_dim % 4 != 0)
    throw std::invalid_argument("model: embed_dim must be divisible by 4");
  if (heads < 1 || embed_dim % heads != 0)
    throw std::invalid_argument("model: embed_dim must be divisible by heads");
  if (queries < 1) throw std::invalid_argument("model: queries must be >= 1");
  if (repeats < 1) throw std::invalid_argument("model: repeats must be >= 1");
  if (ffn_dim < 1) throw std::invalid_argument("model: ffn_dim must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("model: num_classes must be >= 1");
  if (thing_classes < 0 || thing_classes > num_classes)
    throw std::invalid_argument("model: thing_classes must be in [0, num_classes]");
  if (mask_threshold <= 0.0 || mask_threshold >= 1.0)
    throw std::invalid_argument("model: mask_threshold must be in (0, 1)");
  if (dropout < 0.0 || dropout >= 1.0)
    throw std::invalid_argument("model: dropout must be in [0, 1)");
  for (int wdt : backbone_widths)
    if (wdt < 1) throw std::invalid_argument("model: backbone widths must be positive");
}

std::string to_string(AttentionKind v) { return v == AttentionKind::Masked ? "masked" : "cross"; }

std::string to_string(ScaleRouting v) {
  switch (v) {
    case ScaleRouting::RoundRobin: return "multi";
    case ScaleRouting::Single32: return "single-1/32";
    case ScaleRouting::Single16: return "single-1/16";
    case ScaleRouting::Single8: return "single-1/8";
  }
  return "multi";
}

std::string to_string(QueryInit v) {
  switch (v) {
    case QueryInit::LearnableSupervised: return "learnable-supervised";
    case QueryInit::LearnableUnsupervised: return "learnable-unsupervised";
    case QueryInit::ZeroInit: return "zero-init";
  }
  return "learnable-supervised";
}

AttentionKind attention_from_string(const std::string& s) {
  if (s == "masked") return AttentionKind::Masked;
  if (s == "cross") return AttentionKind::Cross;
  throw std::invalid_argument("unknown attention mode: " + s);
}

ScaleRouting routing_from_string(const std::string& s) {
  if (s == "multi") return ScaleRouting::RoundRobin;
  if (s == "single-1/32") return ScaleRouting::Single32;
  if (s == "single-1/16") return ScaleRouting::Single16;
  if (s == "single-1/8") return ScaleRouting::Single8;
  throw std::invalid_argument("unknown scale routing: " + s);
}

QueryInit query_init_from_string(const std::string& s) {
  if (s == "learnable-supervised") return QueryInit::LearnableSupervised;
  if (s == "learnable-unsupervised") return QueryInit::LearnableUnsupervised;
  if (s == "zero-init") return QueryInit::ZeroInit;
  throw std::invalid_argument("unknown query mode: " + s);
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "image_size = " << image_size << "\n";
  os << "embed_dim = " << embed_dim << "\n";
  os << "queries = " << queries << "\n";
  os << "repeats = " << repeats << "\n";
  os << "heads = " << heads << "\n";
  os << "ffn_dim = " << ffn_dim << "\n";
  os << "num_classes = " << num_classes << "\n";
  os << "thing_classes = " << thing_classes << "\n";
  os << "mask_threshold = " << mask_threshold << "\n";
  os << "backbone_widths = " << backbone_widths[0] << "," << backbone_widths[1] << ","
     << backbone_widths[2] << "," << backbone_widths[3] << "\n";
  os << "dropout = " << dropout << "\n";
  os << "layer_order = " << (self_attention_first ? "SA-MA-FFN" : "MA-SA-FFN") << "\n";
  os << "attention = " << to_string(attention) << "\n";
  os << "scales = " << to_string(routing) << "\n";
  os << "queries_mode = " << to_string(query_init) << "\n";
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig cfg;
  for (const auto& [key, value] : parse_kv_lines(text)) {
    if (key == "image_size") cfg.image_size = std::stoi(value);
    else if (key == "embed_dim") cfg.embed_dim = std::stoi(value);
    else if (key == "queries") cfg.queries = std::stoi(value);
    else if (key == "repeats") cfg.repeats = std::stoi(value);
    else if (key == "heads") cfg.heads = std::stoi(value);
    else if (key == "ffn_dim") cfg.ffn_dim = std::stoi(value);
    else if (key == "num_classes") cfg.num_classes = std::stoi(value);
    else if (key == "thing_classes") cfg.thing_classes = std::stoi(value);
    else if (key == "mask_threshold") cfg.mask_threshold = std::stod(value);
    else if (key == "backbone_widths") {
      std::istringstream is(value);
      std::string tok;
      for (int i = 0; i < 4; ++i) {
        if (!std::getline(is, tok, ',')) throw std::invalid_argument("backbone_widths: need 4 values");
        cfg.backbone_widths[i] = std::stoi(tok);
      }
    } else if (key == "dropout") cfg.dropout = std::stod(value);
    else if (key == "layer_order") {
      if (value == "MA-SA-FFN") cfg.self_attention_first = false;
      else if (value == "SA-MA-FFN") cfg.self_attention_first = true;
      else throw std::invalid_argument("unknown layer_order: " + value);
    } else if (key == "attention") cfg.attention = attention_from_string(value);
    else if (key == "scales") cfg.routing = routing_from_string(value);
    else if (key == "queries_mode") cfg.query_init = query_init_from_string(value);
    else throw std::invalid_argument("model config: unknown key: " + key);
  }
  cfg.validate();
  return cfg;
}

// ---------------- embeddings / attention bias ----------------

Tensor sinusoidal_pos_embedding(int h, int w, int c) {
  if (h < 1 || w < 1) throw std::invalid_argument("sinusoidal_pos_embedding: empty map");
  if (c % 4 != 0)
    throw std::invalid_argument("sinusoidal_pos_embedding: channels must be divisible by 4");
  int npf = c / 2;
  const double two_pi = 2.0 * M_PI;
  Tensor out = Tensor::zeros({h * w, c});
  double* po = out.data();
  std::vector<double> dim_t(npf);
  for (int k = 0; k < npf; ++k)
    dim_t[k] = std::pow(10000.0, 2.0 * (k / 2) / static_cast<double>(npf));
  for (int py = 0; py < h; ++py) {
    double ye = (py + 1.0) / h * two_pi;
    for (int px = 0; px < w; ++px) {
      double xe = (px + 1.0) / w * two_pi;
      double* row = po + (static_cast<size_t>(py) * w + px) * c;
      for (int k = 0; k < npf; ++k) {
        row[k] = (k % 2 == 0) ? std::sin(ye / dim_t[k]) : std::cos(ye / dim_t[k]);
        row[npf + k] = (k % 2 == 0) ? std::sin(xe / dim_t[k]) : std::cos(xe / dim_t[k]);
      }
    }
  }
  return out;
}

Tensor attention_bias_from_mask(const Tensor& mask_logits, int mask_h, int mask_w, int target_h,
                                int target_w) {
  if (mask_logits.rank() != 2 || mask_logits.dim(1) != mask_h * mask_w)
    throw std::invalid_argument("attention_bias_from_mask: bad mask shape");
  int n = mask_logits.dim(0);
  std::vector<double> prob(mask_logits.size());
  kernels::sigmoid(mask_logits.data(), prob.data(), prob.size());
  std::vector<double> resized(static_cast<size_t>(n) * target_h * target_w);
  kernels::bilinear_resize(prob.data(), resized.data(), n, mask_h, mask_w, target_h, target_w);
  int p = target_h * target_w;
  Tensor bias = Tensor::zeros({n, p});
  double* pb = bias.data();
  for (int i = 0; i < n; ++i) {
    bool any_fg = false;
    double* row = pb + static_cast<size_t>(i) * p;
    const double* pr = resized.data() + static_cast<size_t>(i) * p;
    for (int j = 0; j < p; ++j) {
      bool fg = pr[j] >= 0.5;
      row[j] = fg ? 0.0 : kMaskSentinel;
      any_fg = any_fg || fg;
    }
    if (!any_fg)
      for (int j = 0; j < p; ++j) row[j] = 0.0;  // empty mask: attend everywhere
  }
  return bias;
}

// ---------------- attention ----------------

Tensor attention_core(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                      const std::vector<Tensor>& qkvo_weights,
                      const std::vector<Tensor>& qkvo_biases, int heads, const Tensor* bias,
                      std::vector<double>* mean_weights) {
  int c = q_in.dim(1);
  if (c % heads != 0) throw std::invalid_argument("attention_core: dim not divisible by heads");
  int d = c / heads;
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor q = linear(q_in, qkvo_weights[0], qkvo_biases[0]);
  Tensor k = linear(k_in, qkvo_weights[1], qkvo_biases[1]);
  Tensor v = linear(v_in, qkvo_weights[2], qkvo_biases[2]);
  int n = q.dim(0), p = k.dim(0);
  if (mean_weights) mean_weights->assign(static_cast<size_t>(n) * p, 0.0);
  std::vector<Tensor> head_out;
  head_out.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * d, d);
    Tensor kh = slice_cols(k, h * d, d);
    Tensor vh = slice_cols(v, h * d, d);
    Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt_d);
    if (bias) scores = add(scores, *bias);
    Tensor attn = softmax_last(scores);
    if (mean_weights) {
      const double* pa = attn.data();
      double inv_h = 1.0 / heads;
      for (size_t i = 0; i < mean_weights->size(); ++i) (*mean_weights)[i] += pa[i] * inv_h;
    }
    head_out.push_back(matmul(attn, vh));
  }
  Tensor merged = heads == 1 ? head_out[0] : concat_cols(head_out);
  return linear(merged, qkvo_weights[3], qkvo_biases[3]);
}

Tensor masked_attention(const Tensor& x_prev, const Tensor& query_pos, const Tensor& keys_in,
                        const Tensor& values_in, const std::vector<Tensor>& qkvo_weights,
                        const std::vector<Tensor>& qkvo_biases, int heads, const Tensor* bias,
                        std::vector<double>* mean_weights) {
  Tensor core = attention_core(add(x_prev, query_pos), keys_in, values_in, qkvo_weights,
                               qkvo_biases, heads, bias, mean_weights);
  return add(core, x_prev);
}

Tensor reference_cross_attention(const Tensor& x_prev, const Tensor& query_pos,
                                 const Tensor& keys_in, const Tensor& values_in,
                                 const std::vector<Tensor>& qkvo_weights,
                                 const std::vector<Tensor>& qkvo_biases, int heads) {
  int n = x_prev.dim(0), c = x_prev.dim(1), p = keys_in.dim(0);
  int d = c / heads;
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  auto project = [&](const Tensor& in, int rows, const Tensor& w, const Tensor& b) {
    std::vector<double> out(static_cast<size_t>(rows) * c);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < c; ++j) {
        double s = b.data()[j];
        for (int l = 0; l < c; ++l) s += in.data()[i * c + l] * w.data()[l * c + j];
        out[static_cast<size_t>(i) * c + j] = s;
      }
    return out;
  };
  std::vector<double> q_src(static_cast<size_t>(n) * c);
  for (size_t i = 0; i < q_src.size(); ++i) q_src[i] = x_prev.data()[i] + query_pos.data()[i];
  Tensor q_in = Tensor::from({n, c}, q_src);
  std::vector<double> q = project(q_in, n, qkvo_weights[0], qkvo_biases[0]);
  std::vector<double> k = project(keys_in, p, qkvo_weights[1], qkvo_biases[1]);
  std::vector<double> v = project(values_in, p, qkvo_weights[2], qkvo_biases[2]);
  std::vector<double> merged(static_cast<size_t>(n) * c, 0.0);
  std::vector<double> scores(p), weights(p);
  for (int h = 0; h < heads; ++h) {
    int off = h * d;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < p; ++j) {
        double s = 0.0;
        for (int l = 0; l < d; ++l) s += q[i * c + off + l] * k[j * c + off + l];
        scores[j] = s * inv_sqrt_d;
      }
      double m = scores[0];
      for (int j = 1; j < p; ++j) m = std::max(m, scores[j]);
      double z = 0.0;
      for (int j = 0; j < p; ++j) {
        weights[j] = std::exp(scores[j] - m);
        z += weights[j];
      }
      for (int j = 0; j < p; ++j) weights[j] /= z;
      for (int l = 0; l < d; ++l) {
        double s = 0.0;
        for (int j = 0; j < p; ++j) s += weights[j] * v[j * c + off + l];
        merged[static_cast<size_t>(i) * c + off + l] = s;
      }
    }
  }
  Tensor merged_t = Tensor::from({n, c}, merged);
  std::vector<double> out = project(merged_t, n, qkvo_weights[3], qkvo_biases[3]);
  for (size_t i = 0; i < out.size(); ++i) out[i] += x_prev.data()[i];
  return Tensor::from({n, c}, out);
}

// ---------------- model ----------------

Tensor Model::add_param(const std::string& name, Tensor t, bool backbone) {
  t.set_requires_grad(true);
  params_.push_back({name, t, backbone});
  return t;
}

Tensor Model::xavier(const std::string& name, int rows, int cols, Rng& rng, bool backbone) {
  double a = std::sqrt(6.0 / (rows + cols));
  Tensor t = Tensor::zeros({rows, cols});
  for (size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-a, a);
  return add_param(name, t, backbone);
}

Tensor Model::conv_init(const std::string& name, int co, int ci, int k, Rng& rng, bool backbone) {
  double a = std::sqrt(6.0 / (ci * k * k + co * k * k));
  Tensor t = Tensor::zeros({co, ci, k, k});
  for (size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-a, a);
  return add_param(name, t, backbone);
}

Model::Attention Model::make_attention(const std::string& prefix, Rng& rng) {
  int c = cfg_.embed_dim;
  Attention at;
  at.wq = xavier(prefix + ".wq", c, c, rng);
  at.bq = add_param(prefix + ".bq", Tensor::zeros({c}));
  at.wk = xavier(prefix + ".wk", c, c, rng);
  at.bk = add_param(prefix + ".bk", Tensor::zeros({c}));
  at.wv = xavier(prefix + ".wv", c, c, rng);
  at.bv = add_param(prefix + ".bv", Tensor::zeros({c}));
  at.wo = xavier(prefix + ".wo", c, c, rng);
  at.bo = add_param(prefix + ".bo", Tensor::zeros({c}));
  return at;
}

Model::Model(const ModelConfig& cfg, Rng rng) : cfg_(cfg) {
  cfg_.validate();
  int c = cfg_.embed_dim;
  const auto& bw = cfg_.backbone_widths;

  // Backbone: two stride-2 stem convs to 1/4, then one stride-2 conv per
  // remaining stage; outputs at strides 4, 8, 16, 32.
  int bb_in[5] = {3, bw[0], bw[0], bw[1], bw[2]};
  int bb_out[5] = {bw[0], bw[0], bw[1], bw[2], bw[3]};
  for (int i = 0; i < 5; ++i) {
    std::string nm = "backbone.conv" + std::to_string(i);
    bb_w_.push_back(conv_init(nm + ".w", bb_out[i], bb_in[i], 3, rng, true));
    bb_b_.push_back(add_param(nm + ".b", Tensor::zeros({bb_out[i]}), true));
  }

  int stage_widths[4] = {bw[0], bw[1], bw[2], bw[3]};
  for (int i = 0; i < 4; ++i) {
    std::string nm = "pixel_decoder.lateral" + std::to_string(i);
    lat_w_[i] = conv_init(nm + ".w", c, stage_widths[i], 1, rng, false);
    lat_b_[i] = add_param(nm + ".b", Tensor::zeros({c}));
    nm = "pixel_decoder.smooth" + std::to_string(i);
    smooth_w_[i] = conv_init(nm + ".w", c, c, 3, rng, false);
    smooth_b_[i] = add_param(nm + ".b", Tensor::zeros({c}));
  }

  for (int i = 0; i < 3; ++i) {
    Tensor t = Tensor::zeros({1, c});
    for (size_t j = 0; j < t.size(); ++j) t.data()[j] = 0.02 * rng.normal();
    level_embed_[i] = add_param("level_embed." + std::to_string(i), t);
  }

  if (cfg_.query_init == QueryInit::ZeroInit) {
    query_feat_ = Tensor::zeros({cfg_.queries, c});  // fixed, not a parameter
  } else {
    Tensor t = Tensor::zeros({cfg_.queries, c});
    for (size_t j = 0; j < t.size(); ++j) t.data()[j] = 0.02 * rng.normal();
    query_feat_ = add_param("query_feat", t);
  }
  {
    Tensor t = Tensor::zeros({cfg_.queries, c});
    for (size_t j = 0; j < t.size(); ++j) t.data()[j] = 0.02 * rng.normal();
    query_pos_ = add_param("query_pos", t);
  }

  for (int l = 0; l < cfg_.decoder_layers(); ++l) {
    std::string nm = "decoder.layer" + std::to_string(l);
    DecoderLayer layer;
    layer.cross = make_attention(nm + ".cross", rng);
    layer.self = make_attention(nm + ".self", rng);
    layer.norm1_g = add_param(nm + ".norm1.g", Tensor::full({c}, 1.0));
    layer.norm1_b = add_param(nm + ".norm1.b", Tensor::zeros({c}));
    layer.norm2_g = add_param(nm + ".norm2.g", Tensor::full({c}, 1.0));
    layer.norm2_b = add_param(nm + ".norm2.b", Tensor::zeros({c}));
    layer.norm3_g = add_param(nm + ".norm3.g", Tensor::full({c}, 1.0));
    layer.norm3_b = add_param(nm + ".norm3.b", Tensor::zeros({c}));
    layer.ffn_w1 = xavier(nm + ".ffn.w1", c, cfg_.ffn_dim, rng);
    layer.ffn_b1 = add_param(nm + ".ffn.b1", Tensor::zeros({cfg_.ffn_dim}));
    layer.ffn_w2 = xavier(nm + ".ffn.w2", cfg_.ffn_dim, c, rng);
    layer.ffn_b2 = add_param(nm + ".ffn.b2", Tensor::zeros({c}));
    layers_.push_back(layer);
  }

  cls_w_ = xavier("head.class.w", c, cfg_.num_classes + 1, rng);
  cls_b_ = add_param("head.class.b", Tensor::zeros({cfg_.num_classes + 1}));
  mask_w1_ = xavier("head.mask.w1", c, c, rng);
  mask_b1_ = add_param("head.mask.b1", Tensor::zeros({c}));
  mask_w2_ = xavier("head.mask.w2", c, c, rng);
  mask_b2_ = add_param("head.mask.b2", Tensor::zeros({c}));
  mask_w3_ = xavier("head.mask.w3", c, c, rng);
  mask_b3_ = add_param("head.mask.b3", Tensor::zeros({c}));
}

std::array<Tensor, 4> Model::backbone_forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("backbone: image must be [3 x H x W]");
  if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0 || image.dim(1) == 0 || image.dim(2) == 0)
    throw std::invalid_argument("backbone: image extents must be positive multiples of 32");
  Tensor x = image;
  std::array<Tensor, 4> out;
  for (int i = 0; i < 5; ++i) {
    x = relu(conv2d(x, bb_w_[i], bb_b_[i], /*stride=*/2, /*pad=*/1));
    if (i >= 1) out[i - 1] = x;
  }
  return out;
}

FeaturePyramid Model::pixel_decoder_forward(const std::array<Tensor, 4>& feats) const {
  int c = cfg_.embed_dim;
  // Lateral projections, then top-down 2x upsampling with addition.
  std::array<Tensor, 4> merged;
  merged[3] = conv2d(feats[3], lat_w_[3], lat_b_[3], 1, 0);
  for (int i = 2; i >= 0; --i) {
    Tensor lat = conv2d(feats[i], lat_w_[i], lat_b_[i], 1, 0);
    Tensor up = bilinear_resize(merged[i + 1], lat.dim(1), lat.dim(2));
    merged[i] = add(lat, up);
  }
  FeaturePyramid pyr;
  for (int s = 0; s < 3; ++s) {
    int src = 3 - s;  // pyramid order: 1/32, 1/16, 1/8
    Tensor p = conv2d(merged[src], smooth_w_[src], smooth_b_[src], 1, 1);
    pyr.h[s] = p.dim(1);
    pyr.w[s] = p.dim(2);
    pyr.feats[s] = transpose2d(reshape(p, {c, p.dim(1) * p.dim(2)}));
  }
  Tensor pp = conv2d(merged[0], smooth_w_[0], smooth_b_[0], 1, 1);
  pyr.pp_h = pp.dim(1);
  pyr.pp_w = pp.dim(2);
  pyr.per_pixel = reshape(pp, {c, pyr.pp_h * pyr.pp_w});
  return pyr;
}

SegmentPrediction Model::predict_heads(const Tensor& x, const Tensor& per_pixel_flat, int pp_h,
                                       int pp_w) const {
  SegmentPrediction pred;
  pred.class_logits = linear(x, cls_w_, cls_b_);
  Tensor e = relu(linear(x, mask_w1_, mask_b1_));
  e = relu(linear(e, mask_w2_, mask_b2_));
  e = linear(e, mask_w3_, mask_b3_);
  pred.mask_logits = matmul(e, per_pixel_flat);
  pred.mask_h = pp_h;
  pred.mask_w = pp_w;
  return pred;
}

int Model::scale_for_layer(int layer, ScaleRouting routing) {
  if (layer < 1) throw std::invalid_argument("scale_for_layer: layers are 1-based");
  switch (routing) {
    case ScaleRouting::RoundRobin: return (layer - 1) % 3;
    case ScaleRouting::Single32: return 0;
    case ScaleRouting::Single16: return 1;
    case ScaleRouting::Single8: return 2;
  }
  return 0;
}

Tensor Model::decoder_layer_forward(const DecoderLayer& layer, const Tensor& x_in,
                                    const Tensor& feat, const Tensor& keys_in, const Tensor* bias,
                                    const ForwardOptions& opts,
                                    std::vector<double>* attn_mean) const {
  auto drop = [&](Tensor t) {
    if (opts.training && cfg_.dropout > 0.0) {
      if (!opts.dropout_rng)
        throw std::invalid_argument("forward: dropout enabled but no rng supplied");
      return dropout(t, cfg_.dropout, *opts.dropout_rng);
    }
    return t;
  };
  Tensor x = x_in;
  auto cross_block = [&] {
    std::vector<Tensor> w = {layer.cross.wq, layer.cross.wk, layer.cross.wv, layer.cross.wo};
    std::vector<Tensor> b = {layer.cross.bq, layer.cross.bk, layer.cross.bv, layer.cross.bo};
    Tensor core =
        attention_core(add(x, query_pos_), keys_in, feat, w, b, cfg_.heads, bias, attn_mean);
    x = layer_norm(add(x, drop(core)), layer.norm1_g, layer.norm1_b);
  };
  auto self_block = [&] {
    std::vector<Tensor> w = {layer.self.wq, layer.self.wk, layer.self.wv, layer.self.wo};
    std::vector<Tensor> b = {layer.self.bq, layer.self.bk, layer.self.bv, layer.self.bo};
    Tensor q = add(x, query_pos_);
    Tensor core = attention_core(q, q, x, w, b, cfg_.heads, nullptr, nullptr);
    x = layer_norm(add(x, drop(core)), layer.norm2_g, layer.norm2_b);
  };
  if (cfg_.self_attention_first) {
    self_block();
    cross_block();
  } else {
    cross_block();
    self_block();
  }
  Tensor f = linear(relu(linear(x, layer.ffn_w1, layer.ffn_b1)), layer.ffn_w2, layer.ffn_b2);
  return layer_norm(add(x, drop(f)), layer.norm3_g, layer.norm3_b);
}

ForwardResult Model::forward(const Tensor& image, const ForwardOptions& opts) const {
  FeaturePyramid pyr = pixel_decoder_forward(backbone_forward(image));
  std::array<Tensor, 3> keys_in;
  for (int s = 0; s < 3; ++s) {
    Tensor pos = sinusoidal_pos_embedding(pyr.h[s], pyr.w[s], cfg_.embed_dim);
    keys_in[s] = add_rowvec(add(pyr.feats[s], pos), level_embed_[s]);
  }
  ForwardResult res;
  res.predictions.reserve(cfg_.decoder_layers() + 1);
  Tensor x = query_feat_;
  res.predictions.push_back(predict_heads(x, pyr.per_pixel, pyr.pp_h, pyr.pp_w));
  for (int l = 1; l <= cfg_.decoder_layers(); ++l) {
    int s = scale_for_layer(l, cfg_.routing);
    Tensor bias;
    const Tensor* bias_ptr = nullptr;
    if (cfg_.attention == AttentionKind::Masked) {
      const SegmentPrediction& prev = res.predictions.back();
      bias = attention_bias_from_mask(prev.mask_logits, prev.mask_h, prev.mask_w, pyr.h[s],
                                      pyr.w[s]);
      bias_ptr = &bias;
    }
    std::vector<double> attn_mean;
    std::vector<double>* attn_ptr = opts.attention_out ? &attn_mean : nullptr;
    x = decoder_layer_forward(layers_[l - 1], x, pyr.feats[s], keys_in[s], bias_ptr, opts,
                              attn_ptr);
    if (opts.attention_out)
      opts.attention_out->push_back({l, s, pyr.h[s], pyr.w[s], std::move(attn_mean)});
    res.predictions.push_back(predict_heads(x, pyr.per_pixel, pyr.pp_h, pyr.pp_w));
  }
  return res;
}

void Model::save(const std::string& path) const {
  std::vector<CheckpointEntry> entries;
  entries.reserve(params_.size());
  for (const auto& p : params_) entries.push_back({p.name, p.value});
  save_checkpoint(path, cfg_.to_text(), entries);
}

Model Model::load(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  ModelConfig cfg = ModelConfig::from_text(ck.header_text);
  Model model(cfg, Rng(0));
  std::map<std::string, Tensor> by_name;
  for (const auto& e : ck.entries) by_name.emplace(e.name, e.value);
  if (by_name.size() != model.params_.size())
    throw std::runtime_error("checkpoint: parameter set does not match model config");
  for (auto& p : model.params_) {
    auto it = by_name.find(p.name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint: missing parameter " + p.name);
    if (it->second.shape() != p.value.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    p.value.vec() = it->second.vec();
  }
  return model;
}

}  // namespace maskseg
