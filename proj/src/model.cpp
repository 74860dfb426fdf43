#include "sparc/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "sparc/io.hpp"
#include "sparc/log.hpp"
#include "sparc/rng.hpp"

namespace sparc::model {

namespace {

constexpr double kInitSigma = 0.02;

double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  const double u = c * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// y = gain .* xhat + bias per row; returns y, stores xhat and 1/sigma.
Eigen::MatrixXd layernorm_forward(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain,
                                  const Eigen::VectorXd& bias, Eigen::MatrixXd& xhat,
                                  Eigen::VectorXd& rstd) {
  constexpr double eps = 1e-5;
  const Eigen::Index rows = x.rows(), d = x.cols();
  xhat.resize(rows, d);
  rstd.resize(rows);
  Eigen::MatrixXd y(rows, d);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd(r) = rs;
    xhat.row(r) = ((x.row(r).array() - mu) * rs).matrix();
    y.row(r) = xhat.row(r).cwiseProduct(gain.transpose()) + bias.transpose();
  }
  return y;
}

Eigen::MatrixXd layernorm_backward(const Eigen::MatrixXd& dy, const Eigen::MatrixXd& xhat,
                                   const Eigen::VectorXd& rstd, const Eigen::VectorXd& gain,
                                   Eigen::VectorXd* dgain, Eigen::VectorXd* dbias) {
  const Eigen::Index rows = dy.rows(), d = dy.cols();
  Eigen::MatrixXd dx(rows, d);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(gain.transpose());
    const double m1 = dxhat.mean();
    const double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
    dx.row(r) = (rstd(r) * (dxhat.array() - m1 - xhat.row(r).array() * m2)).matrix();
  }
  if (dgain != nullptr) *dgain += dy.cwiseProduct(xhat).colwise().sum().transpose();
  if (dbias != nullptr) *dbias += dy.colwise().sum().transpose();
  return dx;
}

const LoraAdapter* find_adapter(const LoraSet* adapters, const std::string& name,
                                std::size_t* index = nullptr) {
  if (adapters == nullptr) return nullptr;
  for (std::size_t i = 0; i < adapters->size(); ++i) {
    if ((*adapters)[i].target == name) {
      if (index != nullptr) *index = i;
      return &(*adapters)[i];
    }
  }
  return nullptr;
}

// y = x W (+ scale (x A) B when adapted).
Eigen::MatrixXd linear_forward(const Eigen::MatrixXd& x, const Eigen::MatrixXd& w,
                               const LoraAdapter* ad) {
  Eigen::MatrixXd y = x * w;
  if (ad != nullptr) y += ad->scale() * ((x * ad->a) * ad->b);
  return y;
}

// Accumulates dW (and adapter grads) and returns dx.
Eigen::MatrixXd linear_backward(const Eigen::MatrixXd& x, const Eigen::MatrixXd& w,
                                const Eigen::MatrixXd& dy, Eigen::MatrixXd* dw,
                                const LoraAdapter* ad, Eigen::MatrixXd* da,
                                Eigen::MatrixXd* db) {
  Eigen::MatrixXd dx = dy * w.transpose();
  if (dw != nullptr) *dw += x.transpose() * dy;
  if (ad != nullptr) {
    dx += ad->scale() * ((dy * ad->b.transpose()) * ad->a.transpose());
    if (da != nullptr) *da += ad->scale() * (x.transpose() * (dy * ad->b.transpose()));
    if (db != nullptr) *db += ad->scale() * ((x * ad->a).transpose() * dy);
  }
  return dx;
}

struct MaskedTarget {
  Eigen::Index position;  // sequence row whose logits predict `token`
  int token;
};

std::vector<MaskedTarget> collect_targets(Eigen::Index prompt_len, std::span<const int> tokens,
                                          std::span<const uint8_t> mask) {
  if (mask.size() != tokens.size()) {
    throw DimensionError("target mask length must equal token count");
  }
  std::vector<MaskedTarget> out;
  // token 0 has no in-text predecessor; a mask bit there is ignored.
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    if (mask[i] != 0) {
      out.push_back({prompt_len + static_cast<Eigen::Index>(i) - 1, tokens[i]});
    }
  }
  if (out.empty()) throw ParameterError("no unmasked target positions");
  return out;
}

}  // namespace

void TinyLMConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 ||
      max_seq < 1) {
    throw ParameterError("TinyLMConfig: all counts must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ParameterError("TinyLMConfig: d_model must be divisible by n_heads");
  }
}

TinyLM TinyLM::init(const TinyLMConfig& config) {
  config.validate();
  TinyLM lm;
  lm.config_ = config;
  Rng rng(derive_seed(config.seed, 0x7159));

  auto gaussian = [&rng](Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal(0.0, kInitSigma);
    }
    return m;
  };

  const int d = config.d_model;
  lm.embedding = gaussian(config.vocab_size, d);
  lm.layers.resize(config.n_layers);
  for (auto& layer : lm.layers) {
    layer.ln1_gain = Eigen::VectorXd::Ones(d);
    layer.ln1_bias = Eigen::VectorXd::Zero(d);
    layer.wq = gaussian(d, d);
    layer.wk = gaussian(d, d);
    layer.wv = gaussian(d, d);
    layer.wo = gaussian(d, d);
    layer.ln2_gain = Eigen::VectorXd::Ones(d);
    layer.ln2_bias = Eigen::VectorXd::Zero(d);
    layer.w1 = gaussian(d, config.d_ff);
    layer.b1 = Eigen::VectorXd::Zero(config.d_ff);
    layer.w2 = gaussian(config.d_ff, d);
    layer.b2 = Eigen::VectorXd::Zero(d);
  }
  lm.lnf_gain = Eigen::VectorXd::Ones(d);
  lm.lnf_bias = Eigen::VectorXd::Zero(d);

  lm.pos_.resize(config.max_seq, d);
  for (int p = 0; p < config.max_seq; ++p) {
    for (int i = 0; i < d; i += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(i) / d);
      lm.pos_(p, i) = std::sin(p * rate);
      if (i + 1 < d) lm.pos_(p, i + 1) = std::cos(p * rate);
    }
  }
  return lm;
}

void TinyLM::visit_tensors(const std::function<void(const TensorRef&)>& fn) {
  auto mat = [&fn](const std::string& name, Eigen::MatrixXd& m) {
    fn({name, m.data(), m.rows(), m.cols()});
  };
  auto vec = [&fn](const std::string& name, Eigen::VectorXd& v) {
    fn({name, v.data(), v.size(), 1});
  };
  mat("embedding", embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    vec(p + "ln1.gain", layers[i].ln1_gain);
    vec(p + "ln1.bias", layers[i].ln1_bias);
    mat(p + "attn.wq", layers[i].wq);
    mat(p + "attn.wk", layers[i].wk);
    mat(p + "attn.wv", layers[i].wv);
    mat(p + "attn.wo", layers[i].wo);
    vec(p + "ln2.gain", layers[i].ln2_gain);
    vec(p + "ln2.bias", layers[i].ln2_bias);
    mat(p + "mlp.w1", layers[i].w1);
    vec(p + "mlp.b1", layers[i].b1);
    mat(p + "mlp.w2", layers[i].w2);
    vec(p + "mlp.b2", layers[i].b2);
  }
  vec("final_norm.gain", lnf_gain);
  vec("final_norm.bias", lnf_bias);
}

void TinyLM::visit_tensors(const std::function<void(const std::string&, const double*,
                                                    Eigen::Index, Eigen::Index)>& fn) const {
  // const path shares the mutable enumeration
  auto& self = const_cast<TinyLM&>(*this);
  self.visit_tensors([&fn](const TensorRef& ref) {
    fn(ref.name, ref.data, ref.rows, ref.cols);
  });
}

std::vector<std::string> TinyLM::tensor_names() const {
  std::vector<std::string> names;
  visit_tensors([&names](const std::string& name, const double*, Eigen::Index, Eigen::Index) {
    names.push_back(name);
  });
  return names;
}

long long TinyLM::parameter_count() const {
  long long n = 0;
  visit_tensors([&n](const std::string&, const double*, Eigen::Index r, Eigen::Index c) {
    n += static_cast<long long>(r) * c;
  });
  return n;
}

uint64_t TinyLM::weight_digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  visit_tensors([&h](const std::string& name, const double* data, Eigen::Index r,
                     Eigen::Index c) {
    h = io::fnv1a64(name.data(), name.size(), h);
    for (Eigen::Index i = 0; i < r * c; ++i) {
      uint64_t bits = 0;
      std::memcpy(&bits, &data[i], sizeof(bits));
      unsigned char le[8];
      for (int b = 0; b < 8; ++b) le[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
      h = io::fnv1a64(le, 8, h);
    }
  });
  return h;
}

std::vector<int> tokenize_bytes(std::string_view text, int vocab_size) {
  std::vector<int> tokens;
  tokens.reserve(text.size());
  for (unsigned char ch : text) {
    if (static_cast<int>(ch) >= vocab_size) {
      throw ValidationError("byte " + std::to_string(ch) + " outside vocab of " +
                            std::to_string(vocab_size));
    }
    tokens.push_back(static_cast<int>(ch));
  }
  return tokens;
}

namespace {

// Full forward pass; fills `trace` for backward/inspection.
Eigen::MatrixXd forward_impl(const TinyLM& lm, const Eigen::MatrixXd& prompt_embeds,
                             std::span<const int> tokens, const LoraSet* adapters,
                             ForwardTrace& trace) {
  const TinyLMConfig& cfg = lm.config();
  const Eigen::Index prompt_len = prompt_embeds.rows();
  const Eigen::Index text_len = static_cast<Eigen::Index>(tokens.size());
  const Eigen::Index seq = prompt_len + text_len;
  const int d = cfg.d_model;

  if (prompt_len > 0 && prompt_embeds.cols() != d) {
    throw DimensionError("prompt embeddings must have d_model columns");
  }
  if (seq < 1) throw DimensionError("empty sequence");
  if (seq > cfg.max_seq) {
    throw DimensionError("sequence overflow: " + std::to_string(seq) + " > max_seq " +
                         std::to_string(cfg.max_seq));
  }

  Eigen::MatrixXd x(seq, d);
  for (Eigen::Index t = 0; t < prompt_len; ++t) {
    x.row(t) = prompt_embeds.row(t) + lm.positional_encoding().row(t);
  }
  for (Eigen::Index j = 0; j < text_len; ++j) {
    const int tok = tokens[static_cast<std::size_t>(j)];
    if (tok < 0 || tok >= cfg.vocab_size) {
      throw ValidationError("token id " + std::to_string(tok) + " out of range");
    }
    x.row(prompt_len + j) = lm.embedding.row(tok) + lm.positional_encoding().row(prompt_len + j);
  }
  trace.x0 = x;

  const int heads = cfg.n_heads;
  const int hd = cfg.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  trace.layers.clear();
  trace.layers.resize(lm.layers.size());
  for (std::size_t li = 0; li < lm.layers.size(); ++li) {
    const LayerWeights& w = lm.layers[li];
    LayerTrace& lt = trace.layers[li];
    const std::string prefix = "layers." + std::to_string(li) + ".";

    lt.x_in = x;
    lt.a1 = layernorm_forward(x, w.ln1_gain, w.ln1_bias, lt.ln1_hat, lt.ln1_rstd);

    lt.q = linear_forward(lt.a1, w.wq, find_adapter(adapters, prefix + "attn.wq"));
    lt.k = linear_forward(lt.a1, w.wk, find_adapter(adapters, prefix + "attn.wk"));
    lt.v = linear_forward(lt.a1, w.wv, find_adapter(adapters, prefix + "attn.wv"));

    lt.attn_probs.assign(heads, Eigen::MatrixXd::Zero(seq, seq));
    lt.ctx.resize(seq, d);
    for (int h = 0; h < heads; ++h) {
      const auto qh = lt.q.middleCols(h * hd, hd);
      const auto kh = lt.k.middleCols(h * hd, hd);
      const auto vh = lt.v.middleCols(h * hd, hd);
      Eigen::MatrixXd scores = (qh * kh.transpose()) * inv_sqrt_hd;
      Eigen::MatrixXd& probs = lt.attn_probs[h];
      for (Eigen::Index i = 0; i < seq; ++i) {
        // causal: row i attends to positions 0..i
        auto row = scores.row(i).head(i + 1);
        const double mx = row.maxCoeff();
        const Eigen::RowVectorXd e = (row.array() - mx).exp().matrix();
        probs.row(i).head(i + 1) = e / e.sum();
      }
      lt.ctx.middleCols(h * hd, hd) = probs * vh;
    }
    Eigen::MatrixXd attn_out =
        linear_forward(lt.ctx, w.wo, find_adapter(adapters, prefix + "attn.wo"));
    lt.x_mid = x + attn_out;

    lt.a2 = layernorm_forward(lt.x_mid, w.ln2_gain, w.ln2_bias, lt.ln2_hat, lt.ln2_rstd);
    lt.ffn_pre = linear_forward(lt.a2, w.w1, find_adapter(adapters, prefix + "mlp.w1"));
    lt.ffn_pre.rowwise() += w.b1.transpose();
    lt.ffn_act = lt.ffn_pre.unaryExpr([](double v) { return gelu(v); });
    Eigen::MatrixXd ffn_out =
        linear_forward(lt.ffn_act, w.w2, find_adapter(adapters, prefix + "mlp.w2"));
    ffn_out.rowwise() += w.b2.transpose();
    x = lt.x_mid + ffn_out;
  }

  trace.x_final = layernorm_forward(x, lm.lnf_gain, lm.lnf_bias, trace.lnf_hat, trace.lnf_rstd);
  return trace.x_final * lm.embedding.transpose();  // tied output head
}

}  // namespace

Eigen::MatrixXd forward_with_prompt(const TinyLM& lm, const Eigen::MatrixXd& prompt_embeds,
                                    std::span<const int> tokens, const LoraSet* adapters,
                                    ForwardTrace* trace) {
  ForwardTrace local;
  return forward_impl(lm, prompt_embeds, tokens, adapters, trace != nullptr ? *trace : local);
}

WeightGrads WeightGrads::zeros_like(const TinyLM& lm) {
  WeightGrads g;
  g.embedding = Eigen::MatrixXd::Zero(lm.embedding.rows(), lm.embedding.cols());
  g.layers.resize(lm.layers.size());
  for (std::size_t i = 0; i < lm.layers.size(); ++i) {
    const LayerWeights& w = lm.layers[i];
    LayerWeights& gw = g.layers[i];
    gw.ln1_gain = Eigen::VectorXd::Zero(w.ln1_gain.size());
    gw.ln1_bias = Eigen::VectorXd::Zero(w.ln1_bias.size());
    gw.wq = Eigen::MatrixXd::Zero(w.wq.rows(), w.wq.cols());
    gw.wk = Eigen::MatrixXd::Zero(w.wk.rows(), w.wk.cols());
    gw.wv = Eigen::MatrixXd::Zero(w.wv.rows(), w.wv.cols());
    gw.wo = Eigen::MatrixXd::Zero(w.wo.rows(), w.wo.cols());
    gw.ln2_gain = Eigen::VectorXd::Zero(w.ln2_gain.size());
    gw.ln2_bias = Eigen::VectorXd::Zero(w.ln2_bias.size());
    gw.w1 = Eigen::MatrixXd::Zero(w.w1.rows(), w.w1.cols());
    gw.b1 = Eigen::VectorXd::Zero(w.b1.size());
    gw.w2 = Eigen::MatrixXd::Zero(w.w2.rows(), w.w2.cols());
    gw.b2 = Eigen::VectorXd::Zero(w.b2.size());
  }
  g.lnf_gain = Eigen::VectorXd::Zero(lm.lnf_gain.size());
  g.lnf_bias = Eigen::VectorXd::Zero(lm.lnf_bias.size());
  return g;
}

void WeightGrads::visit(const std::function<void(const std::string&, Eigen::Index,
                                                 Eigen::Index, double*)>& fn) {
  auto mat = [&fn](const std::string& name, Eigen::MatrixXd& m) {
    fn(name, m.rows(), m.cols(), m.data());
  };
  auto vec = [&fn](const std::string& name, Eigen::VectorXd& v) {
    fn(name, v.size(), 1, v.data());
  };
  mat("embedding", embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    vec(p + "ln1.gain", layers[i].ln1_gain);
    vec(p + "ln1.bias", layers[i].ln1_bias);
    mat(p + "attn.wq", layers[i].wq);
    mat(p + "attn.wk", layers[i].wk);
    mat(p + "attn.wv", layers[i].wv);
    mat(p + "attn.wo", layers[i].wo);
    vec(p + "ln2.gain", layers[i].ln2_gain);
    vec(p + "ln2.bias", layers[i].ln2_bias);
    mat(p + "mlp.w1", layers[i].w1);
    vec(p + "mlp.b1", layers[i].b1);
    mat(p + "mlp.w2", layers[i].w2);
    vec(p + "mlp.b2", layers[i].b2);
  }
  vec("final_norm.gain", lnf_gain);
  vec("final_norm.bias", lnf_bias);
}

LossResult loss_and_grads(const TinyLM& lm, const Eigen::MatrixXd& prompt_embeds,
                          std::span<const int> tokens, std::span<const uint8_t> target_mask,
                          const GradRequest& request, const LoraSet* adapters) {
  const TinyLMConfig& cfg = lm.config();
  const Eigen::Index prompt_len = prompt_embeds.rows();
  const int d = cfg.d_model;

  ForwardTrace trace;
  const Eigen::MatrixXd logits = forward_impl(lm, prompt_embeds, tokens, adapters, trace);
  const Eigen::Index seq = logits.rows();

  const std::vector<MaskedTarget> targets = collect_targets(prompt_len, tokens, target_mask);
  const double inv_m = 1.0 / static_cast<double>(targets.size());

  LossResult result;
  Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(seq, cfg.vocab_size);
  for (const MaskedTarget& t : targets) {
    const Eigen::RowVectorXd z = logits.row(t.position);
    const double mx = z.maxCoeff();
    Eigen::RowVectorXd p = (z.array() - mx).exp().matrix();
    p /= p.sum();
    result.loss -= std::log(std::max(p(t.token), 1e-300)) * inv_m;
    dlogits.row(t.position) += p * inv_m;
    dlogits(t.position, t.token) -= inv_m;
  }

  const bool need_backward = request.prompt_grad || request.weight_grads || request.lora_grads;
  if (!need_backward) return result;

  WeightGrads grads = WeightGrads::zeros_like(lm);
  const bool wg = request.weight_grads;
  if (request.lora_grads && adapters != nullptr) {
    result.lora_grads.reserve(adapters->size());
    for (const LoraAdapter& ad : *adapters) {
      result.lora_grads.emplace_back(Eigen::MatrixXd::Zero(ad.a.rows(), ad.a.cols()),
                                     Eigen::MatrixXd::Zero(ad.b.rows(), ad.b.cols()));
    }
  }

  auto lora_slots = [&](const std::string& name, const LoraAdapter** ad, Eigen::MatrixXd** da,
                        Eigen::MatrixXd** db) {
    std::size_t idx = 0;
    *ad = find_adapter(adapters, name, &idx);
    *da = nullptr;
    *db = nullptr;
    if (*ad != nullptr && request.lora_grads) {
      *da = &result.lora_grads[idx].first;
      *db = &result.lora_grads[idx].second;
    }
  };

  // head (tied embedding)
  Eigen::MatrixXd dx = dlogits * lm.embedding;
  if (wg) grads.embedding += dlogits.transpose() * trace.x_final;

  dx = layernorm_backward(dx, trace.lnf_hat, trace.lnf_rstd, lm.lnf_gain,
                          wg ? &grads.lnf_gain : nullptr, wg ? &grads.lnf_bias : nullptr);

  const int heads = cfg.n_heads;
  const int hd = cfg.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  for (std::size_t li = lm.layers.size(); li-- > 0;) {
    const LayerWeights& w = lm.layers[li];
    const LayerTrace& lt = trace.layers[li];
    LayerWeights& gw = grads.layers[li];
    const std::string prefix = "layers." + std::to_string(li) + ".";
    const LoraAdapter* ad;
    Eigen::MatrixXd *da, *db;

    // FFN block: x_out = x_mid + W2(gelu(W1 a2 + b1)) + b2
    const Eigen::MatrixXd& dffn_out = dx;
    if (wg) gw.b2 += dffn_out.colwise().sum().transpose();
    lora_slots(prefix + "mlp.w2", &ad, &da, &db);
    Eigen::MatrixXd dact =
        linear_backward(lt.ffn_act, w.w2, dffn_out, wg ? &gw.w2 : nullptr, ad, da, db);
    Eigen::MatrixXd dpre = dact.cwiseProduct(
        lt.ffn_pre.unaryExpr([](double v) { return gelu_grad(v); }));
    if (wg) gw.b1 += dpre.colwise().sum().transpose();
    lora_slots(prefix + "mlp.w1", &ad, &da, &db);
    Eigen::MatrixXd da2 =
        linear_backward(lt.a2, w.w1, dpre, wg ? &gw.w1 : nullptr, ad, da, db);

    Eigen::MatrixXd dx_mid =
        dx + layernorm_backward(da2, lt.ln2_hat, lt.ln2_rstd, w.ln2_gain,
                                wg ? &gw.ln2_gain : nullptr, wg ? &gw.ln2_bias : nullptr);

    // attention block: x_mid = x_in + Wo ctx
    lora_slots(prefix + "attn.wo", &ad, &da, &db);
    Eigen::MatrixXd dctx =
        linear_backward(lt.ctx, w.wo, dx_mid, wg ? &gw.wo : nullptr, ad, da, db);

    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(seq, d);
    Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(seq, d);
    Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(seq, d);
    for (int h = 0; h < heads; ++h) {
      const Eigen::MatrixXd& probs = lt.attn_probs[h];
      const auto kh = lt.k.middleCols(h * hd, hd);
      const auto qh = lt.q.middleCols(h * hd, hd);
      const auto vh = lt.v.middleCols(h * hd, hd);
      const auto do_h = dctx.middleCols(h * hd, hd);

      Eigen::MatrixXd dprobs = do_h * vh.transpose();
      dv.middleCols(h * hd, hd) = probs.transpose() * do_h;

      Eigen::MatrixXd dscores(seq, seq);
      for (Eigen::Index i = 0; i < seq; ++i) {
        const auto p = probs.row(i).head(i + 1);
        const auto dp = dprobs.row(i).head(i + 1);
        const double dot = dp.cwiseProduct(p).sum();
        dscores.row(i).setZero();
        dscores.row(i).head(i + 1) = (p.array() * (dp.array() - dot)).matrix();
      }
      dq.middleCols(h * hd, hd) = (dscores * kh) * inv_sqrt_hd;
      dk.middleCols(h * hd, hd) = (dscores.transpose() * qh) * inv_sqrt_hd;
    }

    Eigen::MatrixXd da1(seq, d);
    lora_slots(prefix + "attn.wq", &ad, &da, &db);
    da1 = linear_backward(lt.a1, w.wq, dq, wg ? &gw.wq : nullptr, ad, da, db);
    lora_slots(prefix + "attn.wk", &ad, &da, &db);
    da1 += linear_backward(lt.a1, w.wk, dk, wg ? &gw.wk : nullptr, ad, da, db);
    lora_slots(prefix + "attn.wv", &ad, &da, &db);
    da1 += linear_backward(lt.a1, w.wv, dv, wg ? &gw.wv : nullptr, ad, da, db);

    dx = dx_mid + layernorm_backward(da1, lt.ln1_hat, lt.ln1_rstd, w.ln1_gain,
                                     wg ? &gw.ln1_gain : nullptr, wg ? &gw.ln1_bias : nullptr);
  }

  if (request.prompt_grad) result.prompt_grad = dx.topRows(prompt_len);
  if (wg) {
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      grads.embedding.row(tokens[j]) += dx.row(prompt_len + static_cast<Eigen::Index>(j));
    }
    result.weight_grads = std::move(grads);
  }
  return result;
}

std::pair<double, Eigen::MatrixXd> loss_and_prompt_grad(const TinyLM& lm,
                                                        const Eigen::MatrixXd& prompt_embeds,
                                                        std::span<const int> tokens,
                                                        std::span<const uint8_t> target_mask) {
  GradRequest req;
  req.prompt_grad = true;
  LossResult r = loss_and_grads(lm, prompt_embeds, tokens, target_mask, req);
  return {r.loss, std::move(r.prompt_grad)};
}

void Adam::step(const std::vector<ParamSlot>& slots) {
  if (m_.empty()) {
    m_.reserve(slots.size());
    v_.reserve(slots.size());
    for (const ParamSlot& s : slots) {
      m_.emplace_back(Eigen::VectorXd::Zero(s.size));
      v_.emplace_back(Eigen::VectorXd::Zero(s.size));
    }
  }
  if (m_.size() != slots.size()) throw ParameterError("Adam: slot layout changed");

  double scale = 1.0;
  if (opts_.clip > 0.0) {
    double sq = 0.0;
    for (const ParamSlot& s : slots) {
      sq += Eigen::Map<const Eigen::VectorXd>(s.grad, s.size).squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > opts_.clip) scale = opts_.clip / norm;
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, t_);
  const double bc2 = 1.0 - std::pow(opts_.beta2, t_);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    Eigen::Map<Eigen::VectorXd> p(slots[i].param, slots[i].size);
    Eigen::Map<const Eigen::VectorXd> g(slots[i].grad, slots[i].size);
    m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * scale * g;
    v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * (scale * g).cwiseAbs2();
    p.array() -=
        opts_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opts_.eps);
  }
}

PretrainResult pretrain_base(std::span<const int> corpus, const TinyLMConfig& config,
                             int steps, const PretrainOpts& opts) {
  config.validate();
  if (corpus.size() < 2) throw DataError("pretrain corpus is empty or too small");
  if (steps < 1) throw ParameterError("pretrain steps must be >= 1");

  const int window = std::min<int>(opts.window, config.max_seq - 1);
  const std::size_t holdout_len = std::max<std::size_t>(
      static_cast<std::size_t>(static_cast<double>(corpus.size()) * opts.holdout_fraction),
      std::min<std::size_t>(corpus.size() / 2, static_cast<std::size_t>(window) + 1));
  const std::size_t train_len = corpus.size() - holdout_len;
  std::span<const int> train = corpus.subspan(0, std::max<std::size_t>(train_len, 2));
  std::span<const int> holdout =
      train_len >= 2 ? corpus.subspan(train_len) : corpus;  // tiny corpora train on all

  TinyLM lm = TinyLM::init(config);
  Adam adam({opts.lr, 0.9, 0.999, 1e-8, opts.clip});
  Rng rng(derive_seed(config.seed, 0xBA5E));

  WeightGrads accum = WeightGrads::zeros_like(lm);
  PretrainResult result;
  result.loss_curve.reserve(static_cast<std::size_t>(steps));

  GradRequest req;
  req.prompt_grad = false;
  req.weight_grads = true;
  const Eigen::MatrixXd no_prompt(0, config.d_model);

  for (int step = 0; step < steps; ++step) {
    accum.visit([](const std::string&, Eigen::Index r, Eigen::Index c, double* p) {
      Eigen::Map<Eigen::MatrixXd>(p, r, c).setZero();
    });
    double batch_loss = 0.0;
    for (int b = 0; b < opts.batch; ++b) {
      const int len = std::min<int>(window + 1, static_cast<int>(train.size()));
      const std::size_t max_start = train.size() - static_cast<std::size_t>(len);
      const std::size_t start =
          max_start > 0 ? static_cast<std::size_t>(rng.uniform_int(0, static_cast<int64_t>(max_start))) : 0;
      std::span<const int> tokens = train.subspan(start, static_cast<std::size_t>(len));
      std::vector<uint8_t> mask(tokens.size(), 1);
      mask[0] = 0;

      LossResult lr = loss_and_grads(lm, no_prompt, tokens, mask, req);
      batch_loss += lr.loss;
      // mean over the batch
      WeightGrads& g = *lr.weight_grads;
      std::vector<double*> dst;
      accum.visit([&dst](const std::string&, Eigen::Index, Eigen::Index, double* p) {
        dst.push_back(p);
      });
      std::size_t gi = 0;
      g.visit([&](const std::string&, Eigen::Index r, Eigen::Index c, double* p) {
        Eigen::Map<Eigen::MatrixXd>(dst[gi++], r, c) +=
            Eigen::Map<Eigen::MatrixXd>(p, r, c) / opts.batch;
      });
    }
    result.loss_curve.push_back(batch_loss / opts.batch);

    std::vector<ParamSlot> slots;
    std::vector<const double*> gptrs;
    accum.visit([&gptrs](const std::string&, Eigen::Index, Eigen::Index, double* p) {
      gptrs.push_back(p);
    });
    std::size_t si = 0;
    lm.visit_tensors([&](const TensorRef& ref) {
      slots.push_back({ref.data, gptrs[si++], ref.size()});
    });
    adam.step(slots);
  }

  // held-out loss: non-overlapping windows, token-weighted
  double total_ce = 0.0;
  std::size_t total_targets = 0;
  for (std::size_t start = 0; start + 2 <= holdout.size();
       start += static_cast<std::size_t>(window)) {
    const std::size_t len =
        std::min<std::size_t>(static_cast<std::size_t>(window) + 1, holdout.size() - start);
    if (len < 2) break;
    std::span<const int> tokens = holdout.subspan(start, len);
    std::vector<uint8_t> mask(tokens.size(), 1);
    mask[0] = 0;
    GradRequest none;
    none.prompt_grad = false;
    LossResult lr = loss_and_grads(lm, no_prompt, tokens, mask, none);
    total_ce += lr.loss * static_cast<double>(len - 1);
    total_targets += len - 1;
  }
  result.holdout_loss = total_targets > 0 ? total_ce / static_cast<double>(total_targets) : 0.0;

  lm.freeze();
  result.lm = std::move(lm);
  return result;
}

EmbeddingBatch embed_dataset(const TinyLM& lm, const std::vector<std::string>& docs,
                             Pooling pooling, const std::string& source_id) {
  if (!lm.frozen()) throw ParameterError("embed_dataset requires a frozen model");
  if (docs.empty()) throw DataError("embed_dataset: no documents");

  const TinyLMConfig& cfg = lm.config();
  EmbeddingBatch batch;
  batch.source = source_id;
  batch.pooling = pooling;
  batch.x.resize(static_cast<Eigen::Index>(docs.size()), cfg.d_model);

  const Eigen::MatrixXd no_prompt(0, cfg.d_model);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    std::vector<int> tokens = tokenize_bytes(docs[i], cfg.vocab_size);
    if (tokens.empty()) throw DataError("embed_dataset: empty document at index " +
                                        std::to_string(i));
    if (static_cast<int>(tokens.size()) > cfg.max_seq) {
      tokens.resize(static_cast<std::size_t>(cfg.max_seq));
      ++batch.truncated;
    }
    if (pooling == Pooling::mean_tokens) {
      Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(cfg.d_model);
      for (int tok : tokens) mean += lm.embedding.row(tok);
      batch.x.row(static_cast<Eigen::Index>(i)) = mean / static_cast<double>(tokens.size());
    } else {
      ForwardTrace trace;
      forward_with_prompt(lm, no_prompt, tokens, nullptr, &trace);
      batch.x.row(static_cast<Eigen::Index>(i)) = trace.x_final.colwise().mean();
    }
  }
  if (batch.truncated > 0) {
    log::warn("embed_dataset: truncated " + std::to_string(batch.truncated) + " of " +
              std::to_string(docs.size()) + " documents to max_seq");
  }
  return batch;
}

std::vector<std::string> lora_default_targets(const TinyLMConfig& config) {
  std::vector<std::string> targets;
  for (int i = 0; i < config.n_layers; ++i) {
    targets.push_back("layers." + std::to_string(i) + ".attn.wq");
    targets.push_back("layers." + std::to_string(i) + ".attn.wv");
  }
  return targets;
}

LoraSet attach_lora(const TinyLM& lm, const std::vector<std::string>& targets, int rank,
                    double alpha, uint64_t seed) {
  if (rank < 1) throw ParameterError("lora rank must be >= 1");
  // adaptable projections and their (in, out) shapes
  std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> adaptable;
  lm.visit_tensors([&adaptable](const std::string& name, const double*, Eigen::Index r,
                                Eigen::Index c) {
    const bool is_projection = name.find(".attn.w") != std::string::npos ||
                               name.find(".mlp.w") != std::string::npos;
    if (is_projection) adaptable.emplace_back(name, std::make_pair(r, c));
  });

  LoraSet set;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto it = std::find_if(adaptable.begin(), adaptable.end(),
                                 [&](const auto& a) { return a.first == targets[i]; });
    if (it == adaptable.end()) {
      throw ParameterError("attach_lora: unknown target '" + targets[i] + "'");
    }
    const auto [in, out] = it->second;
    LoraAdapter ad;
    ad.target = targets[i];
    ad.rank = rank;
    ad.alpha = alpha;
    Rng rng(derive_seed(seed, 0x10A0 + i));
    ad.a.resize(in, rank);
    for (Eigen::Index r = 0; r < in; ++r) {
      for (Eigen::Index c = 0; c < rank; ++c) ad.a(r, c) = rng.normal(0.0, 0.01);
    }
    ad.b = Eigen::MatrixXd::Zero(rank, out);
    set.push_back(std::move(ad));
  }
  return set;
}

ParamCount count_trainable(std::optional<std::pair<int, int>> prompt_dims,
                           const LoraSet* adapters, const TinyLM& lm) {
  ParamCount count;
  if (prompt_dims.has_value()) {
    count.trainable +=
        static_cast<long long>(prompt_dims->first) * prompt_dims->second;
  }
  if (adapters != nullptr) {
    for (const LoraAdapter& ad : *adapters) count.trainable += ad.parameter_count();
  }
  count.total = lm.parameter_count();
  count.fraction =
      count.total > 0 ? static_cast<double>(count.trainable) / static_cast<double>(count.total)
                      : 0.0;
  return count;
}

namespace {
constexpr char kCheckpointMagic[4] = {'S', 'P', 'L', 'M'};
constexpr uint16_t kCheckpointVersion = 1;
}  // namespace

void save_checkpoint(const TinyLM& lm, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os.write(kCheckpointMagic, 4);
  io::write_u16(os, kCheckpointVersion);
  const TinyLMConfig& c = lm.config();
  io::write_u32(os, static_cast<uint32_t>(c.vocab_size));
  io::write_u32(os, static_cast<uint32_t>(c.d_model));
  io::write_u32(os, static_cast<uint32_t>(c.n_layers));
  io::write_u32(os, static_cast<uint32_t>(c.n_heads));
  io::write_u32(os, static_cast<uint32_t>(c.d_ff));
  io::write_u32(os, static_cast<uint32_t>(c.max_seq));
  io::write_u64(os, c.seed);
  os.put(lm.frozen() ? 1 : 0);

  std::vector<std::string> names = lm.tensor_names();
  io::write_u32(os, static_cast<uint32_t>(names.size()));
  lm.visit_tensors([&os](const std::string& name, const double* data, Eigen::Index r,
                         Eigen::Index c) {
    io::write_string(os, name);
    io::write_matrix(os, Eigen::Map<const Eigen::MatrixXd>(data, r, c));
  });
  io::write_u64(os, lm.weight_digest());
  if (!os) throw DataError("write failed: " + path.string());
}

TinyLM load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for reading: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw StoreError(StoreError::Code::bad_magic, "not an SPLM checkpoint: " + path.string());
  }
  const uint16_t version = io::read_u16(is);
  if (version != kCheckpointVersion) {
    throw StoreError(StoreError::Code::version_mismatch,
                     "unsupported checkpoint version " + std::to_string(version));
  }
  TinyLMConfig config;
  config.vocab_size = static_cast<int>(io::read_u32(is));
  config.d_model = static_cast<int>(io::read_u32(is));
  config.n_layers = static_cast<int>(io::read_u32(is));
  config.n_heads = static_cast<int>(io::read_u32(is));
  config.d_ff = static_cast<int>(io::read_u32(is));
  config.max_seq = static_cast<int>(io::read_u32(is));
  config.seed = io::read_u64(is);
  const int frozen = is.get();
  if (frozen == EOF) throw StoreError(StoreError::Code::truncated, "truncated checkpoint");

  TinyLM lm = TinyLM::init(config);
  const uint32_t tensor_count = io::read_u32(is);
  std::vector<std::pair<std::string, Eigen::MatrixXd>> loaded;
  for (uint32_t i = 0; i < tensor_count; ++i) {
    std::string name = io::read_string(is);
    loaded.emplace_back(std::move(name), io::read_matrix(is));
  }
  const uint64_t stored_digest = io::read_u64(is);

  std::size_t next = 0;
  lm.visit_tensors([&](const TensorRef& ref) {
    if (next >= loaded.size() || loaded[next].first != ref.name ||
        loaded[next].second.rows() != ref.rows || loaded[next].second.cols() != ref.cols) {
      throw DataError("checkpoint tensor mismatch at '" + ref.name + "'");
    }
    Eigen::Map<Eigen::MatrixXd>(ref.data, ref.rows, ref.cols) = loaded[next].second;
    ++next;
  });
  if (next != loaded.size()) throw DataError("checkpoint has extra tensors");

  if (lm.weight_digest() != stored_digest) {
    throw StoreError(StoreError::Code::digest_mismatch,
                     "checkpoint digest mismatch: " + path.string());
  }
  if (frozen != 0) lm.freeze();
  return lm;
}

}  // namespace sparc::model
