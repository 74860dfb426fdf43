#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparc/error.hpp"

// A small frozen decoder-only transformer over byte-level tokens. Supplies
// dataset embeddings, forward passes with prepended prompt embeddings,
// gradients w.r.t. those prompt embeddings (and, for the fine-tuning
// baseline, w.r.t. all weights), and additive low-rank adapters.

namespace sparc::model {

struct TinyLMConfig {
  int vocab_size = 256;  // byte-level
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq = 256;
  uint64_t seed = 0;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }
};

enum class Pooling { mean_tokens, last_hidden_mean };

// Linear weights are applied as y = x * W, biases row-broadcast.
struct LayerWeights {
  Eigen::VectorXd ln1_gain, ln1_bias;
  Eigen::MatrixXd wq, wk, wv, wo;  // d_model x d_model
  Eigen::VectorXd ln2_gain, ln2_bias;
  Eigen::MatrixXd w1;  // d_model x d_ff
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // d_ff x d_model
  Eigen::VectorXd b2;
};

// Mutable view over one named weight tensor (vectors appear as n x 1).
struct TensorRef {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;
  Eigen::Index size() const { return rows * cols; }
};

class TinyLM {
 public:
  // Seeded Gaussian init (sigma 0.02, layer norms at identity), unfrozen.
  static TinyLM init(const TinyLMConfig& config);

  const TinyLMConfig& config() const { return config_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  // Content hash over all weights; constant while the model is frozen.
  uint64_t weight_digest() const;

  // Enumerates every trainable tensor in a fixed order.
  void visit_tensors(const std::function<void(const TensorRef&)>& fn);
  void visit_tensors(const std::function<void(const std::string&, const double*,
                                              Eigen::Index, Eigen::Index)>& fn) const;
  std::vector<std::string> tensor_names() const;
  long long parameter_count() const;

  // Fixed sinusoidal table, max_seq x d_model. Not trainable.
  const Eigen::MatrixXd& positional_encoding() const { return pos_; }

  Eigen::MatrixXd embedding;  // vocab x d_model, also the (tied) output head
  std::vector<LayerWeights> layers;
  Eigen::VectorXd lnf_gain, lnf_bias;

 private:
  TinyLMConfig config_;
  Eigen::MatrixXd pos_;
  bool frozen_ = false;
};

// Low-rank additive delta on one named weight: W_eff = W + (alpha/rank) A B.
struct LoraAdapter {
  std::string target;
  Eigen::MatrixXd a;  // d x rank
  Eigen::MatrixXd b;  // rank x d'
  int rank = 0;
  double alpha = 0.0;
  double scale() const { return alpha / rank; }
  long long parameter_count() const { return a.size() + b.size(); }
};
using LoraSet = std::vector<LoraAdapter>;

// A tokenized training/eval item. target_mask[i] != 0 marks token i as a
// prediction target (predicted from the position before it; i >= 1).
struct Sequence {
  std::vector<int> tokens;
  std::vector<uint8_t> target_mask;
};

std::vector<int> tokenize_bytes(std::string_view text, int vocab_size);

// --- forward / backward ---

// Per-layer activations kept for the backward pass and for inspection.
struct LayerTrace {
  Eigen::MatrixXd x_in;
  Eigen::MatrixXd ln1_hat;  // normalized pre-gain activations
  Eigen::VectorXd ln1_rstd;
  Eigen::MatrixXd a1;  // ln1 output
  Eigen::MatrixXd q, k, v;
  std::vector<Eigen::MatrixXd> attn_probs;  // per head, L x L
  Eigen::MatrixXd ctx;                      // concatenated head outputs
  Eigen::MatrixXd x_mid;
  Eigen::MatrixXd ln2_hat;
  Eigen::VectorXd ln2_rstd;
  Eigen::MatrixXd a2;
  Eigen::MatrixXd ffn_pre;  // pre-GELU
  Eigen::MatrixXd ffn_act;
};

struct ForwardTrace {
  Eigen::MatrixXd x0;  // input embeddings incl. positional term
  std::vector<LayerTrace> layers;
  Eigen::MatrixXd lnf_hat;
  Eigen::VectorXd lnf_rstd;
  Eigen::MatrixXd x_final;
};

// Logits for [prompt_embeds; tokens]; prompt_embeds may have zero rows, in
// which case the result is identical to a plain forward pass.
Eigen::MatrixXd forward_with_prompt(const TinyLM& lm, const Eigen::MatrixXd& prompt_embeds,
                                    std::span<const int> tokens,
                                    const LoraSet* adapters = nullptr,
                                    ForwardTrace* trace = nullptr);

struct WeightGrads {
  Eigen::MatrixXd embedding;
  std::vector<LayerWeights> layers;
  Eigen::VectorXd lnf_gain, lnf_bias;
  static WeightGrads zeros_like(const TinyLM& lm);
  void visit(const std::function<void(const std::string&, Eigen::Index, Eigen::Index,
                                      double*)>& fn);
};

struct GradRequest {
  bool prompt_grad = true;
  bool weight_grads = false;
  bool lora_grads = false;
};

struct LossResult {
  double loss = 0.0;
  Eigen::MatrixXd prompt_grad;                           // T x D, when requested
  std::optional<WeightGrads> weight_grads;               // when requested
  std::vector<std::pair<Eigen::MatrixXd, Eigen::MatrixXd>> lora_grads;  // (dA, dB)
};

// Mean next-token cross-entropy over target positions, plus the requested
// gradients. Model weights are never touched.
LossResult loss_and_grads(const TinyLM& lm, const Eigen::MatrixXd& prompt_embeds,
                          std::span<const int> tokens, std::span<const uint8_t> target_mask,
                          const GradRequest& request, const LoraSet* adapters = nullptr);

std::pair<double, Eigen::MatrixXd> loss_and_prompt_grad(const TinyLM& lm,
                                                        const Eigen::MatrixXd& prompt_embeds,
                                                        std::span<const int> tokens,
                                                        std::span<const uint8_t> target_mask);

// --- pretraining ---

struct PretrainOpts {
  int batch = 8;
  int window = 64;
  double lr = 1e-3;
  double clip = 1.0;
  double holdout_fraction = 0.1;
};

struct PretrainResult {
  TinyLM lm;
  double holdout_loss = 0.0;
  std::vector<double> loss_curve;
};

// Trains a fresh model on the token stream and returns it frozen, together
// with next-token cross-entropy on a held-out slice.
PretrainResult pretrain_base(std::span<const int> corpus, const TinyLMConfig& config,
                             int steps, const PretrainOpts& opts = {});

// --- embeddings ---

struct EmbeddingBatch {
  Eigen::MatrixXd x;  // one row per document
  std::string source;
  Pooling pooling = Pooling::last_hidden_mean;
  int truncated = 0;  // documents cut to max_seq
};

EmbeddingBatch embed_dataset(const TinyLM& lm, const std::vector<std::string>& docs,
                             Pooling pooling, const std::string& source_id = "");

// --- LoRA ---

std::vector<std::string> lora_default_targets(const TinyLMConfig& config);

// A ~ N(0, 0.01^2) seeded, B = 0, so the initial delta vanishes.
LoraSet attach_lora(const TinyLM& lm, const std::vector<std::string>& targets, int rank,
                    double alpha, uint64_t seed = 0);

struct ParamCount {
  long long trainable = 0;
  long long total = 0;
  double fraction = 0.0;
};

// prompt_dims = (T, K) when a soft prompt is in play.
ParamCount count_trainable(std::optional<std::pair<int, int>> prompt_dims,
                           const LoraSet* adapters, const TinyLM& lm);

// --- optimizer ---

struct AdamOpts {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 1.0;  // global gradient norm; <= 0 disables
};

// One parameter/gradient pair registered with the optimizer.
struct ParamSlot {
  double* param;
  const double* grad;
  Eigen::Index size;
};

class Adam {
 public:
  explicit Adam(const AdamOpts& opts) : opts_(opts) {}
  // Slot layout must be identical on every call.
  void step(const std::vector<ParamSlot>& slots);

 private:
  AdamOpts opts_;
  std::vector<Eigen::VectorXd> m_, v_;
  long t_ = 0;
};

// --- checkpoint: magic "SPLM", config, tensors, digest ---

void save_checkpoint(const TinyLM& lm, const std::filesystem::path& path);
TinyLM load_checkpoint(const std::filesystem::path& path);

}  // namespace sparc::model
