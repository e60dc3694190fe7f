#pragma once

// Class-conditional autoregressive token-grid generator.
//
// The input sequence is [class token, x_1, ..., x_{N-1}] and row t of the
// logits predicts x_{t+1}. Blocks are pre-norm residual:
//   x += Attention(RMSNorm(x));  x += SwiGLU(RMSNorm(x)).
// The class token sits at scan position 0; image token x_t sits at scan
// position t, so row boundaries fall on t = w, 2w, ...

#include "lasad/attention.hpp"
#include "lasad/spatial_decay.hpp"
#include "lasad/tensor.hpp"
#include "lasad/token_grid.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lasad {

enum class AttentionKind {
  softmax,         ///< causal softmax attention with rotary positions in every layer
  linear,          ///< elu+1 kernel, no decay, RMS output norm
  constant_decay,  ///< elu+1 kernel, fixed scalar decay
  data_dependent,  ///< independent key, sigmoid-gated per-channel decay
  hgrn2,           ///< key tied to 1 - decay, no spatial override
  lasad,           ///< hgrn2 with the row-boundary override
  hybrid,          ///< lasad layers with one softmax layer at index layers / 2
};

std::string to_string(AttentionKind kind);
AttentionKind parse_attention_kind(std::string_view name);
std::string to_string(BoundaryMode mode);
BoundaryMode parse_boundary_mode(std::string_view name);

struct ModelConfig {
  int layers = 2;
  int hidden = 64;
  int heads = 2;
  int vocab = 16;
  int grid_width = 4;
  int grid_height = 4;
  int classes = 4;
  AttentionKind attention = AttentionKind::lasad;
  double constant_decay = 0.9;
  BoundaryMode boundary = BoundaryMode::retain;
  /// When set, the class token is position 1 of the row-boundary count and
  /// image token t is position t + 1; by default image token t is position t.
  bool count_class_token = false;
  double cfg_dropout = 0.1;
  /// SwiGLU hidden size is floor(8 * hidden / 3) rounded up to this multiple.
  int mlp_multiple = 32;
  double norm_eps = 1e-6;
  double rope_base = 10000.0;

  /// nano, micro, B, L, XL, XXL.
  static ModelConfig preset(std::string_view name);

  int seq_len() const { return grid_width * grid_height; }
  int head_dim() const { return hidden / heads; }
  int mlp_hidden() const;
  int null_label() const { return classes; }
  /// Boundary-count position of the class token.
  Index first_position() const { return count_class_token ? 1 : 0; }
  /// Attention used by layer `index` (resolves the hybrid layout).
  AttentionKind layer_kind(int index) const;
  void validate() const;

  /// key=value lines, one per field, in a fixed order.
  std::vector<std::pair<std::string, std::string>> to_pairs() const;
  /// Applies one key=value; returns false for an unknown key.
  bool apply(std::string_view key, std::string_view value);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Closed-form parameter count implied by the config.
std::int64_t analytic_parameter_count(const ModelConfig& config);

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool decays = false;  ///< subject to weight decay
};

class Model {
 public:
  /// Weights ~ N(0, 0.02), gains 1, biases 0.
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  Tensor& parameter(std::string_view name);
  const Tensor& parameter(std::string_view name) const;
  std::int64_t parameter_count() const;

  /// Leaves for every parameter; tracked ones add into `grad_sinks`
  /// (aligned with parameters()) when given, else untracked.
  std::vector<Var> bind(Tape& tape, std::vector<Matrix>* grad_sinks = nullptr) const;

  /// Taped forward over `batch` sequences. `tokens` holds batch x seq_tokens
  /// ids (seq_tokens <= N). Returns logits of shape (batch * n) x V with
  /// n = min(seq_tokens + 1, N).
  Var forward(Tape& tape, std::span<const Var> params, std::span<const int> tokens, Index batch,
              std::span<const int> labels) const;

  /// Untaped logits for one prefix: min(|tokens| + 1, N) x V.
  Matrix logits(std::span<const int> tokens, int label) const;

  /// Mean next-token cross-entropy of a grid under its own label.
  double loss(const TokenGrid& grid) const;
  /// Same, except the label is replaced by the null label with probability
  /// cfg_dropout.
  double training_loss(const TokenGrid& grid, std::mt19937_64& rng) const;

  /// Mean cross-entropy of a batch with explicit labels, recorded on `tape`.
  Var batch_loss(Tape& tape, std::span<const Var> params, std::span<const TokenGrid> grids,
                 std::span<const int> labels) const;

 private:
  struct LayerSlots {
    int attn_norm = -1, wq = -1, wk = -1, wv = -1, wf = -1, bf = -1, wo = -1, out_norm = -1;
    int mlp_norm = -1, w1 = -1, w3 = -1, w2 = -1;
  };
  friend class Decoder;

  int add_parameter(std::string name, Index rows, Index cols, bool weight, std::mt19937_64& rng);
  void check_tokens(std::span<const int> tokens) const;
  void check_label(int label) const;
  Var attention(Tape& tape, std::span<const Var> p, const LayerSlots& slots, AttentionKind kind, Var h,
                Index batch, Index n) const;

  ModelConfig config_;
  std::vector<NamedTensor> params_;
  std::map<std::string, int, std::less<>> index_;
  int tok_embed_ = -1, cls_embed_ = -1, final_norm_ = -1, head_ = -1;
  std::vector<LayerSlots> layers_;
};

/// Incremental decoder: recurrent layers keep a d_k x d_v state per head;
/// softmax layers keep a key/value cache. Never re-runs the prefix.
class Decoder {
 public:
  /// Consumes the class token for `label` (null_label() for unconditional).
  Decoder(const Model& model, int label);

  /// Logits predicting the next image token.
  const RowVector& logits() const { return logits_; }
  /// Feeds the next image token.
  void push(int token);
  /// Image tokens consumed so far.
  int position() const { return position_; }
  /// Bytes held by recurrent states and key/value caches.
  std::size_t state_bytes() const;

 private:
  struct LayerState {
    AttentionKind kind;
    std::vector<attention::RecurrentState<double>> heads;
    std::vector<RowVector> keys, values;  // softmax layers only
  };
  void step(const RowVector& embedding);

  const Model* model_;
  std::vector<LayerState> layers_;
  RowVector logits_;
  int position_ = -1;
};

struct SampleOptions {
  double cfg_scale = 1.0;
  double temperature = 1.0;
  int top_k = 0;  ///< 0 disables the top-k filter
  std::uint64_t seed = 0;
};

/// Classifier-free guidance: (1 - s) * uncond + s * cond.
RowVector guide_logits(const RowVector& cond, const RowVector& uncond, double scale);

/// Draws one token from logits under temperature and top-k; temperature <= 0
/// or top_k == 1 picks the argmax.
int sample_token(const RowVector& logits, double temperature, int top_k, std::mt19937_64& rng);

/// Autoregressive decoding of one grid. When `trace` is given it receives the
/// guided logits used at each position.
TokenGrid sample(const Model& model, int label, const SampleOptions& options,
                 std::vector<RowVector>* trace = nullptr);

}  // namespace lasad
