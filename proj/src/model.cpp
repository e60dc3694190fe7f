#include "lasad/model.hpp"

#include "lasad/attention.hpp"
#include "lasad/attention_ops.hpp"
#include "lasad/config_text.hpp"
#include "lasad/functions.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace lasad {

std::string to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::softmax:
      return "softmax";
    case AttentionKind::linear:
      return "linear";
    case AttentionKind::constant_decay:
      return "constant_decay";
    case AttentionKind::data_dependent:
      return "data_dependent";
    case AttentionKind::hgrn2:
      return "hgrn2";
    case AttentionKind::lasad:
      return "lasad";
    case AttentionKind::hybrid:
      return "hybrid";
  }
  return "?";
}

AttentionKind parse_attention_kind(std::string_view name) {
  for (auto kind : {AttentionKind::softmax, AttentionKind::linear, AttentionKind::constant_decay,
                    AttentionKind::data_dependent, AttentionKind::hgrn2, AttentionKind::lasad,
                    AttentionKind::hybrid}) {
    if (to_string(kind) == name) return kind;
  }
  throw ConfigError("unknown attention variant '" + std::string(name) + "'");
}

std::string to_string(BoundaryMode mode) { return mode == BoundaryMode::retain ? "retain" : "reset"; }

BoundaryMode parse_boundary_mode(std::string_view name) {
  if (name == "retain") return BoundaryMode::retain;
  if (name == "reset") return BoundaryMode::reset;
  throw ConfigError("unknown boundary mode '" + std::string(name) + "' (expected retain or reset)");
}

ModelConfig ModelConfig::preset(std::string_view name) {
  ModelConfig c;
  auto large_scale = [&c](int layers, int hidden, int heads) {
    c.layers = layers;
    c.hidden = hidden;
    c.heads = heads;
    c.vocab = 16384;
    c.classes = 1000;
    c.grid_width = 16;
    c.grid_height = 16;
    c.mlp_multiple = 256;
  };
  if (name == "nano") {
    c.layers = 2;
    c.hidden = 64;
    c.heads = 2;
  } else if (name == "micro") {
    c.layers = 4;
    c.hidden = 128;
    c.heads = 4;
  } else if (name == "B") {
    large_scale(12, 768, 12);
  } else if (name == "L") {
    large_scale(24, 1024, 16);
  } else if (name == "XL") {
    large_scale(36, 1280, 20);
  } else if (name == "XXL") {
    large_scale(48, 1536, 24);
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) + "'");
  }
  return c;
}

int ModelConfig::mlp_hidden() const {
  const int raw = (8 * hidden) / 3;
  return ((raw + mlp_multiple - 1) / mlp_multiple) * mlp_multiple;
}

AttentionKind ModelConfig::layer_kind(int index) const {
  if (attention == AttentionKind::hybrid) {
    return index == layers / 2 ? AttentionKind::softmax : AttentionKind::lasad;
  }
  return attention;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
  if (layers < 1) fail("layers must be >= 1");
  if (hidden < 1 || heads < 1) fail("hidden and heads must be >= 1");
  if (hidden % heads != 0) fail("hidden (" + std::to_string(hidden) + ") not divisible by heads (" + std::to_string(heads) + ")");
  if (vocab < 2) fail("vocab must be >= 2");
  if (classes < 1) fail("classes must be >= 1");
  if (grid_width < 1 || grid_height < 1) fail("grid dimensions must be >= 1");
  if (mlp_multiple < 1) fail("mlp_multiple must be >= 1");
  if (!(cfg_dropout >= 0.0 && cfg_dropout <= 1.0)) fail("cfg_dropout must lie in [0, 1]");
  if (!(constant_decay > 0.0 && constant_decay <= 1.0)) fail("constant_decay must lie in (0, 1]");
  if (!(norm_eps >= 0.0)) fail("norm_eps must be >= 0");
  if (layer_kind(0) == AttentionKind::softmax || attention == AttentionKind::hybrid) {
    if (head_dim() % 2 != 0) fail("rotary encoding needs an even head dimension");
  }
}

std::vector<std::pair<std::string, std::string>> ModelConfig::to_pairs() const {
  return {
      {"layers", std::to_string(layers)},
      {"hidden", std::to_string(hidden)},
      {"heads", std::to_string(heads)},
      {"vocab", std::to_string(vocab)},
      {"grid_width", std::to_string(grid_width)},
      {"grid_height", std::to_string(grid_height)},
      {"classes", std::to_string(classes)},
      {"attention", to_string(attention)},
      {"constant_decay", format_double(constant_decay)},
      {"boundary", to_string(boundary)},
      {"count_class_token", count_class_token ? "true" : "false"},
      {"cfg_dropout", format_double(cfg_dropout)},
      {"mlp_multiple", std::to_string(mlp_multiple)},
      {"norm_eps", format_double(norm_eps)},
      {"rope_base", format_double(rope_base)},
  };
}

bool ModelConfig::apply(std::string_view key, std::string_view value) {
  if (key == "layers") layers = parse_number<int>(key, value);
  else if (key == "hidden") hidden = parse_number<int>(key, value);
  else if (key == "heads") heads = parse_number<int>(key, value);
  else if (key == "vocab") vocab = parse_number<int>(key, value);
  else if (key == "grid_width") grid_width = parse_number<int>(key, value);
  else if (key == "grid_height") grid_height = parse_number<int>(key, value);
  else if (key == "classes") classes = parse_number<int>(key, value);
  else if (key == "attention") attention = parse_attention_kind(value);
  else if (key == "constant_decay") constant_decay = parse_number<double>(key, value);
  else if (key == "boundary") boundary = parse_boundary_mode(value);
  else if (key == "count_class_token") count_class_token = parse_bool(key, value);
  else if (key == "cfg_dropout") cfg_dropout = parse_number<double>(key, value);
  else if (key == "mlp_multiple") mlp_multiple = parse_number<int>(key, value);
  else if (key == "norm_eps") norm_eps = parse_number<double>(key, value);
  else if (key == "rope_base") rope_base = parse_number<double>(key, value);
  else return false;
  return true;
}

std::int64_t analytic_parameter_count(const ModelConfig& c) {
  const std::int64_t d = c.hidden;
  const std::int64_t v = c.vocab;
  const std::int64_t f = c.mlp_hidden();
  std::int64_t total = v * d + (c.classes + 1) * d + d + d * v;
  for (int l = 0; l < c.layers; ++l) {
    total += 2 * d + 3 * d * f;
    switch (c.layer_kind(l)) {
      case AttentionKind::softmax:
        total += 4 * d * d;
        break;
      case AttentionKind::linear:
      case AttentionKind::constant_decay:
        total += 4 * d * d + d;
        break;
      case AttentionKind::data_dependent:
        total += 5 * d * d + 2 * d;
        break;
      case AttentionKind::hgrn2:
      case AttentionKind::lasad:
        total += 4 * d * d + 2 * d;
        break;
      case AttentionKind::hybrid:
        break;
    }
  }
  return total;
}

int Model::add_parameter(std::string name, Index rows, Index cols, bool weight, std::mt19937_64& rng) {
  Matrix data(rows, cols);
  if (weight) {
    std::normal_distribution<double> normal(0.0, 0.02);
    for (Index i = 0; i < data.size(); ++i) data.data()[i] = normal(rng);
  } else {
    data.setZero();
  }
  const int id = int(params_.size());
  index_.emplace(name, id);
  params_.push_back({std::move(name), Tensor(std::move(data), true), weight});
  return id;
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const Index d = config_.hidden;
  const Index f = config_.mlp_hidden();
  auto gain = [&](std::string name) {
    const int id = add_parameter(std::move(name), 1, d, false, rng);
    params_[std::size_t(id)].tensor.data().setOnes();
    return id;
  };
  tok_embed_ = add_parameter("tok_embed", config_.vocab, d, true, rng);
  cls_embed_ = add_parameter("cls_embed", config_.classes + 1, d, true, rng);
  for (int l = 0; l < config_.layers; ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    const AttentionKind kind = config_.layer_kind(l);
    LayerSlots s;
    s.attn_norm = gain(prefix + "attn_norm");
    s.wq = add_parameter(prefix + "wq", d, d, true, rng);
    if (kind != AttentionKind::hgrn2 && kind != AttentionKind::lasad) {
      s.wk = add_parameter(prefix + "wk", d, d, true, rng);
    }
    s.wv = add_parameter(prefix + "wv", d, d, true, rng);
    if (kind == AttentionKind::data_dependent || kind == AttentionKind::hgrn2 || kind == AttentionKind::lasad) {
      s.wf = add_parameter(prefix + "wf", d, d, true, rng);
      s.bf = add_parameter(prefix + "bf", 1, d, false, rng);
    }
    s.wo = add_parameter(prefix + "wo", d, d, true, rng);
    if (kind != AttentionKind::softmax) s.out_norm = gain(prefix + "out_norm");
    s.mlp_norm = gain(prefix + "mlp_norm");
    s.w1 = add_parameter(prefix + "w1", d, f, true, rng);
    s.w3 = add_parameter(prefix + "w3", d, f, true, rng);
    s.w2 = add_parameter(prefix + "w2", f, d, true, rng);
    layers_.push_back(s);
  }
  final_norm_ = gain("final_norm");
  head_ = add_parameter("head", d, config_.vocab, true, rng);
}

Tensor& Model::parameter(std::string_view name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("no parameter named '" + std::string(name) + "'");
  return params_[std::size_t(it->second)].tensor;
}

const Tensor& Model::parameter(std::string_view name) const {
  return const_cast<Model*>(this)->parameter(name);
}

std::int64_t Model::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : params_) total += p.tensor.size();
  return total;
}

std::vector<Var> Model::bind(Tape& tape, std::vector<Matrix>* grad_sinks) const {
  std::vector<Var> vars;
  vars.reserve(params_.size());
  if (grad_sinks != nullptr && grad_sinks->size() != params_.size()) {
    grad_sinks->clear();
    for (const auto& p : params_) grad_sinks->push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    vars.push_back(tape.leaf(params_[i].tensor.data(), grad_sinks != nullptr ? &(*grad_sinks)[i] : nullptr));
  }
  return vars;
}

void Model::check_tokens(std::span<const int> tokens) const {
  for (int t : tokens) {
    if (t < 0 || t >= config_.vocab) {
      throw InputError("token id " + std::to_string(t) + " outside [0, " + std::to_string(config_.vocab) + ")");
    }
  }
}

void Model::check_label(int label) const {
  if (label < 0 || label > config_.null_label()) {
    throw InputError("label " + std::to_string(label) + " outside [0, " + std::to_string(config_.classes) +
                     "] (" + std::to_string(config_.null_label()) + " is the null label)");
  }
}

Var Model::attention(Tape& tape, std::span<const Var> p, const LayerSlots& s, AttentionKind kind, Var h,
                     Index batch, Index n) const {
  const Index heads = config_.heads;
  const Index rows = h.rows();
  auto P = [&](int slot) { return p[std::size_t(slot)]; };

  if (kind == AttentionKind::softmax) {
    const Index dk = config_.head_dim();
    const Var q = rope(matmul(h, P(s.wq)), heads, n, config_.rope_base);
    const Var k = rope(matmul(h, P(s.wk)), heads, n, config_.rope_base);
    const Var v = matmul(h, P(s.wv));
    std::vector<Var> seqs;
    for (Index b = 0; b < batch; ++b) {
      std::vector<Var> head_out;
      const Var qb = slice_rows(q, b * n, n);
      const Var kb = slice_rows(k, b * n, n);
      const Var vb = slice_rows(v, b * n, n);
      for (Index hh = 0; hh < heads; ++hh) {
        const Var scores = scale(matmul(slice_cols(qb, hh * dk, dk), transpose(slice_cols(kb, hh * dk, dk))),
                                 1.0 / std::sqrt(double(dk)));
        head_out.push_back(matmul(softmax_rows(scores, true), slice_cols(vb, hh * dk, dk)));
      }
      seqs.push_back(concat_cols(head_out));
    }
    return matmul(concat_rows(seqs), P(s.wo));
  }

  Var q, k, v, decay;
  v = matmul(h, P(s.wv));
  switch (kind) {
    case AttentionKind::linear:
    case AttentionKind::constant_decay:
      q = elu_plus_one(matmul(h, P(s.wq)));
      k = elu_plus_one(matmul(h, P(s.wk)));
      decay = tape.constant(
          Matrix::Constant(rows, config_.hidden, kind == AttentionKind::linear ? 1.0 : config_.constant_decay));
      break;
    case AttentionKind::data_dependent:
      q = silu(matmul(h, P(s.wq)));
      k = matmul(h, P(s.wk));
      decay = clamp(sigmoid(add_row(matmul(h, P(s.wf)), P(s.bf))), kDecayFloor, kDecayCeil);
      break;
    case AttentionKind::hgrn2:
    case AttentionKind::lasad: {
      q = silu(matmul(h, P(s.wq)));
      const Var gate = clamp(sigmoid(add_row(matmul(h, P(s.wf)), P(s.bf))), kDecayFloor, kDecayCeil);
      k = rsub(1.0, gate);
      decay = kind == AttentionKind::lasad ? spatial_override(gate, config_.grid_width, n, config_.first_position(), config_.boundary) : gate;
      break;
    }
    default:
      throw UsageError("unhandled attention kind");
  }
  const Var o = decay_scan(q, k, v, decay, n, heads);
  return matmul(rms_norm(o, P(s.out_norm), config_.norm_eps), P(s.wo));
}

Var Model::forward(Tape& tape, std::span<const Var> p, std::span<const int> tokens, Index batch,
                   std::span<const int> labels) const {
  if (batch < 1 || Index(labels.size()) != batch || Index(tokens.size()) % batch != 0) {
    throw DimensionError("forward: " + std::to_string(tokens.size()) + " tokens and " +
                         std::to_string(labels.size()) + " labels for batch " + std::to_string(batch));
  }
  const Index seq_tokens = Index(tokens.size()) / batch;
  const Index big_n = config_.seq_len();
  if (seq_tokens > big_n) {
    throw InputError("forward: " + std::to_string(seq_tokens) + " tokens exceed grid length " + std::to_string(big_n));
  }
  check_tokens(tokens);
  for (int label : labels) check_label(label);
  const Index n = std::min(seq_tokens + 1, big_n);

  // Class rows index past the vocabulary in the stacked embedding table.
  std::vector<int> ids;
  ids.reserve(std::size_t(batch * n));
  for (Index b = 0; b < batch; ++b) {
    ids.push_back(config_.vocab + labels[std::size_t(b)]);
    for (Index i = 0; i + 1 < n; ++i) ids.push_back(tokens[std::size_t(b * seq_tokens + i)]);
  }
  const Var tables[] = {p[std::size_t(tok_embed_)], p[std::size_t(cls_embed_)]};
  Var x = gather_rows(concat_rows(tables), ids);

  for (int l = 0; l < config_.layers; ++l) {
    const LayerSlots& s = layers_[std::size_t(l)];
    const Var h = rms_norm(x, p[std::size_t(s.attn_norm)], config_.norm_eps);
    x = add(x, attention(tape, p, s, config_.layer_kind(l), h, batch, n));
    const Var m = rms_norm(x, p[std::size_t(s.mlp_norm)], config_.norm_eps);
    const Var gated = mul(silu(matmul(m, p[std::size_t(s.w1)])), matmul(m, p[std::size_t(s.w3)]));
    x = add(x, matmul(gated, p[std::size_t(s.w2)]));
  }
  return matmul(rms_norm(x, p[std::size_t(final_norm_)], config_.norm_eps), p[std::size_t(head_)]);
}

Matrix Model::logits(std::span<const int> tokens, int label) const {
  Tape tape;
  const auto p = bind(tape);
  const int labels[] = {label};
  Matrix out = forward(tape, p, tokens, 1, labels).value();
  return out;
}

Var Model::batch_loss(Tape& tape, std::span<const Var> params, std::span<const TokenGrid> grids,
                      std::span<const int> labels) const {
  const Index big_n = config_.seq_len();
  std::vector<int> tokens;
  tokens.reserve(grids.size() * std::size_t(big_n));
  for (const TokenGrid& g : grids) {
    if (g.height != config_.grid_height || g.width != config_.grid_width || Index(g.tokens.size()) != big_n) {
      throw InputError("grid " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                       " does not match the model grid " + std::to_string(config_.grid_height) + "x" +
                       std::to_string(config_.grid_width));
    }
    tokens.insert(tokens.end(), g.tokens.begin(), g.tokens.end());
  }
  const Var logits = forward(tape, params, tokens, Index(grids.size()), labels);
  return cross_entropy(logits, tokens);
}

double Model::loss(const TokenGrid& grid) const {
  Tape tape;
  const auto p = bind(tape);
  const int labels[] = {grid.label};
  return batch_loss(tape, p, {&grid, 1}, labels).item();
}

double Model::training_loss(const TokenGrid& grid, std::mt19937_64& rng) const {
  std::bernoulli_distribution drop(config_.cfg_dropout);
  const int labels[] = {drop(rng) ? config_.null_label() : grid.label};
  Tape tape;
  const auto p = bind(tape);
  return batch_loss(tape, p, {&grid, 1}, labels).item();
}

// ---------------------------------------------------------------------------

Decoder::Decoder(const Model& model, int label) : model_(&model) {
  model.check_label(label);
  const ModelConfig& c = model.config();
  for (int l = 0; l < c.layers; ++l) {
    LayerState st{c.layer_kind(l), {}, {}, {}};
    if (st.kind != AttentionKind::softmax) st.heads.assign(std::size_t(c.heads), {c.head_dim(), c.head_dim()});
    layers_.push_back(std::move(st));
  }
  step(model.params_[std::size_t(model.cls_embed_)].tensor.data().row(label));
}

void Decoder::push(int token) {
  const ModelConfig& c = model_->config();
  if (position_ + 1 >= c.seq_len()) throw UsageError("decoder: grid already complete");
  model_->check_tokens({&token, 1});
  step(model_->params_[std::size_t(model_->tok_embed_)].tensor.data().row(token));
}

std::size_t Decoder::state_bytes() const {
  std::size_t total = 0;
  for (const auto& l : layers_) {
    for (const auto& h : l.heads) total += h.bytes();
    for (const auto& k : l.keys) total += std::size_t(k.size()) * sizeof(double);
    for (const auto& v : l.values) total += std::size_t(v.size()) * sizeof(double);
  }
  return total;
}

void Decoder::step(const RowVector& embedding) {
  ++position_;
  const Model& m = *model_;
  const ModelConfig& c = m.config();
  const Index heads = c.heads;
  const Index dk = c.head_dim();
  const double eps = c.norm_eps;
  auto W = [&m](int slot) -> const Matrix& { return m.params_[std::size_t(slot)].tensor.data(); };
  auto gain = [&m](int slot) -> RowVector { return m.params_[std::size_t(slot)].tensor.data().row(0); };

  RowVector x = embedding;
  for (int l = 0; l < c.layers; ++l) {
    const auto& s = m.layers_[std::size_t(l)];
    LayerState& st = layers_[std::size_t(l)];
    const RowVector h = rms_norm_rows(x, gain(s.attn_norm), eps);
    RowVector attn(c.hidden);
    if (st.kind == AttentionKind::softmax) {
      RowVector q = h * W(s.wq);
      RowVector k = h * W(s.wk);
      rope_row_inplace(q, heads, position_, c.rope_base);
      rope_row_inplace(k, heads, position_, c.rope_base);
      st.keys.push_back(k);
      st.values.push_back(h * W(s.wv));
      const Index len = Index(st.keys.size());
      for (Index hh = 0; hh < heads; ++hh) {
        Eigen::VectorXd scores(len);
        for (Index j = 0; j < len; ++j) {
          scores(j) = q.segment(hh * dk, dk).dot(st.keys[std::size_t(j)].segment(hh * dk, dk)) / std::sqrt(double(dk));
        }
        scores = (scores.array() - scores.maxCoeff()).exp().matrix();
        scores /= scores.sum();
        RowVector o = RowVector::Zero(dk);
        for (Index j = 0; j < len; ++j) o += scores(j) * st.values[std::size_t(j)].segment(hh * dk, dk);
        attn.segment(hh * dk, dk) = o;
      }
      x += attn * W(s.wo);
    } else {
      RowVector q, k, decay;
      const RowVector v = h * W(s.wv);
      switch (st.kind) {
        case AttentionKind::linear:
        case AttentionKind::constant_decay:
          q = (h * W(s.wq)).unaryExpr([](double a) { return fn::elu_plus_one(a); });
          k = (h * W(s.wk)).unaryExpr([](double a) { return fn::elu_plus_one(a); });
          decay = RowVector::Constant(c.hidden, st.kind == AttentionKind::linear ? 1.0 : c.constant_decay);
          break;
        case AttentionKind::data_dependent:
          q = (h * W(s.wq)).unaryExpr([](double a) { return fn::silu(a); });
          k = h * W(s.wk);
          decay = (h * W(s.wf) + W(s.bf)).unaryExpr([](double a) { return fn::decay_gate(a); });
          break;
        default: {
          q = (h * W(s.wq)).unaryExpr([](double a) { return fn::silu(a); });
          const RowVector gate = (h * W(s.wf) + W(s.bf)).unaryExpr([](double a) { return fn::decay_gate(a); });
          k = (1.0 - gate.array()).matrix();
          decay = gate;
          if (st.kind == AttentionKind::lasad && is_row_boundary(position_ + c.first_position(), c.grid_width)) {
            decay.setConstant(c.boundary == BoundaryMode::retain ? 1.0 : 0.0);
          }
        }
      }
      for (Index hh = 0; hh < heads; ++hh) {
        attn.segment(hh * dk, dk) = st.heads[std::size_t(hh)].step(q.segment(hh * dk, dk), k.segment(hh * dk, dk),
                                                                   v.segment(hh * dk, dk), decay.segment(hh * dk, dk));
      }
      x += rms_norm_rows(attn, gain(s.out_norm), eps) * W(s.wo);
    }
    const RowVector mn = rms_norm_rows(x, gain(s.mlp_norm), eps);
    const RowVector a = (mn * W(s.w1)).unaryExpr([](double z) { return fn::silu(z); });
    const RowVector b = mn * W(s.w3);
    x += a.cwiseProduct(b) * W(s.w2);
  }
  logits_ = rms_norm_rows(x, gain(m.final_norm_), eps) * W(m.head_);
}

}  // namespace lasad
