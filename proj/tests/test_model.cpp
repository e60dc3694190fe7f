#include "lasad/checkpoint.hpp"
#include "lasad/data.hpp"
#include "lasad/model.hpp"
#include "lasad/train.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

using namespace lasad;

namespace {

const AttentionKind kAllKinds[] = {AttentionKind::softmax, AttentionKind::linear,         AttentionKind::constant_decay,
                                   AttentionKind::data_dependent, AttentionKind::hgrn2, AttentionKind::lasad,
                                   AttentionKind::hybrid};

ModelConfig tiny(AttentionKind kind = AttentionKind::lasad) {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.vocab = 17;
  c.grid_width = 4;
  c.grid_height = 4;
  c.classes = 3;
  c.mlp_multiple = 8;
  c.attention = kind;
  return c;
}

std::vector<int> random_tokens(std::mt19937_64& rng, int count, int vocab) {
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  std::vector<int> t(static_cast<std::size_t>(count));
  for (int& x : t) x = tok(rng);
  return t;
}

double max_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("forward shape follows the config") {
  const Model model(tiny(), 1);
  std::mt19937_64 rng(1);
  CHECK(model.logits(random_tokens(rng, 16, 17), 0).rows() == 16);
  CHECK(model.logits(random_tokens(rng, 16, 17), 0).cols() == 17);
  CHECK(model.logits(random_tokens(rng, 5, 17), 0).rows() == 6);
  CHECK(model.logits({}, 0).rows() == 1);
}

TEST_CASE("invalid inputs") {
  const Model model(tiny(), 1);
  const std::vector<int> bad{1, 2, 17};
  CHECK_THROWS_AS(model.logits(bad, 0), InputError);
  const std::vector<int> negative{-1};
  CHECK_THROWS_AS(model.logits(negative, 0), InputError);
  CHECK_THROWS_AS(model.logits({}, 4), InputError);  // null label is 3
  CHECK_NOTHROW(model.logits({}, 3));
  CHECK_THROWS_AS(model.logits(std::vector<int>(17, 0), 0), InputError);
}

TEST_CASE("config validation") {
  ModelConfig c = tiny();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny();
  c.constant_decay = 1.5;
  c.attention = AttentionKind::constant_decay;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(ModelConfig::preset("huge"), ConfigError);
  CHECK_THROWS_AS(parse_attention_kind("gla"), ConfigError);
  c = tiny();
  CHECK_FALSE(c.apply("nonsense", "1"));
  CHECK_THROWS_AS(c.apply("layers", "two"), ConfigError);
  CHECK_THROWS_AS(c.apply("count_class_token", "yes"), ConfigError);
}

TEST_CASE("config key=value round trip") {
  ModelConfig c = tiny(AttentionKind::hybrid);
  c.constant_decay = 0.123456789012345;
  c.boundary = BoundaryMode::reset;
  c.count_class_token = true;
  ModelConfig back;
  for (const auto& [k, v] : c.to_pairs()) CHECK(back.apply(k, v));
  CHECK(back == c);
}

TEST_CASE("hybrid has exactly one softmax layer in the middle") {
  for (int layers : {1, 2, 3, 4, 7}) {
    ModelConfig c = tiny(AttentionKind::hybrid);
    c.layers = layers;
    int softmax = 0;
    for (int l = 0; l < layers; ++l) softmax += c.layer_kind(l) == AttentionKind::softmax ? 1 : 0;
    CHECK(softmax == 1);
    CHECK(c.layer_kind(layers / 2) == AttentionKind::softmax);
  }
}

TEST_CASE("causality for every variant") {
  std::mt19937_64 rng(2);
  for (AttentionKind kind : kAllKinds) {
    CAPTURE(to_string(kind));
    const Model model(tiny(kind), 3);
    const auto tokens = random_tokens(rng, 16, 17);
    const Matrix full = model.logits(tokens, 1);
    for (int j : {0, 5, 9, 14}) {
      auto changed = tokens;
      changed[std::size_t(j)] = (changed[std::size_t(j)] + 5) % 17;
      const Matrix other = model.logits(changed, 1);
      CHECK(full.topRows(j + 1) == other.topRows(j + 1));
      CHECK(full.row(j + 1) != other.row(j + 1));
    }
  }
}

TEST_CASE("conditioning is live") {
  const Model model(tiny(), 4);
  std::mt19937_64 rng(3);
  const auto tokens = random_tokens(rng, 10, 17);
  CHECK(model.logits(tokens, 0) != model.logits(tokens, 3));
  CHECK(model.logits(tokens, 0) != model.logits(tokens, 1));
}

TEST_CASE("parameter count: closed form equals enumeration") {
  for (AttentionKind kind : kAllKinds) {
    CAPTURE(to_string(kind));
    for (int layers : {1, 2, 3}) {
      ModelConfig c = tiny(kind);
      c.layers = layers;
      const Model model(c, 0);
      CHECK(model.parameter_count() == analytic_parameter_count(c));
    }
  }
  const Model nano(ModelConfig::preset("nano"), 0);
  CHECK(nano.parameter_count() == analytic_parameter_count(ModelConfig::preset("nano")));
}

TEST_CASE("B preset size") {
  const ModelConfig b = ModelConfig::preset("B");
  CHECK(b.layers == 12);
  CHECK(b.hidden == 768);
  CHECK(b.heads == 12);
  const double count = double(analytic_parameter_count(b));
  CHECK(std::abs(count - 111e6) / 111e6 < 0.05);
  // Hand tally: embeddings + head, then per layer 4d^2 + 2d (attention) and 3 d f + 2d (MLP, norms).
  const double d = 768, f = 2048, v = 16384;
  const double tally = v * d + 1001 * d + d + d * v + 12 * (4 * d * d + 2 * d + 3 * d * f + 2 * d);
  CHECK(count == tally);
}

TEST_CASE("initial loss is near log V") {
  std::mt19937_64 rng(4);
  const Model model(tiny(), 5);
  const TokenGrid grid{4, 4, random_tokens(rng, 16, 17), 2};
  CHECK(std::abs(model.loss(grid) - std::log(17.0)) < 0.1);
}

TEST_CASE("label dropout switch") {
  std::mt19937_64 rng(5);
  ModelConfig c = tiny();
  const TokenGrid grid{4, 4, random_tokens(rng, 16, 17), 2};
  c.cfg_dropout = 0.0;
  const Model keep(c, 6);
  c.cfg_dropout = 1.0;
  const Model drop(c, 6);
  std::mt19937_64 r1(7), r2(7);
  CHECK(keep.training_loss(grid, r1) == keep.loss(grid));
  CHECK(drop.training_loss(grid, r2) != keep.loss(grid));
}

TEST_CASE("decode path equals full forward for every variant") {
  std::mt19937_64 rng(6);
  for (AttentionKind kind : kAllKinds) {
    CAPTURE(to_string(kind));
    const Model model(tiny(kind), 8);
    const auto tokens = random_tokens(rng, 16, 17);
    for (int label : {0, 3}) {
      const Matrix full = model.logits(tokens, label);
      Decoder dec(model, label);
      for (int t = 0; t < 16; ++t) {
        CHECK(dec.position() == t);
        CHECK(max_diff(dec.logits(), full.row(t)) < 1e-9);
        if (t < 15) dec.push(tokens[std::size_t(t)]);
      }
    }
  }
}

TEST_CASE("counting the class token shifts the row boundaries") {
  std::mt19937_64 rng(16);
  const auto tokens = random_tokens(rng, 15, 17);
  for (AttentionKind kind : {AttentionKind::lasad, AttentionKind::hgrn2, AttentionKind::hybrid}) {
    CAPTURE(to_string(kind));
    ModelConfig c = tiny(kind);
    const Model image_origin(c, 17);
    c.count_class_token = true;
    const Model class_origin(c, 17);
    const Matrix a = image_origin.logits(tokens, 0), b = class_origin.logits(tokens, 0);
    if (kind == AttentionKind::hgrn2) {
      CHECK(a == b);
    } else {
      // Identical up to the first boundary either convention places (image token 3).
      CHECK(a.topRows(3) == b.topRows(3));
      CHECK(a != b);
    }
    Decoder dec(class_origin, 0);
    for (int t = 0; t < 16; ++t) {
      CHECK(max_diff(dec.logits(), b.row(t)) < 1e-9);
      if (t < 15) dec.push(tokens[std::size_t(t)]);
    }
  }
}

TEST_CASE("recurrent decode memory does not grow") {
  const Model model(tiny(AttentionKind::lasad), 9);
  Decoder dec(model, 0);
  const std::size_t start = dec.state_bytes();
  for (int t = 0; t < 15; ++t) dec.push(t % 17);
  CHECK(dec.state_bytes() == start);
  CHECK(start == std::size_t(2 * 2 * 8 * 8) * sizeof(double));  // layers x heads x d_k x d_v

  const Model soft(tiny(AttentionKind::softmax), 9);
  Decoder cache(soft, 0);
  const std::size_t before = cache.state_bytes();
  cache.push(1);
  CHECK(cache.state_bytes() > before);
}

TEST_CASE("sampling") {
  const Model model(tiny(), 10);
  SUBCASE("guidance formula") {
    std::mt19937_64 rng(11);
    RowVector cond(5), uncond(5);
    for (Index i = 0; i < 5; ++i) {
      cond(i) = std::normal_distribution<double>()(rng);
      uncond(i) = std::normal_distribution<double>()(rng);
    }
    CHECK(guide_logits(cond, uncond, 1.0) == cond);
    CHECK(guide_logits(cond, uncond, 0.0) == uncond);
    CHECK(max_diff(guide_logits(cond, uncond, 3.0), uncond + 3.0 * (cond - uncond)) < 1e-14);
  }
  SUBCASE("scale 0 reproduces unconditional sampling") {
    SampleOptions o;
    o.cfg_scale = 0.0;
    o.seed = 12;
    const TokenGrid guided = sample(model, 1, o);
    const TokenGrid uncond = sample(model, 3, o);
    CHECK(guided.tokens == uncond.tokens);
  }
  SUBCASE("scale 1 uses the conditional logits") {
    SampleOptions o;
    o.temperature = 0.0;
    std::vector<RowVector> trace;
    const TokenGrid g = sample(model, 1, o, &trace);
    const Matrix full = model.logits(g.tokens, 1);
    REQUIRE(trace.size() == 16);
    for (int t = 0; t < 16; ++t) CHECK(max_diff(trace[std::size_t(t)], full.row(t)) < 1e-9);
  }
  SUBCASE("greedy decoding is deterministic and matches argmax of full forward") {
    SampleOptions o;
    o.top_k = 1;
    o.seed = 1;
    const TokenGrid a = sample(model, 2, o);
    o.seed = 99;
    const TokenGrid b = sample(model, 2, o);
    CHECK(a == b);
    const Matrix full = model.logits(a.tokens, 2);
    for (int t = 0; t < 16; ++t) {
      Index best = 0;
      full.row(t).maxCoeff(&best);
      CHECK(a.tokens[std::size_t(t)] == int(best));
    }
  }
  SUBCASE("seeded sampling is reproducible") {
    SampleOptions o;
    o.seed = 5;
    o.top_k = 4;
    CHECK(sample(model, 0, o) == sample(model, 0, o));
  }
  SUBCASE("top-k restricts the support") {
    std::mt19937_64 rng(13);
    RowVector logits(6);
    logits << 0.1, 3.0, -1.0, 2.5, 0.0, 2.9;
    for (int i = 0; i < 200; ++i) {
      const int t = sample_token(logits, 2.0, 3, rng);
      CHECK((t == 1 || t == 3 || t == 5));
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(sample(model, 4, {}), InputError);
    CHECK_THROWS_AS(sample(model, -1, {}), InputError);
    SampleOptions o;
    o.cfg_scale = -1.0;
    CHECK_THROWS_AS(sample(model, 0, o), InputError);
  }
}

TEST_CASE("checkpoint round trip") {
  std::mt19937_64 rng(14);
  const Model model(tiny(AttentionKind::data_dependent), 15);
  const TokenGrid grid{4, 4, random_tokens(rng, 16, 17), 1};
  const Checkpoint ck = make_checkpoint(model, nullptr, 42, 7);
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  CHECK(back.step == 42);
  CHECK(back.seed == 7);
  CHECK(back.config == model.config());
  const Model restored = restore_model(back);
  CHECK(restored.loss(grid) == model.loss(grid));

  const auto path = std::filesystem::temp_directory_path() / "lasad_test_ckpt.lasd";
  save_checkpoint(ck, path);
  CHECK(restore_model(load_checkpoint(path)).loss(grid) == model.loss(grid));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint layout") {
  const Model model(tiny(), 1);
  const std::string bytes = encode_checkpoint(make_checkpoint(model, nullptr, 0, 0));
  REQUIRE(bytes.size() > 12);
  CHECK(bytes.substr(0, 4) == "LASD");
  std::uint32_t version = 0, config_len = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&config_len, bytes.data() + 8, 4);
  CHECK(version == kCheckpointVersion);
  const std::string config = bytes.substr(12, config_len);
  CHECK(config.find("hidden=16\n") != std::string::npos);
  CHECK(config.find("step=0\n") != std::string::npos);
  // First tensor record follows the config.
  std::uint32_t name_len = 0;
  std::memcpy(&name_len, bytes.data() + 12 + config_len, 4);
  CHECK(bytes.substr(16 + config_len, name_len) == model.parameters()[0].name);
}

TEST_CASE("checkpoint load errors name the tensor") {
  const Model model(tiny(), 1);
  const Checkpoint ck = make_checkpoint(model, nullptr, 0, 0);
  const std::string bytes = encode_checkpoint(ck);

  CHECK_THROWS_AS(decode_checkpoint("XXXX" + bytes.substr(4)), LoadError);

  const std::string last = ck.tensors.back().first;
  try {
    decode_checkpoint(bytes.substr(0, bytes.size() - 3));
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find(last) != std::string::npos);
  }

  Checkpoint missing = ck;
  const std::string dropped = missing.tensors[3].first;
  missing.tensors.erase(missing.tensors.begin() + 3);
  try {
    restore_model(missing);
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find(dropped) != std::string::npos);
  }

  Checkpoint reshaped = ck;
  reshaped.tensors[2].second = Matrix::Zero(1, 1);
  try {
    restore_model(reshaped);
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find(reshaped.tensors[2].first) != std::string::npos);
  }

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.lasd"), LoadError);
}

TEST_CASE("AdamW update matches a hand computation") {
  ModelConfig c = tiny();
  Model model(c, 2);
  OptimizerConfig oc;
  oc.lr = 0.01;
  oc.max_grad_norm = 0.0;
  AdamW opt(model, oc);
  std::vector<Matrix> grads;
  for (const auto& p : model.parameters()) grads.push_back(Matrix::Constant(p.tensor.rows(), p.tensor.cols(), 0.5));
  std::vector<Matrix> before;
  for (const auto& p : model.parameters()) before.push_back(p.tensor.data());
  opt.step(model, grads);
  for (std::size_t i = 0; i < before.size(); ++i) {
    // Step 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
    const double update = 0.01 * 0.5 / (0.5 + oc.eps);
    const double shrink = model.parameters()[i].decays ? 1.0 - 0.01 * 0.05 : 1.0;
    const Matrix expected = (before[i] * shrink).array() - update;
    CHECK(max_diff(model.parameters()[i].tensor.data(), expected) < 1e-15);
  }
}

TEST_CASE("weight decay applies to weights and embeddings only") {
  const Model model(tiny(AttentionKind::data_dependent), 0);
  for (const auto& p : model.parameters()) {
    const bool is_gain = p.name.find("norm") != std::string::npos;
    const bool is_bias = p.name.find("bf") != std::string::npos;
    CHECK(p.decays == !(is_gain || is_bias));
  }
}

TEST_CASE("gradient clipping bounds the update direction") {
  Model model(tiny(), 2);
  OptimizerConfig oc;
  oc.max_grad_norm = 1.0;
  AdamW opt(model, oc);
  std::vector<Matrix> grads;
  for (const auto& p : model.parameters()) grads.push_back(Matrix::Constant(p.tensor.rows(), p.tensor.cols(), 100.0));
  const double norm = opt.step(model, grads);
  CHECK(norm > 1.0);
  double clipped_sq = 0.0;
  for (const auto& m : opt.first_moments()) clipped_sq += m.squaredNorm();
  CHECK(std::sqrt(clipped_sq) == doctest::Approx(0.1 * 1.0).epsilon(1e-12));  // (1 - beta1) * clip
}

TEST_CASE("training") {
  SyntheticSpec spec{Task::row_copy, 4, 4, 17, 3, 64, 1};
  const auto data = generate(spec);
  TrainOptions o;
  o.batch = 4;
  o.steps = 5;
  o.seed = 3;
  o.optimizer.lr = 1e-3;

  SUBCASE("zero steps leaves the initialization") {
    Model model(tiny(), 1);
    const Model init = model;
    AdamW opt(model, o.optimizer);
    TrainOptions zero = o;
    zero.steps = 0;
    CHECK(train(model, opt, data, zero).empty());
    for (std::size_t i = 0; i < init.parameters().size(); ++i) {
      CHECK(model.parameters()[i].tensor.data() == init.parameters()[i].tensor.data());
    }
  }
  SUBCASE("identical seeds give identical traces") {
    Model a(tiny(), 1), b(tiny(), 1);
    AdamW oa(a, o.optimizer), ob(b, o.optimizer);
    const auto ta = train(a, oa, data, o);
    const auto tb = train(b, ob, data, o);
    REQUIRE(ta.size() == 5);
    for (std::size_t i = 0; i < ta.size(); ++i) {
      CHECK(ta[i].step == int(i) + 1);
      CHECK(ta[i].loss == tb[i].loss);
    }
  }
  SUBCASE("resuming replays the same steps") {
    Model full(tiny(), 1);
    AdamW of(full, o.optimizer);
    TrainOptions ten = o;
    ten.steps = 10;
    const auto whole = train(full, of, data, ten);

    Model half(tiny(), 1);
    AdamW oh(half, o.optimizer);
    train(half, oh, data, o);
    const Checkpoint ck = decode_checkpoint(encode_checkpoint(make_checkpoint(half, &oh, oh.steps(), o.seed)));
    Model resumed = restore_model(ck);
    AdamW opt = *restore_optimizer(ck, resumed, o.optimizer);
    const auto rest = train(resumed, opt, data, o);
    REQUIRE(rest.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(rest[i].step == whole[i + 5].step);
      CHECK(rest[i].loss == whole[i + 5].loss);
    }
  }
  SUBCASE("memorizes a single grid") {
    ModelConfig c = tiny();
    c.cfg_dropout = 0.0;
    Model model(c, 1);
    TrainOptions m = o;
    m.steps = 200;
    m.batch = 1;
    m.optimizer.lr = 3e-3;
    AdamW opt(model, m.optimizer);
    const std::vector<TokenGrid> one{data[0]};
    train(model, opt, one, m);
    CHECK(model.loss(data[0]) < 0.1 * std::log(17.0));
  }
  SUBCASE("a non-finite parameter aborts with a diagnostic") {
    Model model(tiny(), 1);
    model.parameters()[0].tensor.data().setConstant(std::nan(""));
    AdamW opt(model, o.optimizer);
    CHECK_THROWS_AS(train(model, opt, data, o), TrainingDiverged);
  }
}

TEST_CASE("trace csv round trip") {
  std::ostringstream out;
  write_trace_header(out);
  write_trace_row(out, {1, 2.5, 1e-4, 0.25});
  write_trace_row(out, {2, 0.1234567890123456789, 1e-4, 0.5});
  std::istringstream in(out.str());
  const auto rows = read_trace(in);
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].step == 2);
  CHECK(rows[1].loss == 0.1234567890123456789);
  CHECK(rows[0].lr == 1e-4);
  std::istringstream bad("step,loss\n");
  CHECK_THROWS_AS(read_trace(bad), InputError);
}
