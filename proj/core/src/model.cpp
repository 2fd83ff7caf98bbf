#include "dtsst/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "binary_io.hpp"
#include "dtsst/errors.hpp"
#include "dtsst/ops.hpp"

namespace dtsst {

namespace {

constexpr char kCheckpointMagic[4] = {'D', 'T', 'S', 'S'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::size_t branch_params(const ModelConfig& c, std::size_t in_channels, std::size_t height,
                          std::size_t kernel) {
  return c.d1 * in_channels * kernel  // temporal conv, no bias
         + 2 * c.d1                   // batch norm
         + c.d1 * height              // depthwise collapse, no bias
         + 2 * c.d1                   // batch norm
         + c.d2 * c.d1 + c.d2;        // pointwise conv with bias
}

std::size_t encoder_layer_params(const ModelConfig& c) {
  const std::size_t d = c.d2, e = c.encoder_mlp_ratio * c.d2;
  return 4 * (d * d + d) + 2 * (2 * d) + (d * e + e) + (e * d + d);
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw DataError("model config: " + msg); };
  if (channels == 0 || samples == 0 || freqs == 0) fail("channels, samples and freqs must be positive");
  if (n_classes < 2) fail("n_classes must be at least 2");
  if (d1 == 0 || d2 == 0) fail("d1 and d2 must be positive");
  if (tc1 == 0 || tc2 == 0) fail("temporal kernels must be positive");
  if (pool1 == 0 || pool2 == 0 || pool1_stride == 0 || pool2_stride == 0) {
    fail("pool kernels and strides must be positive");
  }
  if (heads == 0 || d2 % heads != 0) {
    fail("d2 (" + std::to_string(d2) + ") must be divisible by heads (" + std::to_string(heads) + ")");
  }
  if (encoder_mlp_ratio == 0 || mlp_hidden == 0) fail("mlp widths must be positive");
  if (!use_branch1 && !use_branch2_in1 && !use_branch2_in2) fail("at least one branch must be enabled");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
}

Geometry geometry(const ModelConfig& cfg) {
  Geometry g;
  g.branch1_len = conv_out_extent(conv_out_extent(cfg.samples, cfg.tc1, 1), cfg.pool1, cfg.pool1_stride);
  g.branch2_len = conv_out_extent(conv_out_extent(cfg.samples, cfg.tc2, 1), cfg.pool2, cfg.pool2_stride);
  g.fused_len = (cfg.use_branch1 ? g.branch1_len : 0) + (cfg.use_branch2_in1 ? g.branch2_len : 0) +
                (cfg.use_branch2_in2 ? g.branch2_len : 0);
  return g;
}

std::size_t param_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  if (cfg.use_branch1) n += branch_params(cfg, 1, cfg.channels, cfg.tc1);
  if (cfg.use_branch2_in1) n += branch_params(cfg, cfg.channels, cfg.freqs, cfg.tc2);
  if (cfg.use_branch2_in2) n += branch_params(cfg, cfg.freqs, cfg.channels, cfg.tc2);
  if (cfg.use_transformer) {
    n += geometry(cfg).fused_len * cfg.d2 + cfg.encoder_layers * encoder_layer_params(cfg);
  }
  n += cfg.d2 * cfg.mlp_hidden + cfg.mlp_hidden + cfg.mlp_hidden * cfg.n_classes + cfg.n_classes;
  return n;
}

std::string model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["channels"] = c.channels;
  j["samples"] = c.samples;
  j["freqs"] = c.freqs;
  j["n_classes"] = c.n_classes;
  j["d1"] = c.d1;
  j["d2"] = c.d2;
  j["tc1"] = c.tc1;
  j["tc2"] = c.tc2;
  j["pool1"] = c.pool1;
  j["pool1_stride"] = c.pool1_stride;
  j["pool2"] = c.pool2;
  j["pool2_stride"] = c.pool2_stride;
  j["encoder_layers"] = c.encoder_layers;
  j["heads"] = c.heads;
  j["encoder_mlp_ratio"] = c.encoder_mlp_ratio;
  j["mlp_hidden"] = c.mlp_hidden;
  j["use_branch1"] = c.use_branch1;
  j["use_branch2_in1"] = c.use_branch2_in1;
  j["use_branch2_in2"] = c.use_branch2_in2;
  j["use_transformer"] = c.use_transformer;
  j["per_head_scaling"] = c.per_head_scaling;
  j["dropout"] = c.dropout;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config JSON: ") + e.what());
  }
  if (!j.is_object()) throw DataError("model config JSON must be an object");
  ModelConfig c;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const auto& v = it.value();
      if (k == "channels") c.channels = v.get<std::size_t>();
      else if (k == "samples") c.samples = v.get<std::size_t>();
      else if (k == "freqs") c.freqs = v.get<std::size_t>();
      else if (k == "n_classes") c.n_classes = v.get<std::size_t>();
      else if (k == "d1") c.d1 = v.get<std::size_t>();
      else if (k == "d2") c.d2 = v.get<std::size_t>();
      else if (k == "tc1") c.tc1 = v.get<std::size_t>();
      else if (k == "tc2") c.tc2 = v.get<std::size_t>();
      else if (k == "pool1") c.pool1 = v.get<std::size_t>();
      else if (k == "pool1_stride") c.pool1_stride = v.get<std::size_t>();
      else if (k == "pool2") c.pool2 = v.get<std::size_t>();
      else if (k == "pool2_stride") c.pool2_stride = v.get<std::size_t>();
      else if (k == "encoder_layers") c.encoder_layers = v.get<std::size_t>();
      else if (k == "heads") c.heads = v.get<std::size_t>();
      else if (k == "encoder_mlp_ratio") c.encoder_mlp_ratio = v.get<std::size_t>();
      else if (k == "mlp_hidden") c.mlp_hidden = v.get<std::size_t>();
      else if (k == "use_branch1") c.use_branch1 = v.get<bool>();
      else if (k == "use_branch2_in1") c.use_branch2_in1 = v.get<bool>();
      else if (k == "use_branch2_in2") c.use_branch2_in2 = v.get<bool>();
      else if (k == "use_transformer") c.use_transformer = v.get<bool>();
      else if (k == "per_head_scaling") c.per_head_scaling = v.get<bool>();
      else if (k == "dropout") c.dropout = v.get<double>();
      else throw DataError("unknown model config key '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

DualTsst::DualTsst(ModelConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), init_rng_(seed), dropout_rng_(seed ^ 0x9E3779B97F4A7C15ull) {
  cfg_.validate();
  geom_ = geometry(cfg_);

  const auto shape_branch = [](ConvBranch& b, std::size_t in, std::size_t h, std::size_t k,
                                std::size_t pool, std::size_t stride) {
    b.in_channels = in;
    b.height = h;
    b.time_kernel = k;
    b.pool = pool;
    b.pool_stride = stride;
  };
  shape_branch(branch1_, 1, cfg_.channels, cfg_.tc1, cfg_.pool1, cfg_.pool1_stride);
  shape_branch(view1_, cfg_.channels, cfg_.freqs, cfg_.tc2, cfg_.pool2, cfg_.pool2_stride);
  shape_branch(view2_, cfg_.freqs, cfg_.channels, cfg_.tc2, cfg_.pool2, cfg_.pool2_stride);
  if (cfg_.use_branch1) build_branch(branch1_, "branch1");
  if (cfg_.use_branch2_in1) build_branch(view1_, "branch2.view1");
  if (cfg_.use_branch2_in2) build_branch(view2_, "branch2.view2");

  const std::size_t d = cfg_.d2;
  if (cfg_.use_transformer) {
    std::normal_distribution<double> normal(0.0, 0.02);
    std::vector<double> p(geom_.fused_len * d);
    for (auto& v : p) v = normal(init_rng_);
    pos_ = Tensor::from(Shape{geom_.fused_len, d}, std::move(p), true);
    params_.push_back({"encoder.pos", pos_});

    const std::size_t e = cfg_.encoder_mlp_ratio * d;
    const double bd = 1.0 / std::sqrt(static_cast<double>(d));
    const double be = 1.0 / std::sqrt(static_cast<double>(e));
    for (std::size_t i = 0; i < cfg_.encoder_layers; ++i) {
      const std::string pre = "encoder.layer" + std::to_string(i) + ".";
      EncoderLayer l;
      l.wq = register_param(pre + "attn.q.weight", {d, d}, bd);
      l.bq = register_const(pre + "attn.q.bias", {d}, 0.0, true);
      l.wk = register_param(pre + "attn.k.weight", {d, d}, bd);
      l.bk = register_const(pre + "attn.k.bias", {d}, 0.0, true);
      l.wv = register_param(pre + "attn.v.weight", {d, d}, bd);
      l.bv = register_const(pre + "attn.v.bias", {d}, 0.0, true);
      l.wo = register_param(pre + "attn.out.weight", {d, d}, bd);
      l.bo = register_const(pre + "attn.out.bias", {d}, 0.0, true);
      l.ln1_g = register_const(pre + "norm1.weight", {d}, 1.0, true);
      l.ln1_b = register_const(pre + "norm1.bias", {d}, 0.0, true);
      l.w1 = register_param(pre + "mlp.fc1.weight", {d, e}, bd);
      l.b1 = register_const(pre + "mlp.fc1.bias", {e}, 0.0, true);
      l.w2 = register_param(pre + "mlp.fc2.weight", {e, d}, be);
      l.b2 = register_const(pre + "mlp.fc2.bias", {d}, 0.0, true);
      l.ln2_g = register_const(pre + "norm2.weight", {d}, 1.0, true);
      l.ln2_b = register_const(pre + "norm2.bias", {d}, 0.0, true);
      layers_.push_back(std::move(l));
    }
  }

  const std::size_t h = cfg_.mlp_hidden;
  head_w1_ = register_param("head.fc1.weight", {d, h}, 1.0 / std::sqrt(static_cast<double>(d)));
  head_b1_ = register_const("head.fc1.bias", {h}, 0.0, true);
  head_w2_ = register_param("head.fc2.weight", {h, cfg_.n_classes},
                            1.0 / std::sqrt(static_cast<double>(h)));
  head_b2_ = register_const("head.fc2.bias", {cfg_.n_classes}, 0.0, true);
}

Tensor DualTsst::register_param(const std::string& name, Shape shape, double bound) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(init_rng_);
  Tensor t = Tensor::from(std::move(shape), std::move(v), true);
  params_.push_back({name, t});
  return t;
}

Tensor DualTsst::register_const(const std::string& name, Shape shape, double value,
                                bool trainable) {
  Tensor t = Tensor::full(std::move(shape), value, trainable);
  if (trainable) {
    params_.push_back({name, t});
  } else {
    buffers_.push_back({name, t});
  }
  return t;
}

void DualTsst::build_branch(ConvBranch& b, const std::string& prefix) {
  const std::size_t d1 = cfg_.d1;
  b.tc_w = register_param(prefix + ".tc.weight", {d1, b.in_channels, 1, b.time_kernel},
                          1.0 / std::sqrt(static_cast<double>(b.in_channels * b.time_kernel)));
  b.bn1_g = register_const(prefix + ".bn1.weight", {d1}, 1.0, true);
  b.bn1_b = register_const(prefix + ".bn1.bias", {d1}, 0.0, true);
  b.sc_w = register_param(prefix + ".sc.weight", {d1, 1, b.height, 1},
                          1.0 / std::sqrt(static_cast<double>(b.height)));
  b.bn2_g = register_const(prefix + ".bn2.weight", {d1}, 1.0, true);
  b.bn2_b = register_const(prefix + ".bn2.bias", {d1}, 0.0, true);
  b.pw_w = register_param(prefix + ".pw.weight", {cfg_.d2, d1, 1, 1},
                          1.0 / std::sqrt(static_cast<double>(d1)));
  b.pw_b = register_const(prefix + ".pw.bias", {cfg_.d2}, 0.0, true);
  b.bn1_mean = register_const(prefix + ".bn1.running_mean", {d1}, 0.0, false);
  b.bn1_var = register_const(prefix + ".bn1.running_var", {d1}, 1.0, false);
  b.bn2_mean = register_const(prefix + ".bn2.running_mean", {d1}, 0.0, false);
  b.bn2_var = register_const(prefix + ".bn2.running_var", {d1}, 1.0, false);
}

// x [N, in_channels, height, T] -> [N, L, D2]
Tensor DualTsst::run_branch(ConvBranch& b, const Tensor& x, bool training) {
  Tensor y = conv2d(x, b.tc_w);
  y = batch_norm(y, b.bn1_g, b.bn1_b, b.bn1_mean, b.bn1_var, training);
  y = conv2d(y, b.sc_w, {}, {}, cfg_.d1);
  y = batch_norm(y, b.bn2_g, b.bn2_b, b.bn2_mean, b.bn2_var, training);
  y = elu(y);
  y = avg_pool2d(y, {1, b.pool}, {1, b.pool_stride});
  y = conv2d(y, b.pw_w, b.pw_b);
  const std::size_t n = y.size(0), len = y.size(3);
  y = reshape(y, {n, cfg_.d2, len});
  return permute(y, {0, 2, 1});
}

Tensor DualTsst::branch1_forward(const Tensor& eeg, bool training) {
  if (!cfg_.use_branch1) return {};
  if (eeg.dim() != 3 || eeg.size(1) != cfg_.channels || eeg.size(2) != cfg_.samples) {
    throw ShapeError("branch1: expected [N, " + std::to_string(cfg_.channels) + ", " +
                     std::to_string(cfg_.samples) + "], got " + shape_str(eeg.shape()));
  }
  const Tensor x = reshape(eeg, {eeg.size(0), 1, cfg_.channels, cfg_.samples});
  return run_branch(branch1_, x, training);
}

std::pair<Tensor, Tensor> DualTsst::branch2_forward(const Tensor& x1, const Tensor& x2,
                                                    bool training) {
  const Shape want1{x1.defined() ? x1.size(0) : 0, cfg_.channels, cfg_.freqs, cfg_.samples};
  if (!x1.defined() || x1.shape() != want1) {
    throw ShapeError("branch2 input 1: expected " + shape_str(want1) + ", got " +
                     (x1.defined() ? shape_str(x1.shape()) : std::string("undefined")));
  }
  const Shape want2{x1.size(0), cfg_.freqs, cfg_.channels, cfg_.samples};
  if (!x2.defined() || x2.shape() != want2) {
    throw ShapeError("branch2 input 2: expected " + shape_str(want2) + ", got " +
                     (x2.defined() ? shape_str(x2.shape()) : std::string("undefined")));
  }
  Tensor out1, out2;
  if (cfg_.use_branch2_in1) out1 = run_branch(view1_, x1, training);
  if (cfg_.use_branch2_in2) out2 = run_branch(view2_, x2, training);
  return {out1, out2};
}

Tensor DualTsst::fuse(const std::vector<Tensor>& parts) {
  std::vector<Tensor> enabled;
  for (const auto& p : parts) {
    if (p.defined()) enabled.push_back(p);
  }
  if (enabled.empty()) throw ShapeError("fuse: no enabled branch outputs");
  if (enabled.size() == 1) return enabled.front();
  return concat(enabled, 1);
}

Tensor DualTsst::attention_block(const EncoderLayer& l, const Tensor& x,
                                 std::vector<Tensor>* attention) {
  const std::size_t n = x.size(0), len = x.size(1), d = cfg_.d2, h = cfg_.heads, dh = d / h;
  auto split = [&](const Tensor& t, std::vector<std::size_t> order) {
    return permute(reshape(t, {n, len, h, dh}), order);
  };
  const Tensor q = split(linear(x, l.wq, l.bq), {0, 2, 1, 3});  // [N, h, L, dh]
  const Tensor kt = split(linear(x, l.wk, l.bk), {0, 2, 3, 1}); // [N, h, dh, L]
  const Tensor v = split(linear(x, l.wv, l.bv), {0, 2, 1, 3});  // [N, h, L, dh]
  const double denom = std::sqrt(static_cast<double>(cfg_.per_head_scaling ? dh : d));
  const Tensor weights = softmax(scale(matmul(q, kt), 1.0 / denom));
  if (attention) attention->push_back(weights.detach());
  Tensor heads = permute(matmul(weights, v), {0, 2, 1, 3});  // [N, L, h, dh]
  return linear(reshape(heads, {n, len, d}), l.wo, l.bo);
}

Tensor DualTsst::encoder_forward(const Tensor& fused, bool training,
                                 std::vector<Tensor>* attention) {
  if (fused.dim() != 3 || fused.size(2) != cfg_.d2) {
    throw ShapeError("encoder: expected [N, L, " + std::to_string(cfg_.d2) + "], got " +
                     shape_str(fused.shape()));
  }
  if (!cfg_.use_transformer) return fused;
  if (fused.size(1) != pos_.size(0)) {
    throw ShapeError("encoder: sequence length " + std::to_string(fused.size(1)) +
                     " does not match positional encoding " + shape_str(pos_.shape()));
  }
  Tensor x = add(fused, pos_);
  for (const auto& l : layers_) {
    Tensor a = dropout(attention_block(l, x, attention), cfg_.dropout, training, dropout_rng_);
    const Tensor y = layer_norm(add(x, a), l.ln1_g, l.ln1_b);
    Tensor m = linear(elu(linear(y, l.w1, l.b1)), l.w2, l.b2);
    m = dropout(m, cfg_.dropout, training, dropout_rng_);
    x = layer_norm(add(y, m), l.ln2_g, l.ln2_b);
  }
  return x;
}

Tensor DualTsst::classify(const Tensor& encoded) {
  const Tensor pooled = encoded.dim() == 3 ? gap(encoded) : encoded;
  return linear(elu(linear(pooled, head_w1_, head_b1_)), head_w2_, head_b2_);
}

void DualTsst::check_inputs(const Tensor& eeg, const Tensor& tfr) const {
  if (!eeg.defined() || eeg.dim() != 3 || eeg.size(1) != cfg_.channels ||
      eeg.size(2) != cfg_.samples) {
    throw ShapeError("model expects EEG [N, " + std::to_string(cfg_.channels) + ", " +
                     std::to_string(cfg_.samples) + "], got " +
                     (eeg.defined() ? shape_str(eeg.shape()) : std::string("undefined")));
  }
  if (!tfr.defined() || tfr.dim() != 4 || tfr.size(0) != eeg.size(0) ||
      tfr.size(1) != cfg_.channels || tfr.size(2) != cfg_.freqs || tfr.size(3) != cfg_.samples) {
    throw ShapeError("model expects TFR [N, " + std::to_string(cfg_.channels) + ", " +
                     std::to_string(cfg_.freqs) + ", " + std::to_string(cfg_.samples) + "], got " +
                     (tfr.defined() ? shape_str(tfr.shape()) : std::string("undefined")));
  }
}

Tensor DualTsst::features(const Tensor& eeg, const Tensor& tfr, bool training) {
  check_inputs(eeg, tfr);
  std::vector<Tensor> parts;
  parts.push_back(branch1_forward(eeg, training));
  if (cfg_.use_branch2_in1 || cfg_.use_branch2_in2) {
    const Tensor x2 = permute(tfr, {0, 2, 1, 3});
    auto [v1, v2] = branch2_forward(tfr, x2, training);
    parts.push_back(v1);
    parts.push_back(v2);
  }
  return gap(encoder_forward(fuse(parts), training));
}

Tensor DualTsst::forward(const Tensor& eeg, const Tensor& tfr, bool training) {
  return classify(features(eeg, tfr, training));
}

Tensor& DualTsst::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p.value;
  }
  for (auto& b : buffers_) {
    if (b.name == name) return b.value;
  }
  throw DataError("no parameter named '" + name + "'");
}

std::size_t DualTsst::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void DualTsst::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

void save_checkpoint(const DualTsst& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 4);
  binio::put_u32(os, kCheckpointVersion);
  const std::string cfg = model_config_to_json(model.config());
  binio::put_u32(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto& params = model.parameters();
  const auto& buffers = model.buffers();
  binio::put_u32(os, static_cast<std::uint32_t>(params.size() + buffers.size()));
  for (const auto* group : {&params, &buffers}) {
    for (const auto& p : *group) {
      binio::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
      os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      binio::put_tensor_body(os, p.value);
    }
  }
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

DualTsst load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[4];
  binio::read_exact(is, magic, 4, "checkpoint header");
  if (std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
    throw DataError("bad checkpoint magic in " + path.string());
  }
  const std::uint32_t version = binio::get_u32(is, "checkpoint header");
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t cfg_len = binio::get_u32(is, "checkpoint config");
  std::string cfg_text(cfg_len, '\0');
  binio::read_exact(is, cfg_text.data(), cfg_len, "checkpoint config");
  DualTsst model(model_config_from_json(cfg_text), 0);

  const std::uint32_t count = binio::get_u32(is, "checkpoint tensor count");
  if (count != model.parameters().size() + model.buffers().size()) {
    throw DataError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                    std::to_string(model.parameters().size() + model.buffers().size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = binio::get_u32(is, "checkpoint tensor name");
    std::string name(name_len, '\0');
    binio::read_exact(is, name.data(), name_len, "checkpoint tensor name");
    const Tensor loaded = binio::get_tensor_body(is, "checkpoint tensor " + name);
    Tensor& target = model.parameter(name);
    if (loaded.shape() != target.shape()) {
      throw DataError("checkpoint tensor " + name + " has shape " + shape_str(loaded.shape()) +
                      ", model expects " + shape_str(target.shape()));
    }
    std::copy(loaded.data().begin(), loaded.data().end(), target.mutable_data().begin());
  }
  return model;
}

}  // namespace dtsst
