#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cuecan/autodiff.hpp"
#include "cuecan/cuecan_unit.hpp"
#include "cuecan/error.hpp"
#include "cuecan/ops.hpp"
#include "cuecan/rng.hpp"
#include "cuecan/tensor.hpp"

namespace cuecan {

struct ConvLayer {
  Parameter weight;  // (k, k, cin, cout)
  Parameter bias;    // (1, 1, 1, cout)
};

inline ConvLayer make_conv(const std::string& name, std::size_t k, std::size_t cin, std::size_t cout, Rng& rng) {
  ConvLayer layer{Parameter(name + ".weight", Tensor4({k, k, cin, cout})),
                  Parameter(name + ".bias", Tensor4({1, 1, 1, cout}))};
  // He-uniform for ReLU stacks.
  const double limit = std::sqrt(6.0 / static_cast<double>(k * k * cin));
  for (double& v : layer.weight.value.data()) v = rng.uniform(-limit, limit);
  return layer;
}

inline Var apply_conv(Tape& tape, Var x, ConvLayer& layer) {
  return conv2d(x, tape.param(layer.weight), tape.param(layer.bias));
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

// Two 3x3 conv+ReLU layers, an optional contextual-attention unit, then a
// 2x2 max-pool (applied by the encoder, not stored here).
struct EncoderBlock {
  ConvLayer conv1;
  ConvLayer conv2;
  std::optional<CueCanUnit> unit;
};

struct Encoder {
  std::vector<EncoderBlock> blocks;
  std::size_t pooled_rows = 8;

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (EncoderBlock& b : blocks) {
      for (ConvLayer* c : {&b.conv1, &b.conv2}) {
        out.push_back(&c->weight);
        out.push_back(&c->bias);
      }
      if (b.unit) {
        for (Parameter* p : b.unit->parameters()) out.push_back(p);
      }
    }
    return out;
  }
};

inline Encoder make_encoder(const std::vector<std::size_t>& widths, std::size_t in_channels, std::uint64_t seed) {
  Encoder enc;
  std::size_t cin = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    Rng rng(seed, 1 + i);
    const std::string name = "block" + std::to_string(i + 1);
    EncoderBlock b{make_conv(name + ".conv1", 3, cin, widths[i], rng),
                   make_conv(name + ".conv2", 3, widths[i], widths[i], rng), std::nullopt};
    enc.blocks.push_back(std::move(b));
    cin = widths[i];
  }
  return enc;
}

// Inserts one unit after the last layer of each configured block (1-based
// block indices). Each unit draws from its own seed stream, so the
// surrounding convs initialize identically with and without units.
inline void attach_units(Encoder& enc, const CueCanConfig& cfg, std::uint64_t seed) {
  if (cfg.empty()) return;
  if (enc.blocks.size() < 5) {
    throw ShapeError("attach_units: encoder has " + std::to_string(enc.blocks.size()) + " blocks, need 5");
  }
  for (const UnitSpec& u : cfg.units) {
    if (u.block < 1 || static_cast<std::size_t>(u.block) > enc.blocks.size()) {
      throw ShapeError("attach_units: block " + std::to_string(u.block) + " outside encoder");
    }
    EncoderBlock& b = enc.blocks[static_cast<std::size_t>(u.block - 1)];
    Rng rng(seed, 100 + static_cast<std::uint64_t>(u.block));
    b.unit.emplace("cuecan.b" + std::to_string(u.block), b.conv2.weight.value.shape().c, u, rng, cfg.fill);
  }
  enc.pooled_rows = cfg.pooled_rows;
}

struct EncoderTrace {
  std::vector<Var> features;  // per block, after conv/relu/unit, before pooling
  std::vector<Var> pooled;    // per block, after max-pool
};

inline EncoderTrace encode(Tape& tape, Encoder& enc, Var image) {
  EncoderTrace tr;
  Var x = image;
  for (EncoderBlock& b : enc.blocks) {
    x = relu(apply_conv(tape, x, b.conv1));
    x = relu(apply_conv(tape, x, b.conv2));
    if (b.unit) {
      // Deep blocks can be shorter than the configured pooled rows at small
      // input sizes; the unit then pools to the full feature height.
      const std::size_t rows = std::min(enc.pooled_rows, x.shape().h);
      x = cuecan_forward(x, *b.unit, rows).out;
    }
    tr.features.push_back(x);
    x = max_pool2x2(x);
    tr.pooled.push_back(x);
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Model: encoder + classification head + FCN-8 decoder
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::vector<std::size_t> widths{8, 16, 32, 64, 64};
  std::size_t in_channels = 3;
  CueCanConfig cuecan;
  std::uint64_t seed = 0;
};

struct SegmentOptions {
  bool use_skip3 = true;
  bool use_skip4 = true;
};

struct SegmentTrace {
  EncoderTrace encoder;
  Var score5;  // stride 32
  Var score4;  // stride 16
  Var score3;  // stride 8
  Var fused;   // stride 8, pre final upsample
  Var logits;  // (B, H, W, 1)
};

// Bilinear interpolation kernel for a stride-2 transposed conv of size k.
inline void init_bilinear_upsampler(Parameter& p) {
  const Shape s = p.value.shape();
  const std::size_t k = s.b;
  const double f = std::ceil(static_cast<double>(k) / 2.0);
  const double c = (2.0 * f - 1.0 - std::fmod(f, 2.0)) / (2.0 * f);
  p.value.fill(0.0);
  for (std::size_t y = 0; y < k; ++y) {
    for (std::size_t x = 0; x < k; ++x) {
      const double wv = (1.0 - std::abs(static_cast<double>(y) / f - c)) * (1.0 - std::abs(static_cast<double>(x) / f - c));
      for (std::size_t ch = 0; ch < std::min(s.w, s.c); ++ch) p.value.at(y, x, ch, ch) = wv;
    }
  }
}

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.widths.size() < 5) throw ShapeError("Model: encoder needs five blocks");
    encoder_ = make_encoder(cfg_.widths, cfg_.in_channels, cfg_.seed);
    attach_units(encoder_, cfg_.cuecan, cfg_.seed);

    Rng head_rng(cfg_.seed, 200);
    const std::size_t top = cfg_.widths.back();
    head_w_ = Parameter("head.weight", Tensor4({1, 1, top, 1}));
    init_glorot(head_w_, top, 1, head_rng);
    head_b_ = Parameter("head.bias", Tensor4({1, 1, 1, 1}));

    Rng dec_rng(cfg_.seed, 300);
    score3_ = make_score("decoder.score3", cfg_.widths[2], dec_rng);
    score4_ = make_score("decoder.score4", cfg_.widths[3], dec_rng);
    score5_ = make_score("decoder.score5", cfg_.widths[4], dec_rng);
    // Prior for a rare foreground: sigmoid(bias) ~= 0.01 at start.
    score3_.bias.value[0] = -std::log(99.0);
    up5_ = Parameter("decoder.up5.weight", Tensor4({4, 4, 1, 1}));
    up4_ = Parameter("decoder.up4.weight", Tensor4({4, 4, 1, 1}));
    init_bilinear_upsampler(up5_);
    init_bilinear_upsampler(up4_);
  }

  const ModelConfig& config() const { return cfg_; }
  Encoder& encoder() { return encoder_; }
  ConvLayer& score(int block) { return block == 3 ? score3_ : block == 4 ? score4_ : score5_; }

  std::vector<Parameter*> encoder_parameters() { return encoder_.parameters(); }
  std::vector<Parameter*> head_parameters() { return {&head_w_, &head_b_}; }
  std::vector<Parameter*> decoder_parameters() {
    return {&score3_.weight, &score3_.bias, &score4_.weight, &score4_.bias,
            &score5_.weight, &score5_.bias, &up5_,           &up4_};
  }
  std::vector<Parameter*> classifier_parameters() { return join(encoder_parameters(), head_parameters()); }
  std::vector<Parameter*> segmenter_parameters() { return join(encoder_parameters(), decoder_parameters()); }
  std::vector<Parameter*> parameters() {
    return join(join(encoder_parameters(), head_parameters()), decoder_parameters());
  }

  void check_input(const Shape& s) const {
    if (s.h == 0 || s.w == 0 || s.h % 32 != 0 || s.w % 32 != 0) {
      throw ShapeError("model input spatial dims must be positive multiples of 32, got " + s.str());
    }
    if (s.c != cfg_.in_channels) throw ShapeError("model input channels mismatch: " + s.str());
  }

  EncoderTrace encode(Var image) {
    check_input(image.shape());
    return cuecan::encode(*image.tape, encoder_, image);
  }

  // (B, 1, 1, 1) cue-presence logits.
  Var classify(Var image) { return classify_from(encode(image)); }

  Var classify_from(const EncoderTrace& tr) {
    Tape& tape = *tr.pooled.back().tape;
    return linear(global_avg_pool(tr.pooled.back()), tape.param(head_w_), tape.param(head_b_));
  }

  SegmentTrace segment(Var image, const SegmentOptions& opt = {}) {
    SegmentTrace st;
    st.encoder = encode(image);
    Tape& tape = *image.tape;
    st.score5 = apply_conv(tape, st.encoder.pooled[4], score5_);
    st.score4 = apply_conv(tape, st.encoder.pooled[3], score4_);
    st.score3 = apply_conv(tape, st.encoder.pooled[2], score3_);
    Var x = conv_transpose2d(st.score5, tape.param(up5_), Var{}, 2, 1);
    if (opt.use_skip4) x = add(x, st.score4);
    x = conv_transpose2d(x, tape.param(up4_), Var{}, 2, 1);
    if (opt.use_skip3) x = add(x, st.score3);
    st.fused = x;
    const Shape s = image.shape();
    st.logits = bilinear_upsample(x, s.h, s.w);
    return st;
  }

 private:
  static std::vector<Parameter*> join(std::vector<Parameter*> a, const std::vector<Parameter*>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

  static ConvLayer make_score(const std::string& name, std::size_t cin, Rng& rng) {
    ConvLayer layer{Parameter(name + ".weight", Tensor4({1, 1, cin, 1})), Parameter(name + ".bias", Tensor4({1, 1, 1, 1}))};
    init_glorot(layer.weight, cin, 1, rng);
    return layer;
  }

  ModelConfig cfg_;
  Encoder encoder_;
  Parameter head_w_, head_b_;
  ConvLayer score3_, score4_, score5_;
  Parameter up5_, up4_;
};

// Learnable scalars (masked entries excluded).
inline std::size_t parameter_count(const std::vector<Parameter*>& params) {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->active_count();
  return n;
}

// ---------------------------------------------------------------------------
// Inference helpers
// ---------------------------------------------------------------------------

inline std::vector<double> forward_classify(Model& model, const Tensor4& images) {
  Tape tape;
  Var logits = model.classify(tape.constant(images));
  const Tensor4& v = logits.value();
  return {v.data().begin(), v.data().end()};
}

inline Tensor4 forward_segment(Model& model, const Tensor4& images, const SegmentOptions& opt = {}) {
  Tape tape;
  return model.segment(tape.constant(images), opt).logits.value();
}

// ---------------------------------------------------------------------------
// Grad-CAM
// ---------------------------------------------------------------------------

struct HeatMap {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> values;  // row-major, in [0, 1]

  double at(std::size_t r, std::size_t c) const { return values[r * w + c]; }
};

// Channel weights are the spatial mean of d(target)/d(activation); the map
// is relu(sum_c weight_c * activation_c), scaled to [0, 1] when its max is
// positive. Runs backward on `tape`; activation must be item 0 of its batch.
inline HeatMap grad_cam(Tape& tape, Var activation, Var target) {
  const Shape s = activation.shape();
  if (s.h * s.w * s.c == 0) throw ShapeError("grad_cam: empty activation");
  tape.backward(target);
  HeatMap hm{s.h, s.w, std::vector<double>(s.h * s.w, 0.0)};
  if (!tape.has_grad(activation)) return hm;
  const Tensor4& A = activation.value();
  const Tensor4& G = tape.grad(activation);
  std::vector<double> weights(s.c, 0.0);
  for (std::size_t p = 0; p < s.h * s.w; ++p) {
    for (std::size_t c = 0; c < s.c; ++c) weights[c] += G[p * s.c + c];
  }
  for (double& wv : weights) wv /= static_cast<double>(s.h * s.w);
  double peak = 0.0;
  for (std::size_t p = 0; p < s.h * s.w; ++p) {
    double acc = 0.0;
    for (std::size_t c = 0; c < s.c; ++c) acc += weights[c] * A[p * s.c + c];
    hm.values[p] = acc > 0.0 ? acc : 0.0;
    peak = std::max(peak, hm.values[p]);
  }
  if (peak > 0.0) {
    for (double& v : hm.values) v /= peak;
  }
  return hm;
}

struct CamTarget {
  enum class Kind { Classifier, SegmentPixel } kind = Kind::Classifier;
  std::size_t row = 0;
  std::size_t col = 0;
};

// Grad-CAM at the output of encoder block `block` (1-based) for one image.
inline HeatMap grad_cam(Model& model, const Tensor4& image, const CamTarget& target, int block) {
  if (image.shape().b != 1) throw ShapeError("grad_cam: expects a single image");
  if (block < 1 || static_cast<std::size_t>(block) > model.encoder().blocks.size()) {
    throw ShapeError("grad_cam: no encoder block " + std::to_string(block));
  }
  // Parameter gradients are a side effect of backward; keep the model's clean.
  std::vector<Tensor4> saved;
  for (Parameter* p : model.parameters()) saved.push_back(p->grad);
  Tape tape;
  Var img = tape.constant(image);
  Var activation, scalar;
  if (target.kind == CamTarget::Kind::Classifier) {
    EncoderTrace tr = model.encode(img);
    activation = tr.features[static_cast<std::size_t>(block - 1)];
    scalar = model.classify_from(tr);
  } else {
    SegmentTrace st = model.segment(img);
    activation = st.encoder.features[static_cast<std::size_t>(block - 1)];
    const Shape ls = st.logits.shape();
    if (target.row >= ls.h || target.col >= ls.w) throw ShapeError("grad_cam: target pixel outside image");
    scalar = pick(st.logits, 0, target.row, target.col, 0);
  }
  HeatMap hm = grad_cam(tape, activation, scalar);
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->grad = saved[i];
  return hm;
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/weights.cuet holds named tensor records, <dir>/manifest.json
// the architecture. Record layout: u32 name length, name bytes, tensor record.
// ---------------------------------------------------------------------------

inline const char* fill_mode_name(FillMode m) { return m == FillMode::Full ? "full" : "depthwise"; }

inline nlohmann::json model_manifest(Model& model) {
  const ModelConfig& c = model.config();
  nlohmann::json j;
  j["format"] = "cuecan-checkpoint/1";
  j["cuecan"] = render_cuecan_config(c.cuecan);
  j["pooled_rows"] = c.cuecan.pooled_rows;
  j["fill"] = fill_mode_name(c.cuecan.fill);
  j["widths"] = c.widths;
  j["in_channels"] = c.in_channels;
  j["seed"] = c.seed;
  nlohmann::json names = nlohmann::json::array();
  for (Parameter* p : model.parameters()) {
    const Shape s = p->value.shape();
    names.push_back({{"name", p->name}, {"dims", {s.b, s.h, s.w, s.c}}});
  }
  j["parameters"] = names;
  return j;
}

inline void save_checkpoint(Model& model, const std::filesystem::path& dir, Dtype dtype = Dtype::F64,
                            const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = model_manifest(model);
  manifest["dtype"] = dtype == Dtype::F64 ? "f64" : "f32";
  if (!extra.is_null()) manifest["extra"] = extra;
  {
    std::ofstream js(dir / "manifest.json");
    if (!js) throw DataError((dir / "manifest.json").string() + ": cannot open for writing");
    js << manifest.dump(2) << '\n';
  }
  std::ofstream os(dir / "weights.cuet", std::ios::binary);
  if (!os) throw DataError((dir / "weights.cuet").string() + ": cannot open for writing");
  for (Parameter* p : model.parameters()) {
    detail::put_u32(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    write_tensor(os, p->value, dtype);
  }
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream js(dir / "manifest.json");
  if (!js) throw DataError((dir / "manifest.json").string() + ": cannot open");
  try {
    return nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "manifest.json").string() + ": " + e.what());
  }
}

// Model architecture described by a checkpoint manifest.
inline ModelConfig config_from_manifest(const nlohmann::json& m) {
  ModelConfig c;
  try {
    c.widths = m.at("widths").get<std::vector<std::size_t>>();
    c.in_channels = m.at("in_channels").get<std::size_t>();
    c.seed = m.at("seed").get<std::uint64_t>();
    c.cuecan = parse_cuecan_config(m.at("cuecan").get<std::string>());
    c.cuecan.pooled_rows = m.at("pooled_rows").get<std::size_t>();
    c.cuecan.fill = m.at("fill").get<std::string>() == "depthwise" ? FillMode::Depthwise : FillMode::Full;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint manifest: ") + e.what());
  }
  return c;
}

enum class LoadScope { All, EncoderOnly };

// Loads weights into `model`. The manifest's CueCAn config and widths must
// match the model's; with EncoderOnly the head/decoder entries are ignored.
inline void load_checkpoint(Model& model, const std::filesystem::path& dir, LoadScope scope = LoadScope::All) {
  const nlohmann::json manifest = read_manifest(dir);
  const ModelConfig& mc = model.config();
  const std::string want = render_cuecan_config(mc.cuecan);
  const std::string have = manifest.value("cuecan", std::string("<missing>"));
  if (have != want) {
    throw DataError("checkpoint " + dir.string() + " was trained with cuecan config '" + have +
                    "' but the model uses '" + want + "'");
  }
  if (manifest.value("widths", std::vector<std::size_t>{}) != mc.widths) {
    throw DataError("checkpoint " + dir.string() + ": encoder widths differ from the model");
  }
  const std::filesystem::path wpath = dir / "weights.cuet";
  std::ifstream is(wpath, std::ios::binary);
  if (!is) throw DataError(wpath.string() + ": cannot open");
  std::vector<Parameter*> targets = scope == LoadScope::All ? model.parameters() : model.encoder_parameters();
  std::size_t loaded = 0;
  while (true) {
    const auto pos = static_cast<std::uint64_t>(is.tellg());
    unsigned char lb[4];
    if (!is.read(reinterpret_cast<char*>(lb), 4)) break;
    const auto n = static_cast<std::size_t>(detail::get_le(lb, 4));
    if (n == 0 || n > 1024) throw DataError(wpath.string() + ": byte offset " + std::to_string(pos) + ": bad name length");
    std::string name(n, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(n))) {
      throw DataError(wpath.string() + ": byte offset " + std::to_string(pos + 4) + ": truncated name");
    }
    Tensor4 t = read_tensor(is, wpath.string(), pos + 4 + n);
    for (Parameter* p : targets) {
      if (p->name != name) continue;
      if (p->value.shape() != t.shape()) {
        throw DataError(wpath.string() + ": parameter '" + name + "' has shape " + t.shape().str() +
                        ", model expects " + p->value.shape().str());
      }
      p->value = std::move(t);
      p->apply_mask();
      ++loaded;
      break;
    }
  }
  if (loaded != targets.size()) {
    throw DataError(wpath.string() + ": loaded " + std::to_string(loaded) + " of " + std::to_string(targets.size()) +
                    " parameters");
  }
}

}  // namespace cuecan
