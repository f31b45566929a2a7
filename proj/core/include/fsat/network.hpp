#pragma once

// End-to-end fusion network: input concatenation, shallow feature
// extraction, a stack of FSAT blocks (ITM + FSAM with a block-level
// residual), and 1x1 reconstruction with tanh remapped to [0,1].

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "fsat/fsam.hpp"
#include "fsat/image.hpp"
#include "fsat/itm.hpp"
#include "fsat/ops.hpp"
#include "fsat/rng.hpp"
#include "fsat/tensor.hpp"

namespace fsat {

enum class Ablation : std::uint32_t { Full = 0, NoFsam = 1, NoItm = 2, Reverse = 3 };

inline const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoFsam: return "no_fsam";
    case Ablation::NoItm: return "no_itm";
    case Ablation::Reverse: return "reverse";
  }
  return "full";
}

inline Ablation ablation_from_name(const std::string& s) {
  if (s == "full") return Ablation::Full;
  if (s == "no_fsam") return Ablation::NoFsam;
  if (s == "no_itm") return Ablation::NoItm;
  if (s == "reverse") return Ablation::Reverse;
  throw std::invalid_argument("unknown ablation '" + s + "' (full|no_fsam|no_itm|reverse)");
}

struct NetworkConfig {
  int channels = 16;   // C
  int in_channels = 2; // fixed: IR + VI
  int n_fsat = 2;
  int window = 8;      // M
  int groups = 16;     // frequency groups, must divide channels
  Ablation ablation = Ablation::Full;
  bool pre_norm = true;  // not serialized; forward-behavior switch

  void validate() const {
    if (in_channels != 2) throw std::invalid_argument("config: in_channels must be 2");
    if (n_fsat < 1) throw std::invalid_argument("config: n_fsat must be >= 1");
    if (channels < 1 || groups < 1 || channels % groups != 0)
      throw std::invalid_argument("config: groups must divide channels");
    if (window < 1) throw std::invalid_argument("config: window must be >= 1");
  }
  bool block_has_itm() const { return ablation != Ablation::NoItm; }
  bool block_has_fsam() const { return ablation != Ablation::NoFsam; }
};

template <class T>
struct FsatBlockParams {
  ItmParams<T> itm;
  FsamParams<T> fsam;
};

template <class T>
struct ModelParams {
  TensorT<T> conv1_w, conv1_b;  // C x 2 x 3 x 3
  TensorT<T> conv2_w, conv2_b;  // C x C x 3 x 3
  TensorT<T> bn_gamma, bn_beta;
  TensorT<T> bn_mean, bn_var;   // running stats, not learnable
  std::vector<FsatBlockParams<T>> blocks;
  TensorT<T> recon_w, recon_b;  // 1 x C x 1 x 1

  // Every stored tensor (learnable + BN running stats) in serialization order.
  std::vector<std::pair<std::string, TensorT<T>*>> named(const NetworkConfig& cfg) {
    std::vector<std::pair<std::string, TensorT<T>*>> out;
    out.emplace_back("conv1.weight", &conv1_w);
    out.emplace_back("conv1.bias", &conv1_b);
    out.emplace_back("conv2.weight", &conv2_w);
    out.emplace_back("conv2.bias", &conv2_b);
    out.emplace_back("bn.gamma", &bn_gamma);
    out.emplace_back("bn.beta", &bn_beta);
    out.emplace_back("bn.running_mean", &bn_mean);
    out.emplace_back("bn.running_var", &bn_var);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string pre = "fsat" + std::to_string(i) + ".";
      auto& blk = blocks[i];
      if (cfg.block_has_itm()) {
        out.emplace_back(pre + "itm.norm1.gamma", &blk.itm.norm1_g);
        out.emplace_back(pre + "itm.norm1.beta", &blk.itm.norm1_b);
        out.emplace_back(pre + "itm.wq", &blk.itm.wq);
        out.emplace_back(pre + "itm.wk", &blk.itm.wk);
        out.emplace_back(pre + "itm.wv", &blk.itm.wv);
        out.emplace_back(pre + "itm.norm2.gamma", &blk.itm.norm2_g);
        out.emplace_back(pre + "itm.norm2.beta", &blk.itm.norm2_b);
        out.emplace_back(pre + "itm.mlp.w1", &blk.itm.mlp_w1);
        out.emplace_back(pre + "itm.mlp.b1", &blk.itm.mlp_b1);
        out.emplace_back(pre + "itm.mlp.w2", &blk.itm.mlp_w2);
        out.emplace_back(pre + "itm.mlp.b2", &blk.itm.mlp_b2);
      }
      if (cfg.block_has_fsam()) {
        out.emplace_back(pre + "fsam.fc.weight", &blk.fsam.fc_w);
        out.emplace_back(pre + "fsam.fc.bias", &blk.fsam.fc_b);
        out.emplace_back(pre + "fsam.sconv.weight", &blk.fsam.sconv_w);
        out.emplace_back(pre + "fsam.sconv.bias", &blk.fsam.sconv_b);
      }
    }
    out.emplace_back("recon.weight", &recon_w);
    out.emplace_back("recon.bias", &recon_b);
    return out;
  }

  // Learnable tensors only (running stats excluded).
  std::vector<std::pair<std::string, TensorT<T>*>> learnable(const NetworkConfig& cfg) {
    auto all = named(cfg);
    std::vector<std::pair<std::string, TensorT<T>*>> out;
    for (auto& [name, t] : all)
      if (name.find("running_") == std::string::npos) out.push_back({name, t});
    return out;
  }

  void zero_grad(const NetworkConfig& cfg) {
    for (auto& [name, t] : learnable(cfg)) t->zero_grad();
  }
};

using ModelParamsF = ModelParams<float>;
using ModelParamsD = ModelParams<double>;

namespace detail {

template <class T>
TensorT<T> uniform_tensor(std::vector<int> shape, double bound, Rng& rng) {
  TensorT<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}

template <class T>
TensorT<T> const_tensor(std::vector<int> shape, T v, bool learnable = true) {
  TensorT<T> t(std::move(shape), v);
  t.set_requires_grad(learnable);
  return t;
}

}  // namespace detail

// Fan-in scaled uniform init (bound = sqrt(1/fan_in)) for conv and linear
// weights, zero biases, identity norms, BN stats (0, 1). Reproducible per seed.
template <class T>
ModelParams<T> init_params(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int c = cfg.channels;
  ModelParams<T> p;
  p.conv1_w = detail::uniform_tensor<T>({c, cfg.in_channels, 3, 3},
                                        std::sqrt(1.0 / (cfg.in_channels * 9)), rng);
  p.conv1_b = detail::const_tensor<T>({c}, T(0));
  p.conv2_w = detail::uniform_tensor<T>({c, c, 3, 3}, std::sqrt(1.0 / (c * 9)), rng);
  p.conv2_b = detail::const_tensor<T>({c}, T(0));
  p.bn_gamma = detail::const_tensor<T>({c}, T(1));
  p.bn_beta = detail::const_tensor<T>({c}, T(0));
  p.bn_mean = detail::const_tensor<T>({c}, T(0), false);
  p.bn_var = detail::const_tensor<T>({c}, T(1), false);
  p.blocks.resize(static_cast<std::size_t>(cfg.n_fsat));
  for (auto& blk : p.blocks) {
    if (cfg.block_has_itm()) {
      const double wb = std::sqrt(1.0 / c);
      blk.itm.norm1_g = detail::const_tensor<T>({c}, T(1));
      blk.itm.norm1_b = detail::const_tensor<T>({c}, T(0));
      blk.itm.wq = detail::uniform_tensor<T>({c, c}, wb, rng);
      blk.itm.wk = detail::uniform_tensor<T>({c, c}, wb, rng);
      blk.itm.wv = detail::uniform_tensor<T>({c, c}, wb, rng);
      blk.itm.norm2_g = detail::const_tensor<T>({c}, T(1));
      blk.itm.norm2_b = detail::const_tensor<T>({c}, T(0));
      blk.itm.mlp_w1 = detail::uniform_tensor<T>({c, 2 * c}, wb, rng);
      blk.itm.mlp_b1 = detail::const_tensor<T>({2 * c}, T(0));
      blk.itm.mlp_w2 = detail::uniform_tensor<T>({2 * c, c}, std::sqrt(1.0 / (2 * c)), rng);
      blk.itm.mlp_b2 = detail::const_tensor<T>({c}, T(0));
    }
    if (cfg.block_has_fsam()) {
      blk.fsam.fc_w = detail::uniform_tensor<T>({c, c}, std::sqrt(1.0 / c), rng);
      blk.fsam.fc_b = detail::const_tensor<T>({c}, T(0));
      blk.fsam.sconv_w = detail::uniform_tensor<T>({1, 2, 7, 7}, std::sqrt(1.0 / (2 * 49)), rng);
      blk.fsam.sconv_b = detail::const_tensor<T>({1}, T(0));
    }
  }
  p.recon_w = detail::uniform_tensor<T>({1, c, 1, 1}, std::sqrt(1.0 / c), rng);
  p.recon_b = detail::const_tensor<T>({1}, T(0));
  return p;
}

template <class T>
std::int64_t param_count(const NetworkConfig& cfg) {
  ModelParams<T> p = init_params<T>(cfg, 0);
  std::int64_t n = 0;
  for (auto& [name, t] : p.learnable(cfg)) n += t->numel();
  return n;
}

// Channel 0 = IR, channel 1 = VI.
template <class T>
TensorT<T> concat_inputs(const Image& ir, const Image& vi) {
  if (ir.width != vi.width || ir.height != vi.height) {
    throw std::invalid_argument("concat_inputs: dimension mismatch, ir " +
                                std::to_string(ir.width) + "x" + std::to_string(ir.height) +
                                " vs vi " + std::to_string(vi.width) + "x" +
                                std::to_string(vi.height));
  }
  if (ir.channels != 1 || vi.channels != 1)
    throw std::invalid_argument("concat_inputs: expected grayscale inputs");
  TensorT<T> out({1, 2, ir.height, ir.width});
  const std::int64_t hw = static_cast<std::int64_t>(ir.height) * ir.width;
  for (std::int64_t i = 0; i < hw; ++i) {
    out.data()[i] = static_cast<T>(ir.data[static_cast<std::size_t>(i)]);
    out.data()[hw + i] = static_cast<T>(vi.data[static_cast<std::size_t>(i)]);
  }
  return out;
}

// Re(BN(Conv3(Re(Conv3(F_in))))) with zero-same padding.
template <class T>
TensorT<T> shallow_extract(const TensorT<T>& f_in, ModelParams<T>& p, bool train,
                           Graph<T>* g = nullptr) {
  TensorT<T> a = relu(conv2d(f_in, p.conv1_w, p.conv1_b, Pad::Zero, g), g);
  TensorT<T> b = conv2d(a, p.conv2_w, p.conv2_b, Pad::Zero, g);
  TensorT<T> n = batchnorm2d(b, p.bn_gamma, p.bn_beta, p.bn_mean, p.bn_var, train, g);
  return relu(n, g);
}

// One FSAT block with a block-level residual; the ablation switch selects
// which stages run and in which order.
template <class T>
TensorT<T> fsat_forward(const TensorT<T>& f, FsatBlockParams<T>& blk, const NetworkConfig& cfg,
                        Graph<T>* g = nullptr) {
  TensorT<T> inner;
  switch (cfg.ablation) {
    case Ablation::Full:
      inner = fsam_forward(itm_forward(f, blk.itm, cfg.window, cfg.pre_norm, g), blk.fsam,
                           cfg.groups, g);
      break;
    case Ablation::NoFsam:
      inner = itm_forward(f, blk.itm, cfg.window, cfg.pre_norm, g);
      break;
    case Ablation::NoItm:
      inner = fsam_forward(f, blk.fsam, cfg.groups, g);
      break;
    case Ablation::Reverse:
      inner = itm_forward(fsam_forward(f, blk.fsam, cfg.groups, g), blk.itm, cfg.window,
                          cfg.pre_norm, g);
      break;
  }
  return add(f, inner, g);
}

// Full forward pass on an [N,2,H,W] batch; output in [0,1] via (tanh+1)/2.
template <class T>
TensorT<T> network_forward(const TensorT<T>& f_in, ModelParams<T>& p, const NetworkConfig& cfg,
                           bool train, Graph<T>* g = nullptr) {
  TensorT<T> f = shallow_extract(f_in, p, train, g);
  for (auto& blk : p.blocks) f = fsat_forward(f, blk, cfg, g);
  TensorT<T> r = conv2d(f, p.recon_w, p.recon_b, Pad::Zero, g);
  return add_scalar(mul_scalar(tanh_act(r, g), T(0.5), g), T(0.5), g);
}

// Inference on one registered pair.
template <class T>
Image fuse_forward(const Image& ir, const Image& vi, ModelParams<T>& p, const NetworkConfig& cfg) {
  TensorT<T> f_in = concat_inputs<T>(ir, vi);
  TensorT<T> out = network_forward(f_in, p, cfg, /*train=*/false, static_cast<Graph<T>*>(nullptr));
  Image img(ir.width, ir.height, 1);
  for (std::size_t i = 0; i < img.data.size(); ++i)
    img.data[i] = static_cast<float>(out.data()[static_cast<std::int64_t>(i)]);
  return img;
}

// ---------------------------------------------------------------------------
// Model container: magic "FSAT", version u32 LE, config block
// (C, Cin, n_fsat, M, groups, ablation) as u32 LE, then records
// {name_len u32, name, rank u32, dims u32 x rank, f32 LE data}.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& path, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4)
    throw std::runtime_error(path + ": truncated record (" + what + ")");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline float get_f32(std::istream& in, const std::string& path, const char* what) {
  const std::uint32_t bits = get_u32(in, path, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

template <class T>
void save_params(ModelParams<T>& params, const NetworkConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open file for writing");
  out.write("FSAT", 4);
  detail::put_u32(out, kModelVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.channels));
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.in_channels));
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.n_fsat));
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.window));
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.groups));
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.ablation));
  for (auto& [name, t] : params.named(cfg)) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(t->rank()));
    for (int d = 0; d < t->rank(); ++d) detail::put_u32(out, static_cast<std::uint32_t>(t->dim(d)));
    for (std::int64_t i = 0; i < t->numel(); ++i)
      detail::put_f32(out, static_cast<float>(t->data()[i]));
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

template <class T>
struct LoadedModel {
  NetworkConfig config;
  ModelParams<T> params;
};

// Loads a model file. When `expected` is given, the file's config must match
// it; otherwise the embedded config is used. Errors are distinct: bad magic,
// unsupported version, truncated record, unexpected/mismatched tensor.
template <class T>
LoadedModel<T> load_params(const std::string& path, const NetworkConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open file");
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::string(magic, 4) != "FSAT")
    throw std::runtime_error(path + ": bad magic");
  const std::uint32_t version = detail::get_u32(in, path, "version");
  if (version != kModelVersion)
    throw std::runtime_error(path + ": unsupported version " + std::to_string(version));
  NetworkConfig cfg;
  cfg.channels = static_cast<int>(detail::get_u32(in, path, "config"));
  cfg.in_channels = static_cast<int>(detail::get_u32(in, path, "config"));
  cfg.n_fsat = static_cast<int>(detail::get_u32(in, path, "config"));
  cfg.window = static_cast<int>(detail::get_u32(in, path, "config"));
  cfg.groups = static_cast<int>(detail::get_u32(in, path, "config"));
  cfg.ablation = static_cast<Ablation>(detail::get_u32(in, path, "config"));
  cfg.validate();
  if (expected) {
    if (cfg.channels != expected->channels || cfg.in_channels != expected->in_channels ||
        cfg.n_fsat != expected->n_fsat || cfg.window != expected->window ||
        cfg.groups != expected->groups || cfg.ablation != expected->ablation) {
      throw std::runtime_error(path + ": model config (" + std::to_string(cfg.channels) + "ch, " +
                               std::to_string(cfg.n_fsat) + " blocks, " +
                               ablation_name(cfg.ablation) + ") does not match the requested one");
    }
  }
  LoadedModel<T> model;
  model.config = cfg;
  model.params = init_params<T>(cfg, 0);
  for (auto& [name, t] : model.params.named(cfg)) {
    const std::uint32_t nlen = detail::get_u32(in, path, "record name");
    std::string fname(nlen, '\0');
    in.read(fname.data(), static_cast<std::streamsize>(nlen));
    if (in.gcount() != static_cast<std::streamsize>(nlen))
      throw std::runtime_error(path + ": truncated record (name)");
    if (fname != name)
      throw std::runtime_error(path + ": unexpected tensor '" + fname + "' (expected '" + name +
                               "')");
    const std::uint32_t rank = detail::get_u32(in, path, "rank");
    std::vector<int> dims(rank);
    for (std::uint32_t d = 0; d < rank; ++d)
      dims[d] = static_cast<int>(detail::get_u32(in, path, "dims"));
    if (dims != t->shape())
      throw std::runtime_error(path + ": shape mismatch for tensor '" + name + "': file " +
                               shape_str(dims) + " vs config " + shape_str(t->shape()));
    for (std::int64_t i = 0; i < t->numel(); ++i)
      t->data()[i] = static_cast<T>(detail::get_f32(in, path, name.c_str()));
  }
  return model;
}

}  // namespace fsat
