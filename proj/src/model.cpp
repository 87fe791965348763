#include "rsfm/model.hpp"

#include <cmath>
#include <limits>

#include "rsfm/rng.hpp"

namespace rsfm::model {

namespace {

std::string stage_prefix(int s) { return "stages." + std::to_string(s) + "."; }
std::string block_prefix(int s, int b) { return stage_prefix(s) + "blocks." + std::to_string(b) + "."; }

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

std::vector<std::int64_t> merge_index(Index frames, Index h, Index w, Index D) {
  static constexpr Index kOffsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(frames * h * w * D));
  for (Index f = 0; f < frames; ++f)
    for (Index y = 0; y < h / 2; ++y)
      for (Index x = 0; x < w / 2; ++x)
        for (const auto& o : kOffsets) {
          const Index base = ((f * h + 2 * y + o[0]) * w + 2 * x + o[1]) * D;
          for (Index d = 0; d < D; ++d) idx.push_back(base + d);
        }
  return idx;
}

std::vector<std::int64_t> im2col_index(Index frames, Index h, Index w, Index D, Index k) {
  const Index pad = k / 2;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(frames * h * w * k * k * D));
  for (Index f = 0; f < frames; ++f)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        for (Index ky = 0; ky < k; ++ky)
          for (Index kx = 0; kx < k; ++kx) {
            const Index sy = y + ky - pad, sx = x + kx - pad;
            const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
            for (Index d = 0; d < D; ++d) idx.push_back(inside ? ((f * h + sy) * w + sx) * D + d : -1);
          }
  return idx;
}

// [B, T, G*hw, D] -> [B, G*hw, T, D]
std::vector<std::int64_t> time_major_index(Index B, Index T, Index rest, Index D) {
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(B * T * rest * D));
  for (Index b = 0; b < B; ++b)
    for (Index r = 0; r < rest; ++r)
      for (Index t = 0; t < T; ++t) {
        const Index base = ((b * T + t) * rest + r) * D;
        for (Index d = 0; d < D; ++d) idx.push_back(base + d);
      }
  return idx;
}

std::vector<std::int64_t> temporal_bias_index(Index T, Index heads) {
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(heads * T * T));
  for (Index h = 0; h < heads; ++h)
    for (Index i = 0; i < T; ++i)
      for (Index j = 0; j < T; ++j) idx.push_back((i - j + T - 1) * heads + h);
  return idx;
}

std::vector<std::int64_t> assemble_index(const Shape& s, Index S, Index cp) {
  const Index B = s[0], T = s[1], G = s[2], h = s[3], w = s[4], K = s[5];
  const Index C = G * cp, H = h * S, W = w * S;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(B * T * C * H * W));
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index c = 0; c < C; ++c) {
        const Index g = c / cp, band = c % cp;
        for (Index Y = 0; Y < H; ++Y)
          for (Index X = 0; X < W; ++X) {
            const Index tok = (((b * T + t) * G + g) * h + Y / S) * w + X / S;
            idx.push_back(tok * K + (band * S + Y % S) * S + X % S);
          }
      }
  return idx;
}

template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng, double std) {
  Tensor<T> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.truncated_normal(std));
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ModelConfig ModelConfig::swin_t() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.height = c.width = 32;
  c.channels = 6;
  c.frames = 2;
  c.embed_dim = 8;
  c.depths = {1, 1, 1, 1};
  c.num_heads = {1, 1, 2, 2};
  c.window = 2;
  c.shift = 1;
  return c;
}

ModelConfig ModelConfig::desk() {
  ModelConfig c = tiny();
  c.height = c.width = 64;
  c.frames = 6;
  c.window = 4;
  c.shift = 2;
  return c;
}

Index ModelConfig::stage_window(int s) const { return std::min({window, stage_h(s), stage_w(s)}); }

Index ModelConfig::stage_shift(int s) const { return std::min(stage_h(s), stage_w(s)) <= window ? 0 : shift; }

Index ModelConfig::hf_dim(int s) const {
  return std::max<Index>(1, static_cast<Index>(std::lround(static_cast<double>(stage_dim(s)) * hf_bottleneck_ratio)));
}

void ModelConfig::validate() const {
  require(height > 0 && width > 0 && channels > 0 && frames > 0, "model dims must be positive");
  require(patch_size > 0 && height % patch_size == 0, "patch size must divide H");
  require(width % patch_size == 0, "patch size must divide W");
  require(spectral_group > 0 && channels % spectral_group == 0, "spectral group must divide C");
  const Index reduce = Index{1} << (kStages - 1);
  require(grid_h() % reduce == 0 && grid_w() % reduce == 0,
          "patch grid " + std::to_string(grid_h()) + "x" + std::to_string(grid_w()) +
              " cannot be halved three times");
  require(embed_dim > 0, "embed_dim must be positive");
  require(window > 0 && shift >= 0 && shift < window, "need 0 <= shift < window");
  require(grid_h() % window == 0 && grid_w() % window == 0, "attention window must divide the stage-1 patch grid");
  require(hf_kernel > 0 && hf_kernel % 2 == 1, "hf kernel must be odd");
  require(hf_bottleneck_ratio > 0, "hf bottleneck ratio must be positive");
  require(mlp_ratio > 0, "mlp ratio must be positive");
  for (int s = 0; s < kStages; ++s) {
    const auto tag = "stage " + std::to_string(s + 1);
    require(depths[static_cast<std::size_t>(s)] >= 1, tag + ": depth must be at least 1");
    const Index h = num_heads[static_cast<std::size_t>(s)];
    require(h > 0 && stage_dim(s) % h == 0, tag + ": width must be divisible by its head count");
    const Index M = stage_window(s);
    require(stage_h(s) % M == 0 && stage_w(s) % M == 0, tag + ": window does not divide the grid");
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"channels", c.channels},
          {"frames", c.frames},
          {"patch_size", c.patch_size},
          {"spectral_group", c.spectral_group},
          {"embed_dim", c.embed_dim},
          {"depths", c.depths},
          {"num_heads", c.num_heads},
          {"window", c.window},
          {"shift", c.shift},
          {"mlp_ratio", c.mlp_ratio},
          {"hf_bottleneck_ratio", c.hf_bottleneck_ratio},
          {"hf_kernel", c.hf_kernel},
          {"init_std", c.init_std}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  const auto known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError("unknown model config key '" + it.key() + "'");
  }
  try {
    auto get = [&](const char* k, auto& dst) {
      if (j.contains(k)) dst = j.at(k).get<std::decay_t<decltype(dst)>>();
    };
    get("height", c.height);
    get("width", c.width);
    get("channels", c.channels);
    get("frames", c.frames);
    get("patch_size", c.patch_size);
    get("spectral_group", c.spectral_group);
    get("embed_dim", c.embed_dim);
    get("depths", c.depths);
    get("num_heads", c.num_heads);
    get("window", c.window);
    get("shift", c.shift);
    get("mlp_ratio", c.mlp_ratio);
    get("hf_bottleneck_ratio", c.hf_bottleneck_ratio);
    get("hf_kernel", c.hf_kernel);
    get("init_std", c.init_std);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Index builders

std::vector<std::int64_t> window_partition_index(Index frames, Index h, Index w, Index D, Index M, Index shift) {
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(frames * h * w * D));
  for (Index f = 0; f < frames; ++f)
    for (Index wy = 0; wy < h / M; ++wy)
      for (Index wx = 0; wx < w / M; ++wx)
        for (Index iy = 0; iy < M; ++iy)
          for (Index ix = 0; ix < M; ++ix) {
            const Index sy = (wy * M + iy + shift) % h, sx = (wx * M + ix + shift) % w;
            const Index base = ((f * h + sy) * w + sx) * D;
            for (Index d = 0; d < D; ++d) idx.push_back(base + d);
          }
  return idx;
}

std::vector<std::int64_t> invert_permutation(const std::vector<std::int64_t>& perm) {
  std::vector<std::int64_t> inv(perm.size(), -1);
  for (std::size_t k = 0; k < perm.size(); ++k) inv[static_cast<std::size_t>(perm[k])] = static_cast<std::int64_t>(k);
  return inv;
}

std::vector<std::int64_t> relative_bias_index(Index M, Index heads) {
  const Index N = M * M, span = 2 * M - 1;
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(heads * N * N));
  for (Index h = 0; h < heads; ++h)
    for (Index i = 0; i < N; ++i)
      for (Index j = 0; j < N; ++j) {
        const Index dy = i / M - j / M + M - 1, dx = i % M - j % M + M - 1;
        idx.push_back((dy * span + dx) * heads + h);
      }
  return idx;
}

Tensor<double> shifted_window_mask(Index h, Index w, Index M, Index shift) {
  const Index nW = (h / M) * (w / M), N = M * M;
  Tensor<double> mask(Shape{nW, N, N});
  if (shift == 0) return mask;
  auto region = [M, shift](Index v, Index n) { return v < n - M ? 0 : (v < n - shift ? 1 : 2); };
  std::vector<int> label(static_cast<std::size_t>(nW * N));
  for (Index wy = 0; wy < h / M; ++wy)
    for (Index wx = 0; wx < w / M; ++wx)
      for (Index i = 0; i < N; ++i) {
        const Index y = wy * M + i / M, x = wx * M + i % M;
        label[static_cast<std::size_t>((wy * (w / M) + wx) * N + i)] = static_cast<int>(region(y, h) * 3 + region(x, w));
      }
  const double neg = -std::numeric_limits<double>::infinity();
  for (Index k = 0; k < nW; ++k)
    for (Index i = 0; i < N; ++i)
      for (Index j = 0; j < N; ++j) {
        if (label[static_cast<std::size_t>(k * N + i)] != label[static_cast<std::size_t>(k * N + j)]) mask.at(k, i, j) = neg;
      }
  return mask;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
Var<T> ParamStore<T>::add(std::string name, Tensor<T> init, bool decay) {
  if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
  Var<T> v(std::move(init), true);
  index_[name] = params_.size();
  params_.push_back({std::move(name), v, decay});
  return v;
}

template <typename T>
const Var<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return params_[it->second].var;
}

template <typename T>
Index ParamStore<T>::count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.var.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, "model-init"));
  const double sd = cfg_.init_std;
  auto linear = [&](const std::string& name, Index out, Index in, bool bias = true) {
    params_.add(name + ".weight", trunc_normal<T>({out, in}, rng, sd), true);
    if (bias) params_.add(name + ".bias", Tensor<T>(Shape{out}), false);
  };
  auto norm = [&](const std::string& name, Index d) {
    params_.add(name + ".weight", Tensor<T>(Shape{d}, T(1)), false);
    params_.add(name + ".bias", Tensor<T>(Shape{d}), false);
  };

  const Index D0 = cfg_.embed_dim;
  linear("embed", D0, cfg_.patch_dim());
  norm("embed.norm", D0);
  params_.add("mask_token", trunc_normal<T>({D0}, rng, sd), false);

  for (int s = 0; s < kStages; ++s) {
    const Index D = cfg_.stage_dim(s), Dh = cfg_.hf_dim(s), heads = cfg_.num_heads[static_cast<std::size_t>(s)];
    const Index M = cfg_.stage_window(s), k = cfg_.hf_kernel;
    for (Index b = 0; b < cfg_.depths[static_cast<std::size_t>(s)]; ++b) {
      const auto pre = block_prefix(s, static_cast<int>(b));
      norm(pre + "hf.norm", D);
      linear(pre + "hf.reduce", Dh, D);
      linear(pre + "hf.conv", Dh, k * k * Dh);
      linear(pre + "hf.expand", D, Dh);
      for (int n = 1; n <= 4; ++n) norm(pre + "lf.norm" + std::to_string(n), D);
      linear(pre + "lf.attn.qkv", 3 * D, D);
      linear(pre + "lf.attn.proj", D, D);
      params_.add(pre + "lf.attn.rel_bias", trunc_normal<T>({(2 * M - 1) * (2 * M - 1), heads}, rng, sd), false);
      params_.add(pre + "lf.temporal_bias", trunc_normal<T>({2 * cfg_.frames - 1, heads}, rng, sd), false);
      linear(pre + "lf.mlp.fc1", cfg_.mlp_ratio * D, D);
      linear(pre + "lf.mlp.fc2", D, cfg_.mlp_ratio * D);
    }
    if (s + 1 < kStages) {
      norm(stage_prefix(s) + "merge.norm", 4 * D);
      linear(stage_prefix(s) + "merge.reduction", 2 * D, 4 * D, false);
    }
    const Tensor<double> m = shifted_window_mask(cfg_.stage_h(s), cfg_.stage_w(s), M, cfg_.stage_shift(s));
    shift_masks_[static_cast<std::size_t>(s)] = m.cast<T>();
  }
  const Index S = cfg_.decoder_block();
  norm("decoder.norm", cfg_.stage_dim(kStages - 1));
  linear("decoder.head", cfg_.spectral_group * S * S, cfg_.stage_dim(kStages - 1));
}

template <typename T>
typename Model<T>::IndexPtr Model<T>::cached(const std::string& key,
                                             const std::function<std::vector<std::int64_t>()>& build) const {
  {
    std::lock_guard<std::mutex> lock(cache_mu_);
    auto it = index_cache_.find(key);
    if (it != index_cache_.end()) return it->second;
  }
  auto ptr = std::make_shared<const std::vector<std::int64_t>>(build());
  std::lock_guard<std::mutex> lock(cache_mu_);
  return index_cache_.emplace(key, ptr).first->second;
}

template <typename T>
Var<T> Model<T>::patch_embed(const Var<T>& patches, const std::vector<std::uint8_t>& masked) const {
  const Shape& s = patches.shape();
  if (s.size() != 6 || s[1] != cfg_.frames || s[2] != cfg_.groups() || s[3] != cfg_.grid_h() ||
      s[4] != cfg_.grid_w() || s[5] != cfg_.patch_dim()) {
    throw ConfigError("patch_embed: patches " + shape_str(s) + " do not match the model grid");
  }
  Var<T> x = ag::linear(patches, p("embed.weight"), p("embed.bias"));
  x = ag::layer_norm(x, p("embed.norm.weight"), p("embed.norm.bias"));
  if (!masked.empty()) {
    if (static_cast<Index>(masked.size()) != x.size() / cfg_.embed_dim) {
      throw ConfigError("patch_embed: mask has " + std::to_string(masked.size()) + " entries for " +
                        std::to_string(x.size() / cfg_.embed_dim) + " patches");
    }
    x = ag::fill_masked_rows(x, masked, p("mask_token"));
  }
  return x;
}

template <typename T>
Var<T> Model<T>::hf_branch(const Var<T>& x, int s, int b) const {
  const auto pre = block_prefix(s, b);
  const Shape& sh = x.shape();
  const Index frames = sh[0] * sh[1] * sh[2], h = sh[3], w = sh[4], Dh = cfg_.hf_dim(s), k = cfg_.hf_kernel;
  Var<T> n = ag::layer_norm(x, p(pre + "hf.norm.weight"), p(pre + "hf.norm.bias"));
  Var<T> r = ag::linear(n, p(pre + "hf.reduce.weight"), p(pre + "hf.reduce.bias"));
  auto idx = cached("im2col:" + std::to_string(frames) + ":" + std::to_string(h) + ":" + std::to_string(w) + ":" +
                        std::to_string(Dh) + ":" + std::to_string(k),
                    [=] { return im2col_index(frames, h, w, Dh, k); });
  Var<T> cols = ag::gather(r, idx, {sh[0], sh[1], sh[2], h, w, k * k * Dh});
  Var<T> c = ag::gelu(ag::linear(cols, p(pre + "hf.conv.weight"), p(pre + "hf.conv.bias")));
  return ag::linear(c, p(pre + "hf.expand.weight"), p(pre + "hf.expand.bias"));
}

template <typename T>
Var<T> Model<T>::mlp(const Var<T>& x, const std::string& pre) const {
  Var<T> h = ag::gelu(ag::linear(x, p(pre + "fc1.weight"), p(pre + "fc1.bias")));
  return ag::linear(h, p(pre + "fc2.weight"), p(pre + "fc2.bias"));
}

template <typename T>
Var<T> Model<T>::spatial_attention(const Var<T>& n, int s, int b) const {
  const auto pre = block_prefix(s, b);
  const Shape& sh = n.shape();
  const Index frames = sh[0] * sh[1] * sh[2], h = sh[3], w = sh[4], D = sh[5];
  const Index M = cfg_.stage_window(s), shift = (b % 2 == 1) ? cfg_.stage_shift(s) : 0;
  const Index heads = cfg_.num_heads[static_cast<std::size_t>(s)], nW = (h / M) * (w / M), N = M * M;
  const std::string key = std::to_string(frames) + ":" + std::to_string(h) + ":" + std::to_string(w) + ":" +
                          std::to_string(D) + ":" + std::to_string(M) + ":" + std::to_string(shift);
  auto fwd = cached("part:" + key, [=] { return window_partition_index(frames, h, w, D, M, shift); });
  auto inv = cached("unpart:" + key, [=] { return invert_permutation(*fwd); });
  auto bidx = cached("relbias:" + std::to_string(M) + ":" + std::to_string(heads),
                     [=] { return relative_bias_index(M, heads); });

  Var<T> part = ag::gather(n, fwd, {frames * nW, N, D});
  Var<T> qkv = ag::linear(part, p(pre + "lf.attn.qkv.weight"), p(pre + "lf.attn.qkv.bias"));
  Var<T> bias = ag::gather(p(pre + "lf.attn.rel_bias"), bidx, {heads, N, N});
  kernels::AttentionShape as{frames * nW, N, heads, D / heads, nW};
  static const Tensor<T> kNoMask;
  const Tensor<T>& mask = shift > 0 ? shift_masks_[static_cast<std::size_t>(s)] : kNoMask;
  Var<T> a = ag::attention(qkv, bias, mask, as);
  Var<T> o = ag::linear(a, p(pre + "lf.attn.proj.weight"), p(pre + "lf.attn.proj.bias"));
  return ag::gather(o, inv, sh);
}

template <typename T>
Var<T> Model<T>::temporal_attention(const Var<T>& n, int s, int b) const {
  const auto pre = block_prefix(s, b);
  const Shape& sh = n.shape();
  const Index B = sh[0], T_ = sh[1], rest = sh[2] * sh[3] * sh[4], D = sh[5];
  const Index heads = cfg_.num_heads[static_cast<std::size_t>(s)];
  const std::string key = std::to_string(B) + ":" + std::to_string(T_) + ":" + std::to_string(rest) + ":" + std::to_string(D);
  auto fwd = cached("tmaj:" + key, [=] { return time_major_index(B, T_, rest, D); });
  auto inv = cached("untmaj:" + key, [=] { return invert_permutation(*fwd); });
  auto bidx = cached("tbias:" + std::to_string(T_) + ":" + std::to_string(heads),
                     [=] { return temporal_bias_index(T_, heads); });
  Var<T> seq = ag::gather(n, fwd, {B * rest, T_, D});
  Var<T> qkv = ag::linear(seq, p(pre + "lf.attn.qkv.weight"), p(pre + "lf.attn.qkv.bias"));
  Var<T> bias = ag::gather(p(pre + "lf.temporal_bias"), bidx, {heads, T_, T_});
  kernels::AttentionShape as{B * rest, T_, heads, D / heads, 1};
  Var<T> a = ag::attention(qkv, bias, Tensor<T>(), as);
  Var<T> o = ag::linear(a, p(pre + "lf.attn.proj.weight"), p(pre + "lf.attn.proj.bias"));
  return ag::gather(o, inv, sh);
}

template <typename T>
Var<T> Model<T>::lf_branch(const Var<T>& x, int s, int b) const {
  const auto pre = block_prefix(s, b);
  auto norm = [&](const Var<T>& v, int k) {
    const auto n = pre + "lf.norm" + std::to_string(k);
    return ag::layer_norm(v, p(n + ".weight"), p(n + ".bias"));
  };
  Var<T> y = ag::add(x, spatial_attention(norm(x, 1), s, b));
  y = ag::add(y, mlp(norm(y, 2), pre + "lf.mlp."));
  y = ag::add(y, temporal_attention(norm(y, 3), s, b));
  return ag::add(y, mlp(norm(y, 4), pre + "lf.mlp."));
}

template <typename T>
Var<T> fuse(const Var<T>& input, const Var<T>& hf, const Var<T>& lf) {
  if (hf.shape() != lf.shape() || hf.shape() != input.shape()) {
    throw ShapeError("fuse: shapes " + shape_str(hf.shape()) + " and " + shape_str(lf.shape()) + " differ");
  }
  return ag::add(input, ag::mul(hf, lf));
}

template <typename T>
Var<T> Model<T>::block(const Var<T>& x, int s, int b) const {
  return fuse(x, hf_branch(x, s, b), lf_branch(x, s, b));
}

template <typename T>
Var<T> Model<T>::patch_merge(const Var<T>& x, int s) const {
  const Shape& sh = x.shape();
  const Index frames = sh[0] * sh[1] * sh[2], h = sh[3], w = sh[4], D = sh[5];
  if (h % 2 || w % 2) throw ShapeError("patch_merge: odd grid " + shape_str(sh));
  auto idx = cached("merge:" + std::to_string(frames) + ":" + std::to_string(h) + ":" + std::to_string(w) + ":" +
                        std::to_string(D),
                    [=] { return merge_index(frames, h, w, D); });
  Var<T> g = ag::gather(x, idx, {sh[0], sh[1], sh[2], h / 2, w / 2, 4 * D});
  const auto pre = stage_prefix(s) + "merge.";
  g = ag::layer_norm(g, p(pre + "norm.weight"), p(pre + "norm.bias"));
  return ag::linear(g, p(pre + "reduction.weight"), Var<T>());
}

template <typename T>
StageFeatures<T> Model<T>::encode(const Var<T>& patches, const std::vector<std::uint8_t>& masked) const {
  StageFeatures<T> out;
  Var<T> x = patch_embed(patches, masked);
  for (int s = 0; s < kStages; ++s) {
    for (Index b = 0; b < cfg_.depths[static_cast<std::size_t>(s)]; ++b) x = block(x, s, static_cast<int>(b));
    out.stages[static_cast<std::size_t>(s)] = x;
    if (s + 1 < kStages) x = patch_merge(x, s);
  }
  return out;
}

template <typename T>
Var<T> assemble_blocks(const Var<T>& blocks, Index S, Index cp) {
  const Shape& s = blocks.shape();
  if (s.size() != 6 || s[5] != cp * S * S) throw ShapeError("assemble_blocks: bad block tensor " + shape_str(s));
  auto idx = std::make_shared<const std::vector<std::int64_t>>(assemble_index(s, S, cp));
  return ag::gather(blocks, idx, {s[0], s[1], s[2] * cp, s[3] * S, s[4] * S});
}

template <typename T>
Var<T> Model<T>::decode(const StageFeatures<T>& f) const {
  const Var<T>& top = f.stages[kStages - 1];
  const Shape& s = top.shape();
  if (s.size() != 6 || s[1] != cfg_.frames || s[2] != cfg_.groups() || s[3] != cfg_.stage_h(kStages - 1) ||
      s[4] != cfg_.stage_w(kStages - 1) || s[5] != cfg_.stage_dim(kStages - 1)) {
    throw ConfigError("decode: stage-4 features " + shape_str(s) + " do not match the model grid");
  }
  Var<T> n = ag::layer_norm(top, p("decoder.norm.weight"), p("decoder.norm.bias"));
  Var<T> blocks = ag::linear(n, p("decoder.head.weight"), p("decoder.head.bias"));
  const Index S = cfg_.decoder_block(), cp = cfg_.spectral_group;
  const Shape& bs = blocks.shape();
  std::string key = "assemble:";
  for (Index d : bs) key += std::to_string(d) + ":";
  auto idx = cached(key, [&] { return assemble_index(bs, S, cp); });
  return ag::gather(blocks, idx, {bs[0], bs[1], bs[2] * cp, bs[3] * S, bs[4] * S});
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Model<float>;
template class Model<double>;
template Var<float> fuse(const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> fuse(const Var<double>&, const Var<double>&, const Var<double>&);
template Var<float> assemble_blocks(const Var<float>&, Index, Index);
template Var<double> assemble_blocks(const Var<double>&, Index, Index);

}  // namespace rsfm::model
