#pragma once

#include <array>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "json.hpp"
#include "rsfm/autograd.hpp"
#include "rsfm/masking.hpp"

namespace rsfm::model {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kStages = 4;

struct ModelConfig {
  Index height = 512, width = 512, channels = 6, frames = 6;
  Index patch_size = 4;
  Index spectral_group = 2;
  Index embed_dim = 96;
  std::array<Index, kStages> depths{2, 2, 6, 2};
  std::array<Index, kStages> num_heads{3, 6, 12, 24};
  Index window = 8;
  Index shift = 4;
  Index mlp_ratio = 4;
  double hf_bottleneck_ratio = 0.25;
  Index hf_kernel = 3;
  double init_std = 0.02;

  static ModelConfig swin_t();
  // Smallest config that still exercises every stage; used for gradient checks.
  static ModelConfig tiny();
  // Single-core desk run.
  static ModelConfig desk();

  void validate() const;
  Index grid_h() const { return height / patch_size; }
  Index grid_w() const { return width / patch_size; }
  Index groups() const { return channels / spectral_group; }
  Index patch_dim() const { return patch_size * patch_size * spectral_group; }
  Index stage_dim(int s) const { return embed_dim << s; }
  Index stage_h(int s) const { return grid_h() >> s; }
  Index stage_w(int s) const { return grid_w() >> s; }
  // Attention window and shift at stage s after clamping to the grid.
  Index stage_window(int s) const;
  Index stage_shift(int s) const;
  Index hf_dim(int s) const;
  // Pixel edge covered by one stage-4 token.
  Index decoder_block() const { return patch_size << (kStages - 1); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename T>
struct Param {
  std::string name;
  Var<T> var;
  bool decay = true;  // weight decay applies
};

template <typename T>
class ParamStore {
 public:
  Var<T> add(std::string name, Tensor<T> init, bool decay);
  const std::vector<Param<T>>& all() const { return params_; }
  std::vector<Param<T>>& all() { return params_; }
  const Var<T>& get(const std::string& name) const;
  Index count() const;
  void zero_grad();

 private:
  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

// Stage outputs, each [B, T, G, h_s, w_s, D_s].
template <typename T>
struct StageFeatures {
  std::array<Var<T>, kStages> stages;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // patches [B, T, G, nh, nw, P]; masked has one flag per patch (empty = none).
  Var<T> patch_embed(const Var<T>& patches, const std::vector<std::uint8_t>& masked) const;
  Var<T> hf_branch(const Var<T>& x, int stage, int block) const;
  Var<T> lf_branch(const Var<T>& x, int stage, int block) const;
  Var<T> block(const Var<T>& x, int stage, int block) const;
  Var<T> patch_merge(const Var<T>& x, int stage) const;
  StageFeatures<T> encode(const Var<T>& patches, const std::vector<std::uint8_t>& masked) const;
  // Stage-4 tokens -> pixels [B, T, C, H, W].
  Var<T> decode(const StageFeatures<T>& features) const;
  Var<T> reconstruct(const Var<T>& patches, const std::vector<std::uint8_t>& masked) const {
    return decode(encode(patches, masked));
  }

 private:
  using IndexPtr = std::shared_ptr<const std::vector<std::int64_t>>;
  IndexPtr cached(const std::string& key, const std::function<std::vector<std::int64_t>()>& build) const;
  Var<T> spatial_attention(const Var<T>& x, int stage, int block) const;
  Var<T> temporal_attention(const Var<T>& x, int stage, int block) const;
  Var<T> mlp(const Var<T>& x, const std::string& prefix) const;
  const Var<T>& p(const std::string& name) const { return params_.get(name); }

  ModelConfig cfg_;
  ParamStore<T> params_;
  mutable std::mutex cache_mu_;
  mutable std::map<std::string, IndexPtr> index_cache_;
  std::array<Tensor<T>, kStages> shift_masks_;
};

template <typename T>
Var<T> fuse(const Var<T>& input, const Var<T>& hf, const Var<T>& lf);

// [B, T, G, h, w, cp*S*S] pixel blocks -> [B, T, G*cp, h*S, w*S]; each block is
// laid out (band, row, column) like a patch.
template <typename T>
Var<T> assemble_blocks(const Var<T>& blocks, Index block_edge, Index spectral_group);

// Gather indices shared with tests.
std::vector<std::int64_t> window_partition_index(Index frames, Index h, Index w, Index D, Index window, Index shift);
std::vector<std::int64_t> invert_permutation(const std::vector<std::int64_t>& perm);
std::vector<std::int64_t> relative_bias_index(Index window, Index heads);
Tensor<double> shifted_window_mask(Index h, Index w, Index window, Index shift);

}  // namespace rsfm::model
