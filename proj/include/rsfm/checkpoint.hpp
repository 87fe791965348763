#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rsfm/model.hpp"
#include "rsfm/optim.hpp"

namespace rsfm::ckpt {

enum class CheckpointErrorKind { io, format, unknown_version, incompatible };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

inline constexpr int kCheckpointVersion = 1;

// Patch flattening contract a checkpoint was trained under.
nlohmann::json patch_order_contract(const model::ModelConfig& cfg);

// "field: checkpoint X, requested Y" for every differing key.
std::vector<std::string> json_diff(const nlohmann::json& stored, const nlohmann::json& requested,
                                   const std::string& prefix = "");

// Directory layout: manifest.json, params.f32 and, with an optimizer,
// optimizer.f32. Written to a sibling temp directory and renamed into place.
// `meta` is stored verbatim under "meta".
void save_params(const std::filesystem::path& dir, const std::vector<model::Param<float>>& params,
                 const nlohmann::json& meta, const optim::AdamW<float>* optimizer = nullptr);

nlohmann::json read_manifest(const std::filesystem::path& dir);

// Loads every parameter of `params` by name; missing names or shape
// disagreements are incompatibilities.
void load_params(const std::filesystem::path& dir, std::vector<model::Param<float>>& params);
void load_optimizer(const std::filesystem::path& dir, optim::AdamW<float>& optimizer);

// Model checkpoints carry the config and patch contract in meta.
void save_model(const std::filesystem::path& dir, const model::Model<float>& model, nlohmann::json meta = {},
                const optim::AdamW<float>* optimizer = nullptr);
model::ModelConfig read_model_config(const std::filesystem::path& dir);
// Throws `incompatible` with a field-level diff when `expected` differs.
void load_model(const std::filesystem::path& dir, model::Model<float>& model);

// FNV-1a over names, shapes and values.
std::uint64_t params_hash(const std::vector<model::Param<float>>& params);

}  // namespace rsfm::ckpt
