#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "levit_unet/model.hpp"
#include "levit_unet/optim.hpp"

namespace levit::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Decoded checkpoint file. Records hold model tensors under their model
/// names and, when present, Adam moments under "optim.m." / "optim.v.".
struct Checkpoint {
  ModelConfig config;
  KeyValues meta;  // free-form run metadata (epoch, seed, ...)
  std::vector<std::pair<std::string, Tensor>> records;

  const std::string* meta_value(const std::string& key) const;
};

/// Writes to a temporary sibling and renames, so a crash never leaves a
/// half-written file under `path`.
void save_checkpoint(const Model& model, const std::string& path, const KeyValues& meta = {},
                     const nn::Adam* optimizer = nullptr);

/// Verifies magic, version and CRC-32C before decoding anything else.
Checkpoint read_checkpoint(const std::string& path);

/// Copies stored tensors into `model` (and `optimizer` if given). Every check
/// runs before the first write: config mismatch, missing or misshaped tensors
/// all throw and leave the model untouched.
void restore_checkpoint(Model& model, const Checkpoint& ckpt, nn::Adam* optimizer = nullptr);

/// Builds a model from the stored config and restores it.
Model load_checkpoint(const std::string& path, Checkpoint* decoded = nullptr);

}  // namespace levit::model
