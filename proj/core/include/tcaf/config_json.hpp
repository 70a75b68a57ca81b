#pragma once

#include <nlohmann/json.hpp>

#include "tcaf/arch_config.hpp"
#include "tcaf/dataset.hpp"
#include "tcaf/train.hpp"

// JSON mapping of the configuration structs. Readers start from `base`, apply
// the keys present and reject unknown keys with ConfigError.
namespace tcaf {

nlohmann::json to_json(const ArchConfig& arch);
nlohmann::json to_json(const TrainConfig& train);
nlohmann::json to_json(const SynthConfig& synth);

ArchConfig arch_from_json(const nlohmann::json& j, ArchConfig base = {});
TrainConfig train_from_json(const nlohmann::json& j, TrainConfig base = {});
SynthConfig synth_from_json(const nlohmann::json& j, SynthConfig base = {});

}  // namespace tcaf
