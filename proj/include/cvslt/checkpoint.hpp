#pragma once

// Binary checkpoint, little-endian throughout:
//   "CVSLT1" | u64 n_params
//   n_params x { u32 name_len | name | u8 dtype (1 = f64) | u32 rank | u64 dims[rank] | f64 data }
//   u64 step | u64 seed | u32 config_len | config JSON
//   u64 adam_t | u64 n_moments | n_moments x { f64 m[numel] | f64 v[numel] } in parameter order

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cvslt/model.hpp"

namespace cvslt {

struct ParameterRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct OptimizerState {
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

struct Checkpoint {
  std::vector<ParameterRecord> parameters;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::string config_json;
  OptimizerState optimizer;
};

Checkpoint capture(const CvSltModel& model, std::uint64_t step, std::uint64_t seed, std::string config_json,
                   OptimizerState optimizer = {});

/// Copies every record into `model`. Throws ContractError naming the first
/// missing, extra or shape-mismatched parameter.
void restore(const Checkpoint& checkpoint, CvSltModel& model);

std::string serialize(const Checkpoint& checkpoint);
/// Throws IoError on truncated or malformed input.
Checkpoint deserialize(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cvslt
