#include "noisyfs/common.hpp"

namespace noisyfs {

int exit_code(const std::exception& e) noexcept {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return kExitConfig;
  if (dynamic_cast<const FormatError*>(&e) != nullptr || dynamic_cast<const FileError*>(&e) != nullptr ||
      dynamic_cast<const SamplingError*>(&e) != nullptr ||
      dynamic_cast<const NoiseError*>(&e) != nullptr ||
      dynamic_cast<const CapacityError*>(&e) != nullptr)
    return kExitData;
  return kExitNumeric;
}

}  // namespace noisyfs
