#pragma once

#include <stdexcept>
#include <string>

namespace fedsup {

// Shape or axis disagreement between tensors.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

// API precondition violated (e.g. backward on a non-scalar).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid experiment or module configuration.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Bad input data (e.g. label id out of range).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

// Corrupt or unsupported file contents.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Inconsistent messages between federation peers.
struct ProtocolError : std::runtime_error {
  explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

// Local training produced a non-finite loss; carries the failure site.
struct NonFiniteLossError : std::runtime_error {
  int vehicle;
  int epoch;
  int batch;
  NonFiniteLossError(int vehicle_id, int epoch_idx, int batch_idx)
      : std::runtime_error("non-finite loss on vehicle " + std::to_string(vehicle_id) +
                           ", epoch " + std::to_string(epoch_idx) + ", batch " +
                           std::to_string(batch_idx)),
        vehicle(vehicle_id),
        epoch(epoch_idx),
        batch(batch_idx) {}
};

}  // namespace fedsup
