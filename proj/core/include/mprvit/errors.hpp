#pragma once

#include <stdexcept>
#include <string>

namespace mprvit {

// Error taxonomy shared by every module. The CLI maps these onto distinct
// process exit codes (see tools/).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between tensors/volumes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Violated API precondition (non-scalar loss, missing gradient, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid model/run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk artifact (checkpoint, NIfTI, manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered where only finite values are legal.
class NumericFault : public Error {
 public:
  using Error::Error;
};

// Mismatched patient sets between prediction and ground-truth collections.
class PairingError : public Error {
 public:
  using Error::Error;
};

}  // namespace mprvit
