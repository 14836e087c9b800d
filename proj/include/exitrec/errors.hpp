#pragma once

#include <exception>
#include <stdexcept>
#include <string>

namespace exitrec {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad flags, invalid model/policy configuration, misuse of the API.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Unreadable or malformed input files and datasets.
class DataError : public Error {
 public:
  using Error::Error;
};

class UnknownUser : public DataError {
 public:
  explicit UnknownUser(const std::string& user)
      : DataError("unknown user: " + user) {}
};

class ContextOverflow : public DataError {
 public:
  using DataError::DataError;
};

class TraceFormat : public DataError {
 public:
  using DataError::DataError;
};

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

class NotAnExitLayer : public ConfigError {
 public:
  explicit NotAnExitLayer(int layer)
      : ConfigError("layer " + std::to_string(layer) + " is not an exit layer") {}
};

class PhaseOrder : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class NoHistory : public Error {
 public:
  NoHistory() : Error("window mean requested with no recorded discrepancies") {}
};

class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

// Process exit codes used by the command line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitMetricUndefined = 4;

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UndefinedMetric*>(&e)) return kExitMetricUndefined;
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e)) return kExitData;
  return 1;
}

}  // namespace exitrec
