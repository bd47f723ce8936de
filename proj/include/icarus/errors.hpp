// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace icarus {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not compose.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid model / adapter / run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Context or memory budget exceeded.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// A structural guarantee was about to be broken (KV written by an adapted
// branch, gradient routed into a frozen tensor, ...). Never recoverable.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class ModeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace icarus
