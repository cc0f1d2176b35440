// Copyright 2026 The patchkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace patchkit {

// Error categories. Each maps to one failure class that callers (and the CLI
// exit-code table) distinguish.

struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct CannotSplit : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct BudgetExceeded : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A predictor broke its contract (non-probability output, wrong arity).
struct ContractViolation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidState : std::logic_error {
  using std::logic_error::logic_error;
};

struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NoPositiveSamples : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UndefinedMetric : std::domain_error {
  using std::domain_error::domain_error;
};

// Raised by pipeline stages when an upstream artifact is missing.
struct StageDependency : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Configuration validation failure; `field` is the dotted path at fault.
struct ConfigError : std::runtime_error {
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field(std::move(field)) {}
  std::string field;
};

}  // namespace patchkit
