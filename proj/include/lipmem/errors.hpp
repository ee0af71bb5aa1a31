// Copyright 2026 The lipmem Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace lipmem {

/// Base of every error raised by the library. The CLI maps the category to an
/// exit status (configuration 2, data 3, divergence 4).
class Error : public std::runtime_error {
 public:
  enum class Category { kConfig, kData, kDivergence, kInternal };

  Error(Category category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  Category category() const noexcept { return category_; }

 private:
  Category category_;
};

#define LIPMEM_DEFINE_ERROR(Name, Cat)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(Category::Cat, what) {} \
  }

LIPMEM_DEFINE_ERROR(DimensionError, kInternal);
LIPMEM_DEFINE_ERROR(NumericError, kInternal);
LIPMEM_DEFINE_ERROR(ContractError, kInternal);
LIPMEM_DEFINE_ERROR(VocabularyError, kData);
LIPMEM_DEFINE_ERROR(IndexError, kData);
LIPMEM_DEFINE_ERROR(LengthError, kData);
LIPMEM_DEFINE_ERROR(DataError, kData);
LIPMEM_DEFINE_ERROR(InfeasibleError, kData);
LIPMEM_DEFINE_ERROR(GenerationError, kConfig);
LIPMEM_DEFINE_ERROR(ConfigError, kConfig);

#undef LIPMEM_DEFINE_ERROR

class TrainingError : public Error {
 public:
  TrainingError(const std::string& stage, long step, const std::string& what)
      : Error(Category::kDivergence,
              stage + ": " + what + " at step " + std::to_string(step)),
        step_(step) {}

  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace lipmem
