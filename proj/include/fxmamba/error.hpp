/* Copyright 2026 The fxmamba Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <stdexcept>
#include <string>

namespace fxm {

// Failure categories. The CLI maps usage-type errors to exit code 1 and every
// other category to exit code 2.
enum class Errc {
  invalid_argument,
  shape_mismatch,
  non_finite,
  io,
  bad_magic,
  bad_version,
  bad_dtype,
  truncated,
  checksum_mismatch,
  missing_tensor,
  already_quantized,
  group_rule,
  cache_mismatch,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::non_finite: return "non_finite";
    case Errc::io: return "io";
    case Errc::bad_magic: return "bad_magic";
    case Errc::bad_version: return "bad_version";
    case Errc::bad_dtype: return "bad_dtype";
    case Errc::truncated: return "truncated";
    case Errc::checksum_mismatch: return "checksum_mismatch";
    case Errc::missing_tensor: return "missing_tensor";
    case Errc::already_quantized: return "already_quantized";
    case Errc::group_rule: return "group_rule";
    case Errc::cache_mismatch: return "cache_mismatch";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace fxm
