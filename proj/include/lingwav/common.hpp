// lingwav/common.hpp

// Copyright 2026  The lingwav Authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#ifndef LINGWAV_COMMON_HPP_
#define LINGWAV_COMMON_HPP_

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace lingwav {

// Stable error categories. The CLI maps these to exit codes and a
// machine-readable `error=<tag>` line on stderr.
enum class ErrorCode {
  kConfig = 2,        // bad or missing configuration / arguments
  kMissingArtifact,   // file or checkpoint not found
  kData,              // malformed manifest, audio, LM, transcript
  kShape,             // tensor / parameter shape mismatch
  kNumeric,           // non-finite values, invalid numeric state
  kInternal,
};

inline const char* ErrorTag(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kMissingArtifact: return "missing_artifact";
    case ErrorCode::kData: return "data";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kInternal: return "internal";
  }
  return "internal";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void Fail(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

#define LINGWAV_CHECK(cond, code, msg)                                  \
  do {                                                                  \
    if (!(cond)) {                                                      \
      std::ostringstream os__;                                          \
      os__ << msg;                                                      \
      ::lingwav::Fail((code), os__.str());                              \
    }                                                                   \
  } while (0)

}  // namespace lingwav

#endif  // LINGWAV_COMMON_HPP_
