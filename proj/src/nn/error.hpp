#pragma once

#include <stdexcept>
#include <string>

namespace gencdr {

// Failure categories surfaced across the library.  Every throw site picks the
// most specific code; the C boundary maps codes onto integer statuses.
enum class ErrorCode {
  kInvalidArgument,   // bad value for an otherwise well-formed call
  kShape,             // dimension mismatch between tensors
  kLookup,            // unknown id (user, item, domain, token, adapter, stage)
  kConstraint,        // violated structural constraint (e.g. empty valid set)
  kInvalidPrefix,     // token path absent from a prefix tree
  kParse,             // malformed input line / file
  kConfig,            // invalid or inconsistent configuration
  kReferential,       // record references an entity that does not exist
  kIntegrity,         // corrupt or inconsistent artifact (checksum, duplicate)
  kDependency,        // required pipeline stage output missing
  kStaleArtifact,     // artifact was produced under a different config
  kDivergence,        // non-finite loss or gradient during training
  kDeterminism,       // repeated evaluation produced different results
  kState,             // call violates object lifecycle (frozen, not trained)
  kIo,                // filesystem failure
  kInternal,          // bug guard
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace gencdr
