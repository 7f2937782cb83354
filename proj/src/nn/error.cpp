#include "nn/error.hpp"

namespace gencdr {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kShape: return "shape error";
    case ErrorCode::kLookup: return "lookup error";
    case ErrorCode::kConstraint: return "constraint violation";
    case ErrorCode::kInvalidPrefix: return "invalid prefix";
    case ErrorCode::kParse: return "parse error";
    case ErrorCode::kConfig: return "config error";
    case ErrorCode::kReferential: return "referential error";
    case ErrorCode::kIntegrity: return "integrity error";
    case ErrorCode::kDependency: return "dependency error";
    case ErrorCode::kStaleArtifact: return "stale artifact";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kDeterminism: return "determinism error";
    case ErrorCode::kState: return "state error";
    case ErrorCode::kIo: return "io error";
    case ErrorCode::kInternal: return "internal error";
  }
  return "unknown error";
}

}  // namespace gencdr
