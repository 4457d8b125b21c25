#include "lsms/errors.hpp"

namespace lsms {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::EmptyExpression: return "EmptyExpression";
    case ErrorCode::BackendUnavailable: return "BackendUnavailable";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::AllTokensMasked: return "AllTokensMasked";
    case ErrorCode::BadImageShape: return "BadImageShape";
    case ErrorCode::GenerationRetryExceeded: return "GenerationRetryExceeded";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::EmptyEvaluation: return "EmptyEvaluation";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::UsageError: return "UsageError";
    }
    return "Unknown";
}

}  // namespace lsms
