#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lsms {

enum class ErrorCode {
    EmptyExpression,
    BackendUnavailable,
    ShapeMismatch,
    AllTokensMasked,
    BadImageShape,
    GenerationRetryExceeded,
    MissingFile,
    MalformedRecord,
    EmptyEvaluation,
    NonFiniteLoss,
    InvalidConfig,
    UsageError,
};

std::string_view to_string(ErrorCode code);

// Every failure raised by the library carries a machine-readable code so the
// CLI and the HTTP service can map it without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string &message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace lsms
