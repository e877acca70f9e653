#pragma once

#include <stdexcept>
#include <string>

namespace hsplat {

// Failure classes surfaced by the library. Conditions documented as
// recoverable (uniform-weight fallback, covariance regularization, single-leaf
// refine no-op) do not throw; everything else maps to one of these codes.
enum class Errc {
    AllZeroWeights,
    DegenerateCovariance,
    NotSPD,
    MissingForwardState,
    NoInteriorNodes,
    DegenerateSpread,
    MalformedHeader,
    TruncatedRecord,
    UnsupportedShDegree,
    EmptyScene,
    DimensionMismatch,
    InvalidArgument,
    IoFailure,
};

inline const char* errc_name(Errc c) {
    switch (c) {
        case Errc::AllZeroWeights: return "AllZeroWeights";
        case Errc::DegenerateCovariance: return "DegenerateCovariance";
        case Errc::NotSPD: return "NotSPD";
        case Errc::MissingForwardState: return "MissingForwardState";
        case Errc::NoInteriorNodes: return "NoInteriorNodes";
        case Errc::DegenerateSpread: return "DegenerateSpread";
        case Errc::MalformedHeader: return "MalformedHeader";
        case Errc::TruncatedRecord: return "TruncatedRecord";
        case Errc::UnsupportedShDegree: return "UnsupportedShDegree";
        case Errc::EmptyScene: return "EmptyScene";
        case Errc::DimensionMismatch: return "DimensionMismatch";
        case Errc::InvalidArgument: return "InvalidArgument";
        case Errc::IoFailure: return "IoFailure";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
    Errc code() const { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool ok, Errc code, const std::string& what) {
    if (!ok) fail(code, what);
}

}  // namespace hsplat
