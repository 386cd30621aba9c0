#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace emesh {

// Base for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Structural problems: shape mismatch, malformed state, invalid plan.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite values where finite fp32 is required.
struct NumericError : Error {
    using Error::Error;
};

// Argument outside its documented range.
struct RangeError : Error {
    using Error::Error;
};

// Malformed byte buffers (truncated, inconsistent lengths).
struct DecodeError : Error {
    using Error::Error;
};

// Invalid configuration; maps to the usage exit code.
struct ConfigError : Error {
    using Error::Error;
};

// A link failed hard: refused, reset, peer gone. Carries the peer id.
struct LinkError : Error {
    explicit LinkError(const std::string& peer, const std::string& what)
        : Error(what + " (peer " + peer + ")"), peer_id(peer) {}
    std::string peer_id;
};

// A blocking operation ran out of time. Distinct from LinkError.
struct TimeoutError : Error {
    using Error::Error;
};

// The coordinator is unreachable or rejected us.
struct CoordinatorError : Error {
    using Error::Error;
};

// A collective saw traffic from a newer membership epoch.
struct StalePlanError : Error {
    explicit StalePlanError(uint32_t seen, const std::string& what)
        : Error(what), seen_epoch(seen) {}
    uint32_t seen_epoch = 0;
};

// A collective participant died mid-operation. Consumed by the retry path.
struct RingFailureError : Error {
    explicit RingFailureError(const std::string& node, const std::string& what)
        : Error(what), failed_node(node) {}
    std::string failed_node;  // empty when the culprit is unknown
};

// Unrecoverable runtime condition; maps to the runtime-fatal exit code.
struct FatalError : Error {
    using Error::Error;
};

}  // namespace emesh
