#pragma once

#include <stdexcept>
#include <string>

namespace sokd {

// Error taxonomy for the whole library. Every failure the public API can
// raise maps onto one of these, so callers can dispatch on the class of
// problem instead of parsing message strings.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : Error { using Error::Error; };
struct InvalidArg : Error { using Error::Error; };
struct NonFinite : Error { using Error::Error; };
struct UnknownTap : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct ManifestMismatch : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct CountMismatch : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

}  // namespace sokd
