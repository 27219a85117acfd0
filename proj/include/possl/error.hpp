#pragma once

#include <stdexcept>
#include <string>

namespace possl {

// Base for every error raised by the library. The CLI maps subclasses onto
// stable exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class GeometryError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

// Missing, corrupt or stale artifact (checkpoint, manifest, tape).
class ArtifactError : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace possl
