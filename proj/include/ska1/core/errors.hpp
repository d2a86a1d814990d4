#pragma once

#include <stdexcept>
#include <string>

namespace ska1 {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error("shape: " + msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};

class DegenerateGeometryError : public Error {
public:
    explicit DegenerateGeometryError(const std::string& msg) : Error("degenerate geometry: " + msg) {}
};

class FaceNotFoundError : public Error {
public:
    explicit FaceNotFoundError(const std::string& msg) : Error("face not found: " + msg) {}
};

class SamplingError : public Error {
public:
    explicit SamplingError(const std::string& msg) : Error("sampling: " + msg) {}
};

class NonFiniteLossError : public Error {
public:
    explicit NonFiniteLossError(const std::string& msg) : Error("non-finite loss: " + msg) {}
};

class UndefinedSimilarityError : public Error {
public:
    explicit UndefinedSimilarityError(const std::string& msg) : Error("undefined similarity: " + msg) {}
};

class InputError : public Error {
public:
    explicit InputError(const std::string& msg) : Error("input: " + msg) {}
};

} // namespace ska1
