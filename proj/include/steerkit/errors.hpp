#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace steerkit {

// Base for every error the library raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input violates a documented precondition or type invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

// Malformed binary input. offset is the byte position where decoding failed.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::uint64_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class UnsupportedVersionError : public ParseError {
public:
    UnsupportedVersionError(const std::string& format, unsigned version, std::uint64_t offset)
        : ParseError("unsupported " + format + " version " + std::to_string(version), offset),
          version_(version) {}
    unsigned version() const noexcept { return version_; }

private:
    unsigned version_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Wire-level failure: framing, version mismatch, unexpected message kind.
class ProtocolError : public Error {
public:
    using Error::Error;
};

class TimeoutError : public ProtocolError {
public:
    using ProtocolError::ProtocolError;
};

// The runner replied with an error message.
class RunnerError : public Error {
public:
    RunnerError(const std::string& what, std::string item_id)
        : Error(item_id.empty() ? what : what + " [item " + item_id + "]"),
          item_id_(std::move(item_id)) {}
    const std::string& item_id() const noexcept { return item_id_; }

private:
    std::string item_id_;
};

class IncompleteResultsError : public Error {
public:
    explicit IncompleteResultsError(std::vector<std::string> missing);
    const std::vector<std::string>& missing_ids() const noexcept { return missing_; }

private:
    std::vector<std::string> missing_;
};

// Feature verification failed for a specific SAE feature.
class JudgeError : public Error {
public:
    JudgeError(const std::string& what, std::int64_t feature_id)
        : Error(what + " [feature " + std::to_string(feature_id) + "]"), feature_id_(feature_id) {}
    std::int64_t feature_id() const noexcept { return feature_id_; }

private:
    std::int64_t feature_id_;
};

}  // namespace steerkit
