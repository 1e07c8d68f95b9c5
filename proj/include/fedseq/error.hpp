#pragma once

#include <stdexcept>
#include <string>

namespace fedseq {

/// Base class for every error raised by the simulator.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class EmptyCorpusError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class AggregationError : public Error { using Error::Error; };
class SamplingError : public Error { using Error::Error; };
class MetricError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class CheckpointError : public Error { using Error::Error; };

}  // namespace fedseq
