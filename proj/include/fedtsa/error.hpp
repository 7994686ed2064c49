#pragma once

#include <stdexcept>
#include <string>

namespace fedtsa {

// Shapes of tensors, batches or parameter sets disagree.
class DimensionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A value is outside its documented domain (rate, alpha, label, ...).
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Dataset or durations input could not be read or parsed.
class IngestionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Distillation data source cannot satisfy a request.
class SourceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Experiment configuration is malformed or violates the schema.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace fedtsa
