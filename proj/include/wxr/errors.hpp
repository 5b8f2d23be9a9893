#pragma once

#include <stdexcept>
#include <string>

namespace wxr {

// Invalid configuration or mismatched layer/tensor shapes. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Input image dimensions incompatible with the network stride schedule.
class InputSizeError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

// NaN/Inf encountered in a loss or gradient. Maps to CLI exit code 3.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Pretrained weights could not be loaded.
class TeacherLoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace wxr
