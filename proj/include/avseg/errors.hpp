#pragma once

#include <stdexcept>
#include <string>

namespace avseg {

// Shape or axis disagreement between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Invalid model / run configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Caller broke an API contract (e.g. backward() on a non-scalar).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Invalid numeric parameter such as a non-positive epsilon.
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Input data outside its documented domain (non-binary masks, ...).
class DataError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Scene description that cannot be rendered.
class SpecError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Checkpoint / clip file that cannot be read back.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training produced a NaN or infinity.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace avseg
