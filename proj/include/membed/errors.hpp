#pragma once

#include <stdexcept>
#include <string>

namespace membed {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad argument values (out-of-range rates, non-finite inputs, ...).
struct ValueError : Error {
    using Error::Error;
};

// Shape mismatches between matrices / parameter blocks / caches.
struct DimensionError : Error {
    using Error::Error;
};

// A row whose norm is below the degeneracy threshold.
struct DegenerateRowError : Error {
    DegenerateRowError(const std::string& what, int row_index)
        : Error(what), row(row_index) {}
    int row;
};

// Non-finite value produced or consumed where finiteness is required.
// `where` names the offending tensor/parameter when known.
struct NonFiniteError : Error {
    explicit NonFiniteError(const std::string& what, std::string where_ = "")
        : Error(what), where(std::move(where_)) {}
    std::string where;
};

// File-format errors. One subclass per failure mode so callers can
// distinguish a wrong file from a damaged one.
struct IoError : Error {
    using Error::Error;
};
struct BadMagicError : IoError {
    using IoError::IoError;
};
struct UnsupportedVersionError : IoError {
    using IoError::IoError;
};
struct CrcMismatchError : IoError {
    using IoError::IoError;
};
struct TruncatedFileError : IoError {
    using IoError::IoError;
};
struct MissingTensorError : IoError {
    using IoError::IoError;
};

}  // namespace membed
