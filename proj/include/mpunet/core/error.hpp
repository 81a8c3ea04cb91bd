#ifndef MPUNET_CORE_ERROR_HPP
#define MPUNET_CORE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace mpunet {

/// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind { usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

} // namespace mpunet

#endif // MPUNET_CORE_ERROR_HPP
