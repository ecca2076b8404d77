#pragma once

#include <stdexcept>
#include <string>

namespace pisces {

// Each error class maps onto one CLI exit code.
enum class error_kind { validation = 2, precondition = 3, io = 4 };

class error : public std::runtime_error {
public:
    error(error_kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    error_kind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    error_kind kind_;
};

struct validation_error : error {
    explicit validation_error(const std::string& what) : error(error_kind::validation, what) {}
};

struct precondition_error : error {
    explicit precondition_error(const std::string& what) : error(error_kind::precondition, what) {}
};

struct io_error : error {
    explicit io_error(const std::string& what) : error(error_kind::io, what) {}
};

} // namespace pisces
