#pragma once

#include <stdexcept>
#include <string>

namespace daed {

// File / format problems (CLI exit code 2).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values or failed numeric contracts (CLI exit code 3).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public DataError {
public:
    enum class Code {
        io,
        bad_magic,
        bad_version,
        truncated,
        wrong_kind,
        bad_topology,
        crc_mismatch,
    };

    CheckpointError(Code code, const std::string& msg) : DataError(msg), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

} // namespace daed
