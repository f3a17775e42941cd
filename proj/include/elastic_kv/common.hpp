// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ekv {

using TokenId = std::uint32_t;

namespace detail {
[[noreturn]] inline void raise(const char* expr, const std::string& msg) {
    std::ostringstream os;
    os << msg << " (failed: " << expr << ")";
    throw std::runtime_error(os.str());
}
}  // namespace detail

// Contract check: throws std::runtime_error with context on violation.
#define EKV_REQUIRE(cond, msg)                       \
    do {                                             \
        if (!(cond)) ::ekv::detail::raise(#cond, msg); \
    } while (0)

}  // namespace ekv
