#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <utility>

namespace adrmx {

/// Non-fatal diagnostics funnel. The default handler prints to stderr; the
/// CLI and tests install their own sinks.
inline std::function<void(const std::string&)>& warning_handler() {
    static std::function<void(const std::string&)> handler = [](const std::string& message) {
        std::fprintf(stderr, "warning: %s\n", message.c_str());
    };
    return handler;
}

inline void emit_warning(const std::string& message) { warning_handler()(message); }

/// Swaps the warning sink for the lifetime of the guard.
class ScopedWarningHandler {
public:
    explicit ScopedWarningHandler(std::function<void(const std::string&)> handler)
        : previous_(std::exchange(warning_handler(), std::move(handler))) {}
    ~ScopedWarningHandler() { warning_handler() = std::move(previous_); }

    ScopedWarningHandler(const ScopedWarningHandler&) = delete;
    ScopedWarningHandler& operator=(const ScopedWarningHandler&) = delete;

private:
    std::function<void(const std::string&)> previous_;
};

}  // namespace adrmx
