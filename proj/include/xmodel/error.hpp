#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xmodel {

enum class ErrorKind {
  degenerate_input,
  capability,
  configuration,
  transport,
  protocol,
  marker_not_found,
  undefined_metric,
  division_hazard,
  data,
  corrupt_entry,
  duplicate_run,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::degenerate_input: return "degenerate_input";
    case ErrorKind::capability: return "capability";
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::transport: return "transport";
    case ErrorKind::protocol: return "protocol";
    case ErrorKind::marker_not_found: return "marker_not_found";
    case ErrorKind::undefined_metric: return "undefined_metric";
    case ErrorKind::division_hazard: return "division_hazard";
    case ErrorKind::data: return "data";
    case ErrorKind::corrupt_entry: return "corrupt_entry";
    case ErrorKind::duplicate_run: return "duplicate_run";
  }
  return "unknown";
}

/// Every failure raised by the library carries a kind so callers can branch
/// on it (retry transport errors, surface capability mismatches per signal).
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  bool retryable() const noexcept { return kind_ == ErrorKind::transport; }

 private:
  ErrorKind kind_;
};

}  // namespace xmodel
