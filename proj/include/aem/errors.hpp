#pragma once

// Typed error hierarchy. Every failure mode that callers are expected to
// distinguish gets its own exception type; messages carry the offending
// entity (region id, row number, key) so reports can name it directly.

#include <stdexcept>
#include <string>

namespace aem {

// Root of all library errors.
struct error : std::runtime_error {
  explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Input shapes disagree (vector lengths, matrix dims, feature layout).
struct dimension_error : error {
  using error::error;
};

// A domain invariant is violated (non-one-hot choice, unnormalized share,
// out-of-range index, bad precondition).
struct validation_error : error {
  using error::error;
};

// Numerical failure: non-finite loss, singular system, undefined metric.
struct numeric_error : error {
  using error::error;
};

// Exact KL is infinite: predicted share is 0 on a category the reference
// share supports. Carries the offending region so callers can report it.
struct support_violation : error {
  std::string region_id;
  support_violation(const std::string& msg, std::string region)
      : error(msg), region_id(std::move(region)) {}
};

// External choice provider unreachable or returned garbage after retries.
struct provider_error : error {
  using error::error;
};

// Configuration problems: unknown keys, bad values, unparsable file.
struct config_error : error {
  using error::error;
};

// File-level problems: missing file, schema version mismatch, malformed row.
struct io_error : error {
  using error::error;
};

// Split preconditions: region too small, empty stratum, degenerate fraction.
struct split_error : error {
  using error::error;
};

}  // namespace aem
