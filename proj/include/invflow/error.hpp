#pragma once

#include <stdexcept>
#include <string>

namespace invflow {

// Failure categories. Each maps to a fixed CLI exit code (see commands.hpp),
// so the set is part of the tool's external contract.
enum class ErrorCategory {
  kIo,                 // file missing / unreadable / unwritable
  kFormat,             // raster or JSON malformed
  kMetadata,           // metadata inconsistent with rasters or invalid ranges
  kCalibration,        // unusable intrinsics
  kDegenerateGeometry, // solver input does not constrain the answer
  kDegenerateInput,    // empty/unusable data (e.g. no valid pixels)
  kNoOverlap,          // no usable correspondences between the views
  kGimbalLock,         // Euler extraction undefined at |rho| = pi/2
  kConfig,             // bad configuration key/value or CLI usage
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}
  ErrorCategory Category() const { return category_; }

 private:
  ErrorCategory category_;
};

}  // namespace invflow
