#pragma once

#include <stdexcept>
#include <string>

namespace vlmpref {

// Base for every failure raised by the library. The message is the
// user-facing reason string ("insufficient observations", "empty batch", ...).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A backend could not be reached after all retries.
class ProviderUnavailable : public Error {
 public:
  ProviderUnavailable() : Error("provider unavailable") {}
  explicit ProviderUnavailable(const std::string& detail)
      : Error("provider unavailable: " + detail) {}
};

// The backend refused our credential; never retried.
class CredentialRejected : public Error {
 public:
  CredentialRejected() : Error("credential rejected") {}
};

// Raised by backends for failures worth retrying (timeouts, 429, 5xx).
class TransientBackendError : public Error {
 public:
  using Error::Error;
};

}  // namespace vlmpref
