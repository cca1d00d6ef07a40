#pragma once

#include <stdexcept>
#include <string>

namespace lingraft {

// Shapes that do not chain, vectors of the wrong length.
class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values, negative radii, empty intervals supplied by the caller.
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Calling an operation outside its contract (bad ids, grafting twice, ...).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input files. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lingraft
