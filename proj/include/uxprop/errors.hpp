#pragma once

#include <stdexcept>
#include <string>

namespace uxprop {

/// Precondition violated by a caller (bad shape, out-of-range index, ...).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed input file; the message names the offending field or line.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reference explanation with (near) zero norm: MUE is undefined.
class DegenerateReference : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A computed quantity came out NaN/Inf where finiteness is part of the contract.
class NonFiniteValue : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace uxprop
