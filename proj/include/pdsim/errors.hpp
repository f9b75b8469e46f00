// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.

#pragma once

#include <stdexcept>
#include <string>

namespace pdsim {

// Base for every error raised by the library. Callers that only care about
// "something was wrong with the inputs" can catch this one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class EmptyInput : public Error {
 public:
  using Error::Error;
};

class InfeasiblePlacement : public Error {
 public:
  using Error::Error;
};

// Brute-force oracle refused to enumerate.
class SearchTooLarge : public Error {
 public:
  using Error::Error;
};

class ProtocolViolation : public Error {
 public:
  using Error::Error;
};

class NoCapacity : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

class InvalidSpec : public Error {
 public:
  using Error::Error;
};

// Simulator detected a broken invariant at runtime (CLI maps this to exit 3).
class InvariantBreach : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

}  // namespace detail
}  // namespace pdsim
