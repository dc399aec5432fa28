#pragma once

#include <stdexcept>
#include <string>

namespace fedmeta {

// Shape or layout disagreement between parameter sets, batches and configs.
class LayoutError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// A NaN/Inf appeared in a loss, gradient or parameter update.
class NonFiniteError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// The pool cannot supply the requested N-way K-shot episode.
class EpisodeInfeasible : public std::runtime_error {
public:
  EpisodeInfeasible(const std::string &what, int class_id)
      : std::runtime_error(what), class_id_(class_id) {}
  int class_id() const noexcept { return class_id_; }

private:
  int class_id_;
};

class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace fedmeta
