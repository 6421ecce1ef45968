#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace detforge {

/// Input violates a documented contract (bad record, bad parameter).
/// The CLI maps this family to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// File could not be read, written or parsed. CLI exit code 2.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

class MissingKey : public ValidationError {
 public:
  MissingKey(const std::string& key, const std::string& record)
      : ValidationError("missing key '" + key + "' in " + record), key_(key) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class DanglingReference : public ValidationError {
 public:
  DanglingReference(std::int64_t target_id, const std::string& context)
      : ValidationError("dangling reference to id " + std::to_string(target_id) + " (" + context + ")"),
        target_id_(target_id) {}
  std::int64_t target_id() const noexcept { return target_id_; }

 private:
  std::int64_t target_id_;
};

class NegativeExtent : public ValidationError {
 public:
  explicit NegativeExtent(std::int64_t record_id)
      : ValidationError("negative box extent in annotation " + std::to_string(record_id)),
        record_id_(record_id) {}
  std::int64_t record_id() const noexcept { return record_id_; }

 private:
  std::int64_t record_id_;
};

class InvalidOverlap : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class TooFewBoxes : public ValidationError {
 public:
  TooFewBoxes(std::size_t boxes, std::size_t k)
      : ValidationError("cannot form " + std::to_string(k) + " clusters from " + std::to_string(boxes) +
                        " boxes") {}
};

/// Config problems carry the dotted key path that caused them.
class ConfigError : public ValidationError {
 public:
  ConfigError(const std::string& key_path, const std::string& reason)
      : ValidationError(reason + ": " + key_path), key_path_(key_path) {}
  const std::string& key_path() const noexcept { return key_path_; }

 private:
  std::string key_path_;
};

}  // namespace detforge
