#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmi/pipeline.hpp"

namespace mmi {

/// Flat key=value run configuration. Every key has a documented type and
/// default; unknown keys and malformed values are rejected with the key
/// named. Lines starting with '#' and blank lines are ignored.
class RunConfig {
 public:
  enum class Type { Int, Float, Bool, String };
  struct Key {
    std::string name;
    Type type;
    std::string fallback;
    std::string help;
    std::vector<std::string> choices;  // String keys only; empty = free text
  };
  static const std::vector<Key>& schema();

  RunConfig();
  /// Throws IoError if unreadable, ConfigError naming the line and key.
  static RunConfig from_file(const std::string& path);
  void merge_text(const std::string& text, const std::string& origin = "<text>");
  void set(const std::string& key, const std::string& value);
  /// "key=value".
  void set_assignment(const std::string& assignment);

  [[nodiscard]] const std::string& get(const std::string& key) const;
  [[nodiscard]] std::int64_t get_int(const std::string& key) const;
  [[nodiscard]] double get_float(const std::string& key) const;
  [[nodiscard]] bool get_bool(const std::string& key) const;
  [[nodiscard]] const std::map<std::string, std::string>& values() const { return values_; }

  [[nodiscard]] ModelConfig model() const;
  [[nodiscard]] TrainConfig train() const;
  [[nodiscard]] GenerateConfig generation() const;
  /// Keys that shape the model, for checkpoint echoes.
  [[nodiscard]] std::map<std::string, std::string> model_keys() const;
  [[nodiscard]] std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Environment variable naming the default config file.
inline constexpr const char* kConfigEnv = "MMI_CONFIG";

}  // namespace mmi
