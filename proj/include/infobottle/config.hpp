#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace infobottle {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConfigEntry {
  std::string key;
  std::string value;
  int line = 0;
};

// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
std::vector<ConfigEntry> parse_key_values(std::string_view text, std::string_view origin = "<config>");
std::string read_text_file(const std::string& path);

// Binds textual keys to typed fields of config structs. Every field carries
// its default (captured at registration) and a one-line description.
class FieldRegistry {
 public:
  void add(std::string key, double& field, std::string doc);
  void add(std::string key, std::size_t& field, std::string doc);
  void add(std::string key, int& field, std::string doc);
  void add(std::string key, bool& field, std::string doc);
  void add(std::string key, std::string& field, std::string doc);
  // String field restricted to `choices`.
  void add_choice(std::string key, std::string& field, std::vector<std::string> choices, std::string doc);

  bool has(const std::string& key) const { return fields_.count(key) != 0; }
  void set(const std::string& key, const std::string& value);
  // Rejects unknown keys with a ConfigError naming the key and line.
  void apply(const std::vector<ConfigEntry>& entries);

  // Current values as parseable `key = value` text, in registration order.
  std::string dump() const;
  // One line per key: name, default, description.
  std::string help() const;

 private:
  struct Field {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
    std::string default_text;
    std::string doc;
  };
  void insert(std::string key, Field f);

  std::map<std::string, Field> fields_;
  std::vector<std::string> order_;
};

std::string format_double(double v);

}  // namespace infobottle
