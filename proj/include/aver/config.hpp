#pragma once

// Flat key=value configuration with a declared schema. Keys must be declared
// with a default before a file or command-line override can set them, so a
// typo in either place is an error rather than a silently ignored setting.
// Precedence: override > file > default.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace aver {

class Config {
 public:
  // Declares a key and its default. Declaration order is the order keys
  // appear in resolved() output.
  void declare(const std::string& key, const std::string& default_value,
               const std::string& help = "");

  // Applies `key = value` lines; '#' starts a comment. Unknown keys fail.
  void load_file(const std::filesystem::path& path);

  // Applies one key=value pair from the command line. Unknown keys fail.
  void set_override(const std::string& key, const std::string& value);

  bool declared(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Final values after precedence, one "key = value" line per declared key,
  // in declaration order. Byte-stable for fixed declarations and inputs.
  std::string resolved() const;
  void write_resolved(const std::filesystem::path& path) const;

  // Declared keys with defaults and help text, for --help style listings.
  std::string reference() const;

 private:
  struct Entry {
    std::string key;
    std::string default_value;
    std::string help;
    std::string file_value;
    std::string override_value;
    bool from_file = false;
    bool from_override = false;
  };

  Entry& find(const std::string& key);
  const Entry& find(const std::string& key) const;
  const std::string& value_of(const Entry& e) const;

  std::vector<Entry> entries_;
};

}  // namespace aver
