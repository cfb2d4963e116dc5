#include "aver/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "aver/errors.hpp"

namespace aver {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

void Config::declare(const std::string& key, const std::string& default_value,
                     const std::string& help) {
  require(!key.empty(), "config: empty key");
  require(!declared(key), "config: key '", key, "' declared twice");
  Entry e;
  e.key = key;
  e.default_value = default_value;
  e.help = help;
  entries_.push_back(std::move(e));
}

bool Config::declared(const std::string& key) const {
  for (const Entry& e : entries_) {
    if (e.key == key) return true;
  }
  return false;
}

Config::Entry& Config::find(const std::string& key) {
  for (Entry& e : entries_) {
    if (e.key == key) return e;
  }
  fail("config: unknown key '", key, "'");
}

const Config::Entry& Config::find(const std::string& key) const {
  return const_cast<Config*>(this)->find(key);
}

const std::string& Config::value_of(const Entry& e) const {
  if (e.from_override) return e.override_value;
  if (e.from_file) return e.file_value;
  return e.default_value;
}

void Config::load_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail_io("config: cannot open ", path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const std::size_t eq = stripped.find('=');
    require(eq != std::string::npos, "config: ", path.string(), ":", line_no,
            ": expected 'key = value', got '", stripped, "'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    require(!key.empty(), "config: ", path.string(), ":", line_no, ": empty key");
    Entry& e = find(key);
    e.file_value = value;
    e.from_file = true;
  }
}

void Config::set_override(const std::string& key, const std::string& value) {
  Entry& e = find(key);
  e.override_value = trim(value);
  e.from_override = true;
}

std::string Config::get_string(const std::string& key) const { return value_of(find(key)); }

long long Config::get_int(const std::string& key) const {
  const std::string v = get_string(key);
  try {
    std::size_t used = 0;
    const long long out = std::stoll(v, &used);
    require(used == v.size(), "config: key '", key, "' has non-integer value '", v, "'");
    return out;
  } catch (const std::invalid_argument&) {
    fail("config: key '", key, "' has non-integer value '", v, "'");
  } catch (const std::out_of_range&) {
    fail("config: key '", key, "' integer value '", v, "' out of range");
  }
}

double Config::get_double(const std::string& key) const {
  const std::string v = get_string(key);
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    require(used == v.size(), "config: key '", key, "' has non-numeric value '", v, "'");
    return out;
  } catch (const std::invalid_argument&) {
    fail("config: key '", key, "' has non-numeric value '", v, "'");
  } catch (const std::out_of_range&) {
    fail("config: key '", key, "' numeric value '", v, "' out of range");
  }
}

bool Config::get_bool(const std::string& key) const {
  const std::string v = get_string(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail("config: key '", key, "' has non-boolean value '", v, "' (use true/false/1/0)");
}

std::string Config::resolved() const {
  std::ostringstream os;
  for (const Entry& e : entries_) {
    os << e.key << " = " << value_of(e) << "\n";
  }
  return os.str();
}

void Config::write_resolved(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail_io("config: cannot write ", path.string());
  const std::string body = resolved();
  f.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!f) fail_io("config: short write to ", path.string());
}

std::string Config::reference() const {
  std::ostringstream os;
  for (const Entry& e : entries_) {
    os << e.key << " (default: " << (e.default_value.empty() ? "<empty>" : e.default_value) << ")";
    if (!e.help.empty()) os << "  " << e.help;
    os << "\n";
  }
  return os.str();
}

}  // namespace aver
