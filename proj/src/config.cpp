#include "infobottle/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace infobottle {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_integer(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw ConfigError("key '" + key + "': expected an integer, got '" + text + "'");
  return v;
}

}  // namespace

std::string format_double(double v) {
  // Shortest text that parses back to the same double.
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::vector<ConfigEntry> parse_key_values(std::string_view text, std::string_view origin) {
  std::vector<ConfigEntry> out;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (!body.empty()) {
      const auto eq = body.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      ConfigEntry e{trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)), line_no};
      if (e.key.empty()) throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
      out.push_back(std::move(e));
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void FieldRegistry::insert(std::string key, Field f) {
  f.default_text = f.get();
  if (fields_.count(key)) throw std::logic_error("duplicate config key " + key);
  order_.push_back(key);
  fields_.emplace(std::move(key), std::move(f));
}

void FieldRegistry::add(std::string key, double& field, std::string doc) {
  const std::string k = key;
  insert(std::move(key), Field{[&field, k](const std::string& s) {
                                 try {
                                   std::size_t used = 0;
                                   const double v = std::stod(s, &used);
                                   if (used != s.size()) throw std::invalid_argument(s);
                                   field = v;
                                 } catch (const std::logic_error&) {
                                   throw ConfigError("key '" + k + "': expected a number, got '" + s + "'");
                                 }
                               },
                               [&field] { return format_double(field); }, {}, std::move(doc)});
}

void FieldRegistry::add(std::string key, std::size_t& field, std::string doc) {
  const std::string k = key;
  insert(std::move(key), Field{[&field, k](const std::string& s) { field = parse_integer<std::size_t>(k, s); },
                               [&field] { return std::to_string(field); }, {}, std::move(doc)});
}

void FieldRegistry::add(std::string key, int& field, std::string doc) {
  const std::string k = key;
  insert(std::move(key), Field{[&field, k](const std::string& s) { field = parse_integer<int>(k, s); },
                               [&field] { return std::to_string(field); }, {}, std::move(doc)});
}

void FieldRegistry::add(std::string key, bool& field, std::string doc) {
  const std::string k = key;
  insert(std::move(key), Field{[&field, k](const std::string& s) {
                                 if (s == "true" || s == "1") field = true;
                                 else if (s == "false" || s == "0") field = false;
                                 else throw ConfigError("key '" + k + "': expected true/false, got '" + s + "'");
                               },
                               [&field] { return std::string(field ? "true" : "false"); }, {}, std::move(doc)});
}

void FieldRegistry::add(std::string key, std::string& field, std::string doc) {
  insert(std::move(key), Field{[&field](const std::string& s) { field = s; }, [&field] { return field; }, {},
                               std::move(doc)});
}

void FieldRegistry::add_choice(std::string key, std::string& field, std::vector<std::string> choices,
                               std::string doc) {
  const std::string k = key;
  std::string joined;
  for (const auto& c : choices) joined += (joined.empty() ? "" : "|") + c;
  insert(std::move(key), Field{[&field, k, choices, joined](const std::string& s) {
                                 if (std::find(choices.begin(), choices.end(), s) == choices.end())
                                   throw ConfigError("key '" + k + "': expected one of " + joined + ", got '" + s + "'");
                                 field = s;
                               },
                               [&field] { return field; }, {}, doc + " (" + joined + ")"});
}

void FieldRegistry::set(const std::string& key, const std::string& value) {
  auto it = fields_.find(key);
  if (it == fields_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(value);
}

void FieldRegistry::apply(const std::vector<ConfigEntry>& entries) {
  for (const auto& e : entries) {
    if (!has(e.key)) throw ConfigError("unknown config key '" + e.key + "' (line " + std::to_string(e.line) + ")");
    set(e.key, e.value);
  }
}

std::string FieldRegistry::dump() const {
  std::ostringstream os;
  for (const auto& k : order_) os << k << " = " << fields_.at(k).get() << '\n';
  return os.str();
}

std::string FieldRegistry::help() const {
  std::size_t width = 0;
  for (const auto& k : order_) width = std::max(width, k.size());
  std::ostringstream os;
  for (const auto& k : order_) {
    const Field& f = fields_.at(k);
    os << "  " << k << std::string(width - k.size() + 2, ' ') << "[default: " << f.default_text << "]  " << f.doc
       << '\n';
  }
  return os.str();
}

}  // namespace infobottle
