#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "su11/errors.hpp"

namespace su11::scan {

using Config = boost::property_tree::ptree;

namespace detail {

/// Recursive-descent evaluator for numeric config values such as
/// `2*pi*3e6` or `1/(2*pi*1.19e9)`.
class ExpressionParser {
 public:
  explicit ExpressionParser(std::string text) : s_(std::move(text)) {}

  double parse() {
    const double v = sum();
    skip();
    if (pos_ != s_.size()) fail("unexpected '" + std::string(1, s_[pos_]) + "'");
    return v;
  }

 private:
  std::string s_;
  std::size_t pos_ = 0;

  [[noreturn]] void fail(const std::string& why) const {
    throw ConfigError("bad numeric expression '" + s_ + "': " + why);
  }

  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  bool eat(char c) {
    skip();
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  double sum() {
    double v = product();
    for (;;) {
      if (eat('+')) v += product();
      else if (eat('-')) v -= product();
      else return v;
    }
  }

  double product() {
    double v = unary();
    for (;;) {
      if (eat('*')) v *= unary();
      else if (eat('/')) v /= unary();
      else return v;
    }
  }

  double unary() {
    if (eat('-')) return -unary();
    if (eat('+')) return unary();
    return power();
  }

  double power() {
    const double base = atom();
    if (eat('^')) return std::pow(base, unary());
    return base;
  }

  double atom() {
    skip();
    if (pos_ >= s_.size()) fail("unexpected end");
    if (eat('(')) {
      const double v = sum();
      if (!eat(')')) fail("missing ')'");
      return v;
    }
    const char c = s_[pos_];
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      const char* begin = s_.c_str() + pos_;
      char* end = nullptr;
      const double v = std::strtod(begin, &end);
      if (end == begin) fail("bad number");
      pos_ += static_cast<std::size_t>(end - begin);
      return v;
    }
    if (std::isalpha(static_cast<unsigned char>(c))) {
      const std::size_t start = pos_;
      while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_')) ++pos_;
      const std::string name = s_.substr(start, pos_ - start);
      if (name == "pi") return std::acos(-1.0);
      if (name == "inf") return INFINITY;
      if (eat('(')) {
        const double arg = sum();
        if (!eat(')')) fail("missing ')'");
        if (name == "sqrt") return std::sqrt(arg);
        if (name == "exp") return std::exp(arg);
        if (name == "log") return std::log(arg);
        if (name == "log10") return std::log10(arg);
        fail("unknown function " + name);
      }
      fail("unknown symbol " + name);
    }
    fail("unexpected '" + std::string(1, c) + "'");
  }
};

}  // namespace detail

inline double evaluate_expression(const std::string& text) { return detail::ExpressionParser(text).parse(); }

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  Config c;
  try {
    boost::property_tree::ini_parser::read_ini(in, c);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(path + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  return c;
}

inline Config parse_config_string(const std::string& text) {
  std::istringstream in(text);
  Config c;
  try {
    boost::property_tree::ini_parser::read_ini(in, c);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config: " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  return c;
}

/// Applies `section.key=value`. Section names may themselves contain dots
/// (`axis.1.max=3`), so the split is at the last dot before '='.
inline void apply_override(Config& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like section.key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  const auto dot = path.rfind('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == path.size())
    throw ConfigError("override key needs a section: " + path);
  const std::string section = path.substr(0, dot);
  const std::string key = path.substr(dot + 1);
  auto it = c.to_iterator(c.find(section));
  if (it == c.end()) it = c.push_back({section, Config{}});
  it->second.put(boost::property_tree::ptree::path_type(key, '\0'), value);
}

inline const Config* section(const Config& c, const std::string& name) {
  const auto it = c.find(name);
  return it == c.not_found() ? nullptr : &it->second;
}

inline std::optional<std::string> get_string(const Config& c, const std::string& sec, const std::string& key) {
  const Config* s = section(c, sec);
  if (!s) return std::nullopt;
  const auto it = s->find(key);
  if (it == s->not_found()) return std::nullopt;
  std::string v = it->second.data();
  const auto a = v.find_first_not_of(" \t");
  const auto b = v.find_last_not_of(" \t");
  return a == std::string::npos ? std::string() : v.substr(a, b - a + 1);
}

inline std::optional<double> get_number(const Config& c, const std::string& sec, const std::string& key) {
  auto s = get_string(c, sec, key);
  if (!s) return std::nullopt;
  try {
    return evaluate_expression(*s);
  } catch (const ConfigError& e) {
    throw ConfigError("[" + sec + "] " + key + ": " + e.what());
  }
}

inline double get_number_or(const Config& c, const std::string& sec, const std::string& key, double fallback) {
  return get_number(c, sec, key).value_or(fallback);
}

inline std::vector<double> get_number_list(const Config& c, const std::string& sec, const std::string& key) {
  std::vector<double> out;
  auto s = get_string(c, sec, key);
  if (!s) return out;
  std::stringstream ss(*s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(evaluate_expression(item));
    } catch (const ConfigError& e) {
      throw ConfigError("[" + sec + "] " + key + ": " + e.what());
    }
  }
  return out;
}

inline bool get_bool_or(const Config& c, const std::string& sec, const std::string& key, bool fallback) {
  auto s = get_string(c, sec, key);
  if (!s) return fallback;
  if (*s == "true" || *s == "1" || *s == "yes" || *s == "on") return true;
  if (*s == "false" || *s == "0" || *s == "no" || *s == "off") return false;
  throw ConfigError("[" + sec + "] " + key + ": expected a boolean, got '" + *s + "'");
}

}  // namespace su11::scan
