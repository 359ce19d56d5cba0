#pragma once

// Internal helper shared by the config and experiment-parameter decoders.

#include "nvtwin/config.hpp"

#include <Eigen/Dense>

#include <set>
#include <string>

namespace nvtwin::config::detail {

// Strict object walker: every key must be consumed or finish() throws.
class Obj {
 public:
  Obj(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const Json* get(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string sub(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void num(const char* key, double& out) {
    if (const Json* v = get(key)) out = to_number(*v, sub(key));
  }

  void integer(const char* key, int& out) {
    if (const Json* v = get(key)) {
      if (!v->is_number_integer()) throw ConfigError(sub(key) + ": expected an integer");
      out = v->get<int>();
    }
  }

  void u64(const char* key, std::uint64_t& out) {
    if (const Json* v = get(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0))
        throw ConfigError(sub(key) + ": expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }

  void boolean(const char* key, bool& out) {
    if (const Json* v = get(key)) {
      if (!v->is_boolean()) throw ConfigError(sub(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }

  void text(const char* key, std::string& out) {
    if (const Json* v = get(key)) {
      if (!v->is_string()) throw ConfigError(sub(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }

  void vec3(const char* key, Eigen::Vector3d& out) {
    if (const Json* v = get(key)) {
      if (!v->is_array() || v->size() != 3) throw ConfigError(sub(key) + ": expected [x, y, z]");
      for (int a = 0; a < 3; ++a) out[a] = to_number((*v)[static_cast<std::size_t>(a)], sub(key));
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + sub(it.key().c_str()) + "'");
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace nvtwin::config::detail
