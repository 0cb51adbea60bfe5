#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dgseg/types.hpp"

namespace dgseg {

// Flat key=value configuration. Lines starting with '#' and blank lines are
// ignored. Keys are dotted paths like "model.embed_dim". Lookup with a typed
// getter throws on missing keys unless a default is supplied.
class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get_str(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& dflt) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int(const std::string& key, std::int64_t dflt) const;
  Scalar get_real(const std::string& key) const;
  Scalar get_real(const std::string& key, Scalar dflt) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool dflt) const;

  // Applies "key=value" override strings on top of the current content.
  void apply_overrides(const std::vector<std::string>& overrides);

  // Canonical text form: sorted keys, one "key=value" per line. Used both
  // for persistence and for hashing.
  std::string canonical_text() const;
  std::uint64_t hash() const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace dgseg
