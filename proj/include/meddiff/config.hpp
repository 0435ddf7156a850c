#pragma once

#include <map>
#include <string>

namespace meddiff {

// Flat `key = value` text files, one pair per line. `#` starts a comment.
// Keys keep insertion-independent (sorted) order so serialization is stable.
using KvMap = std::map<std::string, std::string>;

KvMap parse_kv_text(const std::string& text);
KvMap parse_kv_file(const std::string& path);
std::string serialize_kv(const KvMap& kv);

bool kv_has(const KvMap& kv, const std::string& key);
std::string kv_get_string(const KvMap& kv, const std::string& key, const std::string& fallback);
double kv_get_double(const KvMap& kv, const std::string& key, double fallback);
std::int64_t kv_get_int(const KvMap& kv, const std::string& key, std::int64_t fallback);
bool kv_get_bool(const KvMap& kv, const std::string& key, bool fallback);

// Reads the whole file; throws ValidationError with the path on failure.
std::string read_text_file(const std::string& path);

// Writes via a temp file in the same directory followed by rename.
void write_text_file_atomic(const std::string& path, const std::string& content);

std::string format_fixed6(double value);

}  // namespace meddiff
