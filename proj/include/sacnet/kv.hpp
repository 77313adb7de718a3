#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace sacnet {

// flat key=value text: one pair per line, blank lines and #-comments allowed
std::vector<std::pair<std::string, std::string>> parse_kv_text(const std::string& text);
std::string read_text_file(const std::string& path);

bool parse_bool(const std::string& v, const std::string& key);
int64_t parse_int(const std::string& v, const std::string& key);
uint64_t parse_uint(const std::string& v, const std::string& key);
double parse_double(const std::string& v, const std::string& key);
std::vector<int64_t> parse_int_list(const std::string& v, const std::string& key);

std::string format_double(double v);  // round-trip exact, %.17g

}  // namespace sacnet
