#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "peftdml/param.hpp"

namespace peftdml {

// little-endian 64-bit float arrays <-> base64
std::string doubles_to_base64(const std::vector<double>& v);
std::vector<double> base64_to_doubles(const std::string& s);

// {"version": 1, "params": {path: {"shape": [...], "data": <b64>}}, "frozen": [paths]}
nlohmann::json param_set_to_json(const ParameterSet& params);
ParameterSet param_set_from_json(const nlohmann::json& j);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace peftdml
