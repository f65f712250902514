// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace uniflow::io {

/// Parameter-file format shared by every trainable component: one JSON
/// header line terminated by '\n', then the raw little-endian IEEE-754
/// doubles. The header carries "param_count" plus component metadata.
void save_flat_params(const std::string& path, nlohmann::json header,
                      const std::vector<double>& data);

std::pair<nlohmann::json, std::vector<double>> load_flat_params(const std::string& path);

/// FNV-1a 64-bit hash of a string, hex-encoded. Used to stamp artifacts
/// with the config they came from.
std::string fnv1a_hex(const std::string& text);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace uniflow::io
