// SPDX-License-Identifier: Apache-2.0
#include "uniflow/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace uniflow::io {

static_assert(std::endian::native == std::endian::little,
              "parameter files are little-endian; big-endian hosts need a swap pass");

void save_flat_params(const std::string& path, nlohmann::json header,
                      const std::vector<double>& data) {
  header["param_count"] = data.size();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!out) throw std::runtime_error("short write: " + path);
}

std::pair<nlohmann::json, std::vector<double>> load_flat_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) throw std::runtime_error("missing header: " + path);
  nlohmann::json header = nlohmann::json::parse(header_line);
  const auto count = header.at("param_count").get<size_t>();
  std::vector<double> data(count);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (static_cast<size_t>(in.gcount()) != count * sizeof(double))
    throw std::runtime_error("truncated parameter payload: " + path);
  return {std::move(header), std::move(data)};
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : text) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << text;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace uniflow::io
