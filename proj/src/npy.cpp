#include "unidiff/npy.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <regex>
#include <string>

#include "unidiff/errors.hpp"

namespace unidiff {

static_assert(std::endian::native == std::endian::little, "npy IO assumes a little-endian host");

namespace {
constexpr char kMagic[] = "\x93NUMPY";
}

void write_npy(const std::filesystem::path& path, const nn::Tensor& tensor) {
  std::string shape = "(";
  for (std::size_t i = 0; i < tensor.rank(); ++i) {
    shape += std::to_string(tensor.shape()[i]);
    shape += (tensor.rank() == 1 || i + 1 < tensor.rank()) ? "," : "";
    if (i + 1 < tensor.rank()) shape += " ";
  }
  shape += ")";
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t preamble = 6 + 2 + 2;
  const std::size_t total = ((preamble + header.size() + 1 + 63) / 64) * 64;
  header.append(total - preamble - header.size() - 1, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, 6);
  const char version[2] = {1, 0};
  out.write(version, 2);
  const auto len = static_cast<std::uint16_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(tensor.data()),
            static_cast<std::streamsize>(tensor.size() * sizeof(double)));
  if (!out) throw IoError("failed writing " + path.string());
}

nn::Tensor read_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char magic[6];
  char version[2];
  std::uint16_t len = 0;
  in.read(magic, 6);
  in.read(version, 2);
  in.read(reinterpret_cast<char*>(&len), 2);
  if (!in || std::memcmp(magic, kMagic, 6) != 0 || version[0] != 1) {
    throw FormatError(path.string() + ": not a version-1 npy file");
  }
  std::string header(len, '\0');
  in.read(header.data(), len);
  if (header.find("'<f8'") == std::string::npos || header.find("'fortran_order': False") == std::string::npos) {
    throw FormatError(path.string() + ": expected little-endian float64 C-order array");
  }
  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('shape': \(([0-9, ]*)\))"))) {
    throw FormatError(path.string() + ": missing shape");
  }
  nn::Shape shape;
  const std::string dims = m[1];
  std::regex num(R"([0-9]+)");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), num); it != std::sregex_iterator(); ++it) {
    shape.push_back(std::stoul(it->str()));
  }
  nn::Tensor t(shape);
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!in) throw FormatError(path.string() + ": truncated array data");
  return t;
}

}  // namespace unidiff
