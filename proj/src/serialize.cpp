#include "unetvl/serialize.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

namespace uvl {

namespace {

constexpr std::array<char, 4> kTensorMagic{'U', 'V', 'L', '1'};
constexpr std::array<char, 4> kContainerMagic{'U', 'V', 'L', 'C'};

template <class U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes.data(), bytes.size());
}

template <class U>
U get_le(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw FormatError(std::string("truncated stream while reading ") + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

void expect_magic(std::istream& is, const std::array<char, 4>& magic) {
  std::array<char, 4> got{};
  if (!is.read(got.data(), got.size()) || got != magic) {
    throw FormatError("bad magic: expected " + std::string(magic.data(), magic.size()));
  }
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw FormatError("UVL1 supports rank <= 255");
  os.write(kTensorMagic.data(), kTensorMagic.size());
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    if (e > std::numeric_limits<std::uint32_t>::max()) throw FormatError("UVL1 extent exceeds u32");
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  }
  for (double v : t.data()) {
    if (t.dtype() == DType::F32) {
      put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
  }
  if (!os) throw FormatError("write failed");
}

Tensor read_tensor(std::istream& is) {
  expect_magic(is, kTensorMagic);
  const auto code = get_le<std::uint8_t>(is, "dtype");
  if (code > 1) throw FormatError("unknown dtype code " + std::to_string(code));
  const DType dt = code == 0 ? DType::F32 : DType::F64;
  const auto rank = get_le<std::uint8_t>(is, "rank");
  Shape shape(rank);
  for (auto& e : shape) e = get_le<std::uint32_t>(is, "extent");
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) {
    v = dt == DType::F32 ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(is, "data")))
                         : std::bit_cast<double>(get_le<std::uint64_t>(is, "data"));
  }
  return Tensor(std::move(shape), std::move(values), dt);
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor(is);
}

void save_container(const std::filesystem::path& path, const NamedTensors& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os.write(kContainerMagic.data(), kContainerMagic.size());
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
  if (!os) throw FormatError("write failed for " + path.string());
}

NamedTensors load_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  expect_magic(is, kContainerMagic);
  const auto count = get_le<std::uint32_t>(is, "entry count");
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint32_t>(is, "name length");
    if (len > (1u << 16)) throw FormatError("implausible entry name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated entry name");
    out.emplace_back(std::move(name), read_tensor(is));
  }
  return out;
}

}  // namespace uvl
