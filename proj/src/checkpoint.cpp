#include "mimd/checkpoint.hpp"

#include <algorithm>

#include "mimd/binary_io.hpp"

namespace mimd {

namespace {
constexpr char kMagic[4] = {'M', 'W', 'T', '1'};
}

std::vector<char> encode_checkpoint(const ModelParams& params) {
  std::vector<char> out(kMagic, kMagic + 4);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(params.tensors().size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.tensors()) {
    binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    binary::put<std::uint64_t>(out, offset);
    offset += static_cast<std::uint64_t>(t.size());
  }
  for (const auto& [_, t] : params.tensors()) {
    for (Index i = 0; i < t.size(); ++i) binary::put<double>(out, t.values()(i));
  }
  return out;
}

ModelParams decode_checkpoint(const std::vector<char>& bytes) {
  binary::Reader in(bytes);
  if (in.get_string(4) != std::string(kMagic, 4)) {
    throw FormatError(FormatError::Kind::BadMagic, "not a parameter checkpoint (bad magic)");
  }
  auto count = in.get<std::uint32_t>();
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  std::uint64_t expected_offset = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = in.get_string(in.get<std::uint32_t>());
    auto rank = in.get<std::uint32_t>();
    std::uint64_t elems = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      auto d = in.get<std::uint32_t>();
      if (d == 0) throw FormatError(FormatError::Kind::DimOverflow, "zero-sized axis in " + e.name);
      elems *= d;
      if (elems > (std::uint64_t{1} << 40)) throw FormatError(FormatError::Kind::DimOverflow, "tensor too large: " + e.name);
      e.shape.push_back(static_cast<Index>(d));
    }
    e.offset = in.get<std::uint64_t>();
    if (e.offset != expected_offset) throw FormatError(FormatError::Kind::Truncated, "inconsistent offset for " + e.name);
    expected_offset += elems;
    entries.push_back(std::move(e));
  }
  if (in.remaining() != expected_offset * sizeof(double)) {
    throw FormatError(FormatError::Kind::Truncated, "payload length does not match manifest");
  }
  std::map<std::string, Tensor> tensors;
  for (const Entry& e : entries) {
    Array values(shape_size(e.shape));
    for (Index i = 0; i < values.size(); ++i) values(i) = in.get<double>();
    tensors.emplace(e.name, Tensor(e.shape, std::move(values)));
  }
  return ModelParams(std::move(tensors));
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  binary::write_file(path, encode_checkpoint(params));
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binary::read_file(path));
}

}  // namespace mimd
