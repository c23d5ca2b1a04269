#include <charconv>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "mimd/binary_io.hpp"
#include "mimd/data.hpp"
#include "mimd/error.hpp"

namespace mimd {

namespace {

constexpr char kMagic[4] = {'M', 'I', 'V', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFloat32 = 1;
constexpr std::uint32_t kUint8 = 2;

void put_header(std::vector<char>& out, const VolumeDims& d, std::uint32_t dtype) {
  out.assign(kMagic, kMagic + 4);
  binary::put<std::uint32_t>(out, kVersion);
  binary::put<std::uint32_t>(out, 3);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.depth));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.height));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.width));
  binary::put<std::uint32_t>(out, dtype);
}

struct Header {
  VolumeDims dims;
  std::uint32_t dtype;
};

Header read_header(binary::Reader& in, std::uint32_t expected_dtype) {
  if (in.remaining() < 4 || in.get_string(4) != std::string(kMagic, 4)) {
    throw FormatError(FormatError::Kind::BadMagic, "not a volume container (bad magic)");
  }
  auto version = in.get<std::uint32_t>();
  if (version != kVersion) throw FormatError(FormatError::Kind::BadVersion, "unsupported volume version " + std::to_string(version));
  auto ndim = in.get<std::uint32_t>();
  if (ndim != 3) throw FormatError(FormatError::Kind::DimOverflow, "expected 3 dimensions, found " + std::to_string(ndim));
  std::uint64_t elems = 1;
  std::array<Index, 3> d{};
  for (auto& v : d) {
    auto x = in.get<std::uint32_t>();
    elems *= x;
    if (elems > (std::uint64_t{1} << 36)) throw FormatError(FormatError::Kind::DimOverflow, "volume dimensions overflow");
    v = static_cast<Index>(x);
  }
  auto dtype = in.get<std::uint32_t>();
  if (dtype != kFloat32 && dtype != kUint8) throw FormatError(FormatError::Kind::BadDType, "unknown dtype code " + std::to_string(dtype));
  if (dtype != expected_dtype) {
    throw FormatError(FormatError::Kind::BadDType, expected_dtype == kFloat32 ? "expected a float32 volume" : "expected a uint8 mask");
  }
  std::uint64_t item = dtype == kFloat32 ? 4 : 1;
  if (in.remaining() != elems * item) {
    throw FormatError(FormatError::Kind::Truncated, "payload length " + std::to_string(in.remaining()) +
                                                       " does not match declared dims (" + std::to_string(elems * item) + " bytes)");
  }
  return {{d[0], d[1], d[2]}, dtype};
}

}  // namespace

std::vector<char> encode_volume(const Volume& v) {
  std::vector<char> out;
  put_header(out, v.dims, kFloat32);
  out.reserve(out.size() + 4 * static_cast<std::size_t>(v.voxels.size()));
  for (Index i = 0; i < v.voxels.size(); ++i) binary::put<float>(out, v.voxels(i));
  return out;
}

std::vector<char> encode_mask(const RoiMask& m) {
  std::vector<char> out;
  put_header(out, m.dims, kUint8);
  for (Index i = 0; i < m.voxels.size(); ++i) out.push_back(static_cast<char>(m.voxels(i)));
  return out;
}

Volume decode_volume(const std::vector<char>& bytes) {
  binary::Reader in(bytes);
  auto h = read_header(in, kFloat32);
  Volume v;
  v.dims = h.dims;
  v.voxels.resize(h.dims.size());
  for (Index i = 0; i < v.voxels.size(); ++i) v.voxels(i) = in.get<float>();
  if (v.voxels.size() > 0) v.intensity_range = {v.voxels.minCoeff(), v.voxels.maxCoeff()};
  return v;
}

RoiMask decode_mask(const std::vector<char>& bytes) {
  binary::Reader in(bytes);
  auto h = read_header(in, kUint8);
  RoiMask m;
  m.dims = h.dims;
  m.voxels.resize(h.dims.size());
  for (Index i = 0; i < m.voxels.size(); ++i) {
    auto b = in.get<std::uint8_t>();
    if (b > 1) throw DataError("mask voxel value " + std::to_string(b) + " is not binary");
    m.voxels(i) = b;
  }
  return m;
}

void save_volume(const Volume& v, const std::filesystem::path& path) { binary::write_file(path, encode_volume(v)); }
void save_volume(const RoiMask& m, const std::filesystem::path& path) { binary::write_file(path, encode_mask(m)); }

Volume load_volume(const std::filesystem::path& path) {
  try {
    return decode_volume(binary::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), path.string() + ": " + e.what());
  }
}

RoiMask load_mask(const std::filesystem::path& path, const std::string& roi_name) {
  RoiMask m;
  try {
    m = decode_mask(binary::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), path.string() + ": " + e.what());
  }
  m.roi_name = roi_name;
  m.hemisphere = hemisphere_of(roi_name);
  return m;
}

// ---- manifest -------------------------------------------------------------------------

std::vector<SubjectRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatError::Kind::Io, "cannot open manifest " + path.string());
  std::vector<SubjectRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      SubjectRecord r;
      r.subject_id = j.at("subject_id").get<std::string>();
      r.visit_date = j.at("visit_date").get<std::string>();
      r.age = j.at("age").get<double>();
      r.mmse = j.at("mmse").get<int>();
      r.gender = parse_gender(j.at("gender").get<std::string>());
      r.cdr = j.at("cdr").get<double>();
      r.volume_path = j.at("volume").get<std::string>();
      if (j.contains("rois")) r.roi_masks = j.at("rois").get<std::map<std::string, std::string>>();
      r.validate();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_manifest(std::span<const SubjectRecord> records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot write manifest " + path.string());
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["subject_id"] = r.subject_id;
    j["visit_date"] = r.visit_date;
    j["age"] = r.age;
    j["mmse"] = r.mmse;
    j["gender"] = to_string(r.gender);
    j["cdr"] = r.cdr;
    j["volume"] = r.volume_path;
    j["rois"] = r.roi_masks;
    out << j.dump() << '\n';
  }
}

// ---- instance table ---------------------------------------------------------------------

namespace {

constexpr const char* kInstanceHeader = "subject_id,class,roi,slice_start,slice_count,cx,cy";

Index parse_index(const std::string& field, const std::string& what) {
  Index v = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) throw DataError("bad integer for " + what + ": '" + field + "'");
  return v;
}

}  // namespace

std::vector<InstanceRecord> read_instances(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatError::Kind::Io, "cannot open instance table " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty instance table");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kInstanceHeader) throw DataError(path.string() + ": unexpected header '" + line + "'");
  std::vector<InstanceRecord> out;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw DataError(path.string() + ": expected 7 fields in '" + line + "'");
    InstanceRecord r;
    r.subject_id = f[0];
    r.class_label = parse_class_label(f[1]);
    r.roi_name = f[2];
    r.slice_start = parse_index(f[3], "slice_start");
    r.slice_count = parse_index(f[4], "slice_count");
    r.centroid = {parse_index(f[5], "cx"), parse_index(f[6], "cy")};
    out.push_back(std::move(r));
  }
  return out;
}

void write_instances(std::span<const InstanceRecord> instances, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::Io, "cannot write instance table " + path.string());
  out << kInstanceHeader << '\n';
  for (const auto& r : instances) {
    out << r.subject_id << ',' << to_string(r.class_label) << ',' << r.roi_name << ',' << r.slice_start << ','
        << r.slice_count << ',' << r.centroid.cx << ',' << r.centroid.cy << '\n';
  }
}

std::vector<Example> load_examples(std::span<const SubjectRecord> records,
                                   std::span<const InstanceRecord> instances,
                                   std::span<const std::string> rois, const CropSpec& crop,
                                   const std::filesystem::path& base_dir) {
  std::unordered_map<std::string, std::map<std::string, const InstanceRecord*>> by_subject;
  for (const auto& inst : instances) by_subject[inst.subject_id][inst.roi_name] = &inst;

  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };

  std::vector<Example> out;
  for (const auto& r : records) {
    auto it = by_subject.find(r.subject_id);
    if (it == by_subject.end()) continue;
    Example ex;
    ex.subject_id = r.subject_id;
    ex.label = cdr_to_label(r.cdr);
    ex.features = {r.age, static_cast<double>(r.mmse), r.gender};
    Volume scaled = scale_to_unit(load_volume(resolve(r.volume_path)));
    for (const auto& roi : rois) {
      auto found = it->second.find(roi);
      if (found == it->second.end()) throw DataError(r.subject_id + ": no instance row for ROI '" + roi + "'");
      if (found->second->class_label != ex.label) throw DataError(r.subject_id + ": instance class disagrees with CDR");
      ex.images.push_back(crop_roi(scaled, *found->second, crop));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace mimd
