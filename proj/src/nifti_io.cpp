#include "evcseg/nifti_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <type_traits>

namespace evcseg {

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::int32_t kSwappedHeaderSize = 1543569408;  // 348 byte-reversed

template <typename T>
T byteswap_value(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<std::uint8_t, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  std::reverse(b.begin(), b.end());
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, bool swap) : data_(data), swap_(swap) {}
  template <typename T>
  T get(std::size_t offset) const {
    T v;
    std::memcpy(&v, data_ + offset, sizeof(T));
    return swap_ ? byteswap_value(v) : v;
  }

 private:
  const std::uint8_t* data_;
  bool swap_;
};

class ByteWriter {
 public:
  ByteWriter(std::uint8_t* data, bool swap) : data_(data), swap_(swap) {}
  template <typename T>
  void put(std::size_t offset, T v) {
    if (swap_) v = byteswap_value(v);
    std::memcpy(data_ + offset, &v, sizeof(T));
  }

 private:
  std::uint8_t* data_;
  bool swap_;
};

bool has_gzip_magic(const std::vector<std::uint8_t>& bytes) {
  return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

int bytes_per_voxel(std::int16_t datatype) {
  switch (static_cast<NiftiDatatype>(datatype)) {
    case NiftiDatatype::kUint8: return 1;
    case NiftiDatatype::kInt16: return 2;
    case NiftiDatatype::kInt32: return 4;
    case NiftiDatatype::kFloat32: return 4;
    case NiftiDatatype::kFloat64: return 8;
  }
  throw UnsupportedDatatypeError("unsupported NIfTI datatype code " + std::to_string(datatype));
}

template <typename T>
void decode_payload(const std::uint8_t* src, std::size_t n, bool swap, std::vector<double>& out) {
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, src + i * sizeof(T), sizeof(T));
    if (swap) v = byteswap_value(v);
    out[i] = static_cast<double>(v);
  }
}

template <typename T>
void encode_payload(std::span<const double> values, bool swap, std::uint8_t* dst) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    double x = values[i];
    T v;
    if constexpr (std::is_integral_v<T>) {
      x = std::round(x);
      x = std::clamp(x, static_cast<double>(std::numeric_limits<T>::lowest()),
                     static_cast<double>(std::numeric_limits<T>::max()));
    }
    v = static_cast<T>(x);
    if (swap) v = byteswap_value(v);
    std::memcpy(dst + i * sizeof(T), &v, sizeof(T));
  }
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::uint8_t> encode_header(const NiftiHeader& h, bool big_endian) {
  std::vector<std::uint8_t> bytes(kHeaderSize + 4, 0);
  const bool swap = big_endian != (std::endian::native == std::endian::big);
  ByteWriter w(bytes.data(), swap);
  w.put<std::int32_t>(0, 348);
  bytes[38] = 'r';  // "regular"
  for (int i = 0; i < 8; ++i) w.put<std::int16_t>(40 + 2 * i, h.dim[i]);
  w.put<std::int16_t>(70, h.datatype);
  w.put<std::int16_t>(72, h.bitpix);
  for (int i = 0; i < 8; ++i) w.put<float>(76 + 4 * i, h.pixdim[i]);
  w.put<float>(108, h.vox_offset);
  w.put<float>(112, h.scl_slope);
  w.put<float>(116, h.scl_inter);
  bytes[123] = h.xyzt_units;
  w.put<std::int16_t>(252, h.qform_code);
  w.put<std::int16_t>(254, h.sform_code);
  w.put<float>(256, h.quatern_b);
  w.put<float>(260, h.quatern_c);
  w.put<float>(264, h.quatern_d);
  w.put<float>(268, h.qoffset_x);
  w.put<float>(272, h.qoffset_y);
  w.put<float>(276, h.qoffset_z);
  for (int i = 0; i < 4; ++i) {
    w.put<float>(280 + 4 * i, h.srow_x[i]);
    w.put<float>(296 + 4 * i, h.srow_y[i]);
    w.put<float>(312 + 4 * i, h.srow_z[i]);
  }
  std::memcpy(bytes.data() + 344, h.magic.data(), 4);
  return bytes;
}

NiftiHeader header_for(const std::vector<int>& dims, const Affine& affine, NiftiDatatype dt) {
  NiftiHeader h;
  h.dim.fill(1);
  h.dim[0] = static_cast<std::int16_t>(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] > std::numeric_limits<std::int16_t>::max()) {
      throw ShapeError("dimension too large for NIfTI-1");
    }
    h.dim[i + 1] = static_cast<std::int16_t>(dims[i]);
  }
  h.datatype = static_cast<std::int16_t>(dt);
  h.bitpix = static_cast<std::int16_t>(8 * bytes_per_voxel(h.datatype));
  h.pixdim.fill(1.0f);
  const Eigen::Vector3d sp = voxel_spacing(affine);
  for (int k = 0; k < 3; ++k) h.pixdim[k + 1] = static_cast<float>(sp[k]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // millimetres
  h.sform_code = 1;
  for (int c = 0; c < 4; ++c) {
    h.srow_x[c] = static_cast<float>(affine(0, c));
    h.srow_y[c] = static_cast<float>(affine(1, c));
    h.srow_z[c] = static_cast<float>(affine(2, c));
  }
  return h;
}

bool header_affine_finite(const NiftiHeader& h) {
  for (int c = 0; c < 4; ++c) {
    if (!std::isfinite(h.srow_x[c]) || !std::isfinite(h.srow_y[c]) || !std::isfinite(h.srow_z[c])) {
      return false;
    }
  }
  return true;
}

void write_image(const NiftiHeader& header, std::span<const double> values,
                 const std::filesystem::path& path, const NiftiWriteOptions& options) {
  if (!header_affine_finite(header)) throw ShapeError("affine must be finite");
  std::vector<std::uint8_t> bytes = encode_header(header, options.big_endian);
  const bool swap = options.big_endian != (std::endian::native == std::endian::big);
  const std::size_t bpv = static_cast<std::size_t>(bytes_per_voxel(header.datatype));
  const std::size_t start = bytes.size();
  bytes.resize(start + values.size() * bpv);
  std::uint8_t* dst = bytes.data() + start;
  switch (static_cast<NiftiDatatype>(header.datatype)) {
    case NiftiDatatype::kUint8: encode_payload<std::uint8_t>(values, swap, dst); break;
    case NiftiDatatype::kInt16: encode_payload<std::int16_t>(values, swap, dst); break;
    case NiftiDatatype::kInt32: encode_payload<std::int32_t>(values, swap, dst); break;
    case NiftiDatatype::kFloat32: encode_payload<float>(values, swap, dst); break;
    case NiftiDatatype::kFloat64: encode_payload<double>(values, swap, dst); break;
  }
  bool compress = false;
  switch (options.gzip) {
    case NiftiWriteOptions::Gzip::kByExtension: compress = ends_with(path.string(), ".gz"); break;
    case NiftiWriteOptions::Gzip::kAlways: compress = true; break;
    case NiftiWriteOptions::Gzip::kNever: compress = false; break;
  }
  write_file_bytes(path, compress ? gzip(bytes) : bytes);
}

}  // namespace

Affine NiftiHeader::affine() const {
  Affine a = Affine::Identity();
  if (sform_code > 0) {
    for (int c = 0; c < 4; ++c) {
      a(0, c) = srow_x[c];
      a(1, c) = srow_y[c];
      a(2, c) = srow_z[c];
    }
    return a;
  }
  const double dx = pixdim[1] > 0 ? pixdim[1] : 1.0;
  const double dy = pixdim[2] > 0 ? pixdim[2] : 1.0;
  const double dz = pixdim[3] > 0 ? pixdim[3] : 1.0;
  if (qform_code > 0) {
    const double b = quatern_b, c = quatern_c, d = quatern_d;
    const double a2 = 1.0 - (b * b + c * c + d * d);
    const double qa = a2 > 0.0 ? std::sqrt(a2) : 0.0;
    Eigen::Matrix3d r;
    r << qa * qa + b * b - c * c - d * d, 2 * (b * c - qa * d), 2 * (b * d + qa * c),
        2 * (b * c + qa * d), qa * qa + c * c - b * b - d * d, 2 * (c * d - qa * b),
        2 * (b * d - qa * c), 2 * (c * d + qa * b), qa * qa + d * d - c * c - b * b;
    const double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
    a.block<3, 1>(0, 0) = r.col(0) * dx;
    a.block<3, 1>(0, 1) = r.col(1) * dy;
    a.block<3, 1>(0, 2) = r.col(2) * dz * qfac;
    a(0, 3) = qoffset_x;
    a(1, 3) = qoffset_y;
    a(2, 3) = qoffset_z;
    return a;
  }
  a(0, 0) = dx;
  a(1, 1) = dy;
  a(2, 2) = dz;
  return a;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& bytes) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw IoError("zlib inflateInit failed");
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> chunk;
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw TruncatedPayloadError("corrupt or truncated gzip stream");
    }
    out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw TruncatedPayloadError("truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

std::vector<std::uint8_t> gzip(const std::vector<std::uint8_t>& bytes) {
  z_stream zs{};
  if (deflateInit2(&zs, 6, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw IoError("zlib deflateInit failed");
  }
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(bytes.size())) + 32);
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw IoError("zlib deflate failed");
  out.resize(zs.total_out);
  return out;
}

NiftiHeader parse_nifti_header(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderSize) throw TruncatedPayloadError("file shorter than a NIfTI-1 header");
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swap = false;
  if (sizeof_hdr == kSwappedHeaderSize) {
    swap = true;
  } else if (sizeof_hdr != 348) {
    throw NiftiHeaderError("sizeof_hdr is " + std::to_string(sizeof_hdr) + ", expected 348");
  }
  ByteReader r(bytes.data(), swap);
  NiftiHeader h;
  h.swapped = swap;
  for (int i = 0; i < 8; ++i) h.dim[i] = r.get<std::int16_t>(40 + 2 * i);
  h.datatype = r.get<std::int16_t>(70);
  h.bitpix = r.get<std::int16_t>(72);
  for (int i = 0; i < 8; ++i) h.pixdim[i] = r.get<float>(76 + 4 * i);
  h.vox_offset = r.get<float>(108);
  h.scl_slope = r.get<float>(112);
  h.scl_inter = r.get<float>(116);
  h.xyzt_units = bytes[123];
  h.qform_code = r.get<std::int16_t>(252);
  h.sform_code = r.get<std::int16_t>(254);
  h.quatern_b = r.get<float>(256);
  h.quatern_c = r.get<float>(260);
  h.quatern_d = r.get<float>(264);
  h.qoffset_x = r.get<float>(268);
  h.qoffset_y = r.get<float>(272);
  h.qoffset_z = r.get<float>(276);
  for (int i = 0; i < 4; ++i) {
    h.srow_x[i] = r.get<float>(280 + 4 * i);
    h.srow_y[i] = r.get<float>(296 + 4 * i);
    h.srow_z[i] = r.get<float>(312 + 4 * i);
  }
  std::memcpy(h.magic.data(), bytes.data() + 344, 4);

  const bool single = std::memcmp(h.magic.data(), "n+1\0", 4) == 0;
  const bool pair = std::memcmp(h.magic.data(), "ni1\0", 4) == 0;
  if (!single && !pair) throw NiftiHeaderError("bad NIfTI-1 magic");
  if (h.dim[0] < 1 || h.dim[0] > 7) throw NiftiHeaderError("dim[0] outside 1..7");
  for (int i = 1; i <= h.dim[0]; ++i) {
    if (h.dim[i] < 1) throw NiftiHeaderError("non-positive dimension in dim[]");
  }
  bytes_per_voxel(h.datatype);  // throws on unsupported codes
  return h;
}

NiftiImage read_nifti_image(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes = read_file_bytes(path);
  if (has_gzip_magic(bytes)) bytes = gunzip(bytes);

  NiftiImage img;
  img.header = parse_nifti_header(bytes);
  const NiftiHeader& h = img.header;

  std::size_t count = 1;
  for (int i = 1; i <= h.dim[0]; ++i) {
    img.dims.push_back(h.dim[i]);
    count *= static_cast<std::size_t>(h.dim[i]);
  }

  std::vector<std::uint8_t> payload_file;
  const std::vector<std::uint8_t>* source = &bytes;
  std::size_t offset = static_cast<std::size_t>(std::max(0.0f, h.vox_offset));
  if (std::memcmp(h.magic.data(), "ni1\0", 4) == 0) {
    std::string img_path = path.string();
    const bool gz = ends_with(img_path, ".gz");
    if (gz) img_path.resize(img_path.size() - 3);
    if (ends_with(img_path, ".hdr")) img_path.replace(img_path.size() - 4, 4, ".img");
    if (gz && !std::filesystem::exists(img_path)) img_path += ".gz";
    payload_file = read_file_bytes(img_path);
    if (has_gzip_magic(payload_file)) payload_file = gunzip(payload_file);
    source = &payload_file;
  } else if (offset < kHeaderSize) {
    throw NiftiHeaderError("vox_offset inside the header");
  }

  const std::size_t bpv = static_cast<std::size_t>(bytes_per_voxel(h.datatype));
  if (source->size() < offset + count * bpv) {
    throw TruncatedPayloadError("payload shorter than dim[] x bitpix implies: " + path.string());
  }
  img.data.resize(count);
  const std::uint8_t* src = source->data() + offset;
  switch (static_cast<NiftiDatatype>(h.datatype)) {
    case NiftiDatatype::kUint8: decode_payload<std::uint8_t>(src, count, h.swapped, img.data); break;
    case NiftiDatatype::kInt16: decode_payload<std::int16_t>(src, count, h.swapped, img.data); break;
    case NiftiDatatype::kInt32: decode_payload<std::int32_t>(src, count, h.swapped, img.data); break;
    case NiftiDatatype::kFloat32: decode_payload<float>(src, count, h.swapped, img.data); break;
    case NiftiDatatype::kFloat64: decode_payload<double>(src, count, h.swapped, img.data); break;
  }
  if (h.scl_slope != 0.0f && std::isfinite(h.scl_slope) &&
      !(h.scl_slope == 1.0f && h.scl_inter == 0.0f)) {
    const double slope = h.scl_slope, inter = h.scl_inter;
    for (double& v : img.data) v = slope * v + inter;
  }
  return img;
}

namespace {

Shape3 spatial_shape(const NiftiImage& img, int extra_axes_allowed) {
  const auto& d = img.dims;
  int dims[3] = {1, 1, 1};
  for (std::size_t i = 0; i < d.size() && i < 3; ++i) dims[i] = d[i];
  for (std::size_t i = 3 + extra_axes_allowed; i < d.size(); ++i) {
    if (d[i] != 1) throw FormatError("unexpected extra image dimensions");
  }
  return Shape3{dims[0], dims[1], dims[2]};
}

}  // namespace

Volume read_nifti(const std::filesystem::path& path) {
  NiftiImage img = read_nifti_image(path);
  const Shape3 shape = spatial_shape(img, 0);
  return Volume(shape, std::move(img.data), img.header.affine());
}

LabelMask read_nifti_mask(const std::filesystem::path& path) {
  NiftiImage img = read_nifti_image(path);
  const Shape3 shape = spatial_shape(img, 0);
  std::vector<std::uint8_t> labels(img.data.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double v = img.data[i];
    if (v != 0.0 && v != 1.0) throw DataError("mask contains non-binary values: " + path.string());
    labels[i] = static_cast<std::uint8_t>(v);
  }
  return LabelMask(shape, std::move(labels), img.header.affine());
}

ProbMap read_nifti_probmap(const std::filesystem::path& path) {
  NiftiImage img = read_nifti_image(path);
  const Shape3 shape = spatial_shape(img, 1);
  const int labels = img.dims.size() >= 4 ? img.dims[3] : 1;
  if (labels < 2) throw FormatError("probability map needs a label axis of length >= 2");
  return ProbMap(labels, shape, std::move(img.data), img.header.affine());
}

void write_nifti(const Volume& v, const std::filesystem::path& path, const NiftiWriteOptions& options) {
  const Shape3& s = v.shape();
  write_image(header_for({s.nx, s.ny, s.nz}, v.affine(), options.datatype), v.data(), path, options);
}

void write_nifti(const LabelMask& m, const std::filesystem::path& path, const NiftiWriteOptions& options) {
  const Shape3& s = m.shape();
  std::vector<double> values(m.data().begin(), m.data().end());
  write_image(header_for({s.nx, s.ny, s.nz}, m.affine(), NiftiDatatype::kUint8), values, path, options);
}

void write_nifti(const ProbMap& p, const std::filesystem::path& path, const NiftiWriteOptions& options) {
  const Shape3& s = p.shape();
  write_image(header_for({s.nx, s.ny, s.nz, p.labels()}, p.affine(), options.datatype), p.data(), path,
              options);
}

Volume read_raw(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() < 12) throw TruncatedPayloadError("raw file shorter than its shape header");
  const bool swap = std::endian::native == std::endian::big;
  ByteReader r(bytes.data(), swap);
  const std::uint32_t nx = r.get<std::uint32_t>(0), ny = r.get<std::uint32_t>(4), nz = r.get<std::uint32_t>(8);
  const std::size_t count = static_cast<std::size_t>(nx) * ny * nz;
  if (bytes.size() < 12 + 4 * count) throw TruncatedPayloadError("raw payload truncated");
  std::vector<double> data(count);
  decode_payload<float>(bytes.data() + 12, count, swap, data);
  return Volume(Shape3{static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz)}, std::move(data));
}

void write_raw(const Volume& v, const std::filesystem::path& path) {
  const bool swap = std::endian::native == std::endian::big;
  std::vector<std::uint8_t> bytes(12 + 4 * v.size());
  ByteWriter w(bytes.data(), swap);
  w.put<std::uint32_t>(0, static_cast<std::uint32_t>(v.shape().nx));
  w.put<std::uint32_t>(4, static_cast<std::uint32_t>(v.shape().ny));
  w.put<std::uint32_t>(8, static_cast<std::uint32_t>(v.shape().nz));
  encode_payload<float>(v.data(), swap, bytes.data() + 12);
  write_file_bytes(path, bytes);
}

}  // namespace evcseg
