#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "evcseg/volume.hpp"

namespace evcseg {

class NiftiHeaderError : public FormatError {
 public:
  using FormatError::FormatError;
};
class UnsupportedDatatypeError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedPayloadError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// NIfTI-1 datatype codes this reader understands.
enum class NiftiDatatype : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
};

/// The subset of the 348-byte NIfTI-1 header the library reads and writes.
struct NiftiHeader {
  std::int32_t sizeof_hdr = 348;
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = 0;
  std::int16_t bitpix = 0;
  std::array<float, 8> pixdim{};
  float vox_offset = 352.0f;
  float scl_slope = 0.0f;
  float scl_inter = 0.0f;
  std::uint8_t xyzt_units = 0;
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  float quatern_b = 0.0f, quatern_c = 0.0f, quatern_d = 0.0f;
  float qoffset_x = 0.0f, qoffset_y = 0.0f, qoffset_z = 0.0f;
  std::array<float, 4> srow_x{}, srow_y{}, srow_z{};
  std::array<char, 4> magic{'n', '+', '1', '\0'};
  bool swapped = false;  // true when the file was stored in the other byte order

  /// Affine by NIfTI precedence: sform when sform_code > 0, else qform when
  /// qform_code > 0, else a diagonal matrix of pixdim.
  Affine affine() const;
};

/// Decoded image: header plus voxels as doubles (slope/intercept applied),
/// stored x-fastest with any 4th dimension slowest.
struct NiftiImage {
  NiftiHeader header;
  std::vector<int> dims;  // dim[1..dim[0]]
  std::vector<double> data;
};

struct NiftiWriteOptions {
  NiftiDatatype datatype = NiftiDatatype::kFloat32;
  bool big_endian = false;
  /// Compress with gzip. Defaults to following the ".gz" extension.
  enum class Gzip { kByExtension, kAlways, kNever } gzip = Gzip::kByExtension;
};

NiftiHeader parse_nifti_header(const std::vector<std::uint8_t>& bytes);

NiftiImage read_nifti_image(const std::filesystem::path& path);
/// 3D volume; trailing singleton dimensions are accepted.
Volume read_nifti(const std::filesystem::path& path);
/// 3D mask; every stored value must be exactly 0 or 1.
LabelMask read_nifti_mask(const std::filesystem::path& path);
/// 4D map with the label axis as dim[4].
ProbMap read_nifti_probmap(const std::filesystem::path& path);

void write_nifti(const Volume& v, const std::filesystem::path& path,
                 const NiftiWriteOptions& options = {});
/// Masks are stored as uint8 regardless of options.datatype.
void write_nifti(const LabelMask& m, const std::filesystem::path& path,
                 const NiftiWriteOptions& options = {});
void write_nifti(const ProbMap& p, const std::filesystem::path& path,
                 const NiftiWriteOptions& options = {});

/// Raw test format: 3 x u32 little-endian shape, then float32 voxels x-fastest.
Volume read_raw(const std::filesystem::path& path);
void write_raw(const Volume& v, const std::filesystem::path& path);

/// Whole-file helpers; gzip input is detected by its 0x1f 0x8b magic.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::vector<std::uint8_t> gunzip(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> gzip(const std::vector<std::uint8_t>& bytes);

}  // namespace evcseg
