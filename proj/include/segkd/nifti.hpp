#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "segkd/volume.hpp"

namespace segkd {

enum class NiftiErrc {
  BadHeaderSize,
  BadMagic,
  PairedFileUnsupported,
  UnsupportedDatatype,
  UnsupportedDims,
  BadVoxOffset,
  TruncatedPayload,
  LabelRange,
};

class NiftiError : public std::runtime_error {
 public:
  NiftiError(NiftiErrc code, size_t byte_offset, const std::string& msg)
      : std::runtime_error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
        code_(code),
        byte_offset_(byte_offset) {}
  NiftiErrc code() const { return code_; }
  size_t byte_offset() const { return byte_offset_; }

 private:
  NiftiErrc code_;
  size_t byte_offset_;
};

// The raw 348-byte header in native byte order. Orientation fields
// (qform/sform) are preserved verbatim on write but never used to reorient
// data: all processing happens on the stored voxel grid.
struct NiftiMeta {
  std::vector<uint8_t> raw_header;
};

// Single-file NIfTI-1 (.nii), optionally gzip-compressed (0x1f 0x8b prefix).
// Data is converted to float32 with scl_slope/scl_inter applied when slope
// is nonzero; spacing comes from pixdim[1..3]. Byte-swapped files are
// detected via sizeof_hdr and swapped on read.
Volume read_volume(const std::vector<uint8_t>& bytes, NiftiMeta* meta = nullptr);
LabelMap read_labelmap(const std::vector<uint8_t>& bytes, NiftiMeta* meta = nullptr);

// Volumes are written as float32 with slope/inter 1/0 and vox_offset 352;
// label maps as uint8 when C <= 256, int16 otherwise (C > 32767 rejected).
std::vector<uint8_t> write_volume(const Volume& vol, const NiftiMeta* meta = nullptr, bool gzip = false);
std::vector<uint8_t> write_labelmap(const LabelMap& lm, const NiftiMeta* meta = nullptr, bool gzip = false);

std::vector<uint8_t> gzip_compress(const std::vector<uint8_t>& raw);
std::vector<uint8_t> gzip_decompress(const std::vector<uint8_t>& compressed);
bool is_gzip(const std::vector<uint8_t>& bytes);

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<uint8_t>& bytes);

}  // namespace segkd
