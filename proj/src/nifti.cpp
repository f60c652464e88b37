#include "segkd/nifti.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace segkd {

namespace {

constexpr size_t kHeaderSize = 348;
constexpr size_t kMinVoxOffset = 352;

// Byte offsets of the NIfTI-1 header fields this reader touches.
constexpr size_t kOffSizeofHdr = 0;
constexpr size_t kOffDim = 40;        // short[8]
constexpr size_t kOffDatatype = 70;   // short
constexpr size_t kOffBitpix = 72;     // short
constexpr size_t kOffPixdim = 76;     // float[8]
constexpr size_t kOffVoxOffset = 108; // float
constexpr size_t kOffSclSlope = 112;  // float
constexpr size_t kOffSclInter = 116;  // float
constexpr size_t kOffMagic = 344;     // char[4]

enum Datatype : int16_t { kUint8 = 2, kInt16 = 4, kInt32 = 8, kFloat32 = 16 };

void swap_bytes(uint8_t* p, size_t width) {
  for (size_t i = 0; i < width / 2; ++i) std::swap(p[i], p[width - 1 - i]);
}

// All multi-byte numeric fields of the fixed 348-byte header.
void swap_header(std::vector<uint8_t>& h) {
  const size_t four[] = {0,  32,  56,  60,  64,  76,  80,  84,  88,  92,  96,  100, 104, 108, 112,
                         116, 124, 128, 132, 136, 140, 144, 256, 260, 264, 268, 272, 276, 280, 284,
                         288, 292, 296, 300, 304, 308, 312, 316, 320, 324};
  const size_t two[] = {36, 40, 42, 44, 46, 48, 50, 52, 54, 68, 70, 72, 74, 120, 252, 254};
  for (size_t off : four) swap_bytes(h.data() + off, 4);
  for (size_t off : two) swap_bytes(h.data() + off, 2);
}

template <typename T>
T get(const std::vector<uint8_t>& h, size_t off) {
  T v;
  std::memcpy(&v, h.data() + off, sizeof(T));
  return v;
}

template <typename T>
void put(std::vector<uint8_t>& h, size_t off, T v) {
  std::memcpy(h.data() + off, &v, sizeof(T));
}

struct Parsed {
  std::vector<uint8_t> header;  // native order
  std::array<int64_t, 3> shape; // D,H,W = dim[3],dim[2],dim[1]
  std::array<double, 3> spacing;
  int16_t datatype;
  float scl_slope, scl_inter;
  std::vector<uint8_t> payload;
  bool swapped;
};

Parsed parse(const std::vector<uint8_t>& input) {
  const std::vector<uint8_t> bytes = is_gzip(input) ? gzip_decompress(input) : input;
  if (bytes.size() < kHeaderSize)
    throw NiftiError(NiftiErrc::BadHeaderSize, bytes.size(), "file shorter than the 348-byte header");
  Parsed p;
  p.header.assign(bytes.begin(), bytes.begin() + kHeaderSize);
  int32_t hdr_size = get<int32_t>(p.header, kOffSizeofHdr);
  p.swapped = false;
  if (hdr_size != 348) {
    swap_bytes(reinterpret_cast<uint8_t*>(&hdr_size), 4);
    if (hdr_size != 348)
      throw NiftiError(NiftiErrc::BadHeaderSize, kOffSizeofHdr, "sizeof_hdr is not 348 under either byte order");
    swap_header(p.header);
    p.swapped = true;
  }
  const char* magic = reinterpret_cast<const char*>(p.header.data() + kOffMagic);
  if (std::memcmp(magic, "ni1", 4) == 0)
    throw NiftiError(NiftiErrc::PairedFileUnsupported, kOffMagic, "paired .hdr/.img files are not supported");
  if (std::memcmp(magic, "n+1", 4) != 0) throw NiftiError(NiftiErrc::BadMagic, kOffMagic, "bad NIfTI-1 magic");

  const int16_t ndim = get<int16_t>(p.header, kOffDim);
  if (ndim < 3 || ndim > 7)
    throw NiftiError(NiftiErrc::UnsupportedDims, kOffDim, "dim[0] = " + std::to_string(ndim) + "; need 3D data");
  int64_t dims[7];
  for (int i = 0; i < 7; ++i) dims[i] = get<int16_t>(p.header, kOffDim + 2 * (1 + static_cast<size_t>(i)));
  for (int i = 0; i < 3; ++i)
    if (dims[i] < 1)
      throw NiftiError(NiftiErrc::UnsupportedDims, kOffDim + 2 * (1 + static_cast<size_t>(i)),
                       "spatial dim " + std::to_string(i + 1) + " is " + std::to_string(dims[i]));
  for (int i = 3; i < ndim; ++i)
    if (dims[i] != 1)
      throw NiftiError(NiftiErrc::UnsupportedDims, kOffDim + 2 * (1 + static_cast<size_t>(i)),
                       "non-singleton dim " + std::to_string(i + 1) + " = " + std::to_string(dims[i]));
  // Stored order is x fastest; we index [D,H,W] = [dim3,dim2,dim1].
  p.shape = {dims[2], dims[1], dims[0]};
  for (int i = 0; i < 3; ++i) {
    const float pd = get<float>(p.header, kOffPixdim + 4 * (1 + static_cast<size_t>(i)));
    p.spacing[static_cast<size_t>(2 - i)] = pd > 0.0f ? static_cast<double>(pd) : 1.0;
  }
  p.datatype = get<int16_t>(p.header, kOffDatatype);
  if (p.datatype != kUint8 && p.datatype != kInt16 && p.datatype != kInt32 && p.datatype != kFloat32)
    throw NiftiError(NiftiErrc::UnsupportedDatatype, kOffDatatype,
                     "unsupported datatype code " + std::to_string(p.datatype));
  p.scl_slope = get<float>(p.header, kOffSclSlope);
  p.scl_inter = get<float>(p.header, kOffSclInter);
  const float vox_offset_f = get<float>(p.header, kOffVoxOffset);
  if (!(vox_offset_f >= static_cast<float>(kMinVoxOffset)))
    throw NiftiError(NiftiErrc::BadVoxOffset, kOffVoxOffset, "vox_offset must be >= 352 for single-file NIfTI");
  const size_t vox_offset = static_cast<size_t>(vox_offset_f);
  const size_t elem = p.datatype == kUint8 ? 1 : (p.datatype == kFloat32 || p.datatype == kInt32) ? 4 : 2;
  const size_t count = static_cast<size_t>(p.shape[0] * p.shape[1] * p.shape[2]);
  if (bytes.size() < vox_offset + count * elem)
    throw NiftiError(NiftiErrc::TruncatedPayload, bytes.size(),
                     "payload needs " + std::to_string(vox_offset + count * elem) + " bytes");
  p.payload.assign(bytes.begin() + static_cast<ptrdiff_t>(vox_offset),
                   bytes.begin() + static_cast<ptrdiff_t>(vox_offset + count * elem));
  if (p.swapped && elem > 1)
    for (size_t i = 0; i < count; ++i) swap_bytes(p.payload.data() + i * elem, elem);
  return p;
}

double element_at(const Parsed& p, size_t i) {
  switch (p.datatype) {
    case kUint8:
      return p.payload[i];
    case kInt16: {
      int16_t v;
      std::memcpy(&v, p.payload.data() + 2 * i, 2);
      return v;
    }
    case kInt32: {
      int32_t v;
      std::memcpy(&v, p.payload.data() + 4 * i, 4);
      return v;
    }
    default: {
      float v;
      std::memcpy(&v, p.payload.data() + 4 * i, 4);
      return v;
    }
  }
}

std::vector<uint8_t> fresh_header() {
  std::vector<uint8_t> h(kHeaderSize, 0);
  put<int32_t>(h, kOffSizeofHdr, 348);
  h[38] = 'r';  // regular
  put<float>(h, kOffPixdim, 1.0f);
  std::memcpy(h.data() + kOffMagic, "n+1", 4);
  return h;
}

std::vector<uint8_t> build_file(std::vector<uint8_t> header, const std::array<int64_t, 3>& shape,
                                const std::array<double, 3>& spacing, int16_t datatype, int16_t bitpix,
                                const std::vector<uint8_t>& payload, bool gzip) {
  put<int16_t>(header, kOffDim, 3);
  put<int16_t>(header, kOffDim + 2, static_cast<int16_t>(shape[2]));  // x = W
  put<int16_t>(header, kOffDim + 4, static_cast<int16_t>(shape[1]));
  put<int16_t>(header, kOffDim + 6, static_cast<int16_t>(shape[0]));
  for (int i = 4; i < 8; ++i) put<int16_t>(header, kOffDim + 2 * static_cast<size_t>(i), 1);
  put<int16_t>(header, kOffDatatype, datatype);
  put<int16_t>(header, kOffBitpix, bitpix);
  put<float>(header, kOffPixdim + 4, static_cast<float>(spacing[2]));
  put<float>(header, kOffPixdim + 8, static_cast<float>(spacing[1]));
  put<float>(header, kOffPixdim + 12, static_cast<float>(spacing[0]));
  put<float>(header, kOffVoxOffset, 352.0f);
  put<float>(header, kOffSclSlope, 1.0f);
  put<float>(header, kOffSclInter, 0.0f);
  std::memcpy(header.data() + kOffMagic, "n+1", 4);

  std::vector<uint8_t> out = std::move(header);
  out.resize(kMinVoxOffset, 0);  // 4-byte extension indicator, all zero
  out.insert(out.end(), payload.begin(), payload.end());
  return gzip ? gzip_compress(out) : out;
}

}  // namespace

bool is_gzip(const std::vector<uint8_t>& bytes) {
  return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

std::vector<uint8_t> gzip_compress(const std::vector<uint8_t>& raw) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw std::runtime_error("deflateInit2 failed");
  std::vector<uint8_t> out(deflateBound(&zs, static_cast<uLong>(raw.size())) + 32);
  zs.next_in = const_cast<Bytef*>(raw.data());
  zs.avail_in = static_cast<uInt>(raw.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw std::runtime_error("gzip compression failed");
  out.resize(out.size() - zs.avail_out);
  return out;
}

std::vector<uint8_t> gzip_decompress(const std::vector<uint8_t>& compressed) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw std::runtime_error("inflateInit2 failed");
  std::vector<uint8_t> out;
  std::vector<uint8_t> buf(1 << 16);
  zs.next_in = const_cast<Bytef*>(compressed.data());
  zs.avail_in = static_cast<uInt>(compressed.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf.data();
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw NiftiError(NiftiErrc::TruncatedPayload, zs.total_in, "gzip stream corrupt or truncated");
    }
    out.insert(out.end(), buf.begin(), buf.begin() + static_cast<ptrdiff_t>(buf.size() - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw NiftiError(NiftiErrc::TruncatedPayload, zs.total_in, "gzip stream ends early");
    }
  }
  inflateEnd(&zs);
  return out;
}

Volume read_volume(const std::vector<uint8_t>& bytes, NiftiMeta* meta) {
  Parsed p = parse(bytes);
  Volume vol;
  vol.data = Tensor({1, p.shape[0], p.shape[1], p.shape[2]});
  vol.spacing = p.spacing;
  const size_t count = static_cast<size_t>(vol.data.numel());
  const bool apply = p.scl_slope != 0.0f && !(p.scl_slope == 1.0f && p.scl_inter == 0.0f);
  for (size_t i = 0; i < count; ++i) {
    double v = element_at(p, i);
    if (apply) v = v * p.scl_slope + p.scl_inter;
    vol.data[static_cast<int64_t>(i)] = static_cast<float>(v);
  }
  if (meta) meta->raw_header = std::move(p.header);
  return vol;
}

LabelMap read_labelmap(const std::vector<uint8_t>& bytes, NiftiMeta* meta) {
  Parsed p = parse(bytes);
  LabelMap lm;
  lm.shape = p.shape;
  lm.spacing = p.spacing;
  const size_t count = static_cast<size_t>(lm.numel());
  lm.labels.resize(count);
  for (size_t i = 0; i < count; ++i) {
    const double v = element_at(p, i);
    const double r = std::nearbyint(v);
    if (r < 0 || std::fabs(v - r) > 1e-6)
      throw NiftiError(NiftiErrc::LabelRange, i, "label payload holds non-integer or negative value at voxel " +
                                                     std::to_string(i));
    lm.labels[i] = static_cast<int32_t>(r);
  }
  if (meta) meta->raw_header = std::move(p.header);
  return lm;
}

std::vector<uint8_t> write_volume(const Volume& vol, const NiftiMeta* meta, bool gzip) {
  std::vector<uint8_t> header = meta && meta->raw_header.size() == kHeaderSize ? meta->raw_header : fresh_header();
  const size_t count = static_cast<size_t>(vol.data.numel());
  std::vector<uint8_t> payload(count * 4);
  std::memcpy(payload.data(), vol.data.data(), payload.size());
  return build_file(std::move(header), vol.shape(), vol.spacing, kFloat32, 32, payload, gzip);
}

std::vector<uint8_t> write_labelmap(const LabelMap& lm, const NiftiMeta* meta, bool gzip) {
  std::vector<uint8_t> header = meta && meta->raw_header.size() == kHeaderSize ? meta->raw_header : fresh_header();
  const int32_t mx = lm.max_label();
  if (mx > 32767) throw NiftiError(NiftiErrc::LabelRange, 0, "labels above 32767 are not representable");
  const size_t count = static_cast<size_t>(lm.numel());
  std::vector<uint8_t> payload;
  int16_t datatype, bitpix;
  if (mx < 256) {
    datatype = kUint8;
    bitpix = 8;
    payload.resize(count);
    for (size_t i = 0; i < count; ++i) payload[i] = static_cast<uint8_t>(lm.labels[i]);
  } else {
    datatype = kInt16;
    bitpix = 16;
    payload.resize(count * 2);
    for (size_t i = 0; i < count; ++i) {
      const int16_t v = static_cast<int16_t>(lm.labels[i]);
      std::memcpy(payload.data() + 2 * i, &v, 2);
    }
  }
  return build_file(std::move(header), lm.shape, lm.spacing, datatype, bitpix, payload, gzip);
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed for " + path);
}

}  // namespace segkd
