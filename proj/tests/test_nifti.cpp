#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>
#include <string>

#include "segkd/nifti.hpp"

using namespace segkd;

#ifndef SEGKD_TEST_DATA_DIR
#error "SEGKD_TEST_DATA_DIR must be defined by the build"
#endif

namespace {

std::vector<uint8_t> fixture(const std::string& name) {
  return read_file(std::string(SEGKD_TEST_DATA_DIR) + "/" + name);
}

Volume make_volume(std::array<int64_t, 3> shape, std::array<double, 3> spacing) {
  Volume v;
  v.data = Tensor({1, shape[0], shape[1], shape[2]});
  v.spacing = spacing;
  for (int64_t i = 0; i < v.data.numel(); ++i) v.data[i] = std::sin(0.37 * double(i)) * 100.0f;
  return v;
}

}  // namespace

TEST_CASE("int16 fixture: dims, spacing, and slope/inter-scaled values") {
  // Fixture built by an independent script: nx=4, ny=3, nz=2, raw value =
  // linear index (x fastest), scl_slope 2 / scl_inter 1, pixdim (1.5, 2, 2.5).
  const Volume vol = read_volume(fixture("int16_slope.nii"));
  CHECK(vol.shape() == std::array<int64_t, 3>{2, 3, 4});       // D,H,W
  CHECK(vol.spacing == std::array<double, 3>{2.5, 2.0, 1.5});  // mm per voxel
  for (int64_t i = 0; i < vol.data.numel(); ++i) CHECK(vol.data[i] == doctest::Approx(2.0 * double(i) + 1.0));
  // Raw value 5 lives at x=1, y=1, z=0; check the addressing explicitly.
  const int64_t idx = (0 * 3 + 1) * 4 + 1;
  CHECK(vol.data[idx] == doctest::Approx(11.0));
}

TEST_CASE("byte-swapped twin reads identically to the little-endian fixture") {
  const Volume le = read_volume(fixture("int16_slope.nii"));
  const Volume be = read_volume(fixture("int16_slope_bigendian.nii"));
  CHECK(le.shape() == be.shape());
  CHECK(le.spacing == be.spacing);
  for (int64_t i = 0; i < le.data.numel(); ++i) CHECK(le.data[i] == be.data[i]);
}

TEST_CASE("gzip float32 fixture round-trips through decompress and read") {
  const auto bytes = fixture("float32.nii.gz");
  REQUIRE(is_gzip(bytes));
  const Volume vol = read_volume(bytes);
  CHECK(vol.shape() == std::array<int64_t, 3>{3, 3, 3});
  for (int64_t i = 0; i < 27; ++i) CHECK(vol.data[i] == doctest::Approx(std::sin(double(i))).epsilon(1e-6));
}

TEST_CASE("uint8 label fixture reads as a label map") {
  const LabelMap lm = read_labelmap(fixture("labels_uint8.nii"));
  CHECK(lm.shape == std::array<int64_t, 3>{2, 2, 3});
  for (size_t i = 0; i < lm.labels.size(); ++i) CHECK(lm.labels[i] == int32_t(i % 3));
  CHECK(lm.max_label() == 2);
}

TEST_CASE("paired-file magic is rejected with a typed error") {
  try {
    read_volume(fixture("paired_ni1.nii"));
    FAIL("expected throw");
  } catch (const NiftiError& e) {
    CHECK(e.code() == NiftiErrc::PairedFileUnsupported);
    CHECK(e.byte_offset() == 344);
  }
}

TEST_CASE("volume write/read round-trip preserves voxels and spacing bit-exactly") {
  for (bool gz : {false, true}) {
    CAPTURE(gz);
    const Volume vol = make_volume({5, 4, 3}, {0.7, 1.3, 2.1});
    const auto bytes = write_volume(vol, nullptr, gz);
    CHECK(is_gzip(bytes) == gz);
    const Volume back = read_volume(bytes);
    CHECK(back.shape() == vol.shape());
    for (int a = 0; a < 3; ++a) CHECK(back.spacing[a] == doctest::Approx(vol.spacing[a]).epsilon(1e-6));
    CHECK(std::memcmp(back.data.data(), vol.data.data(), size_t(vol.data.numel()) * 4) == 0);  // bit-exact float32
  }
}

TEST_CASE("labelmap round-trip picks uint8 or int16 and preserves labels exactly") {
  LabelMap lm;
  lm.shape = {3, 4, 5};
  lm.spacing = {1.0, 1.5, 2.0};
  lm.labels.resize(size_t(lm.numel()));
  for (size_t i = 0; i < lm.labels.size(); ++i) lm.labels[i] = int32_t(i % 7);
  for (bool gz : {false, true}) {
    const LabelMap back = read_labelmap(write_labelmap(lm, nullptr, gz));
    CHECK(back.shape == lm.shape);
    CHECK(back.labels == lm.labels);
  }

  lm.labels[0] = 300;  // forces int16 on disk
  const auto bytes = write_labelmap(lm);
  CHECK(read_labelmap(bytes).labels == lm.labels);

  lm.labels[0] = 40000;  // beyond int16
  CHECK_THROWS_AS(write_labelmap(lm), NiftiError);
}

TEST_CASE("qform/sform header bytes pass through write verbatim") {
  NiftiMeta meta;
  const Volume vol = read_volume(fixture("int16_slope.nii"), &meta);
  REQUIRE(meta.raw_header.size() == 348);
  // Scribble a recognizable sform into the carried header (srow_x at 280).
  for (size_t i = 280; i < 328; ++i) meta.raw_header[i] = uint8_t(i & 0xff);
  const auto bytes = write_volume(vol, &meta);
  for (size_t i = 280; i < 328; ++i) CHECK(bytes[i] == uint8_t(i & 0xff));
}

TEST_CASE("written files put data at vox_offset 352 with float32 type") {
  const Volume vol = make_volume({2, 2, 2}, {1, 1, 1});
  const auto bytes = write_volume(vol);
  REQUIRE(bytes.size() == 352 + 8 * 4);
  int32_t sizeof_hdr = 0;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  CHECK(sizeof_hdr == 348);
  int16_t datatype = 0;
  std::memcpy(&datatype, bytes.data() + 70, 2);
  CHECK(datatype == 16);
  float vox_offset = 0;
  std::memcpy(&vox_offset, bytes.data() + 108, 4);
  CHECK(vox_offset == 352.0f);
  CHECK(std::memcmp(bytes.data() + 344, "n+1\0", 4) == 0);
  float first = 0;
  std::memcpy(&first, bytes.data() + 352, 4);
  CHECK(first == vol.data[0]);
}

TEST_CASE("truncation and garbage inputs raise typed errors, never crashes") {
  const auto good = fixture("int16_slope.nii");

  SUBCASE("short header") {
    std::vector<uint8_t> b(good.begin(), good.begin() + 100);
    CHECK_THROWS_AS(read_volume(b), NiftiError);
  }
  SUBCASE("truncated payload") {
    std::vector<uint8_t> b(good.begin(), good.end() - 6);
    try {
      read_volume(b);
      FAIL("expected throw");
    } catch (const NiftiError& e) {
      CHECK(e.code() == NiftiErrc::TruncatedPayload);
    }
  }
  SUBCASE("bad magic") {
    auto b = good;
    b[344] = 'x';
    try {
      read_volume(b);
      FAIL("expected throw");
    } catch (const NiftiError& e) {
      CHECK(e.code() == NiftiErrc::BadMagic);
    }
  }
  SUBCASE("corrupt gzip stream") {
    auto b = fixture("float32.nii.gz");
    b[b.size() / 2] ^= 0xff;
    CHECK_THROWS(read_volume(b));
  }
}

TEST_CASE("header fuzzing: 1500 randomly mutated headers all fail cleanly or parse") {
  const auto good = fixture("int16_slope.nii");
  std::mt19937_64 eng(0xF002);
  int parsed = 0, rejected = 0;
  for (int trial = 0; trial < 1500; ++trial) {
    auto b = good;
    const int nmut = 1 + int(eng() % 8);
    for (int m = 0; m < nmut; ++m) {
      const size_t pos = size_t(eng() % 352);  // header + pad only
      b[pos] = uint8_t(eng());
    }
    try {
      const Volume v = read_volume(b);
      CHECK(v.data.numel() > 0);  // anything that parses must be well-formed
      CHECK(v.data.numel() <= int64_t(b.size()));
      ++parsed;
    } catch (const NiftiError&) {
      ++rejected;
    }
  }
  CHECK(parsed + rejected == 1500);
  CHECK(rejected > 0);
}

TEST_CASE("label range errors carry the offending byte offset") {
  // int16 payload with a negative label must be rejected by read_labelmap.
  LabelMap lm;
  lm.shape = {1, 1, 2};
  lm.labels = {300, 0};
  auto bytes = write_labelmap(lm);
  // Flip the stored int16 value at offset 352 to -1.
  bytes[352] = 0xff;
  bytes[353] = 0xff;
  try {
    read_labelmap(bytes);
    FAIL("expected throw");
  } catch (const NiftiError& e) {
    CHECK(e.code() == NiftiErrc::LabelRange);
  }
}
