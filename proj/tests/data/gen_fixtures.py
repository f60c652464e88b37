#!/usr/bin/env python3
"""Builds the NIfTI-1 test fixtures in this directory.

Deliberately independent of the C++ reader/writer under test: headers are
assembled field-by-field with struct.pack following the published NIfTI-1
header layout (348-byte header, single-file "n+1" magic, vox_offset 352).
Run from anywhere; files are written next to this script.
"""
import gzip
import math
import os
import struct

HERE = os.path.dirname(os.path.abspath(__file__))


def nifti1_header(dims, pixdims, datatype, bitpix, slope, inter, endian="<"):
    """348-byte NIfTI-1 header. dims/pixdims are (nx, ny, nz)."""
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)                      # sizeof_hdr
    dim = [3, dims[0], dims[1], dims[2], 1, 1, 1, 1]
    struct.pack_into(endian + "8h", hdr, 40, *dim)                   # dim
    struct.pack_into(endian + "h", hdr, 70, datatype)                # datatype
    struct.pack_into(endian + "h", hdr, 72, bitpix)                  # bitpix
    pd = [1.0, pixdims[0], pixdims[1], pixdims[2], 0.0, 0.0, 0.0, 0.0]
    struct.pack_into(endian + "8f", hdr, 76, *pd)                    # pixdim
    struct.pack_into(endian + "f", hdr, 108, 352.0)                  # vox_offset
    struct.pack_into(endian + "f", hdr, 112, slope)                  # scl_slope
    struct.pack_into(endian + "f", hdr, 116, inter)                  # scl_inter
    hdr[344:348] = b"n+1\x00"                                        # magic
    return bytes(hdr)


def nifti1_file(dims, pixdims, datatype, bitpix, slope, inter, payload, endian="<"):
    hdr = nifti1_header(dims, pixdims, datatype, bitpix, slope, inter, endian)
    return hdr + b"\x00" * 4 + payload  # 4-byte extension pad -> offset 352


def main():
    # int16 volume, 4 x 3 x 2 grid (nx=4, ny=3, nz=2), raw value = linear
    # index in x-fastest order, slope 2 / inter 1, anisotropic spacing.
    n = 4 * 3 * 2
    payload = struct.pack("<%dh" % n, *range(n))
    data = nifti1_file((4, 3, 2), (1.5, 2.0, 2.5), 4, 16, 2.0, 1.0, payload)
    with open(os.path.join(HERE, "int16_slope.nii"), "wb") as f:
        f.write(data)

    # Byte-swapped (big-endian) twin of the same volume.
    payload_be = struct.pack(">%dh" % n, *range(n))
    data_be = nifti1_file((4, 3, 2), (1.5, 2.0, 2.5), 4, 16, 2.0, 1.0, payload_be, endian=">")
    with open(os.path.join(HERE, "int16_slope_bigendian.nii"), "wb") as f:
        f.write(data_be)

    # float32 volume, 3^3, values sin(i), slope 1 / inter 0, gzip-compressed.
    vals = [math.sin(float(i)) for i in range(27)]
    payload = struct.pack("<27f", *vals)
    data = nifti1_file((3, 3, 3), (1.0, 1.0, 1.0), 16, 32, 1.0, 0.0, payload)
    with open(os.path.join(HERE, "float32.nii.gz"), "wb") as f:
        f.write(gzip.compress(data, mtime=0))

    # uint8 label map, 3 x 2 x 2, labels cycling 0/1/2.
    labels = [i % 3 for i in range(12)]
    payload = struct.pack("<12B", *labels)
    data = nifti1_file((3, 2, 2), (1.0, 1.0, 1.0), 2, 8, 0.0, 0.0, payload)
    with open(os.path.join(HERE, "labels_uint8.nii"), "wb") as f:
        f.write(data)

    # Paired-file header ("ni1" magic) that the reader must reject.
    hdr = bytearray(nifti1_header((2, 2, 2), (1, 1, 1), 4, 16, 1.0, 0.0))
    hdr[344:348] = b"ni1\x00"
    with open(os.path.join(HERE, "paired_ni1.nii"), "wb") as f:
        f.write(bytes(hdr) + b"\x00" * 4 + b"\x00" * 16)

    print("fixtures written to", HERE)


if __name__ == "__main__":
    main()
