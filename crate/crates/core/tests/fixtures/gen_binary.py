"""Regenerate the hand-built PPM and IDX fixtures."""
import struct

# 2x2 RGB, row-major, maxval 255
rgb = bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 128, 200])
with open("rgb_2x2.ppm", "wb") as f:
    f.write(b"P6\n# hand built\n2 2\n255\n" + rgb)
with open("truncated.ppm", "wb") as f:
    f.write(b"P6\n2 2\n255\n" + rgb[:7])
with open("bad_magic.ppm", "wb") as f:
    f.write(b"P3\n2 2\n255\n" + rgb)

# two 3x3 images and their labels
pixels = bytes([0, 51, 102, 153, 204, 255, 1, 2, 3,
                255, 254, 253, 0, 0, 0, 17, 34, 68])
with open("images.idx", "wb") as f:
    f.write(bytes([0, 0, 0x08, 3]) + struct.pack(">III", 2, 3, 3) + pixels)
with open("labels.idx", "wb") as f:
    f.write(bytes([0, 0, 0x08, 1]) + struct.pack(">I", 2) + bytes([1, 0]))
with open("truncated.idx", "wb") as f:
    f.write(bytes([0, 0, 0x08, 3]) + struct.pack(">III", 2, 3, 3) + pixels[:10])
with open("float.idx", "wb") as f:
    f.write(bytes([0, 0, 0x0D, 1]) + struct.pack(">I", 1) + struct.pack(">f", 1.0))
