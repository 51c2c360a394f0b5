"""Writes the small golden dataset files used by the loader tests.

Pixel and label values follow closed formulas so the tests can check every
byte without a second parser.
"""
import struct
from pathlib import Path

here = Path(__file__).parent


def cifar_pixel(i, c, y, x):
    return (i * 7 + c * 31 + y * 3 + x * 5) % 256


def cifar_label(i):
    return (i * 3) % 10


def idx_pixel(i, y, x):
    return (i * 11 + y * 9 + x) % 256


def idx_label(i):
    return (i * 7) % 10


with open(here / "golden_cifar.bin", "wb") as f:
    for i in range(3):
        f.write(bytes([cifar_label(i)]))
        for c in range(3):
            for y in range(32):
                f.write(bytes(cifar_pixel(i, c, y, x) for x in range(32)))

n = 4
with open(here / "golden_idx_images.idx", "wb") as f:
    f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
    for i in range(n):
        for y in range(28):
            f.write(bytes(idx_pixel(i, y, x) for x in range(28)))

with open(here / "golden_idx_labels.idx", "wb") as f:
    f.write(struct.pack(">II", 0x00000801, n))
    f.write(bytes(idx_label(i) for i in range(n)))
