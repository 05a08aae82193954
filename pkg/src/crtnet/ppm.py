"""Binary PPM (P6, 8-bit RGB) image files.

Images travel through the package as channels-first float arrays in [0, 1];
writing quantises with round(v * 255).
"""

from __future__ import annotations

import numpy as np

__all__ = ["write_ppm", "read_ppm", "encode_ppm", "decode_ppm"]


def encode_ppm(image: np.ndarray) -> bytes:
    """Serialise a (3, H, W) float image in [0, 1] to P6 bytes."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {image.shape}")
    h, w = image.shape[1], image.shape[2]
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + pixels.transpose(1, 2, 0).tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    """Parse P6 bytes into a (3, H, W) float array in [0, 1]."""
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(blob):
            raise ValueError("truncated PPM header")
        ch = blob[pos:pos + 1]
        if ch == b"#":  # comment runs to end of line
            pos = blob.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            fields.append(blob[pos:end])
            pos = end
    if fields[0] != b"P6":
        raise ValueError(f"not a P6 PPM file (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    raw = blob[pos:pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise ValueError("truncated PPM pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray):
    with open(path, "wb") as f:
        f.write(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_ppm(f.read())
