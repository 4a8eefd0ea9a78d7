"""Bit-exact readers and writers for the on-disk sample formats.

Stereo views are stored as binary PPM (``P6``, 8-bit RGB), disparity fields
as PFM (``Pf``, float32, little-endian via a negative scale header, rows
bottom-up per the usual convention), and boolean masks as binary PGM
(``P5``, 0/255).  Every writer/reader pair round-trips bit-exactly, which
the determinism guarantees of the command-line tools rely on.

Also here: the dataset manifest (JSON, stable key order), a fixed arithmetic
colour ramp for disparity/error image dumps, and file hashing.
"""

import hashlib
import json
import struct

import numpy as np

from .errors import ContractViolation


# ---------------------------------------------------------------------------
# netpbm header scanning
# ---------------------------------------------------------------------------

def _read_tokens(f, count):
    """Read whitespace-separated header tokens, skipping '#' comments."""
    tokens = []
    while len(tokens) < count:
        ch = f.read(1)
        if not ch:
            raise ContractViolation("truncated header")
        if ch in b" \t\r\n":
            continue
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        token = ch
        while True:
            ch = f.read(1)
            if not ch or ch in b" \t\r\n":
                break
            token += ch
        tokens.append(token.decode("ascii"))
    return tokens


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as f:
        if f.read(2) != magic:
            raise ContractViolation(f"{path}: expected {magic.decode()} file")
        width, height, maxval = (int(t) for t in _read_tokens(f, 3))
        if maxval != 255:
            raise ContractViolation(f"{path}: only maxval 255 is supported")
        data = f.read(width * height * channels)
    if len(data) != width * height * channels:
        raise ContractViolation(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, channels).copy()


def write_ppm(path, rgb):
    """Write an (H, W, 3) uint8 array as a binary PPM."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ContractViolation("write_ppm expects an (H, W, 3) array")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path):
    """Read a binary PPM into an (H, W, 3) uint8 array."""
    return _read_netpbm(path, b"P6", 3)


def write_pgm(path, gray):
    """Write an (H, W) uint8 array as a binary PGM."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ContractViolation("write_pgm expects an (H, W) array")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def read_pgm(path):
    """Read a binary PGM into an (H, W) uint8 array."""
    return _read_netpbm(path, b"P5", 1)


def write_mask_pgm(path, mask):
    """Write a boolean mask as a 0/255 PGM."""
    write_pgm(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask_pgm(path):
    """Read a 0/255 PGM back into a boolean mask."""
    return read_pgm(path) > 127


# ---------------------------------------------------------------------------
# PFM (float32 disparity fields)
# ---------------------------------------------------------------------------

def write_pfm(path, values, scale=-1.0):
    """Write an (H, W) float32 field as a single-channel PFM.

    A negative ``scale`` declares little-endian data (the convention used
    throughout this package); rows are stored bottom-up.
    """
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ContractViolation("write_pfm expects an (H, W) array")
    scale = float(scale)
    if scale == 0.0:
        raise ContractViolation("PFM scale must be nonzero")
    h, w = values.shape
    data = np.flipud(values)
    data = data.astype("<f4") if scale < 0 else data.astype(">f4")
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n{scale:g}\n".encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())


def read_pfm(path):
    """Read a single-channel PFM; returns (values float32 (H, W), scale)."""
    with open(path, "rb") as f:
        if f.read(2) != b"Pf":
            raise ContractViolation(f"{path}: expected single-channel PFM")
        width, height, scale = _read_tokens(f, 3)
        width, height, scale = int(width), int(height), float(scale)
        data = f.read(width * height * 4)
    if len(data) != width * height * 4:
        raise ContractViolation(f"{path}: truncated PFM data")
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(data, dtype=dtype).reshape(height, width)
    return np.flipud(values).astype(np.float32), scale


# ---------------------------------------------------------------------------
# image helpers
# ---------------------------------------------------------------------------

def float_image_to_u8(img):
    """Quantize a [0, 1] float image to uint8 (round-half-even via np.round)."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def u8_image_to_float(img):
    """Map a uint8 image to float64 in [0, 1]."""
    return np.asarray(img, dtype=np.float64) / 255.0


def colorize(values, vmax):
    """Map non-negative values in [0, vmax] onto a fixed blue->green->red ramp.

    Pure arithmetic (no palette tables), so dumps are deterministic across
    platforms.  Returns an (H, W, 3) uint8 array.
    """
    if vmax <= 0:
        raise ContractViolation("colorize needs a positive vmax")
    t = np.clip(np.asarray(values, dtype=np.float64) / float(vmax), 0.0, 1.0)
    r = np.round(255.0 * t).astype(np.uint8)
    g = np.round(255.0 * (1.0 - np.abs(2.0 * t - 1.0))).astype(np.uint8)
    b = np.round(255.0 * (1.0 - t)).astype(np.uint8)
    return np.stack([r, g, b], axis=-1)


# ---------------------------------------------------------------------------
# manifests and hashing
# ---------------------------------------------------------------------------

def write_json(path, obj):
    """Serialize with sorted keys and a trailing newline (byte-stable reruns)."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def sha256_file(path):
    """Hex SHA-256 of a file's contents."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def pack_f64(values):
    """Little-endian float64 bytes of a 1-D array (checkpoint payloads)."""
    arr = np.ascontiguousarray(values, dtype="<f8")
    return arr.tobytes()


def unpack_f64(data, count):
    if len(data) != count * 8:
        raise ContractViolation("float64 payload has the wrong length")
    return np.frombuffer(data, dtype="<f8", count=count).copy()


# struct is used for nothing fancier than sanity-checking our assumptions.
assert struct.calcsize("<d") == 8
