"""Binary PNM: P6 colour frames and P5 grayscale maps, maxval 255 only."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class PNMError(ValueError):
    """Base class for unreadable PNM files."""


class PNMFormatError(PNMError):
    """The magic number is not P5 or P6."""


class PNMMaxvalError(PNMError):
    """The header declares a maxval other than 255."""


class PNMTruncatedError(PNMError):
    """The pixel data is shorter than the header promises."""


def _tokens(data: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments.
    Returns the tokens and the offset just past the single whitespace byte
    that ends the header."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PNMTruncatedError("header ends early")
        out.append(data[start:pos])
    if pos >= n:
        raise PNMTruncatedError("no pixel data after header")
    return out, pos + 1


def decode(data: bytes) -> np.ndarray:
    """uint8 array: (H, W, 3) for P6, (H, W) for P5."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMFormatError(f"unsupported PNM magic {magic!r}; only binary P5 and P6 are read")
    try:
        (w, h, maxval), pos = _tokens(data, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        if isinstance(exc, PNMError):
            raise
        raise PNMFormatError(f"malformed PNM header: {exc}") from None
    if maxval != 255:
        raise PNMMaxvalError(f"maxval {maxval} is not supported; only 255")
    if w < 1 or h < 1:
        raise PNMFormatError(f"invalid size {w}x{h}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    pixels = data[pos:pos + need]
    if len(pixels) < need:
        raise PNMTruncatedError(f"expected {need} pixel bytes, found {len(pixels)}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, channels)
    return arr.copy() if channels == 3 else arr[:, :, 0].copy()


def encode(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {image.dtype}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes()


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_pnm(path, image: np.ndarray) -> None:
    data = encode(image)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def to_uint8(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit with round-half-up."""
    return np.floor(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float32) / np.float32(255.0)


def read_frame(path) -> np.ndarray:
    """A P6 file as a float32 (3, H, W) image in [0, 1]."""
    arr = read_pnm(path)
    if arr.ndim != 3:
        raise PNMFormatError(f"{path}: expected a colour (P6) frame, found grayscale")
    return from_uint8(arr.transpose(2, 0, 1))


def write_frame(path, image: np.ndarray) -> None:
    """Write a (3, H, W) image in [0, 1] as P6."""
    write_pnm(path, to_uint8(np.asarray(image).transpose(1, 2, 0)))


def write_gray(path, values: np.ndarray) -> None:
    """Write an (H, W) map in [0, 1] as P5."""
    write_pnm(path, to_uint8(values))


# ---------------------------------------------------------------------------
# sequence directories: im1.ppm .. imN.ppm (N = 3 or 5), the middle file is the target


def sequence_files(directory) -> list[Path]:
    directory = Path(directory)
    files = sorted(directory.glob("im*.ppm"), key=lambda p: (len(p.stem), p.stem))
    names = [p.stem for p in files]
    if len(files) not in (3, 5) or names != [f"im{i}" for i in range(1, len(files) + 1)]:
        raise FileNotFoundError(f"{directory}: expected im1.ppm..im3.ppm or im1.ppm..im5.ppm, found {names}")
    return files


def read_sequence(directory):
    """(input frames in temporal order, target) from a sequence directory."""
    files = sequence_files(directory)
    frames = [read_frame(p) for p in files]
    mid = len(frames) // 2
    target = frames.pop(mid)
    shapes = {f.shape for f in frames} | {target.shape}
    if len(shapes) != 1:
        raise ValueError(f"{directory}: frames differ in size: {sorted(shapes)}")
    return frames, target


def write_sequence(directory, frames, target) -> None:
    """Write inputs (temporal order) and target as im1..imN."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ordered = list(frames)
    ordered.insert(len(ordered) // 2, target)
    for i, img in enumerate(ordered, start=1):
        write_frame(directory / f"im{i}.ppm", img)


def sequence_dirs(root) -> list[Path]:
    """Subdirectories of ``root`` holding sequences, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "im1.ppm").exists())
