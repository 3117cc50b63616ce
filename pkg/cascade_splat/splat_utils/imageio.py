"""PPM (P6, 8-bit) and PFM (PF, float32) image codecs.

Images in memory are float arrays of shape (height, width, 3), row 0 at the
top. PF files store rows bottom-to-top in little-endian float32 (scale -1.0),
so a float32 array written and read back is bit-identical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IngestionError


def _check_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise IngestionError(f"expected an (H, W, 3) image, got shape {image.shape}")
    return image


def write_ppm(path: Path, image: np.ndarray) -> None:
    image = _check_rgb(image)
    data = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    height, width, _ = data.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fp:
        fp.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fp.write(data.tobytes())


def write_pfm(path: Path, image: np.ndarray) -> None:
    image = _check_rgb(image)
    data = np.ascontiguousarray(np.asarray(image, dtype="<f4")[::-1])
    height, width, _ = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fp:
        fp.write(f"PF\n{width} {height}\n-1.0\n".encode("ascii"))
        fp.write(data.tobytes())


def _read_header(raw: bytes, path: Path, count: int) -> tuple[list[str], int]:
    """Read ``count`` whitespace-separated header tokens (skipping comments)."""
    tokens: list[str] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise IngestionError(f"{path}: truncated image header")
        if raw[pos : pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii", errors="replace"))
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_image(path: Path) -> np.ndarray:
    """Load a P6 or PF file as a float64 (H, W, 3) array in [0, 1] for P6."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    tokens, offset = _read_header(raw, path, 4)
    magic = tokens[0]
    try:
        width, height = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise IngestionError(f"{path}: malformed image header {tokens}") from exc
    if width < 1 or height < 1:
        raise IngestionError(f"{path}: invalid image size {width}x{height}")

    if magic == "P6":
        if scale != 255:
            raise IngestionError(f"{path}: only 8-bit P6 files are supported (maxval {scale})")
        expected = width * height * 3
        body = raw[offset : offset + expected]
        if len(body) != expected:
            raise IngestionError(f"{path}: expected {expected} bytes of pixel data, got {len(body)}")
        return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).astype(np.float64) / 255.0

    if magic == "PF":
        dtype = "<f4" if scale < 0 else ">f4"
        expected = width * height * 3 * 4
        body = raw[offset : offset + expected]
        if len(body) != expected:
            raise IngestionError(f"{path}: expected {expected} bytes of pixel data, got {len(body)}")
        data = np.frombuffer(body, dtype=dtype).reshape(height, width, 3)[::-1]
        return data.astype(np.float64)

    raise IngestionError(f"{path}: unsupported image format '{magic}'")


def write_image(path: Path, image: np.ndarray) -> None:
    """Dispatch on suffix: ``.pf``/``.pfm`` are float, anything else is P6."""
    if Path(path).suffix.lower() in (".pf", ".pfm"):
        write_pfm(path, image)
    else:
        write_ppm(path, image)


def to_luma(image: np.ndarray) -> np.ndarray:
    image = _check_rgb(image)
    return image @ np.array([0.299, 0.587, 0.114])


def area_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Average ``factor x factor`` blocks; trailing rows/cols that do not fill a block are dropped."""
    if factor == 1:
        return np.asarray(image, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[0] // factor, image.shape[1] // factor
    cropped = image[: height * factor, : width * factor]
    return cropped.reshape(height, factor, width, factor, -1).mean(axis=(1, 3))
