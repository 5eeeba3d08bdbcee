"""Dataset ingestion, synthetic scene generation, and checkpointing.

Datasets live on disk as `<root>/images/*.png`, `<root>/masks/*.png`,
and optionally `<root>/disparity/*.png` (8-bit PNG; PGM accepted as an
escape hatch). Masks are binarized at nonzero. Images are scaled to
[0,1] and reflect-padded on the bottom/right up to the next multiple of
8; the original extent rides along on each sample so downstream code can
ignore the padding.

Checkpoints are a custom framed binary format with explicit little
endianness: magic `PSEG`, a u16 version, a config text echo, the step
and seed counters, then one length-prefixed record per parameter with a
CRC32 over the raw value bytes. Writes go to a temp file in the target
directory and are renamed into place, so a crash never leaves a partial
checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .blocks import PotholeNet
from .config import CliConfig, parse_config, render_config
from .errors import ArgumentError, CheckpointError, DataError, FormatError
from .training import TrainConfig

MODALITIES = ("rgb", "disparity")

MAGIC = b"PSEG"
VERSION = 1

# Pillow modes that carry more than 8 bits per sample.
_DEEP_MODES = ("I", "I;16", "I;16B", "I;16L", "I;16N", "F")


@dataclass
class Sample:
    """One image/mask pair, already padded to a multiple of 8."""

    image: Tensor          # Cin x H x W, values in [0, 1]
    mask: np.ndarray       # H x W integer classes, padding is class 0
    id: str
    orig_h: int
    orig_w: int


# ---------------------------------------------------------------------------
# loading


def _open_8bit(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode in _DEEP_MODES:
            raise FormatError(
                f"{path}: {img.mode}-mode image is not 8-bit; re-encode as 8-bit")
        converted = img.convert(mode)
        return np.asarray(converted, dtype=np.float64)


def _pad_spatial(arr: np.ndarray, mode: str) -> np.ndarray:
    """Pad the trailing two axes up to multiples of 8 (bottom/right)."""
    h, w = arr.shape[-2], arr.shape[-1]
    ph, pw = (-h) % 8, (-w) % 8
    if ph == 0 and pw == 0:
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    if mode == "reflect" and (h < 2 or w < 2):
        mode = "edge"  # reflect needs at least 2 pixels per axis
    if mode == "constant":
        return np.pad(arr, pad)
    return np.pad(arr, pad, mode=mode)


def load_image(path: Path, modality: str) -> tuple[Tensor, int, int]:
    """Load one image as a padded Cin x H x W tensor plus its raw extent."""
    if modality not in MODALITIES:
        raise ArgumentError(
            f"modality must be one of {', '.join(MODALITIES)}, got {modality!r}")
    if modality == "rgb":
        raw = _open_8bit(Path(path), "RGB") / 255.0      # H x W x 3
        chw = raw.transpose(2, 0, 1)
    else:
        raw = _open_8bit(Path(path), "L") / 255.0        # H x W
        chw = raw[None, :, :]
    h, w = chw.shape[1], chw.shape[2]
    return Tensor(_pad_spatial(chw, "reflect")), h, w


def load_mask(path: Path) -> np.ndarray:
    """Load a mask, binarized at nonzero, unpadded."""
    raw = _open_8bit(Path(path), "L")
    return (raw != 0).astype(np.int64)


def _stem_index(directory: Path) -> dict[str, Path]:
    files: dict[str, Path] = {}
    for pattern in ("*.png", "*.pgm"):
        for path in sorted(directory.glob(pattern)):
            files.setdefault(path.stem, path)
    return files


def load_dataset(root: "str | Path", modality: str) -> list[Sample]:
    """Load every image/mask pair under `root` for one modality."""
    if modality not in MODALITIES:
        raise ArgumentError(
            f"modality must be one of {', '.join(MODALITIES)}, got {modality!r}")
    root = Path(root)
    image_dir = root / ("images" if modality == "rgb" else "disparity")
    mask_dir = root / "masks"
    if not image_dir.is_dir():
        raise DataError(f"missing directory {image_dir}")
    if not mask_dir.is_dir():
        raise DataError(f"missing directory {mask_dir}")
    images = _stem_index(image_dir)
    masks = _stem_index(mask_dir)
    if not images:
        raise DataError(f"no .png or .pgm images under {image_dir}")
    samples = []
    for stem in sorted(images):
        if stem not in masks:
            raise DataError(f"image {stem!r} has no mask under {mask_dir}")
        image, h, w = load_image(images[stem], modality)
        mask = load_mask(masks[stem])
        if mask.shape != (h, w):
            raise DataError(
                f"image {stem!r} is {h}x{w} but its mask is "
                f"{mask.shape[0]}x{mask.shape[1]}")
        mask = _pad_spatial(mask, "constant")
        samples.append(Sample(image, mask, stem, h, w))
    return samples


# ---------------------------------------------------------------------------
# synthetic scenes


def _smooth_noise(rng: np.random.Generator, size: int, cells: int,
                  amplitude: float) -> np.ndarray:
    """Low-frequency noise: a coarse random grid interpolated bilinearly."""
    coarse = rng.normal(0.0, amplitude, (cells + 1, cells + 1))
    coords = np.linspace(0.0, cells, size)
    lo = np.minimum(coords.astype(np.int64), cells - 1)
    frac = coords - lo
    rows = (coarse[lo, :] * (1.0 - frac)[:, None]
            + coarse[lo + 1, :] * frac[:, None])
    return (rows[:, lo] * (1.0 - frac)[None, :]
            + rows[:, lo + 1] * frac[None, :])


def ellipse_mask(size: int, ellipses: list[dict]) -> np.ndarray:
    """Class-1 mask of pixels inside any ellipse (integer pixel coordinates)."""
    yy, xx = np.indices((size, size), dtype=np.float64)
    inside = np.zeros((size, size), dtype=bool)
    for e in ellipses:
        dx, dy = xx - e["cx"], yy - e["cy"]
        cos_t, sin_t = np.cos(e["theta"]), np.sin(e["theta"])
        u = dx * cos_t + dy * sin_t
        v = -dx * sin_t + dy * cos_t
        inside |= (u / e["a"]) ** 2 + (v / e["b"]) ** 2 <= 1.0
    return inside.astype(np.int64)


def _to_png(path: Path, array01: np.ndarray) -> None:
    data = np.clip(np.rint(array01 * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def synth_generate(n: int, size: int, seed: int, out: "str | Path") -> Path:
    """Write n synthetic road scenes (RGB, pseudo-disparity, mask) to `out`.

    Scenes are textured gradients with 0-3 dark rotated ellipses standing
    in for potholes; `scenes.json` records every ellipse so the masks can
    be re-derived independently. Deterministic for a fixed seed.
    """
    if n < 1:
        raise ArgumentError(f"n must be >= 1, got {n}")
    if size % 8 != 0 or size < 8:
        raise ArgumentError(f"size must be a positive multiple of 8, got {size}")
    out = Path(out)
    for sub in ("images", "masks", "disparity"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scenes = []
    yy = np.arange(size, dtype=np.float64)[:, None] / size
    for i in range(n):
        stem = f"synth_{i:04d}"
        n_ell = int(rng.integers(0, 4))
        ellipses = []
        for _ in range(n_ell):
            ellipses.append({
                "cx": float(rng.uniform(0.15, 0.85) * size),
                "cy": float(rng.uniform(0.15, 0.85) * size),
                "a": float(rng.uniform(0.06, 0.18) * size),
                "b": float(rng.uniform(0.06, 0.18) * size),
                "theta": float(rng.uniform(0.0, np.pi)),
            })
        mask = ellipse_mask(size, ellipses)
        inside = mask.astype(np.float64)

        base = 0.45 + 0.25 * yy + _smooth_noise(rng, size, 8, 0.05)
        grain = rng.normal(0.0, 0.015, (size, size))
        road = np.clip(base + grain, 0.05, 0.95)
        # Potholes are markedly darker than any road texture.
        rgb = np.empty((size, size, 3))
        rgb[..., 0] = road * 1.03
        rgb[..., 1] = road
        rgb[..., 2] = road * 0.94
        rgb *= (1.0 - 0.62 * inside)[..., None]
        _to_png(out / "images" / f"{stem}.png", np.clip(rgb, 0.0, 1.0))

        ramp = 0.35 + 0.5 * yy + _smooth_noise(rng, size, 8, 0.02)
        disparity = np.clip(ramp - 0.28 * inside, 0.02, 0.98)
        _to_png(out / "disparity" / f"{stem}.png", disparity)

        _to_png(out / "masks" / f"{stem}.png", mask.astype(np.float64))
        scenes.append({"id": stem, "size": size, "ellipses": ellipses})

    with open(out / "scenes.json", "w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "scenes": scenes}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _pack_record(name: str, values: np.ndarray) -> bytes:
    name_b = name.encode("utf-8")
    payload = values.astype("<f8").tobytes(order="C")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<B", values.ndim)
    head += struct.pack(f"<{values.ndim}I", *values.shape)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise CheckpointError(
                f"{self.path}: truncated at byte {self.pos} "
                f"(wanted {count} more bytes)")
        chunk = self.blob[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(model: PotholeNet, path: "str | Path", step: int = 0,
                    seed: int = 0, train_cfg: TrainConfig | None = None) -> Path:
    """Serialize a model (with its config echo) atomically to `path`."""
    path = Path(path)
    if train_cfg is None:
        train_cfg = TrainConfig(variant=model.variant)
    else:
        train_cfg = replace(train_cfg, variant=model.variant)
    config_text = render_config(CliConfig(model.cfg, train_cfg))
    config_b = config_text.encode("utf-8")
    params = list(model.named_parameters())
    chunks = [
        MAGIC,
        struct.pack("<H", VERSION),
        struct.pack("<I", len(config_b)), config_b,
        struct.pack("<Q", step),
        struct.pack("<Q", seed),
        struct.pack("<I", len(params)),
    ]
    chunks += [_pack_record(name, p.data) for name, p in params]
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)
    return path


@dataclass
class CheckpointMeta:
    version: int
    config: CliConfig
    config_text: str
    step: int
    seed: int
    param_count: int


def _read_header(reader: _Reader) -> CheckpointMeta:
    magic = reader.take(4)
    if magic != MAGIC:
        raise CheckpointError(
            f"{reader.path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = reader.unpack("<H")
    if version != VERSION:
        raise CheckpointError(
            f"{reader.path}: unsupported format version {version} "
            f"(this build reads version {VERSION})")
    (config_len,) = reader.unpack("<I")
    try:
        config_text = reader.take(config_len).decode("utf-8")
        config = parse_config(config_text)
    except (UnicodeDecodeError, ArgumentError) as e:
        raise CheckpointError(
            f"{reader.path}: corrupt config echo: {e}") from e
    (step,) = reader.unpack("<Q")
    (seed,) = reader.unpack("<Q")
    (count,) = reader.unpack("<I")
    return CheckpointMeta(version, config, config_text, step, seed, count)


def read_checkpoint_meta(path: "str | Path") -> CheckpointMeta:
    """Read only the header: config echo, step, seed, parameter count."""
    path = Path(path)
    with open(path, "rb") as fh:
        return _read_header(_Reader(fh.read(), path))


def load_checkpoint(path: "str | Path") -> PotholeNet:
    """Rebuild the model a checkpoint describes, bit-exact parameters included."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint: {e}") from e
    reader = _Reader(blob, path)
    meta = _read_header(reader)
    model = PotholeNet(meta.config.model, meta.config.train.variant, seed=0)
    expected = dict(model.named_parameters())
    seen: set[str] = set()
    for _ in range(meta.param_count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(
                f"{path}: corrupt parameter name at byte {reader.pos}") from e
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = reader.take(8 * size)
        (crc,) = reader.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: CRC mismatch in parameter {name!r}")
        param = expected.get(name)
        if param is None:
            raise CheckpointError(
                f"{path}: parameter {name!r} not present in a "
                f"{meta.config.train.variant!r} model")
        if tuple(shape) != param.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {tuple(shape)}, "
                f"model expects {param.shape}")
        values = np.frombuffer(payload, dtype="<f8").reshape(shape)
        param.data = np.ascontiguousarray(values, dtype=np.float64)
        seen.add(name)
    if reader.pos != len(blob):
        raise CheckpointError(
            f"{path}: {len(blob) - reader.pos} trailing bytes after last record")
    missing = sorted(set(expected) - seen)
    if missing:
        raise CheckpointError(f"{path}: missing parameter records: {missing[:3]}")
    return model
