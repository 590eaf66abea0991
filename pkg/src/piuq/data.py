"""Image containers, value-range conversion and dataset ingestion."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage

DOWNSAMPLING_FACTOR = 2 ** 5
TENSOR_MAGIC = b"PIUQ"
IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg", ".pgm"}
TARGET_BLUR_SIGMA = 1.0


class DataError(ValueError):
    """Raised for malformed or inconsistent image data."""


class ValueRange(str, enum.Enum):
    RAW = "raw_0_255"
    MODEL = "model_minus1_1"

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0, 255.0) if self is ValueRange.RAW else (-1.0, 1.0)


class DomainTag(str, enum.Enum):
    INPUT = "input_X"
    TARGET = "target_Y"


@dataclass(frozen=True)
class DomainImage:
    """A square ``d x d x c`` image with its value range and provenance."""

    pixels: np.ndarray
    value_range: ValueRange
    domain_tag: DomainTag
    source_id: str

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[0] != px.shape[1]:
            raise DataError(f"{self.source_id}: image must be square d x d x c, got {px.shape}")
        d, c = px.shape[0], px.shape[2]
        if d < 16 or d % DOWNSAMPLING_FACTOR:
            raise DataError(f"{self.source_id}: side {d} must be >= 16 and divisible by {DOWNSAMPLING_FACTOR}")
        if c < 1:
            raise DataError(f"{self.source_id}: no channels")
        lo, hi = ValueRange(self.value_range).bounds
        if not np.all(np.isfinite(px)) or px.min() < lo or px.max() > hi:
            raise DataError(
                f"{self.source_id}: pixels [{px.min()}, {px.max()}] outside declared range [{lo}, {hi}]"
            )
        px = px.astype(np.float64, copy=True)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "value_range", ValueRange(self.value_range))
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))

    @property
    def d(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def to_model_range(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and (raw.min() < 0.0 or raw.max() > 255.0):
        raise DataError(
            f"pixels [{raw.min()}, {raw.max()}] outside [0, 255]; was the data already normalised?"
        )
    return raw / 127.5 - 1.0


def to_raw_range(model: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(model, dtype=np.float64) + 1.0) * 127.5, 0.0, 255.0)


def normalize(img: DomainImage) -> DomainImage:
    if img.value_range is not ValueRange.RAW:
        raise DataError(f"{img.source_id}: expected raw_0_255 image, got {img.value_range.value}")
    return DomainImage(to_model_range(img.pixels), ValueRange.MODEL, img.domain_tag, img.source_id)


def denormalize(img: DomainImage) -> DomainImage:
    if img.value_range is not ValueRange.MODEL:
        raise DataError(f"{img.source_id}: expected model_minus1_1 image, got {img.value_range.value}")
    return DomainImage(to_raw_range(img.pixels), ValueRange.RAW, img.domain_tag, img.source_id)


@dataclass(frozen=True)
class EvalPair:
    input: DomainImage
    target: DomainImage


@dataclass(frozen=True)
class UnpairedDataset:
    """Unaligned input/target collections plus optional aligned evaluation pairs."""

    inputs: tuple[DomainImage, ...]
    targets: tuple[DomainImage, ...]
    eval_pairs: tuple[EvalPair, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "eval_pairs", tuple(self.eval_pairs))
        shared = {i.source_id for i in self.inputs} & {t.source_id for t in self.targets}
        if shared:
            raise DataError(f"source ids present in both domains: {sorted(shared)[:5]}")
        train_ids = {i.source_id for i in self.inputs} | {t.source_id for t in self.targets}
        eval_ids = {p.input.source_id for p in self.eval_pairs} | {p.target.source_id for p in self.eval_pairs}
        if train_ids & eval_ids:
            raise DataError("evaluation pairs overlap the training collections")
        for img in self.inputs:
            if img.domain_tag is not DomainTag.INPUT:
                raise DataError(f"{img.source_id}: target-domain image among inputs")
        for img in self.targets:
            if img.domain_tag is not DomainTag.TARGET:
                raise DataError(f"{img.source_id}: input-domain image among targets")

    @property
    def d(self) -> int:
        return self.inputs[0].d

    def input_array(self) -> np.ndarray:
        """Model-range inputs stacked as ``(M, c, d, d)``."""
        return _stack_model(self.inputs)

    def target_array(self) -> np.ndarray:
        return _stack_model(self.targets)


def _stack_model(images) -> np.ndarray:
    arr = []
    for img in images:
        px = img.pixels if img.value_range is ValueRange.MODEL else to_model_range(img.pixels)
        arr.append(px.transpose(2, 0, 1))
    return np.stack(arr)


# ---------------------------------------------------------------------------
# synthetic phantoms

def target_transform(raw: np.ndarray) -> np.ndarray:
    """Analytic input->target map of the synthetic task: inversion then Gaussian blur."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.empty_like(raw)
    inverted = 255.0 - raw
    for ch in range(raw.shape[2]):
        out[:, :, ch] = ndimage.gaussian_filter(inverted[:, :, ch], TARGET_BLUR_SIGMA, mode="reflect")
    return np.clip(out, 0.0, 255.0)


def _smooth_texture(rng: np.random.Generator, d: int, amplitude: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((d, d)), d / 24.0, mode="wrap")
    return amplitude * field / (field.std() + 1e-12)


def render_phantom(rng: np.random.Generator, d: int) -> np.ndarray:
    """Random piecewise-smooth phantom in ``[0, 255]`` of shape ``(d, d, 1)``.

    Ellipses and rectangles with linear intensity ramps, painted over a dark
    background, each carrying a smooth low-frequency texture.
    """
    yy, xx = np.mgrid[0:d, 0:d].astype(np.float64) / d
    img = rng.uniform(10.0, 40.0) + _smooth_texture(rng, d, 10.0)
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        ry, rx = rng.uniform(0.06, 0.3, size=2)
        angle = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(angle) + dy * np.sin(angle)
        v = -dx * np.sin(angle) + dy * np.cos(angle)
        if rng.random() < 0.5:
            mask = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        else:
            mask = (np.abs(u) <= rx) & (np.abs(v) <= ry)
        level = rng.uniform(70.0, 220.0)
        gy, gx = rng.uniform(-120.0, 120.0, size=2)
        shape = level + gy * dy + gx * dx + _smooth_texture(rng, d, rng.uniform(8.0, 20.0))
        img = np.where(mask, shape, img)
    return np.clip(img, 0.0, 255.0)[:, :, None]


def make_synthetic_dataset(seed: int, count_per_domain: int, d: int, eval_count: int | None = None) -> UnpairedDataset:
    """Deterministic unpaired phantom dataset.

    Inputs, targets and evaluation pairs come from three independent streams
    spawned from ``seed``, so no phantom is shared between the domains.
    """
    if d % DOWNSAMPLING_FACTOR:
        raise DataError(f"d={d} not divisible by {DOWNSAMPLING_FACTOR}")
    if count_per_domain < 16:
        raise DataError("count_per_domain must be >= 16")
    if eval_count is None:
        eval_count = count_per_domain
    rx, ry, re = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    inputs = [
        DomainImage(to_model_range(render_phantom(rx, d)), ValueRange.MODEL, DomainTag.INPUT, f"synx-{i:05d}")
        for i in range(count_per_domain)
    ]
    targets = [
        DomainImage(to_model_range(target_transform(render_phantom(ry, d))), ValueRange.MODEL,
                    DomainTag.TARGET, f"syny-{i:05d}")
        for i in range(count_per_domain)
    ]
    pairs = []
    for i in range(eval_count):
        raw = render_phantom(re, d)
        pairs.append(EvalPair(
            DomainImage(to_model_range(raw), ValueRange.MODEL, DomainTag.INPUT, f"evalx-{i:05d}"),
            DomainImage(to_model_range(target_transform(raw)), ValueRange.MODEL, DomainTag.TARGET, f"evaly-{i:05d}"),
        ))
    return UnpairedDataset(inputs, targets, pairs)


# ---------------------------------------------------------------------------
# file formats

def load_image_directory(path, domain_tag) -> list[DomainImage]:
    """Read all 8-bit raster images of one directory, normalised to model range."""
    from PIL import Image

    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path}: not a directory")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"{path}: empty domain")
    images, problems, shape = [], [], None
    for f in files:
        try:
            with Image.open(f) as im:
                arr = np.asarray(im)
        except Exception as exc:  # PIL raises a zoo of exception types
            problems.append(f"{f.name}: unreadable ({exc})")
            continue
        if arr.dtype != np.uint8:
            problems.append(f"{f.name}: expected 8-bit pixels, got {arr.dtype}")
            continue
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.shape[0] != arr.shape[1]:
            problems.append(f"{f.name}: non-square image {arr.shape[0]}x{arr.shape[1]}")
            continue
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            problems.append(f"{f.name}: shape {arr.shape} differs from {shape}")
            continue
        try:
            images.append(normalize(DomainImage(arr.astype(np.float64), ValueRange.RAW, domain_tag, f.stem)))
        except DataError as exc:
            problems.append(f"{f.name}: {exc}")
    if problems:
        raise DataError("; ".join(problems))
    return images


def save_image_directory(images, path, prefix=""):
    from PIL import Image

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for img in images:
        raw = img.pixels if img.value_range is ValueRange.RAW else to_raw_range(img.pixels)
        arr = np.round(raw).astype(np.uint8)
        Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr).save(path / f"{prefix}{img.source_id}.png")


def write_tensor_file(path, array: np.ndarray):
    """Write ``(count, d, d, c)`` floats: magic, then d, c, count as uint32 LE, then float32 LE body."""
    array = np.asarray(array)
    if array.ndim != 4 or array.shape[1] != array.shape[2]:
        raise DataError(f"expected (count, d, d, c) array, got {array.shape}")
    count, d, _, c = array.shape
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + struct.pack("<III", d, c, count))
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != TENSOR_MAGIC:
            raise DataError(f"{path}: not a tensor file")
        d, c, count = struct.unpack("<III", head[4:])
        body = np.frombuffer(fh.read(), dtype="<f4")
    if body.size != count * d * d * c:
        raise DataError(f"{path}: body has {body.size} floats, header implies {count * d * d * c}")
    return body.reshape(count, d, d, c).astype(np.float64)


def _images_from_tensor(path, value_range, tag, prefix):
    arr = read_tensor_file(path)
    return [DomainImage(a, value_range, tag, f"{prefix}{i:05d}") for i, a in enumerate(arr)]


def export_dataset(data: UnpairedDataset, out_dir) -> Path:
    """Write a dataset as tensor files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chw = lambda imgs: _stack_model(imgs).transpose(0, 2, 3, 1)
    write_tensor_file(out_dir / "inputs.bin", chw(data.inputs))
    write_tensor_file(out_dir / "targets.bin", chw(data.targets))
    manifest = {"dataset": {"format": "tensor", "normalization": ValueRange.MODEL.value,
                            "inputs": "inputs.bin", "targets": "targets.bin"}}
    if data.eval_pairs:
        write_tensor_file(out_dir / "eval_inputs.bin", chw([p.input for p in data.eval_pairs]))
        write_tensor_file(out_dir / "eval_targets.bin", chw([p.target for p in data.eval_pairs]))
        manifest["dataset"]["eval_inputs"] = "eval_inputs.bin"
        manifest["dataset"]["eval_targets"] = "eval_targets.bin"
    path = out_dir / "manifest.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=False))
    return path


def load_manifest(path) -> UnpairedDataset:
    """Build a dataset from a manifest.

    The ``dataset`` section names ``inputs``/``targets`` (and optionally
    ``eval_inputs``/``eval_targets``) relative to the manifest, with
    ``format`` either ``images`` (directories of 8-bit rasters) or ``tensor``.
    A ``synthetic`` section (``seed``, ``count_per_domain``, ``d``) generates
    phantoms instead.
    """
    path = Path(path)
    spec = yaml.safe_load(path.read_text()) or {}
    if "synthetic" in spec:
        syn = spec["synthetic"]
        return make_synthetic_dataset(int(syn["seed"]), int(syn["count_per_domain"]), int(syn["d"]),
                                      syn.get("eval_count"))
    try:
        ds = spec["dataset"]
        fmt = ds.get("format", "images")
        keys = ["inputs", "targets"] + [k for k in ("eval_inputs", "eval_targets") if k in ds]
        paths = {k: (path.parent / ds[k]) for k in keys}
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed manifest ({exc})") from None
    if ("eval_inputs" in paths) != ("eval_targets" in paths):
        raise DataError(f"{path}: eval_inputs and eval_targets must be given together")
    tags = {"inputs": DomainTag.INPUT, "targets": DomainTag.TARGET,
            "eval_inputs": DomainTag.INPUT, "eval_targets": DomainTag.TARGET}
    loaded = {}
    for key, p in paths.items():
        if fmt == "tensor":
            vr = ValueRange(ds.get("normalization", ValueRange.MODEL.value))
            imgs = _images_from_tensor(p, vr, tags[key], f"{key}-")
            loaded[key] = [normalize(i) if vr is ValueRange.RAW else i for i in imgs]
        elif fmt == "images":
            loaded[key] = [DomainImage(i.pixels, i.value_range, i.domain_tag, f"{key}/{i.source_id}")
                           for i in load_image_directory(p, tags[key])]
        else:
            raise DataError(f"{path}: unknown dataset format {fmt!r}")
    pairs = ()
    if "eval_inputs" in loaded:
        if len(loaded["eval_inputs"]) != len(loaded["eval_targets"]):
            raise DataError(f"{path}: eval input/target counts differ")
        pairs = tuple(EvalPair(a, b) for a, b in zip(loaded["eval_inputs"], loaded["eval_targets"]))
    return UnpairedDataset(loaded["inputs"], loaded["targets"], pairs)
