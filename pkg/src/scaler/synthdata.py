"""Synthetic concealed-object scenes, sparse annotations, splits and on-disk format.

A scene is a smooth random texture; the object is a perturbed superellipse
whose pixels share the background texture but are shifted in intensity by
``INTENSITY_GAP * contrast``. Small ``contrast`` means a concealed object.

File format (all little-endian)::

    bytes 0-7    magic b"SCLRDS01"
    bytes 8-9    uint16 rank (1..3)
    bytes 10-15  uint16 dims[3], unused trailing dims zero
    bytes 16-    float64 data, C order

Dataset directory: ``images/NNNN.bin``, ``masks/NNNN.bin``, ``annots/NNNN.bin``
(ternary map stored as +1 / -1 / 0 floats) and ``manifest.json``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

DATA_MAGIC = b"SCLRDS01"
INTENSITY_GAP = 1.0  # fg/bg mean gap equals the contrast parameter
TEXTURE_STD = 0.1
FG, BG, UNKNOWN = 1, -1, 0


class DataError(ValueError):
    pass


class PlacementError(DataError):
    pass


@dataclass
class SceneSpec:
    size: int = 64
    contrast: float = 0.2
    texture_corr: float = 1.5
    blob_count: tuple[int, int] = (1, 1)
    blob_radius: tuple[float, float] = (0.15, 0.3)  # fraction of the side
    edge_blur: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.contrast <= 1.0:
            raise DataError(f"contrast must lie in [0, 1], got {self.contrast}")
        if self.size % 4 or self.size < 8:
            raise DataError(f"size must be a multiple of 4 and >= 8, got {self.size}")
        self.blob_count = tuple(self.blob_count)
        self.blob_radius = tuple(self.blob_radius)


@dataclass
class SparseAnnotation:
    labels: np.ndarray  # H x W in {+1, -1, 0}
    mode: str = "point"

    @property
    def labeled(self) -> np.ndarray:
        return self.labels != UNKNOWN

    def count(self) -> int:
        return int(np.count_nonzero(self.labels))


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    annotation: SparseAnnotation | None = None


@dataclass
class SplitManifest:
    ids: list[int]
    labeled: list[int]
    labeled_fraction: float
    test_ids: list[int] = field(default_factory=list)
    mode: str = "point"
    extra: dict = field(default_factory=dict)

    @property
    def unlabeled(self) -> list[int]:
        lab = set(self.labeled)
        return [i for i in self.ids if i not in lab]


def sample_rngs(seed: int, n: int, stream: int = 0) -> list[np.random.Generator]:
    """Independent per-sample generators split from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, stream]).spawn(n)]


def _texture(rng: np.random.Generator, size: int, corr: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.normal(size=(size, size)), corr, mode="wrap")
    field_ -= field_.mean()
    return field_ / field_.std()


def _blob(rng: np.random.Generator, size: int, radius: tuple[float, float]) -> np.ndarray:
    r = rng.uniform(*radius) * size
    aspect = rng.uniform(0.7, 1.0)
    a, b = r, r * aspect
    power = rng.uniform(1.6, 3.0)
    theta0 = rng.uniform(0, np.pi)
    harmonics = [(k, rng.uniform(0, 0.12), rng.uniform(0, 2 * np.pi)) for k in (2, 3, 5)]
    margin = 2
    cy = rng.uniform(margin + r, size - margin - r)
    cx = rng.uniform(margin + r, size - margin - r)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta0), np.sin(theta0)
    u, v = c * dx + s * dy, -s * dx + c * dy
    ang = np.arctan2(v, u)
    wobble = 1.0 + sum(amp * np.sin(k * ang + ph) for k, amp, ph in harmonics)
    level = (np.abs(u) / a) ** power + (np.abs(v) / b) ** power
    return level <= wobble ** power


def gen_sample(spec: SceneSpec, rng: np.random.Generator, max_tries: int = 50):
    """Return (image, gt) as H x W float arrays; gt is the exact binary object mask."""
    n = spec.size
    texture = _texture(rng, n, spec.texture_corr)
    count = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    mask = np.zeros((n, n), dtype=bool)
    for _ in range(count):
        for _ in range(max_tries):
            blob = _blob(rng, n, spec.blob_radius)
            if blob.sum() >= 9 and not (blob & ndimage.binary_dilation(mask, iterations=3)).any():
                mask |= blob
                break
        else:
            raise PlacementError(f"could not place blob after {max_tries} tries")
    gap = INTENSITY_GAP * spec.contrast
    shift = mask.astype(float)
    if spec.edge_blur > 0:
        shift = ndimage.gaussian_filter(shift, spec.edge_blur)
    image = 0.5 - gap / 2 + gap * shift + TEXTURE_STD * texture
    return np.clip(image, 0.0, 1.0), mask.astype(np.float64)


def _random_walk(rng: np.random.Generator, allowed: np.ndarray, length: int) -> list[tuple[int, int]]:
    ys, xs = np.nonzero(allowed)
    k = int(rng.integers(len(ys)))
    path = [(int(ys[k]), int(xs[k]))]
    seen = {path[0]}
    n = allowed.shape[0]
    steps = ((0, 1), (1, 0), (0, -1), (-1, 0))
    cur = path[0]
    for _ in range(8 * length):
        if len(seen) >= length:
            break
        dy, dx = steps[int(rng.integers(4))]
        nxt = (cur[0] + dy, cur[1] + dx)
        if 0 <= nxt[0] < n and 0 <= nxt[1] < n and allowed[nxt]:
            cur = nxt
            if nxt not in seen:
                seen.add(nxt)
                path.append(nxt)
    return path


def sparse_annotate(gt: np.ndarray, mode: str, rng: np.random.Generator,
                    min_dist: float = 2.0) -> SparseAnnotation:
    """Point: one fg + one bg pixel at least ``min_dist`` px from the boundary.
    Scribble: one 4-connected random walk inside each region, ~10% of the side long."""
    if mode not in ("point", "scribble"):
        raise DataError(f"unknown annotation mode {mode!r}")
    fgm = gt > 0.5
    if not fgm.any() or fgm.all():
        raise DataError("ground truth needs both foreground and background")
    # distances measured to the nearest pixel of the other class
    fg_ok = ndimage.distance_transform_edt(fgm) > min_dist
    bg_ok = ndimage.distance_transform_edt(~fgm) > min_dist
    if not fg_ok.any():
        raise PlacementError("foreground too small for annotation placement")
    if not bg_ok.any():
        raise PlacementError("background too small for annotation placement")
    labels = np.zeros(gt.shape)
    if mode == "point":
        for ok, val in ((fg_ok, FG), (bg_ok, BG)):
            ys, xs = np.nonzero(ok)
            k = int(rng.integers(len(ys)))
            labels[ys[k], xs[k]] = val
    else:
        length = max(2, int(round(0.1 * gt.shape[0])))
        for ok, val in ((fg_ok, FG), (bg_ok, BG)):
            for y, x in _random_walk(rng, ok, length):
                labels[y, x] = val
    return SparseAnnotation(labels, mode)


def make_split(n: int, labeled_fraction: float, rng: np.random.Generator) -> SplitManifest:
    if not 0.0 < labeled_fraction <= 1.0:
        raise DataError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    k = int(np.floor(n * labeled_fraction + 1e-9))
    if k < 1:
        raise DataError(f"n={n}, fraction={labeled_fraction} leaves no labeled sample")
    labeled = sorted(int(i) for i in rng.choice(n, size=k, replace=False))
    return SplitManifest(list(range(n)), labeled, labeled_fraction)


def make_dataset(spec: SceneSpec, n: int, n_test: int = 0, mode: str = "point",
                 labeled_fraction: float = 1.0,
                 contrast_range: tuple[float, float] | None = None) -> tuple[list[Sample], SplitManifest]:
    """Generate ``n`` train + ``n_test`` test samples with annotations and a split.

    With ``contrast_range`` each sample draws its own contrast uniformly from it
    (the auxiliary high-contrast distribution) instead of using ``spec.contrast``.
    """
    rngs = sample_rngs(spec.seed, n + n_test, stream=0)
    samples = []
    for rng in rngs:
        s = spec
        if contrast_range is not None:
            s = replace(spec, contrast=float(rng.uniform(*contrast_range)))
        for attempt in range(20):
            image, gt = gen_sample(s, rng)
            try:
                ann = sparse_annotate(gt, mode, rng)
                break
            except PlacementError:
                # object too thin to annotate: redraw the scene from the same stream
                if attempt == 19:
                    raise
        samples.append(Sample(image, gt, ann))
    manifest = make_split(n, labeled_fraction, np.random.default_rng([spec.seed, 1]))
    manifest.test_ids = list(range(n, n + n_test))
    manifest.mode = mode
    manifest.extra = {"scene": asdict(spec)}
    if contrast_range is not None:
        manifest.extra["contrast_range"] = list(contrast_range)
    return samples, manifest


# ---------------------------------------------------------------------------
# file format

def dumps_array(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype="<f8")
    if not 1 <= a.ndim <= 3:
        raise DataError(f"rank {a.ndim} not storable")
    dims = list(a.shape) + [0] * (3 - a.ndim)
    header = DATA_MAGIC + struct.pack("<H3H", a.ndim, *dims)
    return header + np.ascontiguousarray(a).tobytes()


def loads_array(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 16:
        raise DataError(f"{source}: truncated header")
    if buf[:8] != DATA_MAGIC:
        raise DataError(f"{source}: bad magic {buf[:8]!r}")
    rank, *dims = struct.unpack_from("<H3H", buf, 8)
    if not 1 <= rank <= 3 or any(d == 0 for d in dims[:rank]):
        raise DataError(f"{source}: invalid shape header")
    shape = tuple(dims[:rank])
    n = int(np.prod(shape))
    if len(buf) != 16 + 8 * n:
        raise DataError(f"{source}: expected {16 + 8 * n} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f8", offset=16).reshape(shape).astype(np.float64)


def write_array(path: str | Path, a: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_array(a))
    tmp.replace(path)


def read_array(path: str | Path) -> np.ndarray:
    path = Path(path)
    return loads_array(path.read_bytes(), str(path))


def write_dataset(directory: str | Path, samples: list[Sample], manifest: SplitManifest) -> None:
    d = Path(directory)
    for sub in ("images", "masks", "annots"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_array(d / "images" / f"{i:04d}.bin", s.image)
        write_array(d / "masks" / f"{i:04d}.bin", s.mask)
        if s.annotation is not None:
            write_array(d / "annots" / f"{i:04d}.bin", s.annotation.labels)
    doc = asdict(manifest)
    doc["n_samples"] = len(samples)
    doc["annotation_modes"] = sorted({s.annotation.mode for s in samples if s.annotation})
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    tmp.replace(d / "manifest.json")


def read_dataset(directory: str | Path) -> tuple[list[Sample], SplitManifest]:
    d = Path(directory)
    mpath = d / "manifest.json"
    try:
        doc = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{mpath}: {exc}") from exc
    n = int(doc.pop("n_samples"))
    modes = doc.pop("annotation_modes", [])
    manifest = SplitManifest(**doc)
    mode = modes[0] if modes else manifest.mode
    samples = []
    for i in range(n):
        image = read_array(d / "images" / f"{i:04d}.bin")
        mask = read_array(d / "masks" / f"{i:04d}.bin")
        apath = d / "annots" / f"{i:04d}.bin"
        ann = SparseAnnotation(read_array(apath), mode) if apath.exists() else None
        if mask.shape != image.shape:
            raise DataError(f"{d / 'masks' / f'{i:04d}.bin'}: shape {mask.shape} != image {image.shape}")
        samples.append(Sample(image, mask, ann))
    return samples, manifest
