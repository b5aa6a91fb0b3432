"""Datasets, raster files and bone-patch extraction.

Two synthetic generators stand in for real radiographs:

* :func:`synth_ambiguous` draws a bright blob with a faint protrusion that
  annotators disagree on, giving one label map per annotation mode;
* :func:`synth_hand` draws a stylised hand (two forearm bones and five
  metacarpals over soft tissue) whose bone texture encodes a T-score.

Class indices are 0-based everywhere: 0 is background and, for hands,
1..7 are ulna, radius, M1..M5.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import norm

from .errors import ContractError, DimensionError

SEGMENTS = ("ulna", "radius", "M1", "M2", "M3", "M4", "M5")
HAND_CLASSES = len(SEGMENTS) + 1
OSTEOPOROSIS_T = -2.5


@dataclass
class AnnotatedImage:
    image: np.ndarray
    annotations: np.ndarray  # (M, H, W) integer label maps
    weights: np.ndarray  # beta, sums to one
    image_id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.annotations = np.asarray(self.annotations)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.annotations.ndim == 2:
            self.annotations = self.annotations[None]
        if self.annotations.shape[1:] != self.image.shape:
            raise DimensionError("annotations must match the image dimensions")
        if len(self.weights) != len(self.annotations):
            raise ContractError("one weight per annotation required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ContractError("annotation weights must sum to one")


@dataclass
class BonePatch:
    segment_id: str
    crop: np.ndarray
    bbox: tuple[int, int, int, int]  # (row, col, height, width) in source coordinates
    subject_id: str | None = None


def label_from_tscore(t: float) -> int:
    """1 (osteoporosis) when the T-score falls strictly below -2.5."""
    if not math.isfinite(t):
        raise ContractError(f"T-score must be finite, got {t!r}")
    return int(t < OSTEOPOROSIS_T)


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------

def tight_bbox(binary: np.ndarray, pad: int) -> tuple[int, int, int, int] | None:
    rows = np.flatnonzero(binary.any(axis=1))
    cols = np.flatnonzero(binary.any(axis=0))
    if rows.size == 0:
        return None
    h, w = binary.shape
    r0, r1 = max(rows[0] - pad, 0), min(rows[-1] + pad, h - 1)
    c0, c1 = max(cols[0] - pad, 0), min(cols[-1] + pad, w - 1)
    return int(r0), int(c0), int(r1 - r0 + 1), int(c1 - c0 + 1)


def extract_patches(image: np.ndarray, mask: np.ndarray, pad: int = 2,
                    subject_id: str | None = None) -> list[BonePatch]:
    """One masked, tightly cropped patch per bone class present in ``mask``."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise DimensionError(f"mask {mask.shape} does not match image {image.shape}")
    patches = []
    for cls, name in enumerate(SEGMENTS, start=1):
        binary = mask == cls
        box = tight_bbox(binary, pad)
        if box is None:
            continue
        r, c, h, w = box
        masked = image * binary
        patches.append(BonePatch(name, masked[r:r + h, c:c + w].copy(), box, subject_id))
    return patches


def random_patches(image: np.ndarray, count: int, size: int, rng: np.random.Generator,
                   subject_id: str | None = None) -> list[BonePatch]:
    """Unmasked square crops at uniform positions (segmentation-free baseline)."""
    h, w = image.shape
    if size > min(h, w):
        raise DimensionError("crop larger than image")
    out = []
    for k in range(count):
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        out.append(BonePatch(f"random{k}", image[r:r + size, c:c + size].copy(), (r, c, size, size), subject_id))
    return out


def to_canvas(crop: np.ndarray, size: int) -> np.ndarray:
    """Scale so the longer side equals ``size`` and centre on a zero canvas."""
    crop = np.asarray(crop, dtype=np.float64)
    h, w = crop.shape
    scale = size / max(h, w)
    if scale != 1.0:
        crop = ndimage.zoom(crop, scale, order=1, grid_mode=True, mode="grid-constant")
    crop = np.clip(crop[:size, :size], 0.0, 1.0)
    out = np.zeros((size, size))
    h, w = crop.shape
    r, c = (size - h) // 2, (size - w) // 2
    out[r:r + h, c:c + w] = crop
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_subjects(subject_ids, seed: int) -> tuple[list, list, list]:
    """Random 80/10/10 partition; validation and test sizes round half up."""
    ids = list(subject_ids)
    n = len(ids)
    if n < 10:
        raise ContractError("need at least 10 subjects to split")
    if len(set(ids)) != n:
        raise ContractError("subject ids must be unique")
    n_val = int(math.floor(0.1 * n + 0.5))
    n_test = int(math.floor(0.1 * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    test = shuffled[:n_test]
    val = shuffled[n_test:n_test + n_val]
    train = shuffled[n_test + n_val:]
    return sorted(train), sorted(val), sorted(test)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synth_ambiguous(n: int, size: int = 32, modes: int = 2, beta=None,
                    rng: np.random.Generator | None = None) -> list[AnnotatedImage]:
    """Blob images whose faint protrusion is labelled differently per mode.

    Mode ``j`` of ``modes`` labels the first ``j/(modes-1)`` of the protrusion
    length as foreground, so mode 0 excludes it and the last mode includes it
    fully.  With ``modes=1`` no protrusion is drawn and all annotations agree.
    """
    if modes < 1:
        raise ContractError("modes must be >= 1")
    beta = np.full(modes, 1.0 / modes) if beta is None else np.asarray(beta, dtype=np.float64)
    if len(beta) != modes:
        raise ContractError("beta needs one weight per mode")
    rng = rng or np.random.default_rng(0)
    yy, xx = np.mgrid[0:size, 0:size]
    length = max(2, round(0.30 * size))
    width = max(2, round(0.25 * size))
    out = []
    for i in range(n):
        radius = rng.uniform(0.19, 0.25) * size
        margin = radius + length + 1
        cy = rng.uniform(radius + 1, size - radius - 1)
        cx = rng.uniform(radius + 1, size - radius - 1)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        image = 0.05 + 0.02 * rng.standard_normal((size, size))
        image[blob] = 0.8 + 0.05 * rng.standard_normal(blob.sum())
        labels = np.repeat(blob[None].astype(np.int64), modes, axis=0)
        if modes > 1:
            # direction chosen so the protrusion fits inside the image
            room = {0: cy - margin, 1: size - 1 - cy - margin, 2: cx - margin, 3: size - 1 - cx - margin}
            side = max(room, key=lambda k: (room[k], -k))
            direction = [(-1, 0), (1, 0), (0, -1), (0, 1)][side]
            dy, dx = direction
            prot = np.zeros((size, size), dtype=bool)
            steps = []
            for s in range(length):
                ring = np.zeros_like(prot)
                r0 = int(round(cy + dy * (radius - 1 + s)))
                c0 = int(round(cx + dx * (radius - 1 + s)))
                half = width // 2
                if dy:
                    ring[r0, max(c0 - half, 0):c0 - half + width] = True
                else:
                    ring[max(r0 - half, 0):r0 - half + width, c0] = True
                ring &= ~blob
                steps.append(ring)
                prot |= ring
            image[prot] = 0.45 + 0.05 * rng.standard_normal(prot.sum())
            for j in range(modes):
                upto = int(round(length * j / (modes - 1)))
                extra = np.zeros_like(prot)
                for ring in steps[:upto]:
                    extra |= ring
                labels[j][extra] = 1
        image = np.clip(image, 0.0, 1.0)
        out.append(AnnotatedImage(image, labels, beta, f"amb{i:05d}"))
    return out


@dataclass
class HandSample:
    image: np.ndarray
    mask: np.ndarray
    t_score: float
    subject_id: str

    @property
    def label(self) -> int:
        return label_from_tscore(self.t_score)


# (row_top, row_bottom, col_centre, half_width, tilt_deg) in units of image size
_HAND_LAYOUT = {
    1: (0.66, 0.99, 0.60, 0.050, 0.0),    # ulna
    2: (0.66, 0.99, 0.40, 0.060, 0.0),    # radius
    3: (0.38, 0.60, 0.20, 0.040, -28.0),  # M1 (thumb)
    4: (0.20, 0.58, 0.35, 0.035, -8.0),
    5: (0.18, 0.58, 0.47, 0.035, -2.0),
    6: (0.20, 0.58, 0.59, 0.035, 4.0),
    7: (0.24, 0.58, 0.70, 0.032, 10.0),
}


def tscore_params(prevalence: float, spread: float = 1.2) -> tuple[float, float]:
    """Normal T-score distribution with ``P(t < -2.5) = prevalence``."""
    return OSTEOPOROSIS_T - spread * float(norm.ppf(prevalence)), spread


def _capsule(yy, xx, top, bottom, cx, hw, tilt_deg, size):
    # rotate about the capsule's lower end so tilts fan out from the wrist
    t = math.radians(tilt_deg)
    py, px = bottom * size, cx * size
    dy, dx = yy - py, xx - px
    u = dy * math.cos(t) + dx * math.sin(t)  # along the bone axis
    v = -dy * math.sin(t) + dx * math.cos(t)
    length = (bottom - top) * size
    half = hw * size
    uc = np.clip(u, -length + half, -half)
    return (u - uc) ** 2 + v**2 <= half**2


def synth_hand(n: int, size: int = 64, rng: np.random.Generator | None = None,
               prevalence: float = 0.285, signal: float = 1.0,
               id_prefix: str = "subj") -> list[HandSample]:
    """Stylised hand radiographs with an 8-class mask and a T-score.

    Bone texture carries the label: the density of dark pores inside bone
    rises as the T-score falls (scaled by ``signal``).  Soft tissue carries a
    label-independent speckle, and pose, bone width and exposure vary per
    subject.
    """
    if size < 48:
        raise ContractError("synthetic hands need size >= 48")
    rng = rng or np.random.default_rng(0)
    mu, sd = tscore_params(prevalence)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = []
    for i in range(n):
        t = float(rng.normal(mu, sd))
        angle = rng.uniform(-6.0, 6.0)
        shift = rng.uniform(-0.04, 0.04, size=2) * size
        widen = rng.uniform(0.85, 1.15)
        exposure = rng.uniform(0.85, 1.15)
        cy, cx = size / 2.0, size / 2.0
        a = math.radians(angle)
        ry = cy + (yy - cy - shift[0]) * math.cos(a) - (xx - cx - shift[1]) * math.sin(a)
        rx = cx + (yy - cy - shift[0]) * math.sin(a) + (xx - cx - shift[1]) * math.cos(a)

        mask = np.zeros((size, size), dtype=np.int64)
        for cls, (top, bottom, col, hw, tilt) in _HAND_LAYOUT.items():
            mask[_capsule(ry, rx, top, bottom, col, hw * widen, tilt, size)] = cls
        bone = mask > 0
        tissue = ndimage.binary_dilation(bone, iterations=max(2, size // 16))
        palm = (ry > 0.45 * size) & (ry < 0.75 * size) & (rx > 0.17 * size) & (rx < 0.78 * size)
        tissue |= palm
        tissue = ndimage.binary_closing(tissue, iterations=2)

        image = np.zeros((size, size))
        soft_noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.5)
        image[tissue] = 0.28 + 0.05 * soft_noise[tissue]
        soft_speckle = rng.random((size, size)) < rng.uniform(0.05, 0.35)
        image[tissue & soft_speckle] -= 0.10

        pore_rate = np.clip(0.12 + 0.07 * signal * (mu - t), 0.01, 0.6)
        pores = rng.random((size, size)) < pore_rate
        image[bone] = 0.72 + 0.03 * rng.standard_normal(bone.sum())
        image[bone & pores] -= 0.35
        image = np.clip(image * exposure, 0.0, 1.0)
        out.append(HandSample(image, mask, t, f"{id_prefix}{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# raster and dataset files
# ---------------------------------------------------------------------------

def write_pgm(path, array: np.ndarray, maxval: int | None = None) -> None:
    """Binary PGM (P5); 16-bit samples are big-endian as the format requires."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise DimensionError("PGM holds a single 2-D channel")
    if maxval is None:
        maxval = 255 if arr.max(initial=0) <= 255 else 65535
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    h, w = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(arr.astype(dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.int64), maxval


def save_image(path, image: np.ndarray) -> None:
    write_pgm(path, np.round(np.clip(image, 0.0, 1.0) * 65535).astype(np.int64), 65535)


def load_image(path) -> np.ndarray:
    data, maxval = read_pgm(path)
    return data / float(maxval)


def save_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, np.asarray(mask, dtype=np.int64), 255)


def load_mask(path) -> np.ndarray:
    return read_pgm(path)[0]


class Dataset:
    """On-disk layout::

        images/<id>.pgm        16-bit image
        masks/<id>_<j>.pgm     8-bit class map, one per annotation
        meta/<id>.json         {"beta": [...], "t_score", "subject_id", "label"}
        manifest.json          {"kind", "num_classes", "splits": {...}}
    """

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "manifest.json").read_text())

    @property
    def splits(self) -> dict[str, list[str]]:
        return self.manifest["splits"]

    @property
    def num_classes(self) -> int:
        return int(self.manifest["num_classes"])

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return sorted(sum(self.splits.values(), []))
        return list(self.splits[split])

    def meta(self, image_id: str) -> dict:
        return json.loads((self.root / "meta" / f"{image_id}.json").read_text())

    def image(self, image_id: str) -> np.ndarray:
        return load_image(self.root / "images" / f"{image_id}.pgm")

    def annotated(self, image_id: str) -> AnnotatedImage:
        meta = self.meta(image_id)
        masks = [load_mask(self.root / "masks" / f"{image_id}_{j}.pgm") for j in range(len(meta["beta"]))]
        return AnnotatedImage(self.image(image_id), np.stack(masks), meta["beta"], image_id, meta)

    @classmethod
    def write(cls, root, items: list[AnnotatedImage], kind: str, num_classes: int,
              splits: dict[str, list[str]]) -> "Dataset":
        root = Path(root)
        for item in items:
            save_image(root / "images" / f"{item.image_id}.pgm", item.image)
            for j, ann in enumerate(item.annotations):
                save_mask(root / "masks" / f"{item.image_id}_{j}.pgm", ann)
            meta = {"beta": item.weights.tolist(), **item.meta}
            (root / "meta").mkdir(parents=True, exist_ok=True)
            (root / "meta" / f"{item.image_id}.json").write_text(json.dumps(meta, sort_keys=True))
        manifest = {"kind": kind, "num_classes": num_classes, "splits": splits}
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return cls(root)


def hand_to_annotated(sample: HandSample) -> AnnotatedImage:
    meta = {"t_score": sample.t_score, "subject_id": sample.subject_id, "label": sample.label}
    return AnnotatedImage(sample.image, sample.mask[None], [1.0], sample.subject_id, meta)
