"""Synthetic AAC-24 scans, label utilities, sampling, splitting and file I/O.

Scan geometry (for an H x W image, defaults 96 x 96): a bright spine band
spans columns ``0.42W .. 0.58W`` and is split into four vertebra blocks (one
per lumbar segment) separated by dark disc gaps.  Two thin aortic wall lines
run to the right of the spine.  A wall score ``s`` in 0..3 is rendered as a
bright calcification streak along that wall covering a fraction of the
segment height: none for 0, ``(0, 1/3]`` for 1, ``(1/3, 2/3)`` for 2 and
``[2/3, 1]`` for 3.  The total score is the sum over the 8 wall-segments.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .numerics import make_rng

GENERATOR_VERSION = "1"
N_SEGMENTS = 4
N_WALLS = 2
MAX_WALL_SCORE = 3
MAX_TOTAL = N_SEGMENTS * N_WALLS * MAX_WALL_SCORE

MANIFEST_COLUMNS = ["path", "seg1", "seg2", "seg3", "seg4", "total", "risk", "split"]

# class shares of the Hologic cohort: 764 / 714 / 436 of 1914
HOLOGIC_COUNTS = (764, 714, 436)


class RiskClass(enum.IntEnum):
    LOW = 0
    MODERATE = 1
    HIGH = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "RiskClass":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown risk class {text!r}") from None


def risk_class(total: float) -> RiskClass:
    """Low below 2, Moderate for 2..5 inclusive, High above 5."""
    t = float(total)
    if math.isnan(t):
        raise ValueError("risk class of NaN")
    if t < 2:
        return RiskClass.LOW
    if t <= 5:
        return RiskClass.MODERATE
    return RiskClass.HIGH


def risk_classes(totals) -> np.ndarray:
    t = np.asarray(totals, dtype=np.float64)
    if np.isnan(t).any():
        raise ValueError("risk class of NaN")
    return np.where(t < 2, 0, np.where(t <= 5, 1, 2)).astype(np.int64)


@dataclass(frozen=True)
class Geometry:
    height: int = 96
    width: int = 96

    @property
    def spine_cols(self) -> tuple[int, int]:
        return int(0.42 * self.width), int(math.ceil(0.58 * self.width))

    @property
    def wall_cols(self) -> tuple[int, int]:
        """Left column of the posterior and anterior wall lines (each 2 px wide)."""
        return int(round(0.68 * self.width)), int(round(0.80 * self.width))

    @property
    def top(self) -> int:
        return self.height // 12

    @property
    def segment_height(self) -> int:
        return (self.height - 2 * self.top) // N_SEGMENTS

    def segment_rows(self, k: int) -> tuple[int, int]:
        start = self.top + k * self.segment_height
        return start, start + self.segment_height

    def streak_range(self, score: int) -> tuple[int, int]:
        """Inclusive streak length range in pixels for a wall score."""
        h = self.segment_height
        if score == 0:
            return 0, 0
        if score == 1:
            return 1, int(math.floor(h / 3))
        if score == 2:
            return int(math.floor(h / 3)) + 1, int(math.ceil(2 * h / 3)) - 1
        return int(math.ceil(2 * h / 3)), h


BACKGROUND = 0.0
SPINE = 0.6
DISC = 0.25
WALL = 0.3
CALCIFICATION = 0.95
NOISE_SIGMA = 0.05


@dataclass
class SyntheticScan:
    image: np.ndarray  # [1, H, W] float in [0, 1]
    wall_scores: np.ndarray  # [4, 2] ints 0..3, columns (posterior, anterior)

    @property
    def segment_scores(self) -> list[int]:
        return [int(v) for v in self.wall_scores.sum(axis=1)]

    @property
    def total(self) -> int:
        return int(self.wall_scores.sum())

    @property
    def risk(self) -> RiskClass:
        return risk_class(self.total)


def split_total(target: int, rng: np.random.Generator) -> np.ndarray:
    """Random 4x2 wall-score grid (entries 0..3) summing to ``target``."""
    if not 0 <= target <= MAX_TOTAL:
        raise ValueError(f"target total {target} unreachable (0..{MAX_TOTAL})")
    scores = np.zeros(N_SEGMENTS * N_WALLS, dtype=np.int64)
    for _ in range(int(target)):
        open_slots = np.flatnonzero(scores < MAX_WALL_SCORE)
        scores[rng.choice(open_slots)] += 1
    return scores.reshape(N_SEGMENTS, N_WALLS)


def streak_fraction(score: int, rng: np.random.Generator) -> float:
    if score == 0:
        return 0.0
    if score == 1:
        return float(1.0 / 3 - rng.uniform(0.0, 1.0 / 3))  # (0, 1/3]
    if score == 2:
        return float(rng.uniform(1.0 / 3, 2.0 / 3))
    return float(rng.uniform(2.0 / 3, 1.0))


def render(wall_scores: np.ndarray, rng: np.random.Generator, geom: Geometry = Geometry()) -> np.ndarray:
    H, W = geom.height, geom.width
    img = np.full((H, W), BACKGROUND)
    s0, s1 = geom.spine_cols
    gap = max(1, geom.segment_height // 8)
    y_top, y_bot = geom.top, geom.top + N_SEGMENTS * geom.segment_height
    img[y_top:y_bot, s0:s1] = SPINE
    for k in range(N_SEGMENTS + 1):
        r = geom.top + k * geom.segment_height
        img[max(r - gap, 0):min(r + gap, H), s0:s1] = DISC
    for c in geom.wall_cols:
        img[y_top:y_bot, c:c + 2] = WALL
    hseg = geom.segment_height
    for k in range(N_SEGMENTS):
        r0, _ = geom.segment_rows(k)
        for w, c in enumerate(geom.wall_cols):
            s = int(wall_scores[k, w])
            if s == 0:
                continue
            lo, hi = geom.streak_range(s)
            length = int(np.clip(math.ceil(streak_fraction(s, rng) * hseg), lo, hi))
            start = r0 + int(rng.integers(0, hseg - length + 1))
            img[start:start + length, c:c + 2] = CALCIFICATION
    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)[None]


def generate_scan(target_total: int, rng: np.random.Generator, geom: Geometry = Geometry()) -> SyntheticScan:
    walls = split_total(target_total, rng)
    return SyntheticScan(render(walls, rng, geom), walls)


def total_weights(distribution: str | Sequence[float]) -> np.ndarray:
    """Probability over totals 0..24 for ``uniform``, ``hologic-like`` or explicit weights."""
    if isinstance(distribution, str):
        if distribution == "uniform":
            return np.full(MAX_TOTAL + 1, 1.0 / (MAX_TOTAL + 1))
        if distribution == "hologic-like":
            shares = np.array(HOLOGIC_COUNTS, dtype=np.float64) / sum(HOLOGIC_COUNTS)
            classes = risk_classes(np.arange(MAX_TOTAL + 1))
            w = np.array([shares[c] / np.sum(classes == c) for c in classes])
            return w / w.sum()
        raise ValueError(f"unknown distribution {distribution!r}")
    w = np.asarray(distribution, dtype=np.float64)
    if w.shape != (MAX_TOTAL + 1,) or not np.all(np.isfinite(w)) or (w < 0).any() or w.sum() <= 0:
        raise ValueError(f"weights must be {MAX_TOTAL + 1} non-negative finite numbers with positive sum")
    return w / w.sum()


def scan_seed(base_seed: int, index: int) -> int:
    return int(base_seed) ^ int(index)


@dataclass
class Record:
    path: str
    segments: list[int]
    total: int
    risk: RiskClass
    split: str = ""


@dataclass
class DatasetManifest:
    records: list[Record]
    seed: int | None = None
    version: str = GENERATOR_VERSION
    root: Path | None = None
    images: np.ndarray | None = field(default=None, repr=False)  # [n, 1, H, W] if loaded

    def __len__(self) -> int:
        return len(self.records)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records], dtype=np.int64)

    @property
    def risks(self) -> np.ndarray:
        return np.array([int(r.risk) for r in self.records], dtype=np.int64)

    @property
    def keys(self) -> list[str]:
        return [r.path for r in self.records]

    def load_images(self) -> np.ndarray:
        if self.images is None:
            if self.root is None:
                raise ValueError("manifest has no root directory for its images")
            self.images = np.stack([read_pgm(self.root / r.path)[None] for r in self.records])
        return self.images


def generate_dataset(n: int, distribution="hologic-like", seed: int = 0,
                     geom: Geometry = Geometry()) -> DatasetManifest:
    """Generate ``n`` scans in memory; scan ``i`` uses the stream ``seed ^ i``."""
    weights = total_weights(distribution)
    records, images = [], []
    for i in range(n):
        rng = make_rng(scan_seed(seed, i))
        total = int(rng.choice(MAX_TOTAL + 1, p=weights))
        scan = generate_scan(total, rng, geom)
        records.append(Record(f"scan_{i:05d}.pgm", scan.segment_scores, scan.total, scan.risk))
        images.append(scan.image)
    imgs = np.stack(images) if images else np.zeros((0, 1, geom.height, geom.width))
    return DatasetManifest(records, seed=seed, images=imgs)


# -- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 5.0  # degrees, uniform in +-rotation
    shear: float = 0.05
    translation: float = 4.0  # pixels

    def __post_init__(self):
        if min(self.rotation, self.shear, self.translation) < 0:
            raise ValueError("augmentation ranges must be non-negative")


def affine_warp(image: np.ndarray, angle_deg: float = 0.0, shear: float = 0.0,
                shift: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Rotate/shear about the centre then shift by ``(dx, dy)`` pixels; bilinear, zero border.

    ``image`` is [H, W] or [1, H, W].
    """
    squeeze = image.ndim == 3
    img = image[0] if squeeze else image
    h, w = img.shape
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    forward = rot @ np.array([[1.0, 0.0], [shear, 1.0]])  # acts on (row, col)
    inv = np.linalg.inv(forward)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    dyx = np.array([shift[1], shift[0]])
    offset = centre - inv @ (centre + dyx)
    out = ndimage.affine_transform(img, inv, offset=offset, order=1, mode="constant", cval=0.0)
    out = np.clip(out, 0.0, 1.0)
    return out[None] if squeeze else out


def augment(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(-params.rotation, params.rotation)
    shear = rng.uniform(-params.shear, params.shear)
    dx, dy = rng.uniform(-params.translation, params.translation, size=2)
    return affine_warp(image, angle, shear, (dx, dy))


def augment_batch(images: np.ndarray, params: AugmentParams | None, rng: np.random.Generator) -> np.ndarray:
    if params is None:
        return images
    return np.stack([augment(im, params, rng) for im in images]).astype(images.dtype, copy=False)


# -- sampling and splitting -------------------------------------------------

def sample_batch(labels, batch_size: int, rng: np.random.Generator, mode: str = "iid") -> np.ndarray:
    """Indices for one batch.

    ``positive_aware`` picks labels (weighted by frequency) that have at least
    two instances and draws two instances per label, so every anchor has a
    positive; if too few such labels exist the rest is filled iid.
    """
    labels = np.asarray(labels)
    n = labels.size
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n}")
    if mode == "iid":
        return rng.choice(n, size=batch_size, replace=False)
    if mode != "positive_aware":
        raise ValueError(f"unknown sampling mode {mode!r}")
    values, counts = np.unique(labels, return_counts=True)
    eligible = values[counts >= 2]
    weights = counts[counts >= 2].astype(np.float64)
    n_labels = min(batch_size // 2, eligible.size)
    chosen = []
    if n_labels:
        picks = rng.choice(eligible.size, size=n_labels, replace=False, p=weights / weights.sum())
        for v in eligible[picks]:
            chosen.extend(rng.choice(np.flatnonzero(labels == v), size=2, replace=False))
    rest = batch_size - len(chosen)
    if rest:
        pool = np.setdiff1d(np.arange(n), chosen)
        chosen.extend(rng.choice(pool, size=rest, replace=False))
    return np.array(chosen, dtype=np.int64)


def epoch_batches(labels, batch_size: int, rng: np.random.Generator,
                  mode: str = "positive_aware", min_batch: int = 4) -> list[np.ndarray]:
    """Partition one epoch into batches.

    In ``positive_aware`` mode instances of each label are shuffled and paired
    (an odd one out joins its label's last pair), then pairs are shuffled and
    packed, so each sample is seen once per epoch and almost always with a
    positive.  Trailing batches smaller than ``min_batch`` are dropped.
    """
    labels = np.asarray(labels)
    n = labels.size
    if mode == "iid":
        perm = rng.permutation(n)
        groups = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
        return [g for g in groups if g.size >= min_batch]
    if mode != "positive_aware":
        raise ValueError(f"unknown sampling mode {mode!r}")
    units = []
    for v in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == v))
        pairs = [list(idx[i:i + 2]) for i in range(0, idx.size - 1, 2)]
        if idx.size % 2:
            if pairs:
                pairs[-1].append(idx[-1])
            else:
                pairs.append([idx[-1]])
        units.extend(pairs)
    order = rng.permutation(len(units))
    batches, cur = [], []
    for u in order:
        cur.extend(units[u])
        if len(cur) >= batch_size:
            batches.append(np.array(cur, dtype=np.int64))
            cur = []
    if len(cur) >= min_batch:
        batches.append(np.array(cur, dtype=np.int64))
    return batches


def stratified_kfold(strata, k: int, seed: int, keys: Sequence[str] | None = None) -> list[np.ndarray]:
    """Split indices into ``k`` folds with per-fold stratum counts within one of each other.

    With ``keys`` the assignment depends only on the keys, not on input order.
    """
    strata = np.asarray(strata)
    n = strata.size
    if k < 2:
        raise ValueError("k must be at least 2")
    canon = np.arange(n) if keys is None else np.argsort(np.asarray(keys), kind="stable")
    rng = make_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(strata):
        members = canon[strata[canon] == c]
        if members.size < k:
            raise ValueError(f"stratum {c} has {members.size} members, fewer than k={k}")
        members = members[rng.permutation(members.size)]
        for j, idx in enumerate(members):
            folds[(offset + j) % k].append(int(idx))
        offset = (offset + members.size) % k
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def stratified_holdout(strata, fraction: float, seed: int, keys=None) -> tuple[np.ndarray, np.ndarray]:
    """(keep, held_out) with ``round(fraction * count)`` of each stratum held out."""
    strata = np.asarray(strata)
    canon = np.arange(strata.size) if keys is None else np.argsort(np.asarray(keys), kind="stable")
    rng = make_rng(seed)
    held = []
    for c in np.unique(strata):
        members = canon[strata[canon] == c]
        members = members[rng.permutation(members.size)]
        m = int(round(fraction * members.size))
        held.extend(members[:m].tolist())
    held_arr = np.array(sorted(held), dtype=np.int64)
    keep = np.setdiff1d(np.arange(strata.size), held_arr)
    return keep, held_arr


# -- file I/O ----------------------------------------------------------------

class ParseError(ValueError):
    pass


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[0]
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[str], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError(f"truncated PGM header at byte {pos}")
        tokens.append(buf[start:pos].decode("ascii", errors="replace"))
    return tokens, pos + 1  # one whitespace byte ends the header


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM with maxval 255 into [H, W] floats in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(buf, 4)
    magic, w, h, maxval = tokens
    if magic != "P5":
        raise ParseError(f"{path}: bad magic {magic!r} at byte 0 (expected P5)")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ParseError(f"{path}: non-integer header field before byte {pos}") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise ParseError(f"{path}: unsupported header w={w} h={h} maxval={maxval}")
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise ParseError(f"{path}: pixel data truncated at byte {pos + len(data)}, need {w * h} bytes")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_manifest(manifest: DatasetManifest, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "manifest.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            wr.writerow([r.path, *r.segments, r.total, r.risk.label, r.split])
    meta = {"generator_version": manifest.version, "seed": manifest.seed, "count": len(manifest)}
    (directory / "manifest.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def write_dataset(manifest: DatasetManifest, directory) -> Path:
    """Write every image as PGM plus ``manifest.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if manifest.images is None:
        raise ValueError("manifest carries no images to write")
    for r, img in zip(manifest.records, manifest.images):
        write_pgm(directory / r.path, img)
    manifest.root = directory
    return write_manifest(manifest, directory)


def read_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    root = path.parent
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty manifest")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    if missing:
        raise ParseError(f"{path}: line 1: missing column(s) {', '.join(missing)}")
    col = {c: header.index(c) for c in MANIFEST_COLUMNS}
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            segs = [int(row[col[f"seg{k}"]]) for k in range(1, 5)]
            total = int(row[col["total"]])
            risk = RiskClass.parse(row[col["risk"]])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from None
        if sum(segs) != total:
            raise ParseError(f"{path}: line {lineno}: segment scores sum to {sum(segs)}, total is {total}")
        if risk != risk_class(total):
            raise ParseError(f"{path}: line {lineno}: risk {risk.label} inconsistent with total {total}")
        rec_path = row[col["path"]]
        if check_paths and not (root / rec_path).exists():
            raise ParseError(f"{path}: line {lineno}: image {rec_path} not found")
        records.append(Record(rec_path, segs, total, risk, row[col["split"]]))
    meta_path = root / "manifest.meta.json"
    seed, version = None, GENERATOR_VERSION
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        seed, version = meta.get("seed"), meta.get("generator_version", version)
    return DatasetManifest(records, seed=seed, version=version, root=root)


def class_histogram(risks: Iterable[int]) -> dict[str, int]:
    counts = {c.label: 0 for c in RiskClass}
    for r in risks:
        counts[RiskClass(int(r)).label] += 1
    return counts


