"""Corpora for dichotomous segmentation: a synthetic fine-structure generator,
a loader for ``root/split/{im,gt}`` folders, and batch assembly."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch

logger = logging.getLogger(__name__)

FAMILIES = ("thin-curve", "grid", "star", "blob-with-holes")
IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class ConfigError(ValueError):
    """Invalid configuration value."""


class CorpusError(RuntimeError):
    """Corpus on disk is inconsistent (e.g. unmatched image/gt stems)."""


@dataclass
class ImageSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    gt: np.ndarray  # H x W uint8 in {0, 1}
    category: int
    id: str


@dataclass
class Corpus:
    samples: list[ImageSample]
    categories: list[str]
    resolution: tuple[int, int] | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> ImageSample:
        return self.samples[i]

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus([self.samples[i] for i in indices], list(self.categories), self.resolution)

    def concat(self, other: "Corpus") -> "Corpus":
        ids = {s.id for s in self.samples}
        if any(s.id in ids for s in other.samples):
            raise CorpusError("sample ids collide when concatenating corpora")
        if other.categories != self.categories:
            raise CorpusError("cannot concatenate corpora with different category lists")
        return Corpus(self.samples + other.samples, list(self.categories), self.resolution)


@dataclass
class SyntheticSpec:
    count: int = 200
    canvas: tuple[int, int] = (128, 128)
    mix: dict[str, float] = field(default_factory=lambda: {f: 0.25 for f in FAMILIES})
    stroke_widths: tuple[int, int] = (2, 4)
    seed: int = 0

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        unknown = set(self.mix) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown structure families: {sorted(unknown)}")
        if any(v < 0 for v in self.mix.values()):
            raise ConfigError("structure proportions must be non-negative")
        if not math.isclose(sum(self.mix.values()), 1.0, abs_tol=1e-9):
            raise ConfigError(f"structure proportions sum to {sum(self.mix.values())}, expected 1")
        lo, hi = self.stroke_widths
        if lo < 1 or hi < lo:
            raise ConfigError("stroke widths must satisfy 1 <= min <= max")
        h, w = self.canvas
        if h < 16 or w < 16:
            raise ConfigError("canvas must be at least 16x16")


@dataclass
class Batch:
    image: torch.Tensor  # N x 3 x H x W
    gt: torch.Tensor  # N x 1 x H x W, exactly {0, 1}
    label: torch.Tensor  # N, int64
    ids: list[str]

    def __len__(self) -> int:
        return self.image.shape[0]


# ---------------------------------------------------------------------------
# synthetic generation


def _family_counts(spec: SyntheticSpec) -> list[int]:
    # largest-remainder apportionment keeps the mix exact for any count
    raw = [spec.mix.get(f, 0.0) * spec.count for f in FAMILIES]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(FAMILIES)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: spec.count - sum(counts)]:
        counts[i] += 1
    return counts


def _smooth_path(rng: np.random.Generator, h: int, w: int, n: int) -> np.ndarray:
    p = np.array([rng.uniform(0.1 * w, 0.9 * w), rng.uniform(0.1 * h, 0.9 * h)])
    heading = rng.uniform(0, 2 * np.pi)
    step = max(h, w) / 40.0
    pts = [p.copy()]
    turn = 0.0
    for _ in range(n):
        turn = 0.8 * turn + rng.normal(0, 0.25)
        heading += turn
        p = p + step * np.array([np.cos(heading), np.sin(heading)])
        # bounce back into the canvas
        if not (2 <= p[0] <= w - 3):
            heading = np.pi - heading
            p[0] = np.clip(p[0], 2, w - 3)
        if not (2 <= p[1] <= h - 3):
            heading = -heading
            p[1] = np.clip(p[1], 2, h - 3)
        pts.append(p.copy())
    return np.round(np.array(pts)).astype(np.int32)


def _draw_thin_curves(rng, mask, widths):
    h, w = mask.shape
    for _ in range(rng.integers(1, 4)):
        pts = _smooth_path(rng, h, w, int(rng.integers(25, 60)))
        cv2.polylines(mask, [pts], False, 1, int(rng.integers(widths[0], widths[1] + 1)))


def _draw_grid(rng, mask, widths):
    h, w = mask.shape
    x0, y0 = int(rng.integers(0, w // 4)), int(rng.integers(0, h // 4))
    x1, y1 = int(rng.integers(3 * w // 4, w)), int(rng.integers(3 * h // 4, h))
    spacing = int(rng.integers(max(h, w) // 12, max(h, w) // 5))
    t = int(rng.integers(widths[0], widths[1] + 1))
    for x in range(x0, x1 + 1, spacing):
        cv2.line(mask, (x, y0), (x, y1), 1, t)
    for y in range(y0, y1 + 1, spacing):
        cv2.line(mask, (x0, y), (x1, y), 1, t)
    cv2.rectangle(mask, (x0, y0), (x1, y1), 1, t)


def _draw_star(rng, mask, widths):
    h, w = mask.shape
    cx, cy = rng.uniform(0.3 * w, 0.7 * w), rng.uniform(0.3 * h, 0.7 * h)
    r_out = rng.uniform(0.25, 0.45) * min(h, w)
    n_rays = int(rng.integers(5, 13))
    base = rng.uniform(0, 2 * np.pi)
    for k in range(n_rays):
        a = base + 2 * np.pi * k / n_rays + rng.normal(0, 0.08)
        r = r_out * rng.uniform(0.6, 1.0)
        end = (int(round(cx + r * np.cos(a))), int(round(cy + r * np.sin(a))))
        cv2.line(mask, (int(round(cx)), int(round(cy))), end, 1, int(rng.integers(widths[0], widths[1] + 1)))
    cv2.circle(mask, (int(round(cx)), int(round(cy))), max(2, int(0.06 * min(h, w))), 1, -1)


def _draw_blob(rng, mask, widths):
    h, w = mask.shape
    cx, cy = rng.uniform(0.35 * w, 0.65 * w), rng.uniform(0.35 * h, 0.65 * h)
    n = 12
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(0.2, 0.38, n) * min(h, w)
    poly = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], 1).round().astype(np.int32)
    cv2.fillPoly(mask, [poly], 1)
    r_min = float(rad.min())
    for _ in range(rng.integers(2, 6)):
        a, d = rng.uniform(0, 2 * np.pi), rng.uniform(0, 0.6) * r_min
        hr = int(rng.integers(max(2, widths[0]), max(3, int(0.25 * r_min))))
        cv2.circle(mask, (int(cx + d * np.cos(a)), int(cy + d * np.sin(a))), hr, 0, -1)


_DRAWERS = (_draw_thin_curves, _draw_grid, _draw_star, _draw_blob)


def _luma(c: np.ndarray) -> float:
    return float(c @ np.array([0.299, 0.587, 0.114]))


def _render(rng: np.random.Generator, mask: np.ndarray) -> np.ndarray:
    """Textured background with distractor edges, contrasting foreground."""
    h, w = mask.shape
    bg_a, bg_b = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    a = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(a) * xx / w + np.sin(a) * yy / h + 1.0) / 2.0
    img = bg_a[None, None] * (1 - ramp[..., None]) + bg_b[None, None] * ramp[..., None]

    # low-contrast clutter: gradients the mask should filter out
    clutter = np.zeros((h, w), np.float32)
    for _ in range(rng.integers(3, 8)):
        p0 = tuple(int(v) for v in rng.integers(0, [w, h]))
        p1 = tuple(int(v) for v in rng.integers(0, [w, h]))
        cv2.line(clutter, p0, p1, float(rng.uniform(-0.15, 0.15)), 1)
    img = img + clutter[..., None]

    bg_luma = _luma(img.reshape(-1, 3).mean(0))
    for _ in range(32):
        fg = rng.uniform(0.0, 1.0, 3)
        if abs(_luma(fg) - bg_luma) >= 0.35:
            break
    else:
        fg = np.full(3, 0.0 if bg_luma > 0.5 else 1.0)
    shade = 1.0 + 0.1 * (ramp - 0.5)
    m = mask.astype(bool)
    img[m] = fg[None] * shade[m][:, None]
    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    """Deterministic corpus of thin-structure masks with category = family index."""
    spec.validate()
    h, w = spec.canvas
    counts = _family_counts(spec)
    families = [f for f, c in zip(range(len(FAMILIES)), counts) for _ in range(c)]
    order = np.random.default_rng([spec.seed, 0]).permutation(len(families))
    samples = []
    for i, j in enumerate(order):
        fam = families[j]
        rng = np.random.default_rng([spec.seed, 1, i])
        mask = np.zeros((h, w), np.uint8)
        while True:
            _DRAWERS[fam](rng, mask, spec.stroke_widths)
            if mask.any():
                break
        image = _render(rng, mask)
        sid = f"{i:05d}#syn#{fam}#{FAMILIES[fam]}#s{spec.seed}"
        samples.append(ImageSample(image=image, gt=mask, category=fam, id=sid))
    return Corpus(samples=samples, categories=list(FAMILIES), resolution=(h, w))


def save_corpus(corpus: Corpus, root: str | Path, split: str) -> Path:
    """Write a corpus in the ``root/split/{im,gt}`` layout plus a class manifest."""
    base = Path(root) / split
    (base / "im").mkdir(parents=True, exist_ok=True)
    (base / "gt").mkdir(parents=True, exist_ok=True)
    for s in corpus.samples:
        img8 = np.clip(np.rint(s.image * 255), 0, 255).astype(np.uint8)
        cv2.imwrite(str(base / "im" / f"{s.id}.png"), cv2.cvtColor(img8, cv2.COLOR_RGB2BGR))
        cv2.imwrite(str(base / "gt" / f"{s.id}.png"), s.gt.astype(np.uint8) * 255)
    write_manifest(Path(root) / "classes.tsv", corpus.categories)
    return base


# ---------------------------------------------------------------------------
# loading


def write_manifest(path: str | Path, categories: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{name}\t{i}\n" for i, name in enumerate(categories)))


def read_manifest(path: str | Path) -> dict[str, int]:
    table = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, idx = line.rsplit("\t", 1)
            table[name] = int(idx)
        except ValueError as e:
            raise CorpusError(f"{path}:{lineno}: expected 'classname<TAB>id'") from e
    return table


def _class_name(stem: str) -> str:
    # DIS5K stems look like "<n>#<group>#<n>#<ClassName>#<photo id>"
    parts = stem.split("#")
    return parts[3] if len(parts) >= 4 else stem


def _listing(d: Path) -> dict[str, Path]:
    out = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTS:
            logger.warning("skipping non-image file %s", p)
            continue
        out[p.stem] = p
    return out


def read_image(path: str | Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise CorpusError(f"unreadable image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def read_gt(path: str | Path) -> np.ndarray:
    gt = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if gt is None:
        raise CorpusError(f"unreadable gt {path}")
    return (gt >= 128).astype(np.uint8)


def load_corpus(root: str | Path, split: str, manifest: str | Path | None = None) -> Corpus:
    root = Path(root)
    im_dir, gt_dir = root / split / "im", root / split / "gt"
    if not im_dir.is_dir() or not gt_dir.is_dir():
        raise CorpusError(f"expected {im_dir} and {gt_dir}")
    ims, gts = _listing(im_dir), _listing(gt_dir)
    unmatched = sorted(set(ims) ^ set(gts))
    if unmatched:
        raise CorpusError(f"unmatched stems in {root / split}: {unmatched}")

    if manifest is None and (root / "classes.tsv").exists():
        manifest = root / "classes.tsv"
    if manifest is not None:
        table = read_manifest(manifest)
        categories = [name for name, _ in sorted(table.items(), key=lambda kv: kv[1])]
    else:
        table, categories = None, ["object"]

    samples = []
    for stem in sorted(ims):
        image, gt = read_image(ims[stem]), read_gt(gts[stem])
        if image.shape[:2] != gt.shape:
            raise CorpusError(f"{stem}: image {image.shape[:2]} and gt {gt.shape} differ in size")
        cat = 0
        if table is not None:
            name = _class_name(stem)
            if name not in table:
                logger.warning("%s: class %r not in manifest, using 0", stem, name)
            cat = table.get(name, 0)
        samples.append(ImageSample(image=image, gt=gt, category=cat, id=stem))
    return Corpus(samples=samples, categories=categories)


# ---------------------------------------------------------------------------
# batches


def resize_pair(image: np.ndarray, gt: np.ndarray, resolution: tuple[int, int]):
    h, w = resolution
    if image.shape[:2] != (h, w):
        image = cv2.resize(image, (w, h), interpolation=cv2.INTER_LINEAR)
    if gt.shape != (h, w):
        gt = cv2.resize(gt, (w, h), interpolation=cv2.INTER_NEAREST)
    return np.clip(image, 0.0, 1.0), (gt >= 0.5).astype(np.uint8)


def make_batch(
    corpus: Corpus,
    indices: Sequence[int],
    resolution: tuple[int, int],
    flip: bool = False,
    rng: np.random.Generator | None = None,
) -> Batch:
    """Resize samples to ``resolution`` and optionally mirror each with p=0.5."""
    indices = list(indices)
    if not indices:
        raise ValueError("make_batch needs at least one index")
    if flip and rng is None:
        raise ValueError("flip=True requires the caller's rng")
    images, gts, labels, ids = [], [], [], []
    for i in indices:
        s = corpus.samples[i]
        image, gt = resize_pair(s.image, s.gt, resolution)
        if flip and rng.random() < 0.5:
            image, gt = image[:, ::-1], gt[:, ::-1]
        images.append(np.ascontiguousarray(image.transpose(2, 0, 1)))
        gts.append(np.ascontiguousarray(gt)[None])
        labels.append(s.category)
        ids.append(s.id)
    return Batch(
        image=torch.from_numpy(np.stack(images)).float(),
        gt=torch.from_numpy(np.stack(gts)).float(),
        label=torch.tensor(labels, dtype=torch.long),
        ids=ids,
    )
