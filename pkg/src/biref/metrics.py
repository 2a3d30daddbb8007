"""Binary-map quality metrics: S-measure, max/mean/weighted F-measure,
max/mean E-measure, MAE and an approximate relaxed HCE, plus corpus
evaluation with JSON/CSV reports.

Predictions are real maps in [0, 1]; ground truths are binary. Threshold
sweeps quantise predictions to 256 levels and use the 255 thresholds that
separate them (``q >= t`` for t = 1..255).
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

# Report column order: max F, weighted F, MAE, S, mean E, HCE; then the rest.
REPORT_COLUMNS = ("fmax", "fw", "mae", "sm", "emean", "hce", "fmean", "emax")
HCE_LABEL = "HCE-approx"


@dataclass
class MetricConfig:
    alpha: float = 0.5
    beta2: float = 0.3
    # beta^2 of the weighted F-measure (reference tools default to 1)
    wfm_beta2: float = 1.0
    levels: int = 256
    gamma: int = 5
    hce_epsilon: float = 2.0

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.beta2 <= 0 or self.wfm_beta2 <= 0:
            raise ValueError("beta2 must be > 0")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "MetricConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown metrics config keys: {sorted(unknown)}")
        return cls(**d)


def _prep(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and gt {gt.shape} differ in shape")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("gt must be binary {0, 1}")
    return pred, gt.astype(bool)


def quantize(pred: np.ndarray, levels: int = 256) -> np.ndarray:
    return np.clip(np.floor(np.asarray(pred, dtype=np.float64) * (levels - 1) + 0.5), 0, levels - 1).astype(np.int64)


# ---------------------------------------------------------------------------
# MAE


def mae(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


# ---------------------------------------------------------------------------
# S-measure


def _s_object(values: np.ndarray) -> float:
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * x / (x * x + 1.0 + sigma)


def _object_score(pred, gt) -> float:
    n_fg = int(gt.sum())
    n_bg = gt.size - n_fg
    return (n_fg * _s_object(pred[gt]) + n_bg * _s_object(1.0 - pred[~gt])) / gt.size


def _block_ssim(pred, gt) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    denom = max(n - 1, 1)
    sx = np.sum((pred - x) ** 2) / denom
    sy = np.sum((gt - y) ** 2) / denom
    sxy = np.sum((pred - x) * (gt - y)) / denom
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / b
    return 1.0 if b == 0 else 0.0


def _centroid(gt) -> tuple[int, int]:
    # 1-based split point, as in the reference implementation
    ys, xs = np.nonzero(gt)
    return int(np.rint(xs.mean())) + 1, int(np.rint(ys.mean())) + 1


def _region_score(pred, gt) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    g = gt.astype(np.float64)
    total = 0.0
    for rs, cs in ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)), (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))):
        pb, gb = pred[rs, cs], g[rs, cs]
        if pb.size:
            total += pb.size * _block_ssim(pb, gb)
    return total / gt.size


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prep(pred, gt)
    fg = gt.mean()
    if fg == 0:
        return float(1.0 - pred.mean())
    if fg == 1:
        return float(pred.mean())
    so, sr = _object_score(pred, gt), _region_score(pred, gt)
    return float(max(0.0, sr + alpha * (so - sr)))


# ---------------------------------------------------------------------------
# threshold sweeps


def _sweep_counts(pred, gt, levels):
    """Per threshold t=1..levels-1: predicted positives and true positives."""
    q = quantize(pred, levels)
    hist_all = np.bincount(q.ravel(), minlength=levels)
    hist_fg = np.bincount(q[gt].ravel(), minlength=levels)
    # count of q >= t
    pos = np.cumsum(hist_all[::-1])[::-1][1:]
    tp = np.cumsum(hist_fg[::-1])[::-1][1:]
    return pos.astype(np.float64), tp.astype(np.float64)


def f_curve(pred, gt, beta2=0.3, levels=256) -> np.ndarray:
    pred, gt = _prep(pred, gt)
    pos, tp = _sweep_counts(pred, gt, levels)
    n_gt = float(gt.sum())
    if n_gt == 0:
        return (pos == 0).astype(np.float64)
    precision = np.divide(tp, pos, out=np.zeros_like(tp), where=pos > 0)
    recall = tp / n_gt
    num = (1 + beta2) * precision * recall
    den = beta2 * precision + recall
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _nearest_foreground(gt: np.ndarray):
    """Distance to, and coordinates of, the nearest foreground pixel; ties go
    to the first candidate in row-major order."""
    h, w = gt.shape
    dist, (iy, ix) = ndimage.distance_transform_edt(~gt, return_indices=True)
    iy, ix = iy.copy(), ix.copy()
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (iy - yy) ** 2 + (ix - xx) ** 2
    bg = np.flatnonzero(~gt.ravel() & (d2.ravel() > 0))
    if bg.size == 0:
        return dist, iy, ix
    pd2 = d2.ravel()[bg]
    shells = np.unique(pd2)
    r = int(np.ceil(np.sqrt(shells.max())))
    oy, ox = np.mgrid[-r : r + 1, -r : r + 1]
    oy, ox = oy.ravel(), ox.ravel()
    od2 = oy * oy + ox * ox
    keep = np.isin(od2, shells)
    oy, ox, od2 = oy[keep], ox[keep], od2[keep]
    order = np.lexsort((ox, oy, od2))
    oy, ox, od2 = oy[order], ox[order], od2[order]
    start = np.searchsorted(od2, shells)
    count = np.searchsorted(od2, shells, side="right") - start
    k = np.searchsorted(shells, pd2)
    reps = count[k]
    pix = np.repeat(np.arange(bg.size), reps)
    # offset index for each candidate: start of its shell + position within it
    within = np.arange(pix.size) - np.repeat(np.cumsum(reps) - reps, reps)
    off = np.repeat(start[k], reps) + within
    cy = bg[pix] // w + oy[off]
    cx = bg[pix] % w + ox[off]
    ok = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
    ok[ok] = gt[cy[ok], cx[ok]]
    first_pix, first = np.unique(pix[ok], return_index=True)
    sel = np.flatnonzero(ok)[first]
    flat_y, flat_x = iy.ravel(), ix.ravel()
    flat_y[bg[first_pix]] = cy[sel]
    flat_x[bg[first_pix]] = cx[sel]
    return dist, flat_y.reshape(h, w), flat_x.reshape(h, w)


def _matlab_gaussian(size=7, sigma=5.0) -> np.ndarray:
    m = (size - 1) / 2.0
    y, x = np.ogrid[-m : m + 1, -m : m + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    return k / k.sum()


def weighted_f_measure(pred, gt, beta2: float = 1.0) -> float:
    pred, gt = _prep(pred, gt)
    if not gt.any():
        return float(1.0 - pred.mean())
    dist, iy, ix = _nearest_foreground(gt)
    g = gt.astype(np.float64)
    err = np.abs(pred - g)
    et = err.copy()
    et[~gt] = err[iy[~gt], ix[~gt]]
    ea = ndimage.convolve(et, _matlab_gaussian(), mode="constant", cval=0.0)
    min_e = np.where(gt & (ea < err), ea, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e * importance
    tpw = g.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1.0 - ew[gt].mean()
    precision = tpw / (tpw + fpw) if tpw + fpw > 0 else 0.0
    den = recall + beta2 * precision
    return float((1 + beta2) * recall * precision / den) if den > 0 else 0.0


def f_measures(pred, gt, cfg: MetricConfig | None = None) -> dict[str, float]:
    cfg = cfg or MetricConfig()
    curve = f_curve(pred, gt, cfg.beta2, cfg.levels)
    return {
        "max": float(curve.max()),
        "mean": float(curve.mean()),
        "weighted": weighted_f_measure(pred, gt, cfg.wfm_beta2),
    }


def e_curve(pred, gt, levels=256) -> np.ndarray:
    pred, gt = _prep(pred, gt)
    n = float(gt.size)
    pos, tp = _sweep_counts(pred, gt, levels)
    n_gt = float(gt.sum())
    if n_gt == 0:
        return (n - pos) / n
    if n_gt == n:
        return pos / n
    mu_g = n_gt / n
    mu_p = pos / n
    fp = pos - tp
    fn = n_gt - tp
    tn = n - pos - fn
    total = np.zeros_like(pos)
    for count, a, b in (
        (tp, 1 - mu_p, 1 - mu_g),
        (fp, 1 - mu_p, -mu_g),
        (fn, -mu_p, 1 - mu_g),
        (tn, -mu_p, -mu_g),
    ):
        align = 2 * a * b / (a * a + b * b)
        total += (align + 1) ** 2 / 4 * count
    return total / n


def e_measures(pred, gt, cfg: MetricConfig | None = None) -> dict[str, float]:
    cfg = cfg or MetricConfig()
    curve = e_curve(pred, gt, cfg.levels)
    return {"max": float(curve.max()), "mean": float(curve.mean())}


# ---------------------------------------------------------------------------
# relaxed HCE (approximation: tolerance erosion, components, dominant points)

_DIRS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))
_DIR_INDEX = {d: i for i, d in enumerate(_DIRS)}


def trace_boundary(mask: np.ndarray) -> list[tuple[int, int]]:
    """Clockwise Moore-neighbour trace of a single 8-connected component,
    starting at its first pixel in row-major order."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return []
    h, w = mask.shape
    start = (int(ys[0]), int(xs[0]))

    def inside(p):
        return 0 <= p[0] < h and 0 <= p[1] < w and mask[p]

    ring = [start]
    c, back = start, 4  # west of the start pixel is background
    first_move = None
    for _ in range(8 * int(mask.sum()) + 8):
        for k in range(1, 9):
            d = (back + k) % 8
            n = (c[0] + _DIRS[d][0], c[1] + _DIRS[d][1])
            if inside(n):
                break
        else:
            return ring  # isolated pixel
        if c == start and first_move is not None and d == first_move:
            ring.pop()
            return ring
        if first_move is None:
            first_move = d
        prev = _DIRS[(d - 1) % 8]
        back = _DIR_INDEX[(prev[0] - _DIRS[d][0], prev[1] - _DIRS[d][1])]
        c = n
        ring.append(c)
    raise RuntimeError("boundary trace did not terminate")


def _dp_keep(pts: np.ndarray, tol2: int) -> np.ndarray:
    """Douglas-Peucker on integer points with exact integer comparisons."""
    keep = np.zeros(len(pts), bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        a, b = pts[i], pts[j]
        seg = pts[i + 1 : j]
        ab = b - a
        l2 = int(ab @ ab)
        pa, pb = seg - a, seg - b
        da, db = (pa * pa).sum(1), (pb * pb).sum(1)
        if l2 == 0:
            key, thr = da, tol2
        else:
            perp = ((pa @ ab) > 0) & ((pb @ -ab) > 0)
            cross = pa[:, 0] * ab[1] - pa[:, 1] * ab[0]
            key = np.where(perp, cross * cross, np.minimum(da, db) * l2)
            thr = tol2 * l2
        m = int(np.argmax(key))
        if key[m] > thr:
            k = i + 1 + m
            keep[k] = True
            stack.append((k, j))
            stack.append((i, k))
    return keep


def dominant_points(ring: list[tuple[int, int]], epsilon: float = 2.0) -> int:
    if len(ring) <= 1:
        return len(ring)
    pts = np.array(ring + [ring[0]], dtype=np.int64)
    tol2 = int(round(epsilon * epsilon))
    return int(_dp_keep(pts, tol2)[:-1].sum())


def _erode(mask: np.ndarray, gamma: int) -> np.ndarray:
    if gamma == 0:
        return mask
    size = 2 * gamma + 1
    return ndimage.binary_erosion(mask, structure=np.ones((size, size), bool), border_value=1)


def relax_hce(pred, gt, gamma: int = 5, epsilon: float = 2.0) -> int:
    pred, gt = _prep(pred, gt)
    binary = pred > 0.5
    clicks = 0
    for err in (binary & ~gt, ~binary & gt):
        err = _erode(err, gamma)
        labels, n = ndimage.label(err, structure=np.ones((3, 3), bool))
        clicks += n
        for sl, idx in zip(ndimage.find_objects(labels), range(1, n + 1)):
            ring = trace_boundary(labels[sl] == idx)
            clicks += dominant_points(ring, epsilon)
    return clicks


# ---------------------------------------------------------------------------
# per-image and corpus evaluation


def evaluate_pair(pred, gt, cfg: MetricConfig | None = None, with_hce: bool = True) -> dict[str, float]:
    cfg = cfg or MetricConfig()
    fm = f_measures(pred, gt, cfg)
    em = e_measures(pred, gt, cfg)
    out = {
        "sm": s_measure(pred, gt, cfg.alpha),
        "fmax": fm["max"],
        "fmean": fm["mean"],
        "fw": fm["weighted"],
        "emax": em["max"],
        "emean": em["mean"],
        "mae": mae(pred, gt),
    }
    if with_hce:
        out["hce"] = relax_hce(pred, gt, cfg.gamma, cfg.hce_epsilon)
    return out


@dataclass
class MetricReport:
    per_image: list[dict]
    config: dict
    missing: list[str] = field(default_factory=list)

    @property
    def summary(self) -> dict:
        out = {"count": len(self.per_image), "missing": len(self.missing)}
        if not self.per_image:
            return out
        for key in REPORT_COLUMNS:
            vals = [r[key] for r in self.per_image if key in r]
            if vals:
                out[key] = float(np.mean(vals))
        if any("hce" in r for r in self.per_image):
            out["hce_sum"] = int(sum(r["hce"] for r in self.per_image))
            out["hce_label"] = HCE_LABEL
        return out

    def to_json(self) -> dict:
        return {"config": self.config, "per_image": self.per_image, "summary": self.summary, "missing": self.missing}

    def write(self, out_dir: str | Path, name: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out_dir / f"{name}.json", out_dir / f"{name}.csv"
        jpath.write_text(json.dumps(self.to_json(), indent=2))
        cols = [c for c in REPORT_COLUMNS if any(c in r for r in self.per_image)] or list(REPORT_COLUMNS)
        with cpath.open("w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["id"] + [HCE_LABEL if c == "hce" else c for c in cols])
            for r in self.per_image:
                wr.writerow([r["id"]] + [r.get(c, "") for c in cols])
            s = self.summary
            wr.writerow(["mean"] + [s.get(c, "") for c in cols])
        return jpath, cpath


def _image_files(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}}


def evaluate_corpus(pred_dir, gt_dir, cfg: MetricConfig | None = None, with_hce: bool = True) -> MetricReport:
    """Pair maps by file stem; predictions are resized bilinearly to the gt size."""
    cfg = cfg or MetricConfig()
    cfg.validate()
    preds, gts = _image_files(Path(pred_dir)), _image_files(Path(gt_dir))
    missing = sorted(set(preds) ^ set(gts))
    for stem in missing:
        logger.warning("unpaired file: %s", stem)
    rows = []
    for stem in sorted(set(preds) & set(gts)):
        gt = cv2.imread(str(gts[stem]), cv2.IMREAD_GRAYSCALE)
        pred = cv2.imread(str(preds[stem]), cv2.IMREAD_GRAYSCALE)
        if gt is None or pred is None:
            logger.warning("unreadable pair: %s", stem)
            missing.append(stem)
            continue
        if pred.shape != gt.shape:
            pred = cv2.resize(pred, (gt.shape[1], gt.shape[0]), interpolation=cv2.INTER_LINEAR)
        row = {"id": stem}
        row.update(evaluate_pair(pred.astype(np.float64) / 255.0, (gt >= 128).astype(np.uint8), cfg, with_hce))
        rows.append(row)
    config = dataclasses.asdict(cfg)
    config["hce_variant"] = HCE_LABEL
    return MetricReport(per_image=rows, config=config, missing=missing)
