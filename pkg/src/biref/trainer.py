"""Training, IoU fine-tuning, inference and ablation runs."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch

from .datasets import Corpus, make_batch, read_image, resize_pair
from .losses import LossConfig, finetune_loss, hybrid_loss
from .metrics import MetricConfig, evaluate_pair
from .model import STAGES, BiRefNetwork, ModelConfig, load_checkpoint, save_checkpoint
from .references import gradient_map_torch

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    epochs: int = 40
    # None -> ceil(epochs / 30), i.e. "last 20 of 600"
    finetune_epochs: int | None = None
    lr: float = 1e-4
    # multiplicative per-epoch decay; 1.0 keeps the rate constant
    lr_decay: float = 1.0
    batch_size: int = 4
    seed: int = 0
    mss: bool = True
    rlft: bool = True
    # None defers to the model config; a bool overrides use_cff / use_ipt
    cff: bool | None = None
    ipt: bool | None = None
    flip: bool = True
    checkpoint_every: int = 0
    val_limit: int = 64
    val_every: int = 1
    val_hce: bool = False

    @property
    def n_finetune(self) -> int:
        if not self.rlft:
            return 0
        return math.ceil(self.epochs / 30) if self.finetune_epochs is None else self.finetune_epochs

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.finetune_epochs is not None and not 0 <= self.finetune_epochs <= self.epochs:
            raise ValueError("need epochs >= finetune_epochs >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class RunLog:
    """Append-only record of step losses and epoch validation summaries,
    mirrored to a JSON-lines file when a path is given."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")
        self._step = 0

    def _append(self, rec):
        self.records.append(rec)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(rec) + "\n")

    def step(self, epoch, phase, breakdown):
        self._step += 1
        self._append({"type": "step", "step": self._step, "epoch": epoch, "phase": phase, "loss": breakdown})

    def epoch(self, epoch, phase, val, wall, rng):
        self._append({"type": "epoch", "epoch": epoch, "phase": phase, "val": val, "wall": wall, "rng": rng})

    @property
    def steps(self) -> list[dict]:
        return [r for r in self.records if r["type"] == "step"]

    @property
    def epochs(self) -> list[dict]:
        return [r for r in self.records if r["type"] == "epoch"]

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


@dataclass
class TrainResult:
    model: BiRefNetwork
    log: RunLog
    checkpoint: Path | None = None
    history: list[dict] = field(default_factory=list)


def rng_fingerprint() -> str:
    return hashlib.sha1(torch.get_rng_state().numpy().tobytes()).hexdigest()[:12]


def _targets(batch):
    return {"gt": batch.gt, "label": batch.label, "grad": gradient_map_torch(batch.image)}


def resolve_model_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ModelConfig:
    over = {}
    if train_cfg.cff is not None:
        over["use_cff"] = train_cfg.cff
    if train_cfg.ipt is not None:
        over["use_ipt"] = train_cfg.ipt
    return dataclasses.replace(model_cfg, **over) if over else model_cfg


def loss_config_for(train_cfg: TrainConfig, loss_cfg: LossConfig | None) -> LossConfig:
    loss_cfg = copy.deepcopy(loss_cfg) if loss_cfg else LossConfig()
    if not train_cfg.mss:
        loss_cfg.stage_weights = {s: 0.0 for s in STAGES}
    return loss_cfg


@torch.no_grad()
def predict(model: BiRefNetwork, images: Sequence[np.ndarray], batch_size: int = 8) -> list[np.ndarray]:
    """Eval-mode maps, resized bilinearly back to each image's own size."""
    model.eval()
    h, w = model.cfg.resolution
    out = []
    for i in range(0, len(images), batch_size):
        chunk = images[i : i + batch_size]
        x = np.stack([cv2.resize(im, (w, h), interpolation=cv2.INTER_LINEAR) if im.shape[:2] != (h, w) else im for im in chunk])
        m = model(torch.from_numpy(x.transpose(0, 3, 1, 2)).float()).m[:, 0].numpy().astype(np.float64)
        for im, mm in zip(chunk, m):
            if im.shape[:2] != (h, w):
                mm = cv2.resize(mm, (im.shape[1], im.shape[0]), interpolation=cv2.INTER_LINEAR)
            out.append(np.clip(mm, 0.0, 1.0))
    return out


def validate(model, corpus: Corpus, limit: int = 64, metric_cfg: MetricConfig | None = None, with_hce=False) -> dict:
    samples = corpus.samples[:limit]
    preds = predict(model, [s.image for s in samples])
    rows = [evaluate_pair(p, s.gt, metric_cfg, with_hce) for p, s in zip(preds, samples)]
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def mean_entropy(model, corpus: Corpus, limit: int = 64) -> float:
    """Mean binary entropy (nats) of the predicted maps."""
    preds = predict(model, [s.image for s in corpus.samples[:limit]])
    p = np.clip(np.concatenate([m.ravel() for m in preds]), 1e-7, 1 - 1e-7)
    return float(np.mean(-(p * np.log(p) + (1 - p) * np.log(1 - p))))


def _run_epochs(model, opt, corpus, res, train_cfg, loss_cfg, log, epochs, phase, val_corpus, out_dir, history, first_epoch=0):
    rng = np.random.default_rng([train_cfg.seed, first_epoch])
    n = len(corpus)
    last_good = copy.deepcopy(model.state_dict())
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=train_cfg.lr_decay)
    for e in range(first_epoch, first_epoch + epochs):
        model.train()
        t0 = time.time()
        order = rng.permutation(n)
        for b in range(0, n, train_cfg.batch_size):
            batch = make_batch(corpus, order[b : b + train_cfg.batch_size], res, train_cfg.flip, rng)
            targets = _targets(batch)
            preds = model(batch.image)
            if phase == "finetune":
                loss = finetune_loss(preds, targets)
                with torch.no_grad():
                    detached = dataclasses.replace(
                        preds,
                        m=preds.m.detach(),
                        intermediates={k: v.detach() for k, v in preds.intermediates.items()},
                        gradients={k: v.detach() for k, v in preds.gradients.items()},
                        logits=preds.logits.detach(),
                    )
                    record = hybrid_loss(detached, targets, loss_cfg).to_dict()
                record["finetune_iou"] = loss.item()
            else:
                bd = hybrid_loss(preds, targets, loss_cfg)
                loss = bd.total
                record = bd.to_dict()
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                ckpt = None
                if out_dir:
                    ckpt = Path(out_dir) / "last_good.pt"
                    save_checkpoint(ckpt, model, e)
                raise TrainingDiverged(f"non-finite loss at epoch {e}", ckpt)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            log.step(e + 1, phase, record)
        sched.step()
        last_good = copy.deepcopy(model.state_dict())
        val = None
        if val_corpus is not None and len(val_corpus) and (e + 1) % train_cfg.val_every == 0:
            val = validate(model, val_corpus, train_cfg.val_limit, with_hce=train_cfg.val_hce)
            history.append({"epoch": e + 1, "phase": phase, **val})
            logger.info("epoch %d (%s) fmax=%.4f fw=%.4f mae=%.4f", e + 1, phase, val["fmax"], val["fw"], val["mae"])
        log.epoch(e + 1, phase, val, time.time() - t0, rng_fingerprint())
        if out_dir and train_cfg.checkpoint_every and (e + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(Path(out_dir) / f"epoch{e + 1:04d}.pt", model, e + 1)


def train(
    corpus: Corpus,
    val_corpus: Corpus | None,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    if not len(corpus):
        raise ValueError("training corpus is empty")
    model_cfg = resolve_model_config(model_cfg, train_cfg)
    model_cfg.validate()
    train_cfg.validate()
    loss_cfg = loss_config_for(train_cfg, loss_cfg)
    loss_cfg.validate()
    torch.manual_seed(train_cfg.seed)
    model = BiRefNetwork(model_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    log = RunLog(Path(out_dir) / "runlog.jsonl" if out_dir else None)
    res = tuple(model_cfg.resolution)
    history: list[dict] = []
    n_ft = train_cfg.n_finetune
    _run_epochs(model, opt, corpus, res, train_cfg, loss_cfg, log, train_cfg.epochs - n_ft, "train", val_corpus, out_dir, history)
    if n_ft:
        opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
        _run_epochs(
            model, opt, corpus, res, train_cfg, loss_cfg, log, n_ft, "finetune", val_corpus, out_dir, history,
            first_epoch=train_cfg.epochs - n_ft,
        )
    ckpt = None
    if out_dir:
        ckpt = Path(out_dir) / "final.pt"
        save_checkpoint(ckpt, model, train_cfg.epochs, {"train_config": dataclasses.asdict(train_cfg)})
    return TrainResult(model=model, log=log, checkpoint=ckpt, history=history)


def finetune(
    checkpoint: str | Path | BiRefNetwork,
    corpus: Corpus,
    train_cfg: TrainConfig,
    epochs: int,
    val_corpus: Corpus | None = None,
    out_dir: str | Path | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """IoU-only fine-tuning of an existing model for ``epochs`` epochs."""
    if isinstance(checkpoint, BiRefNetwork):
        model = copy.deepcopy(checkpoint)
    else:
        model, meta = load_checkpoint(checkpoint)
        start_epoch = meta.get("epoch", start_epoch)
    torch.manual_seed(train_cfg.seed + 1)
    log = RunLog(Path(out_dir) / "finetune_runlog.jsonl" if out_dir else None)
    history: list[dict] = []
    if epochs > 0:
        opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
        loss_cfg = loss_config_for(train_cfg, None)
        _run_epochs(
            model, opt, corpus, tuple(model.cfg.resolution), train_cfg, loss_cfg, log, epochs, "finetune",
            val_corpus, out_dir, history, first_epoch=start_epoch,
        )
    ckpt = None
    if out_dir:
        ckpt = Path(out_dir) / "finetuned.pt"
        save_checkpoint(ckpt, model, start_epoch + epochs, {"finetune_epochs": epochs})
    return TrainResult(model=model, log=log, checkpoint=ckpt, history=history)


def infer(checkpoint: str | Path | BiRefNetwork, images: Sequence[str | Path], out_dir: str | Path) -> tuple[list[Path], list[str]]:
    """Write one 8-bit PNG per readable input, at the input's own size."""
    model = checkpoint if isinstance(checkpoint, BiRefNetwork) else load_checkpoint(checkpoint)[0]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, skipped = [], []
    for path in images:
        path = Path(path)
        try:
            image = read_image(path)
        except Exception as e:  # noqa: BLE001 - any decoder failure means skip
            logger.warning("skipping %s: %s", path, e)
            skipped.append(str(path))
            continue
        m = predict(model, [image])[0]
        target = out_dir / f"{path.stem}.png"
        cv2.imwrite(str(target), np.clip(np.rint(m * 255), 0, 255).astype(np.uint8))
        written.append(target)
    return written, skipped


# ---------------------------------------------------------------------------
# ablation

MODEL_FLAGS = {"rm": "use_rm", "inref": "use_inref", "outref": "use_outref"}
TRAIN_FLAGS = {"mss": "mss", "rlft": "rlft", "cff": "cff", "ipt": "ipt"}
ABLATION_COLUMNS = ("fmax", "fw", "mae", "sm", "emean", "fmean", "emax")


def parse_flag(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"not an on/off value: {value!r}")


def parse_grid(spec: Sequence[str]) -> dict[str, list[bool]]:
    """``["mss=on,off", "inref=on,off"]`` -> {"mss": [True, False], ...}."""
    grid = {}
    for item in spec:
        key, _, vals = item.partition("=")
        key = key.strip()
        if key not in MODEL_FLAGS and key not in TRAIN_FLAGS:
            raise ValueError(f"unknown ablation flag {key!r}; expected one of {sorted({**MODEL_FLAGS, **TRAIN_FLAGS})}")
        grid[key] = [parse_flag(v) for v in vals.split(",") if v.strip()]
        if not grid[key]:
            raise ValueError(f"no values for {key!r}")
    return grid


def variant_name(flags: dict[str, bool]) -> str:
    return " ".join(f"{k}={'on' if v else 'off'}" for k, v in flags.items()) or "base"


def apply_flags(model_cfg: ModelConfig, train_cfg: TrainConfig, flags: dict[str, bool]):
    m = dataclasses.replace(model_cfg, **{MODEL_FLAGS[k]: v for k, v in flags.items() if k in MODEL_FLAGS})
    t = dataclasses.replace(train_cfg, **{TRAIN_FLAGS[k]: v for k, v in flags.items() if k in TRAIN_FLAGS})
    return m, t


@dataclass
class AblationResult:
    rows: list[dict]
    histories: dict[tuple[str, int], list[dict]]

    def summary(self) -> list[dict]:
        out = []
        for name in dict.fromkeys(r["variant"] for r in self.rows):
            rs = [r for r in self.rows if r["variant"] == name]
            row = {"variant": name, "seeds": len(rs)}
            for c in ABLATION_COLUMNS:
                vals = np.array([r[c] for r in rs])
                row[c] = float(vals.mean())
                row[f"{c}_std"] = float(vals.std())
                row[f"{c}_median"] = float(np.median(vals))
            out.append(row)
        return out

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cpath, tpath = out_dir / "ablation.csv", out_dir / "ablation.txt"
        cols = ["variant", "seed", *ABLATION_COLUMNS]
        with cpath.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.rows)
        tpath.write_text(format_table(self.summary()))
        return cpath, tpath


def format_table(summary: list[dict]) -> str:
    head = ["variant", "n", "Fmax", "Fw", "MAE", "Sm", "Emean"]
    keys = ["fmax", "fw", "mae", "sm", "emean"]
    lines = [[r["variant"], str(r["seeds"])] + [f"{r[k]:.3f}±{r[k + '_std']:.3f}" for k in keys] for r in summary]
    widths = [max(len(x) for x in col) for col in zip(head, *lines)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*head)] + [fmt.format(*ln) for ln in lines]) + "\n"


def ablate(
    grid: dict[str, list[bool]],
    corpus: Corpus,
    val_corpus: Corpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    loss_cfg: LossConfig | None = None,
    variants: Sequence[dict[str, bool]] | None = None,
) -> AblationResult:
    """Train each flag combination once per seed and evaluate on ``val_corpus``.

    ``variants`` lists explicit flag sets; otherwise the full cartesian grid is run."""
    if variants is None:
        keys = list(grid)
        variants = [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    rows, histories = [], {}
    for flags in variants:
        name = variant_name(flags)
        m_cfg, t_cfg = apply_flags(model_cfg, train_cfg, flags)
        for seed in seeds:
            t = dataclasses.replace(t_cfg, seed=seed)
            result = train(corpus, val_corpus, m_cfg, t, loss_cfg)
            final = validate(result.model, val_corpus, t.val_limit)
            rows.append({"variant": name, "seed": seed, **final})
            histories[(name, seed)] = result.history
            logger.info("%s seed=%d fmax=%.4f fw=%.4f", name, seed, final["fmax"], final["fw"])
    return AblationResult(rows=rows, histories=histories)
