import copy
import csv
import dataclasses

import cv2
import numpy as np
import pytest
import torch

from biref.datasets import SyntheticSpec, generate_synthetic_corpus, make_batch
from biref.losses import iou_loss
from biref.model import BiRefNetwork, ModelConfig, load_checkpoint, save_checkpoint
from biref.trainer import (
    RunLog,
    TrainConfig,
    TrainingDiverged,
    ablate,
    finetune,
    infer,
    parse_grid,
    predict,
    train,
)

MCFG = ModelConfig(widths=(8, 16, 24, 32), resolution=(64, 64))


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(SyntheticSpec(count=8, canvas=(64, 64), seed=5))


def _cfg(**kw):
    base = dict(epochs=1, batch_size=4, lr=1e-3, seed=0, rlft=False, flip=False)
    base.update(kw)
    return TrainConfig(**base)


def test_one_epoch_one_step(corpus):
    r = train(corpus.subset(range(4)), None, MCFG, _cfg())
    assert len(r.log.steps) == 1 and len(r.log.epochs) == 1


def test_first_ten_losses_reproducible(corpus):
    cfg = _cfg(epochs=5, batch_size=2, flip=True, rlft=True)
    a = train(corpus, None, MCFG, cfg).log.steps
    b = train(corpus, None, MCFG, cfg).log.steps
    assert len(a) >= 10
    assert [s["loss"] for s in a[:10]] == [s["loss"] for s in b[:10]]
    assert [s["step"] for s in a] == list(range(1, len(a) + 1))


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(epochs=2, finetune_epochs=3).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr=0).validate()
    assert TrainConfig(epochs=600).n_finetune == 20
    assert TrainConfig(epochs=40).n_finetune == 2
    assert TrainConfig(epochs=40, rlft=False).n_finetune == 0
    with pytest.raises(ValueError):
        train(generate_synthetic_corpus(SyntheticSpec(count=1, canvas=(64, 64))).subset([]), None, MCFG, _cfg())


def test_mss_off_zeroes_stage_terms(corpus):
    r = train(corpus.subset(range(4)), None, MCFG, _cfg(mss=False))
    assert r.log.steps[0]["loss"]["stages"] == {}
    r = train(corpus.subset(range(4)), None, MCFG, _cfg(mss=True))
    assert set(r.log.steps[0]["loss"]["stages"]) == {"3", "2", "1"}


def test_rlft_phase_flags(corpus):
    r = train(corpus.subset(range(4)), corpus.subset(range(4, 8)), MCFG, _cfg(epochs=4, finetune_epochs=2, rlft=True))
    phases = [s["phase"] for s in r.log.steps]
    assert phases == ["train", "train", "finetune", "finetune"]
    ft = r.log.steps[-1]["loss"]
    assert "finetune_iou" in ft and {"bce", "ssim", "ce"} <= set(ft["terms"])
    assert [h["phase"] for h in r.history] == phases


def test_cff_ipt_flags_reach_model(corpus):
    r = train(corpus.subset(range(4)), None, MCFG, _cfg(cff=True, ipt=True))
    assert r.model.cfg.use_cff and r.model.cfg.use_ipt


def test_finetune_step_is_iou_only(corpus):
    sub = corpus.subset(range(4))
    torch.manual_seed(0)
    model = BiRefNetwork(MCFG)
    cfg = _cfg()
    tuned = finetune(model, sub, cfg, epochs=1).model

    manual = copy.deepcopy(model)
    manual.train()
    opt = torch.optim.Adam(manual.parameters(), lr=cfg.lr)
    order = np.random.default_rng([cfg.seed, 0]).permutation(4)
    batch = make_batch(sub, order, MCFG.resolution)
    loss = iou_loss(manual(batch.image).m, batch.gt)
    opt.zero_grad()
    loss.backward()
    opt.step()
    a, b = tuned.state_dict(), manual.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    # the class head gets no gradient from the IoU objective
    assert torch.equal(tuned.classifier.fc.weight, model.classifier.fc.weight)
    assert not torch.equal(tuned.final.weight, model.final.weight)
    probe = torch.rand(2, sum(MCFG.widths), 2, 2)
    assert torch.equal(tuned.classify(probe), model.classify(probe))


def test_zero_finetune_epochs_keeps_weights(tmp_path, corpus):
    model = BiRefNetwork(MCFG)
    save_checkpoint(tmp_path / "in.pt", model, epoch=7)
    r = finetune(tmp_path / "in.pt", corpus, _cfg(), epochs=0, out_dir=tmp_path / "ft")
    back, meta = load_checkpoint(r.checkpoint)
    a, b = model.state_dict(), back.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert meta["epoch"] == 7 and meta["extra"] == {"finetune_epochs": 0}


def test_checkpoint_cadence_and_runlog_file(tmp_path, corpus):
    r = train(corpus.subset(range(4)), corpus.subset(range(4, 6)), MCFG, _cfg(epochs=4, checkpoint_every=2), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("epoch*.pt")) == ["epoch0002.pt", "epoch0004.pt"]
    assert (tmp_path / "final.pt").exists() and r.checkpoint == tmp_path / "final.pt"
    recs = RunLog.read(tmp_path / "runlog.jsonl")
    assert recs == r.log.records
    assert [e["epoch"] for e in recs if e["type"] == "epoch"] == [1, 2, 3, 4]
    assert all(e["val"] is not None and "fw" in e["val"] for e in recs if e["type"] == "epoch")
    assert all(isinstance(e["rng"], str) and e["wall"] >= 0 for e in recs if e["type"] == "epoch")


def test_divergence_aborts_with_last_good(tmp_path, corpus):
    bad = copy.deepcopy(corpus.subset(range(4)))
    bad.samples[0].image = np.full_like(bad.samples[0].image, np.nan)
    with pytest.raises(TrainingDiverged) as info:
        train(bad, None, MCFG, _cfg(), out_dir=tmp_path)
    assert info.value.checkpoint is not None and info.value.checkpoint.exists()
    model, _ = load_checkpoint(info.value.checkpoint)
    assert all(torch.isfinite(p).all() for p in model.parameters())


def test_infer_sizes_and_skips(tmp_path, corpus):
    model = BiRefNetwork(MCFG).eval()
    save_checkpoint(tmp_path / "m.pt", model)
    same = (corpus.samples[0].image * 255).astype(np.uint8)
    cv2.imwrite(str(tmp_path / "same.png"), same)
    big = np.random.default_rng(0).integers(0, 255, (2000, 3000, 3), dtype=np.uint8)
    cv2.imwrite(str(tmp_path / "big.jpg"), big)
    (tmp_path / "broken.png").write_bytes(b"not an image")
    written, skipped = infer(tmp_path / "m.pt", [tmp_path / "same.png", tmp_path / "big.jpg", tmp_path / "broken.png"], tmp_path / "out")
    assert [p.name for p in written] == ["same.png", "big.png"]
    assert skipped == [str(tmp_path / "broken.png")]
    out_big = cv2.imread(str(tmp_path / "out" / "big.png"), cv2.IMREAD_UNCHANGED)
    assert out_big.shape == (2000, 3000) and out_big.dtype == np.uint8
    # training-size input: the map is the raw eval output, only quantized
    from biref.datasets import read_image

    direct = predict(model, [read_image(tmp_path / "same.png")])[0]
    out_same = cv2.imread(str(tmp_path / "out" / "same.png"), cv2.IMREAD_UNCHANGED)
    assert np.array_equal(out_same, np.rint(direct * 255).astype(np.uint8))


def test_parse_grid():
    assert parse_grid(["mss=on,off", "inref=off"]) == {"mss": [True, False], "inref": [False]}
    with pytest.raises(ValueError):
        parse_grid(["dropout=on"])
    with pytest.raises(ValueError):
        parse_grid(["mss=maybe"])


def test_ablate_rows_and_table(tmp_path, corpus):
    res = ablate({"inref": [True, False]}, corpus.subset(range(4)), corpus.subset(range(4, 6)), MCFG, _cfg(), seeds=(0, 1, 2))
    assert [(r["variant"], r["seed"]) for r in res.rows] == [
        ("inref=on", 0), ("inref=on", 1), ("inref=on", 2), ("inref=off", 0), ("inref=off", 1), ("inref=off", 2)
    ]
    summary = res.summary()
    assert [s["variant"] for s in summary] == ["inref=on", "inref=off"]
    cpath, tpath = res.write(tmp_path)
    with cpath.open() as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 6 and rows[0]["variant"] == "inref=on"
    lines = tpath.read_text().splitlines()
    assert len(lines) == 3 and "±" in lines[1]
    # aligned columns: every row starts its metric columns at the header's offsets
    col = lines[0].index("Fmax")
    assert all(ln[col - 2 : col] == "  " and ln[col] != " " for ln in lines[1:])
