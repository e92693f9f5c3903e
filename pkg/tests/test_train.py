import hashlib
import math

import numpy as np
import pytest
import torch

from vqlab.core import Box
from vqlab.features import FeatureExtractor, Proposal, ProposalSet
from vqlab.heads import HeadConfig, HeadOutput, QueryConditionedHead
from vqlab.sampling import SamplerConfig
from vqlab.train import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    box_deltas,
    fit,
    load_checkpoint,
    loss,
    proposal_labels,
    save_checkpoint,
)

torch.set_default_dtype(torch.float64)


def scalar_loss_oracle(scores, labels, cap=10.0):
    """Plain-python weighted BCE matching the vectorized implementation."""
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    pos_w = min(n_neg / n_pos, cap) if n_pos else 1.0
    eps = 1e-7
    total = 0.0
    for s, y in zip(scores, labels):
        s = min(max(s, eps), 1.0 - eps)
        term = -(math.log(s) if y else math.log(1.0 - s))
        total += (pos_w if y else 1.0) * term
    return total / len(labels)


def _output(scores):
    return HeadOutput(scores=torch.tensor(scores, dtype=torch.float64), deltas=None)


def test_bce_at_half_is_ln2():
    pset = ProposalSet(0, (Proposal(Box(0, 0, 2, 2), 1.0),))
    value = loss(_output([0.5]), [False], None, pset)
    assert float(value) == pytest.approx(math.log(2.0), abs=1e-12)


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        scores = rng.uniform(0.01, 0.99, n).tolist()
        labels = [bool(rng.random() < 0.4) for _ in range(n)]
        pset = ProposalSet(0, tuple(Proposal(Box(0, 0, 2, 2), 0.5) for _ in range(n)))
        got = float(loss(_output(scores), labels, None, pset))
        want = scalar_loss_oracle(scores, labels)
        assert got == pytest.approx(want, abs=1e-12)


def test_loss_box_term_on_positives():
    gt = Box(0, 0, 10, 10)
    prop = Box(1, 1, 10, 10)
    pset = ProposalSet(0, (Proposal(prop, 0.9),))
    deltas = torch.zeros(1, 4)
    out = HeadOutput(scores=torch.tensor([0.9]), deltas=deltas)
    value = float(loss(out, [True], gt, pset))
    target = box_deltas(prop, gt)
    expected_box = float(torch.where(target.abs() < 1, 0.5 * target**2, target.abs() - 0.5).sum())
    expected_cls = scalar_loss_oracle([0.9], [True])
    assert value == pytest.approx(expected_cls + expected_box, abs=1e-12)


def test_box_deltas_identity():
    b = Box(3, 4, 10, 12)
    assert torch.allclose(box_deltas(b, b), torch.zeros(4))


def test_box_deltas_round_trip():
    from vqlab.heads import apply_deltas

    prop = Box(10, 10, 8, 8)
    gt = Box(12, 9, 10, 7)
    d = box_deltas(prop, gt).unsqueeze(0)
    (recovered,) = apply_deltas([prop], d, 64, 64)
    assert recovered.x == pytest.approx(gt.x, abs=1e-9)
    assert recovered.y == pytest.approx(gt.y, abs=1e-9)
    assert recovered.w == pytest.approx(gt.w, abs=1e-9)
    assert recovered.h == pytest.approx(gt.h, abs=1e-9)


def test_proposal_labels_threshold():
    gt = Box(0, 0, 10, 10)
    pset = ProposalSet(0, (Proposal(gt, 1.0), Proposal(Box(30, 30, 5, 5), 0.5)))
    assert proposal_labels(pset, gt) == [True, False]
    assert proposal_labels(pset, None) == [False, False]


def test_lr_schedule():
    cfg = TrainConfig(decay_steps=(10, 20), learning_rate=0.02, decay_factor=0.1, total_steps=1)
    assert cfg.lr_at(0) == pytest.approx(0.02)
    assert cfg.lr_at(10) == pytest.approx(0.002)
    assert cfg.lr_at(25) == pytest.approx(0.0002)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(decay_factor=0.0)


def _quick_config(**kw):
    defaults = dict(
        total_steps=30,
        batch_size=4,
        decay_steps=(20,),
        sampler=SamplerConfig(nufs_enabled=True),
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_fit_reduces_loss(small_dataset):
    _, dataset = small_dataset
    result = fit(dataset, _quick_config(total_steps=60))
    assert result.steps == 60
    first = result.loss_history[0][1]
    last = result.loss_history[-1][1]
    assert last < first


def test_fit_deterministic(small_dataset):
    _, dataset = small_dataset
    a = fit(dataset, _quick_config())
    b = fit(dataset, _quick_config())
    for pa, pb in zip(a.head.parameters(), b.head.parameters()):
        assert torch.equal(pa, pb)
    assert a.loss_history == b.loss_history


def test_fit_seed_changes_outcome(small_dataset):
    _, dataset = small_dataset
    a = fit(dataset, _quick_config(seed=0))
    b = fit(dataset, _quick_config(seed=1))
    assert any(
        not torch.equal(pa, pb) for pa, pb in zip(a.head.parameters(), b.head.parameters())
    )


def test_fit_divergence_raises(small_dataset):
    _, dataset = small_dataset
    with pytest.raises(TrainingDiverged):
        fit(dataset, _quick_config(learning_rate=1e9, total_steps=30))


def test_checkpoint_round_trip_bit_exact(tmp_path, small_dataset):
    _, dataset = small_dataset
    config = _quick_config(total_steps=10)
    result = fit(dataset, config)
    p1 = tmp_path / "a.zip"
    p2 = tmp_path / "b.zip"
    save_checkpoint(p1, result.head, result.extractor, step=10, train_config=config)
    head, extractor, manifest = load_checkpoint(p1)
    save_checkpoint(p2, head, extractor, step=10, train_config=config)
    assert hashlib.sha256(p1.read_bytes()).digest() == hashlib.sha256(p2.read_bytes()).digest()
    for pa, pb in zip(result.head.parameters(), head.parameters()):
        assert torch.equal(pa, pb)
    assert manifest["step"] == 10


def test_checkpoint_rejects_corruption(tmp_path, small_dataset):
    _, dataset = small_dataset
    result = fit(dataset, _quick_config(total_steps=5))
    path = tmp_path / "c.zip"
    save_checkpoint(path, result.head, result.extractor)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_version(tmp_path, small_dataset):
    import json
    import zipfile

    _, dataset = small_dataset
    result = fit(dataset, _quick_config(total_steps=5))
    path = tmp_path / "d.zip"
    save_checkpoint(path, result.head, result.extractor)
    with zipfile.ZipFile(path) as z:
        manifest = json.loads(z.read("manifest.json"))
        payload = {n: z.read(n) for n in z.namelist() if n != "manifest.json"}
    manifest["version"] = "other-format-9"
    bad = tmp_path / "e.zip"
    with zipfile.ZipFile(bad, "w") as z:
        z.writestr("manifest.json", json.dumps(manifest))
        for n, b in payload.items():
            z.writestr(n, b)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
