"""Acceptance gate: ten end-to-end criteria, one printed verdict line each.

Criteria 1-6 and 10 are exact property/oracle suites; criteria 7-9 are
directional reproductions of the sampling and head-variant ablations on the
synthetic benchmark (means over three seeds). Heavy artifacts (trained
models, pseudo-label discovery) are trained lazily and cached at module
scope so criteria 7-9 share them.
"""

import math
import time

import numpy as np
import pytest
import torch

from vqlab import localize as loc
from vqlab import metrics as met
from vqlab import sampling
from vqlab import train as train_mod
from vqlab.core import (
    Box,
    Detection,
    ResponseTrack,
    iou,
    temporal_iou,
    tube_iou,
)
from vqlab.features import Proposal, ProposalSet
from vqlab.heads import (
    HeadConfig,
    QueryConditionedHead,
    SetAttention,
    conditional_projection,
)
from vqlab.localize import HeadScorer, OracleScorer, PeakConfig, TrackerConfig

torch.set_default_dtype(torch.float64)

SEEDS = (0, 1, 2)
BENCH_STEPS = 1500


def _report(capsys, num: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}")


# ---------------------------------------------------------------------------
# Shared trained-model evaluations (criteria 7-9)
# ---------------------------------------------------------------------------

# kind -> (variant, bps probability, nufs, pufs)
_RECIPES = {
    "treatment": ("coco_cond", 0.5, True, False),
    "baseline": ("coco_cond", 1.0, False, False),
    "siam": ("siam", 0.5, True, False),
    "pufs": ("coco_cond", 0.5, True, True),
}
_METRICS: dict = {}
_COST: dict = {}  # (kind, seed) -> wall seconds for train + eval
_PUFS_INSTANCES: dict = {}


def _pufs_pairs(train_ds, seed: int):
    if not _PUFS_INSTANCES:
        cfg = sampling.SamplerConfig(pufs_enabled=True)
        t0 = time.time()
        for clip, records in train_ds:
            _PUFS_INSTANCES[clip.video_id] = sampling.discover_pufs_instances(
                clip, cfg, records
            )
        _PUFS_INSTANCES["__cost__"] = time.time() - t0
    cfg = sampling.SamplerConfig(pufs_enabled=True, seed=seed)
    pairs = []
    for clip, _ in train_ds:
        rng = np.random.default_rng(sampling._stable_seed(seed, f"pufs:{clip.video_id}"))
        pairs.extend(
            sampling.expand_pufs_pairs(clip, _PUFS_INSTANCES[clip.video_id], cfg, rng)
        )
    return pairs


def _bench_metrics(kind: str, seed: int, train_ds, test_ds) -> dict:
    """Train one recipe and evaluate everything criteria 7-9 need from it."""
    key = (kind, seed)
    if key in _METRICS:
        return _METRICS[key]
    variant, bps_p, nufs, pufs = _RECIPES[kind]
    t0 = time.time()
    cfg = train_mod.TrainConfig(
        head=HeadConfig(variant=variant),
        sampler=sampling.SamplerConfig(
            bps_positive_prob=bps_p, nufs_enabled=nufs, pufs_enabled=pufs, seed=seed
        ),
        total_steps=BENCH_STEPS,
        seed=seed,
    )
    pufs_pairs = _pufs_pairs(train_ds, seed) if pufs else None
    res = train_mod.fit(train_ds, cfg, pufs_pairs=pufs_pairs)
    scorer = HeadScorer(res.head, res.extractor)
    pk, tk = PeakConfig(), TrackerConfig()

    entries, timelines, det_frames = [], [], []
    for clip, records in test_ds:
        for rec in records:
            r = loc.vq2d_pipeline(clip, rec.query, scorer, pk, tk)
            entries.append(((r.track, r.peak_confidence), rec.gt_track))
            timelines.append((r.timeline, rec))
            gt = rec.gt_track
            for t in range(gt.start, gt.end):
                det_frames.append(
                    (scorer.score_frame(clip.frames[t], rec.query), gt.box_at(t))
                )
    vq = met.vq2d_metrics(entries)
    out = {
        "succ": vq.succ,
        "stap25": vq.stap25,
        "tap25": vq.tap25,
        "fp": met.fp_rate_on_negatives(timelines, tau=0.6),
        "det_ap": met.detection_ap(det_frames).ap,
    }
    res.extractor.clear_cache()
    _COST[key] = time.time() - t0
    _METRICS[key] = out
    return out


def _means(kind: str, field: str, train_ds, test_ds) -> float:
    return float(
        np.mean([_bench_metrics(kind, s, train_ds, test_ds)[field] for s in SEEDS])
    )


# ---------------------------------------------------------------------------
# Criterion 1: conditional-projection oracle
# ---------------------------------------------------------------------------


def _contraction_oracle(weight, q, xs):
    c_out, c_in, c_cond = weight.shape
    out = torch.zeros(xs.shape[0], c_out, dtype=weight.dtype)
    for b in range(xs.shape[0]):
        for o in range(c_out):
            acc = 0.0
            for i in range(c_in):
                m = 0.0
                for c in range(c_cond):
                    m += float(weight[o, i, c]) * float(q[c])
                acc += m * float(xs[b, i])
            out[b, o] = acc
    return out


def test_criterion_01_conditional_projection_oracle(capsys):
    t0 = time.time()
    weight = torch.arange(8, dtype=torch.float64).reshape(2, 2, 2) * 0.1
    got = conditional_projection(weight, torch.tensor([1.0, 2.0]), torch.tensor([[1.0, 1.0]]))
    worked = bool(torch.allclose(got, torch.tensor([[1.0, 3.4]]), atol=1e-12))

    rng = np.random.default_rng(11)
    max_err = 0.0
    for _ in range(100):
        c_out, c_in, c_cond = (int(v) for v in rng.integers(1, 7, size=3))
        n = int(rng.integers(1, 6))
        w = torch.tensor(rng.standard_normal((c_out, c_in, c_cond)))
        q = torch.tensor(rng.standard_normal(c_cond))
        xs = torch.tensor(rng.standard_normal((n, c_in)))
        err = float((conditional_projection(w, q, xs) - _contraction_oracle(w, q, xs)).abs().max())
        max_err = max(max_err, err)
    elapsed = time.time() - t0
    ok = worked and max_err < 1e-10 and elapsed < 10.0
    _report(capsys, 1, ok, f"worked example + 100 configs, max err {max_err:.2e}, {elapsed:.1f}s")
    assert worked
    assert max_err < 1e-10
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# Criterion 2: gradient checks
# ---------------------------------------------------------------------------


def _max_grad_rel_err(head, objective) -> float:
    value = objective()
    grads = torch.autograd.grad(value, list(head.parameters()), allow_unused=True)
    eps = 1e-6
    worst = 0.0
    rng = np.random.default_rng(21)
    for p, g in zip(head.parameters(), grads):
        if g is None:
            continue
        flat, gflat = p.data.view(-1), g.reshape(-1)
        idxs = (
            range(flat.numel())
            if flat.numel() <= 32
            else rng.choice(flat.numel(), 32, replace=False)
        )
        for i in idxs:
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + eps
                hi = float(objective())
                flat[i] = orig - eps
                lo = float(objective())
                flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(fd), abs(float(gflat[i])), 1e-4)
            worst = max(worst, abs(fd - float(gflat[i])) / denom)
    return worst


def test_criterion_02_gradcheck_scores_and_loss(capsys):
    t0 = time.time()
    torch.manual_seed(5)
    cfg = HeadConfig(
        variant="coco_cond", feature_dim=8, cond_dim=8, c_out=8,
        num_heads=2, num_attention_layers=1, use_box_refine=True,
    )
    head = QueryConditionedHead(cfg)
    with torch.no_grad():
        for p in head.parameters():
            p.add_(0.1 * torch.randn_like(p))
    xs = torch.randn(4, 8)
    q = torch.randn(8)
    err_scores = _max_grad_rel_err(head, lambda: head(q, xs).scores.sum())

    pset = ProposalSet(
        0,
        tuple(Proposal(Box(2.0 * i, 3.0 + i, 6.0, 5.0), 0.5) for i in range(4)),
    )
    gt = Box(1.0, 3.0, 6.0, 5.0)
    labels = train_mod.proposal_labels(pset, gt)

    def loss_objective():
        return train_mod.loss(head(q, xs), labels, gt, pset)

    err_loss = _max_grad_rel_err(head, loss_objective)
    elapsed = time.time() - t0
    ok = err_scores < 1e-5 and err_loss < 1e-5 and elapsed < 120.0
    _report(
        capsys, 2,
        ok, f"rel err scores {err_scores:.2e}, loss {err_loss:.2e}, {elapsed:.1f}s",
    )
    assert err_scores < 1e-5
    assert err_loss < 1e-5
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# Criterion 3: set properties
# ---------------------------------------------------------------------------


def test_criterion_03_permutation_and_residual_identity(capsys):
    torch.manual_seed(3)
    attn = SetAttention(dim=16, num_heads=4, num_layers=2)
    with torch.no_grad():
        for p in attn.parameters():
            p.add_(0.05 * torch.randn_like(p))
    x = torch.randn(7, 16)
    base = attn(x)
    rng = np.random.default_rng(33)
    equi_err = 0.0
    for _ in range(50):
        perm = torch.tensor(rng.permutation(7))
        equi_err = max(equi_err, float((attn(x[perm]) - base[perm]).abs().max()))

    head = QueryConditionedHead(HeadConfig(variant="coco_cond"), seed=1)
    with torch.no_grad():
        for p in head.parameters():
            p.add_(0.05 * torch.randn_like(p))
    q = torch.randn(64)
    xs = torch.randn(6, 64)
    scores = head(q, xs).scores
    inv_err = 0.0
    for _ in range(50):
        perm = torch.tensor(rng.permutation(6))
        inv_err = max(inv_err, float((head(q, xs[perm]).scores - scores[perm]).abs().max()))

    fresh = SetAttention(dim=16, num_heads=4, num_layers=2)
    y = torch.randn(5, 16)
    residual_exact = bool(torch.equal(fresh(y), y))

    ok = equi_err < 1e-10 and inv_err < 1e-10 and residual_exact
    _report(
        capsys, 3, ok,
        f"equivariance {equi_err:.2e}, invariance {inv_err:.2e}, residual identity exact={residual_exact}",
    )
    assert equi_err < 1e-10
    assert inv_err < 1e-10
    assert residual_exact


# ---------------------------------------------------------------------------
# Criterion 4: metric-oracle equivalence
# ---------------------------------------------------------------------------


def _ap_oracle(flags, num_gt):
    """All-points AP by direct enumeration of the PR curve."""
    if num_gt == 0:
        return 0.0
    points = []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        tp += bool(flag)
        points.append((tp / num_gt, tp / k))
    ap = 0.0
    prev_r = 0.0
    for i, (r, _) in enumerate(points):
        p_max = max(pp for rr, pp in points[i:])
        ap += (r - prev_r) * p_max
        prev_r = r
    return ap


def _random_track(rng, start_lo=0, length_hi=5):
    start = int(rng.integers(start_lo, start_lo + 4))
    n = int(rng.integers(1, length_hi))
    boxes = tuple(
        Box(float(rng.uniform(0, 20)), float(rng.uniform(0, 20)),
            float(rng.uniform(2, 8)), float(rng.uniform(2, 8)))
        for _ in range(n)
    )
    return ResponseTrack(start, boxes)


def _tube_iou_oracle(p, g):
    """Frame-by-frame area accumulation, written independently of core."""

    def area(b):
        return b.w * b.h if b is not None else 0.0

    def inter_area(a, b):
        if a is None or b is None:
            return 0.0
        w = max(0.0, min(a.x2, b.x2) - max(a.x, b.x))
        h = max(0.0, min(a.y2, b.y2) - max(a.y, b.y))
        return w * h

    inter = union = 0.0
    for t in range(min(p.start, g.start), max(p.end, g.end)):
        pb, gb = p.box_at(t), g.box_at(t)
        ia = inter_area(pb, gb)
        inter += ia
        union += area(pb) + area(gb) - ia
    return inter / union if union > 0 else 0.0


def test_criterion_04_metric_oracles(capsys):
    t0 = time.time()
    rng = np.random.default_rng(44)

    # detection AP against the enumeration oracle, one threshold at a time
    ap_err = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 7))
        frames = []
        for _ in range(n):
            gt = Box(float(rng.uniform(0, 20)), float(rng.uniform(0, 20)), 6.0, 6.0)
            k = int(rng.integers(0, 7))
            dets = [
                Detection(
                    Box(gt.x + float(rng.uniform(-4, 4)), gt.y + float(rng.uniform(-4, 4)), 6.0, 6.0),
                    float(rng.uniform(0, 1)),
                )
                for _ in range(k)
            ]
            dets.sort(key=lambda d: -d.confidence)
            frames.append((dets, gt))
        got = met.detection_ap(frames, thresholds=[0.5]).ap
        ranked = sorted(
            ((d, i) for i, (dets, _) in enumerate(frames) for d in dets),
            key=lambda t: -t[0].confidence,
        )
        matched = set()
        flags = []
        for d, i in ranked:
            hit = i not in matched and iou(d.box, frames[i][1]) >= 0.5
            flags.append(hit)
            if hit:
                matched.add(i)
        ap_err = max(ap_err, abs(got - _ap_oracle(flags, n)))

    # vq2d metrics against an independent per-query oracle
    vq_err = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 7))
        entries = []
        for _ in range(n):
            g = _random_track(rng)
            pred = None
            if rng.random() < 0.8:
                pred = (_random_track(rng), float(rng.uniform(0, 1)))
            entries.append((pred, g))
        got = met.vq2d_metrics(entries)
        for overlap, field in ((temporal_iou, got.tap25), (tube_iou, got.stap25)):
            ranked = sorted(
                ((conf, qi, tr) for qi, (p, _) in enumerate(entries) if p is not None
                 for tr, conf in [p]),
                key=lambda t: -t[0],
            )
            flags = [overlap(tr, entries[qi][1]) >= 0.25 for _, qi, tr in ranked]
            vq_err = max(vq_err, abs(field - _ap_oracle(flags, n)))
        succ_oracle = 100.0 * sum(
            1 for p, g in entries if p is not None and tube_iou(p[0], g) > 0
        ) / n
        vq_err = max(vq_err, abs(got.succ - succ_oracle))

    # temporal/tube IoU against area-based oracles
    iou_err = 0.0
    for _ in range(100):
        p, g = _random_track(rng), _random_track(rng)
        lo, hi = min(p.start, g.start), max(p.end, g.end)
        inter_t = sum(
            1 for t in range(lo, hi) if p.box_at(t) is not None and g.box_at(t) is not None
        )
        union_t = sum(
            1 for t in range(lo, hi) if p.box_at(t) is not None or g.box_at(t) is not None
        )
        iou_err = max(iou_err, abs(temporal_iou(p, g) - inter_t / union_t))
        iou_err = max(iou_err, abs(tube_iou(p, g) - _tube_iou_oracle(p, g)))

    # monotonicity: appending a false positive never raises AP
    gt = Box(5, 5, 6, 6)
    frames = [([Detection(gt, 0.9)], gt)]
    base_ap = met.detection_ap(frames, thresholds=[0.5]).ap
    frames_fp = [([Detection(gt, 0.9), Detection(Box(20, 20, 3, 3), 0.95)], gt)]
    fp_ap = met.detection_ap(frames_fp, thresholds=[0.5]).ap
    mono = fp_ap <= base_ap

    elapsed = time.time() - t0
    ok = ap_err == 0.0 and vq_err == 0.0 and iou_err < 1e-12 and mono and elapsed < 60.0
    _report(
        capsys, 4, ok,
        f"ap err {ap_err:.1e}, vq2d err {vq_err:.1e}, iou err {iou_err:.1e}, "
        f"fp monotone={mono}, {elapsed:.1f}s",
    )
    assert ap_err == 0.0
    assert vq_err == 0.0
    assert iou_err < 1e-12
    assert mono
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# Criterion 5: sampler statistics
# ---------------------------------------------------------------------------


def test_criterion_05_sampler_statistics(capsys, benchmark_dataset):
    _, dataset = benchmark_dataset
    p = 0.5
    rng = np.random.default_rng(55)
    pset = ProposalSet(
        0,
        (Proposal(Box(10, 10, 8, 8), 1.0),) + tuple(
            Proposal(Box(30 + 6 * i, 30, 4, 4), 0.3) for i in range(3)
        ),
    )
    gt = Box(10, 10, 8, 8)
    draws = 10_000
    kept = sum(
        bps_exists
        for _, bps_exists in (
            sampling.bps_sample(pset, gt, p, rng, 64.0, 64.0) for _ in range(draws)
        )
    )
    sigma = math.sqrt(draws * p * (1 - p))
    bps_ok = abs(kept - draws * p) <= 3 * sigma

    nufs_ok = True
    checked = 0
    nrng = np.random.default_rng(56)
    for clip, records in dataset:
        for rec in records:
            pairs = sampling.nufs_sample(clip, rec, nrng)
            lo, hi = rec.gt_track.end, rec.query.query_frame
            available = hi - lo + 1
            want = min(len(rec.gt_track.boxes), max(available, 0))
            if len(pairs) != want:
                nufs_ok = False
            for pair in pairs:
                if not (lo <= pair.frame_index <= hi) or pair.gt_box is not None:
                    nufs_ok = False
            checked += 1
    ok = bps_ok and nufs_ok
    _report(
        capsys, 5, ok,
        f"BPS kept {kept}/{draws} (3sigma band {draws*p:.0f}+-{3*sigma:.0f}), "
        f"N-UFS invariants on {checked} records",
    )
    assert bps_ok
    assert nufs_ok


# ---------------------------------------------------------------------------
# Criterion 6: oracle-pipeline sanity
# ---------------------------------------------------------------------------


def test_criterion_06_oracle_pipeline(capsys, benchmark_test_dataset):
    t0 = time.time()
    _, test_ds = benchmark_test_dataset
    pk, tk = PeakConfig(), TrackerConfig()
    entries = []
    for clip, records in test_ds:
        for rec in records:
            r = loc.vq2d_pipeline(clip, rec.query, OracleScorer(rec), pk, tk)
            entries.append(((r.track, r.peak_confidence), rec.gt_track))
    vq = met.vq2d_metrics(entries)
    elapsed = time.time() - t0
    ok = vq.succ == 100.0 and vq.tap25 == 1.0 and elapsed < 300.0
    _report(capsys, 6, ok, f"Succ={vq.succ:.1f}% tAP25={vq.tap25:.3f}, {elapsed:.1f}s")
    assert vq.succ == 100.0
    assert vq.tap25 == 1.0
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# Criteria 7-9: directional benchmark reproductions
# ---------------------------------------------------------------------------


def test_criterion_07_bps_nufs_tradeoff(capsys, benchmark_dataset, benchmark_test_dataset):
    _, train_ds = benchmark_dataset
    _, test_ds = benchmark_test_dataset
    for kind in ("treatment", "baseline"):
        for s in SEEDS:
            _bench_metrics(kind, s, train_ds, test_ds)
    elapsed = sum(_COST[(k, s)] for k in ("treatment", "baseline") for s in SEEDS)

    succ_t = _means("treatment", "succ", train_ds, test_ds)
    succ_b = _means("baseline", "succ", train_ds, test_ds)
    stap_t = _means("treatment", "stap25", train_ds, test_ds)
    stap_b = _means("baseline", "stap25", train_ds, test_ds)
    fp_t = _means("treatment", "fp", train_ds, test_ds)
    fp_b = _means("baseline", "fp", train_ds, test_ds)
    ok = succ_t > succ_b and stap_t > stap_b and fp_t < fp_b and elapsed < 2700.0
    _report(
        capsys, 7, ok,
        f"Succ {succ_t:.1f}>{succ_b:.1f}, stAP25 {stap_t:.3f}>{stap_b:.3f}, "
        f"fp@0.6 {fp_t:.3f}<{fp_b:.3f} (3-seed means), {elapsed:.0f}s",
    )
    assert succ_t > succ_b
    assert stap_t > stap_b
    assert fp_t < fp_b
    assert elapsed < 2700.0


def test_criterion_08_coco_cond_vs_siam(capsys, benchmark_dataset, benchmark_test_dataset):
    _, train_ds = benchmark_dataset
    _, test_ds = benchmark_test_dataset
    succ_c = _means("treatment", "succ", train_ds, test_ds)
    succ_s = _means("siam", "succ", train_ds, test_ds)
    stap_c = _means("treatment", "stap25", train_ds, test_ds)
    stap_s = _means("siam", "stap25", train_ds, test_ds)
    ok = succ_c >= succ_s and stap_c >= stap_s
    _report(
        capsys, 8, ok,
        f"Succ {succ_c:.1f}>={succ_s:.1f}, stAP25 {stap_c:.3f}>={stap_s:.3f} (3-seed means)",
    )
    assert succ_c >= succ_s
    assert stap_c >= stap_s


def test_criterion_09_pufs_does_not_hurt_ap(capsys, benchmark_dataset, benchmark_test_dataset):
    _, train_ds = benchmark_dataset
    _, test_ds = benchmark_test_dataset
    ap_on = _means("pufs", "det_ap", train_ds, test_ds)
    ap_off = _means("treatment", "det_ap", train_ds, test_ds)
    ok = ap_on >= ap_off
    _report(capsys, 9, ok, f"detection AP with P-UFS {ap_on:.3f} >= without {ap_off:.3f} (3-seed means)")
    assert ap_on >= ap_off


# ---------------------------------------------------------------------------
# Criterion 10: reproducibility
# ---------------------------------------------------------------------------


def test_criterion_10_reproducibility(capsys, small_dataset, tmp_path):
    _, dataset = small_dataset
    cfg = train_mod.TrainConfig(total_steps=120, seed=9)

    def recipe_bytes(tag):
        res = train_mod.fit(dataset, cfg)
        path = tmp_path / f"ckpt_{tag}.zip"
        train_mod.save_checkpoint(path, res.head, res.extractor, step=res.steps, train_config=cfg)
        scorer = HeadScorer(res.head, res.extractor)
        preds = []
        clip, records = dataset[0]
        for rec in records:
            r = loc.vq2d_pipeline(clip, rec.query, scorer, PeakConfig(), TrackerConfig())
            preds.append((r.track.start, [b.as_list() for b in r.track.boxes], r.peak_confidence))
        return path.read_bytes(), repr(preds)

    ckpt_a, preds_a = recipe_bytes("a")
    ckpt_b, preds_b = recipe_bytes("b")
    runs_identical = ckpt_a == ckpt_b and preds_a == preds_b

    head, extractor, meta = train_mod.load_checkpoint(tmp_path / "ckpt_a.zip")
    resaved = tmp_path / "ckpt_resaved.zip"
    train_mod.save_checkpoint(resaved, head, extractor, step=meta["step"], train_config=cfg)
    roundtrip_exact = resaved.read_bytes() == ckpt_a

    ok = runs_identical and roundtrip_exact
    _report(
        capsys, 10, ok,
        f"two-run identity={runs_identical}, checkpoint round trip bit-exact={roundtrip_exact}",
    )
    assert runs_identical
    assert roundtrip_exact
