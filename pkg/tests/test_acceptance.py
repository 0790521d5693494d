"""Acceptance checks for the whole pipeline, one test per criterion.

Each test prints a single ``[PASS]`` or ``[FAIL]`` line with the measured
numbers, then asserts.  Run with ``pytest tests/test_acceptance.py -v``.
"""
import time
from fractions import Fraction

import numpy as np
import pytest

from aem import numerics as nx
from aem.detector import classify, exact_marginal, mistake_probability, top1_symmetric_score
from aem.effect import effect_contrastive_loss
from aem.evaluation import ScoredSegment, build_report, eda, frame_auc, precision, run_ablation
from aem.evaluation import scored_segments, write_report
from aem.gradients import TOLERANCE, run_suite
from aem.knowledge import GraphBatch, build_scene_graph, gat_encode, init_params, textual_features
from aem.model import TrainConfig, init_model, score_segments
from aem.sampling import sampler_accuracy
from aem.simulator import SimConfig, generate_dataset
from aem.storage import ChecksumError, manifest_and_blobs, read_dataset, write_dataset
from aem.training import (CheckpointError, checkpoint_bytes, load_checkpoint, save_checkpoint,
                          train)


def report(request, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {request.node.name}: {detail}"
    capman = request.config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + line)
    assert ok, line


def test_gradient_suite(request):
    res = run_suite(seed=0, batches=10)
    worst = {k: v["worst"] for k, v in res.items() if isinstance(v, dict)}
    ok = res["passed"] and max(worst.values()) < TOLERANCE and res["seconds"] < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(request, ok, f"worst relative error {detail}; {res['seconds']:.1f}s (limit 30s)")


def _brute_force_auc(segments):
    pos = [s.score for s in segments for _ in range(s.T) if s.label == 1]
    neg = [s.score for s in segments for _ in range(s.T) if s.label == 0]
    twice = sum(2 * (p > n) + (p == n) for p in pos for n in neg)
    return float(Fraction(100 * twice, 2 * len(pos) * len(neg)))


def test_metric_oracles(request):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, size=n)
        y[:2] = [0, 1]
        s = rng.integers(0, 8, size=n) / 7.0
        T = rng.integers(1, 6, size=n)
        segs = [ScoredSegment(str(i), int(T[i]), int(y[i]), float(s[i])) for i in range(n)]
        mismatches += frame_auc(segs) != _brute_force_auc(segs)

    def seg(*pairs):
        return [ScoredSegment(str(i), 1, y, s) for i, (y, s) in enumerate(pairs)]

    # Expected values are chosen to be exact in binary floating point.
    five = seg((1, 0.9), (1, 0.8), (1, 0.7), (0, 0.6), (0, 0.1))
    hand = [
        eda(seg((1, 0.6), (0, 0.4)), [0.25, 0.5, 0.75, 0.9]) == 62.5,  # 50, 100, 50, 50
        eda(seg((1, 1.0), (0, 0.0))) == 100.0,
        eda(five, [0.5, 0.65]) == 90.0,  # 80, 100
        precision(seg((1, 0.9), (0, 0.9), (1, 0.1)), [0.5]) == 50.0,
        precision(five, [0.5, 0.75]) == 87.5,  # 3/4, 2/2
    ]
    ok = mismatches == 0 and all(hand)
    report(request, ok, f"AUC mismatches {mismatches}/200; hand cases {sum(hand)}/{len(hand)}")


def test_marginal_consistency(request, tiny_dataset):
    model = init_model(tiny_dataset, TrainConfig(seed=3))
    worst_gap, bound_violations, n = 0.0, 0, 0
    for s in tiny_dataset.splits["test"]:
        desc = tiny_dataset.descriptions(s.action)
        m, _, scores = exact_marginal(s, model, desc)
        bound_violations += not (scores.min() - 1e-12 <= m <= scores.max() + 1e-12)
        for f in range(s.T):
            one_hot = np.eye(s.T)[f]
            m1, top1, _ = exact_marginal(s, model, desc, frame_probs=one_hot)
            worst_gap = max(worst_gap, abs(m1 - top1), abs(top1 - top1_symmetric_score(one_hot, scores)))
        n += 1
    ok = worst_gap <= 1e-9 and bound_violations == 0
    report(request, ok, f"{n} segments; one-hot gap {worst_gap:.1e} (limit 1e-9); "
                        f"bound violations {bound_violations}")


def test_sampler_accuracy(request):
    acc = sampler_accuracy(generate_dataset(SimConfig(), 0))
    ok = acc["segments"] >= 500 and acc["ranked"] > 0.8 and acc["last_frame"] < 0.5
    report(request, ok, f"{acc['segments']} normal segments; ranked {100 * acc['ranked']:.1f}% "
                        f"(> 80%), last frame {100 * acc['last_frame']:.1f}% (< 50%)")


def test_directional_ablations(request):
    start = time.perf_counter()
    ds = generate_dataset(SimConfig(), 0)
    res = run_ablation(ds, ["full", "no_effect", "last_frame", "no_align"], [0, 1, 2, 3, 4])
    seconds = time.perf_counter() - start
    auc = {r["variant"]: r["auc_mean"] for r in res["table"]}
    ok = (auc["full"] - auc["no_effect"] >= 5 and auc["full"] >= auc["last_frame"]
          and auc["full"] >= auc["no_align"] and seconds < 600)
    means = ", ".join(f"{k} {v:.2f}" for k, v in auc.items())
    report(request, ok, f"mean AUC {means}; full - no_effect {auc['full'] - auc['no_effect']:+.2f} "
                        f"(>= 5); {seconds:.0f}s (limit 600s)")


def _graph_record():
    return {"segment_id": "g", "nodes": [
        {"id": "a", "kind": "object", "label": "cup"},
        {"id": "b", "kind": "object", "label": "plate"},
        {"id": "r", "kind": "relation", "label": "left of"},
        {"id": "t", "kind": "attribute", "label": "full"}],
        "edges": [["a", "r"], ["r", "b"], ["a", "t"]]}


def test_invariance_suite(request):
    rng = np.random.default_rng(11)
    D = 16
    failures = []

    vocab = dict(zip(["cup", "plate", "left", "of", "full"], rng.normal(size=(5, D))))
    P = {k: nx.Tensor(v) for k, v in init_params(np.random.default_rng(0), D, D, 3).items()}
    g = build_scene_graph(_graph_record(), vocab)
    ts, tr = textual_features(P, GraphBatch.from_graphs([g]))
    base = gat_encode(P, g).data
    for _ in range(10):
        order = [int(i) for i in rng.permutation(4)]
        pg = g.permuted(order)
        pts, ptr = textual_features(P, GraphBatch.from_graphs([pg]))
        if not (np.allclose(gat_encode(P, pg).data, base[order], atol=1e-12, rtol=0)
                and np.allclose(pts.data, ts.data, atol=1e-12, rtol=0)
                and np.allclose(ptr.data, tr.data, atol=1e-12, rtol=0)):
            failures.append("graph permutation")
            break

    for B in (2, 3, 5, 8):
        v, t = rng.normal(size=(B, D)), rng.normal(size=(B, D))
        if effect_contrastive_loss(v, t, 0.07).data < 0:
            failures.append("contrastive negative")
    if effect_contrastive_loss(rng.normal(size=(1, D)), rng.normal(size=(1, D)), 0.07).data != 0.0:
        failures.append("contrastive B=1")

    for _ in range(50):
        z = rng.normal(size=7) * 5
        p = nx.softmax(nx.Tensor(z)).data
        if not (abs(p.sum() - 1) < 1e-12 and np.allclose(nx.softmax(nx.Tensor(z + 3.7)).data, p,
                                                         atol=1e-12, rtol=0)):
            failures.append("softmax")
            break
        u, w = rng.normal(size=D), rng.normal(size=D)
        c = nx.cosine(nx.Tensor(u), nx.Tensor(w)).data
        if not (-1 - 1e-12 <= c <= 1 + 1e-12
                and abs(nx.cosine(nx.Tensor(u), nx.Tensor(u)).data - 1) < 1e-12
                and abs(nx.cosine(nx.Tensor(2.5 * u), nx.Tensor(w)).data - c) < 1e-12):
            failures.append("cosine")
            break

    for _ in range(50):
        x, Y, alpha, tau = rng.normal(size=D), rng.normal(size=(4, D)), rng.uniform(0.01, 100), rng.uniform()
        s = [mistake_probability(x, y) for y in Y]
        s2 = [mistake_probability(alpha * x, y) for y in Y]
        if int(np.argmin(s)) != int(np.argmin(s2)) or [classify(a, tau) for a in s] != \
                [classify(a, tau) for a in s2]:
            failures.append("detector rescaling")
            break

    report(request, not failures, "all properties hold" if not failures else
           "violated: " + ", ".join(failures))


def test_determinism_and_io(request, tiny_config, tiny_dataset, tmp_path):
    checks = {}
    a, b = generate_dataset(tiny_config, 7), generate_dataset(tiny_config, 7)
    checks["generation"] = manifest_and_blobs(a)[:3] == manifest_and_blobs(b)[:3]

    write_dataset(tiny_dataset, tmp_path / "ds")
    checks["dataset round trip"] = read_dataset(tmp_path / "ds") == tiny_dataset

    cfg = TrainConfig.from_dict({"epochs": 2, "batch_size": 4})
    m1, _, _ = train(tiny_dataset, cfg, out_dir=tmp_path / "r1")
    m2, _, _ = train(tiny_dataset, cfg, out_dir=tmp_path / "r2")
    checks["training"] = (checkpoint_bytes(m1) == checkpoint_bytes(m2) and
                          (tmp_path / "r1" / "train_log.jsonl").read_bytes()
                          == (tmp_path / "r2" / "train_log.jsonl").read_bytes())

    test = tiny_dataset.splits["test"]
    for name, m in (("e1", m1), ("e2", m2)):
        segs = scored_segments(test, score_segments(m, test))
        write_report(build_report(segs, variant="full", seed=0, config_hash=cfg.hash()),
                     tmp_path / name)
    checks["evaluation"] = all((tmp_path / "e1" / f.name).read_bytes() == f.read_bytes()
                               for f in (tmp_path / "e2").iterdir())

    loaded = load_checkpoint(tmp_path / "r1" / "final.ckpt")
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    checks["checkpoint round trip"] = ((tmp_path / "again.ckpt").read_bytes()
                                       == (tmp_path / "r1" / "final.ckpt").read_bytes())

    blob = bytearray((tmp_path / "ds" / "patches.bin").read_bytes())
    blob[len(blob) // 3] ^= 0x10
    (tmp_path / "ds" / "patches.bin").write_bytes(bytes(blob))
    try:
        read_dataset(tmp_path / "ds")
        checks["dataset corruption detected"] = False
    except ChecksumError:
        checks["dataset corruption detected"] = True
    raw = bytearray((tmp_path / "again.ckpt").read_bytes())
    raw[-5] ^= 0x01
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    try:
        load_checkpoint(tmp_path / "bad.ckpt")
        checks["checkpoint corruption detected"] = False
    except CheckpointError:
        checks["checkpoint corruption detected"] = True

    bad = [k for k, v in checks.items() if not v]
    report(request, not bad, f"{len(checks) - len(bad)}/{len(checks)} checks"
                             + (f"; failed: {', '.join(bad)}" if bad else ""))
