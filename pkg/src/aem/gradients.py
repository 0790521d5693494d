"""Finite-difference verification of every training loss on a small model."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from . import numerics as nx
from .model import LOSS_TERMS, TrainConfig, init_model
from .simulator import SimConfig, generate_dataset
from .training import loss_terms, prepare_items

SUITE_LOSSES = LOSS_TERMS + ("total",)
TOLERANCE = 1e-4

# Small enough that a full probe of every loss stays well under the time budget.
SMALL_WORLD = dict(num_actions=3, feature_dim=8, min_len=3, max_len=5, max_objects=3,
                   descriptions_per_action=2, train_videos=6, val_videos=1, test_videos=1)


def _loss_fn(model, items, bank, cfg, which):
    # Visual targets are constants of the alignment terms, so they stay at the
    # unperturbed perceptron weights while finite differences probe them.
    targets = {k: nx.Tensor(v.copy()) for k, v in model.params.items() if k.startswith("theta_")}

    if which != "total":
        cfg = replace(cfg, losses={k: k == which for k in LOSS_TERMS})

    def fn(P):
        terms = loss_terms(P, model, items, bank, cfg, target_params=targets)
        if which != "total":
            return terms[which]
        out = terms[LOSS_TERMS[0]]
        for k in LOSS_TERMS[1:]:
            out = nx.add(out, terms[k])
        return out
    return fn


def _distinct_action_batch(segments, size: int, rng: np.random.Generator):
    """Random segments of pairwise different actions.

    Same-action segments share one canonical text graph; a batch made only of
    those has identical contrastive logits and an exactly zero gradient, which
    a finite-difference check cannot resolve.
    """
    by_action: dict[str, list] = {}
    for s in segments:
        by_action.setdefault(s.action, []).append(s)
    actions = sorted(by_action)
    if size > len(actions):
        raise ValueError(f"batch of {size} needs at least {size} actions, have {len(actions)}")
    chosen = rng.choice(len(actions), size=size, replace=False)
    return [by_action[actions[a]][int(rng.integers(len(by_action[actions[a]])))] for a in chosen]


def run_suite(seed: int = 0, batches: int = 10, batch_size: int = 3, max_entries: int = 2,
              epsilon: float = 1e-5, corrupt: bool = False) -> dict:
    """Check analytic against central-difference gradients for each loss.

    Each of ``batches`` seeded batches re-initialises the model and draws a
    fresh set of training segments.  ``corrupt`` perturbs the analytic
    gradient of one parameter; it exists as a negative control and must fail.

    Returns ``{loss: {"worst": err, "param": name, "batch": b}, ...,
    "passed": bool, "seconds": float}``.
    """
    start = time.perf_counter()
    ds = generate_dataset(SimConfig.from_dict(SMALL_WORLD), seed)
    train = ds.splits["train"]
    report = {k: {"worst": 0.0, "param": None, "batch": None} for k in SUITE_LOSSES}
    for b in range(batches):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 41, b]))
        cfg = TrainConfig(seed=int(seed) * 1000 + b)
        model = init_model(ds, cfg)
        # Perturb the deterministic initialisation so zero-initialised biases and
        # the identity layer-norm gains do not hide gradient errors.
        for k, v in model.params.items():
            model.params[k] = v + rng.normal(0.0, 0.1, size=v.shape)
        items = prepare_items(ds, _distinct_action_batch(train, batch_size, rng), cfg,
                              model.actions)
        bank = model.prompt_bank()
        for which in SUITE_LOSSES:
            fn = _loss_fn(model, items, bank, cfg, which)
            analytic = None
            if corrupt:
                tape = nx.Tape()
                leaves = {k: tape.param(k, v) for k, v in model.params.items()}
                analytic = tape.backward(fn(leaves))
                analytic["token"] = analytic["token"] * 1.01 + 1e-3
            errs = nx.grad_check(fn, model.params, epsilon=epsilon, max_entries=max_entries,
                                 rng=np.random.default_rng([int(seed), b, SUITE_LOSSES.index(which)]),
                                 analytic=analytic, floor="auto")
            name = max(errs, key=errs.get)
            if errs[name] >= report[which]["worst"]:
                report[which] = {"worst": errs[name], "param": name, "batch": b}
    out = dict(report)
    out["passed"] = all(report[k]["worst"] < TOLERANCE for k in SUITE_LOSSES)
    out["seconds"] = time.perf_counter() - start
    return out

