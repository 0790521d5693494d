"""Joint optimisation of the effect and detection objectives."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import effect, knowledge
from . import numerics as nx
from .detector import detection_loss
from .knowledge import GraphBatch, SceneGraph, build_scene_graph, object_slots, slot_input
from .model import LOSS_TERMS, ModelState, TrainConfig, init_model, segment_forward
from .numerics import Tape, Tensor
from .sampling import sample_effect_frame
from .simulator import ConfigError, OCCViolation, ObjectObs, scene_graph_record

VARIANTS = ("full", "no_effect", "last_frame", "no_align", "state_only", "relation_only",
            "visual_only", "textual_only")


class DivergenceError(RuntimeError):
    """Loss became non-finite; ``state`` holds the last finite model."""

    def __init__(self, message: str, state: ModelState):
        super().__init__(message)
        self.state = state


# -- variants ----------------------------------------------------------------


def make_variant(config: TrainConfig, name: str) -> TrainConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    on = {k: True for k in LOSS_TERMS}
    changes: dict = {"variant": name, "sampler": "ranked", "effect_fusion": True,
                     "eff_visual": True, "eff_textual": True}
    if name == "no_effect":
        on.update(eff_s=False, eff_r=False, cl_s=False, cl_r=False)
        changes["effect_fusion"] = False
    elif name == "last_frame":
        changes["sampler"] = "last_frame"
    elif name == "no_align":
        on.update(cl_s=False, cl_r=False)
    elif name == "state_only":
        on.update(eff_r=False)
    elif name == "relation_only":
        on.update(eff_s=False)
    elif name == "visual_only":
        changes["eff_textual"] = False
    elif name == "textual_only":
        changes["eff_visual"] = False
    return replace(config, losses=on, **changes)


# -- supervision preprocessing -------------------------------------------------


@dataclass
class Item:
    """One training segment with its precomputed effect supervision inputs."""

    segment_id: str
    action_idx: int
    mistake: int
    frames: np.ndarray  # float64 (T, D)
    state_input: np.ndarray | None = None  # (D + N*D,)
    relation_input: np.ndarray | None = None
    graph: SceneGraph | None = None
    effect_frame: int = -1


def _detect(objects: list[ObjectObs], cfg: TrainConfig, rng: np.random.Generator):
    if not cfg.detector_box_jitter and not cfg.detector_dropout:
        return objects
    keep = [o for o in objects if rng.uniform() >= cfg.detector_dropout] or objects[:1]
    out = []
    for o in keep:
        cx, cy, w, h = o.box
        cx = float(np.clip(cx + rng.normal(0, cfg.detector_box_jitter), w / 2, 1 - w / 2))
        cy = float(np.clip(cy + rng.normal(0, cfg.detector_box_jitter), h / 2, 1 - h / 2))
        out.append(ObjectObs(o.label, (cx, cy, w, h), o.attribute, o.intensity, o.crop))
    return out


def prepare_items(dataset, segments, cfg: TrainConfig, actions, with_knowledge: bool = True):
    """Sample effect frames and extract supervision inputs (the preprocessing stage)."""
    D = dataset.config.feature_dim
    n_max = dataset.config.max_objects
    vocab = dataset.vocab_embeddings
    desc = {a: dataset.descriptions(a) for a in dataset.spec.actions}
    items = []
    for s in segments:
        X = s.frames.astype(np.float64)
        item = Item(s.segment_id, actions.index(s.action), s.mistake, X)
        f = sample_effect_frame(s, desc[s.action], cfg.sampler)
        item.effect_frame = f
        if with_knowledge:
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, zlib.crc32(s.segment_id.encode())]))
            truth = s.observations(f)
            seen = _detect(truth, cfg, rng)
            crops, boxes, mask = object_slots(seen, n_max, D)
            item.state_input = slot_input(X[f], crops, mask)
            item.relation_input = slot_input(X[f], boxes, mask)
            item.graph = build_scene_graph(scene_graph_record(s.segment_id, truth), vocab)
        items.append(item)
    return items


# -- loss ------------------------------------------------------------------------


def loss_terms(P, model: ModelState, items: list[Item], bank,
               config: TrainConfig | None = None, target_params=None) -> dict[str, Tensor]:
    """Every enabled loss term as a scalar tensor, keyed by LOSS_TERMS names.

    The alignment terms use the visual features as constants.  By default
    they are the current perceptron outputs; ``target_params`` supplies other
    perceptron weights for them, which lets a finite-difference check hold the
    targets fixed while the perceptron itself is perturbed.
    """
    cfg = config or model.config
    bad = [it.segment_id for it in items if it.mistake]
    if bad:
        raise OCCViolation(f"mistake segments in a training batch: {bad}")
    idx = [it.action_idx for it in items]
    focus = [it.effect_frame for it in items] if cfg.token_focus else None
    x_a, proj_s, proj_r, _ = segment_forward(P, model, [it.frames for it in items], idx,
                                             effect_frames=focus)
    terms: dict[str, Tensor] = {}
    if cfg.losses["det"]:
        Y = bank.embed_all(P["prompt.prefix"])
        terms["det"] = detection_loss(x_a, idx, Y, cfg.rho)
    if cfg.uses_knowledge:
        s_in = np.stack([it.state_input for it in items])
        r_in = np.stack([it.relation_input for it in items])
        v_s = knowledge.perceptron(P, "theta_s", Tensor(s_in))
        v_r = knowledge.perceptron(P, "theta_r", Tensor(r_in))
        t_s, t_r = knowledge.textual_features(P, GraphBatch.from_graphs([it.graph for it in items]),
                                              cfg.gat_layers)
        ts_s, ts_r = v_s, v_r
        if target_params is not None:
            ts_s = knowledge.perceptron(target_params, "theta_s", Tensor(s_in))
            ts_r = knowledge.perceptron(target_params, "theta_r", Tensor(r_in))
        mods = dict(use_visual=cfg.eff_visual, use_textual=cfg.eff_textual)
        if cfg.losses["eff_s"]:
            terms["eff_s"] = effect.effect_alignment_loss(proj_s, ts_s, t_s, **mods)
        if cfg.losses["eff_r"]:
            terms["eff_r"] = effect.effect_alignment_loss(proj_r, ts_r, t_r, **mods)
        if cfg.losses["cl_s"]:
            terms["cl_s"] = effect.effect_contrastive_loss(v_s, t_s, cfg.rho)
        if cfg.losses["cl_r"]:
            terms["cl_r"] = effect.effect_contrastive_loss(v_r, t_r, cfg.rho)
    return terms


def total_loss(P, model: ModelState, items: list[Item], bank, config: TrainConfig | None = None):
    """Weighted sum of the enabled terms; returns ``(total, {term: value})``."""
    cfg = config or model.config
    terms = loss_terms(P, model, items, bank, cfg)
    total = None
    breakdown = {}
    for k in LOSS_TERMS:
        if k not in terms:
            continue
        w = float(cfg.loss_weights[k])
        term = terms[k] if w == 1.0 else terms[k] * w
        breakdown[k] = float(term.data)
        total = term if total is None else nx.add(total, term)
    return total, breakdown


def loss_and_grads(model: ModelState, items, bank, config=None):
    tape = Tape()
    P = {k: tape.param(k, v) for k, v in model.params.items()}
    total, breakdown = total_loss(P, model, items, bank, config)
    return float(total.data), breakdown, tape.backward(total)


def evaluate_loss(model: ModelState, items, bank, batch_size: int = 64) -> dict:
    P = model.tensors()
    sums: dict[str, float] = {}
    n = 0
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        _, bd = total_loss(P, model, chunk, bank)
        for k, v in bd.items():
            sums[k] = sums.get(k, 0.0) + v * len(chunk)
        n += len(chunk)
    out = {k: v / n for k, v in sums.items()}
    out["total"] = sum(out.values())
    return out


# -- optimiser ----------------------------------------------------------------


def adam_step(model: ModelState, grads: dict[str, np.ndarray]) -> None:
    """One Adam update; leaves the model untouched if any new value is non-finite."""
    cfg = model.config
    b1, b2 = cfg.betas
    t = model.step + 1
    new_m, new_v, new_p = {}, {}, {}
    with np.errstate(over="ignore", invalid="ignore"):
        for k, g in grads.items():
            if k in model.grad_masks:
                g = g * model.grad_masks[k]
            m = new_m[k] = b1 * model.adam_m[k] + (1 - b1) * g
            v = new_v[k] = b2 * model.adam_v[k] + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            new_p[k] = model.params[k] - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    if not all(np.isfinite(x).all() for x in new_p.values()):
        raise DivergenceError(f"non-finite parameter update at step {t}", model)
    model.adam_m.update(new_m)
    model.adam_v.update(new_v)
    model.params.update(new_p)
    model.step = t


# -- training loop -------------------------------------------------------------


def train(dataset, config: TrainConfig, out_dir=None, log=None):
    """Train on the dataset's train split; returns ``(final_state, best_state, log_records)``.

    With ``out_dir`` the final and best-validation checkpoints and a JSON-lines
    log are written there.  A non-finite loss raises DivergenceError carrying
    the last finite state (also written as ``last_finite.ckpt``).
    """
    config.validate()
    for split in ("train", "val"):
        bad = [s.segment_id for s in dataset.splits[split] if s.mistake]
        if bad:
            raise OCCViolation(f"{split} split contains mistake segments: {bad[:5]}")
    model = init_model(dataset, config)
    bank = model.prompt_bank()
    actions = model.actions
    train_items = prepare_items(dataset, dataset.splits["train"], config, actions,
                                config.uses_knowledge)
    val_items = prepare_items(dataset, dataset.splits["val"], config, actions,
                              config.uses_knowledge)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 23]))
    records = []
    best, best_val = model.copy(), np.inf
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_items))
        sums: dict[str, float] = {}
        batches = 0
        for i in range(0, len(order), config.batch_size):
            batch = [train_items[j] for j in order[i:i + config.batch_size]]
            total, breakdown, grads = loss_and_grads(model, batch, bank)
            if not np.isfinite(total) or not all(np.isfinite(g).all() for g in grads.values()):
                if out is not None:
                    save_checkpoint(model, out / "last_finite.ckpt")
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {model.step}",
                                      model)
            try:
                adam_step(model, grads)
            except DivergenceError:
                if out is not None:
                    save_checkpoint(model, out / "last_finite.ckpt")
                raise
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        train_means = {k: v / batches for k, v in sums.items()}
        val = evaluate_loss(model, val_items, bank) if val_items else {}
        rec = {"epoch": epoch, "step": model.step,
               "train": {**train_means, "total": sum(train_means.values())}, "val": val}
        records.append(rec)
        if log is not None:
            log(rec)
        if val and val["total"] < best_val:
            best_val = val["total"]
            best = model.copy()

    if out is not None:
        save_checkpoint(model, out / "final.ckpt")
        save_checkpoint(best, out / "best.ckpt")
        with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return model, best, records


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"AEMCKPT1"


class CheckpointError(IOError):
    pass


def _ordered_tensors(model: ModelState):
    for k in sorted(model.params):
        yield k, "param", model.params[k]
    for k in sorted(model.adam_m):
        yield f"adam.m.{k}", "optimizer", model.adam_m[k]
    for k in sorted(model.adam_v):
        yield f"adam.v.{k}", "optimizer", model.adam_v[k]
    for k in sorted(model.grad_masks):
        yield f"mask.{k}", "mask", model.grad_masks[k]
    for k in sorted(model.frozen):
        yield f"frozen.{k}", "frozen", model.frozen[k]


def checkpoint_bytes(model: ModelState) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, kind, arr in _ordered_tensors(model):
        b = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                        "frozen": kind == "frozen", "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    payload = b"".join(chunks)
    header = {
        "format": "aem-checkpoint/1",
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "meta": model.meta,
        "step": model.step,
        "vocab_words": model.vocab_words,
        "tensors": entries,
        "payload_nbytes": len(payload),
        "payload_crc32": zlib.crc32(payload) & 0xFFFFFFFF,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + payload


def save_checkpoint(model: ModelState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not an AEM checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header") from e
    payload = raw[16 + hlen:]
    if len(payload) != header["payload_nbytes"] or \
            zlib.crc32(payload) & 0xFFFFFFFF != header["payload_crc32"]:
        raise CheckpointError(f"{path}: payload CRC-32 mismatch")
    config = TrainConfig.from_dict(header["config"])
    params, m, v, masks, frozen = {}, {}, {}, {}, {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f8")
        arr = arr.reshape(e["shape"]).astype(np.float64)
        name = e["name"]
        if e["kind"] == "param":
            params[name] = arr
        elif name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
        elif name.startswith("mask."):
            masks[name[5:]] = arr
        else:
            frozen[name[7:]] = arr
    return ModelState(config, header["meta"], params, frozen, header["vocab_words"], m, v,
                      int(header["step"]), masks)
