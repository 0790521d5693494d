"""Model configuration, parameter state and forward passes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import effect, knowledge
from . import numerics as nx
from .detector import PromptBank, action_embedding, frozen_mixing_map, mistake_probability
from .numerics import Tensor
from .sampling import sample_effect_frame
from .simulator import ConfigError, stub_text_encoder

LOSS_TERMS = ("eff_s", "eff_r", "cl_s", "cl_r", "det")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    rho: float = 0.07
    losses: dict = field(default_factory=lambda: {k: True for k in LOSS_TERMS})
    loss_weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_TERMS})
    eff_visual: bool = True
    eff_textual: bool = True
    effect_fusion: bool = True
    sampler: str = "ranked"
    token: str = "shared"
    freeze_text_branch: bool = False
    d_effect: int | None = None
    layers: int = 2
    heads: int = 2
    gat_layers: int = 2
    position_scale: float = 0.1
    token_focus: bool = False
    prefix_init: str = "centered"
    detector_box_jitter: float = 0.0
    detector_dropout: float = 0.0
    variant: str = "full"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        base = cls()
        for key in ("losses", "loss_weights"):
            if key in d:
                extra = sorted(set(d[key]) - set(LOSS_TERMS))
                if extra:
                    raise ConfigError(f"unknown loss terms in {key}: {extra}")
                d[key] = {**getattr(base, key), **d[key]}
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["losses"] = {k: bool(self.losses[k]) for k in LOSS_TERMS}
        d["loss_weights"] = {k: float(self.loss_weights[k]) for k in LOSS_TERMS}
        return d

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.rho <= 0:
            raise ConfigError("rho must be > 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if not self.losses.get("det", False):
            raise ConfigError("the detection loss must stay enabled")
        if self.sampler not in ("ranked", "last_frame"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.token not in ("shared", "per_action"):
            raise ConfigError(f"unknown token variant {self.token!r}")
        if self.layers < 1 or self.heads < 1 or self.gat_layers < 1:
            raise ConfigError("layers, heads and gat_layers must be >= 1")
        if self.prefix_init not in ("centered", "random"):
            raise ConfigError(f"unknown prefix_init {self.prefix_init!r}")
        if not 0.0 <= self.detector_dropout < 1.0 or self.detector_box_jitter < 0:
            raise ConfigError("detector noise settings out of range")

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def uses_knowledge(self) -> bool:
        return any(self.losses[k] for k in ("eff_s", "eff_r", "cl_s", "cl_r"))


@dataclass
class ModelState:
    """All tensors of a model.  ``params`` are trained; ``frozen`` never change."""

    config: TrainConfig
    meta: dict  # task_name, actions, dim, d_effect, max_objects, data_signature
    params: dict[str, np.ndarray]
    frozen: dict[str, np.ndarray]  # "mixing" (D, D), "vocab" (V, D)
    vocab_words: list[str]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    grad_masks: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return int(self.meta["dim"])

    @property
    def actions(self) -> list[str]:
        return list(self.meta["actions"])

    @property
    def vocab(self) -> dict[str, np.ndarray]:
        return {w: self.frozen["vocab"][i] for i, w in enumerate(self.vocab_words)}

    def prompt_bank(self) -> PromptBank:
        return PromptBank.build(self.meta["task_name"], self.actions, self.vocab,
                                self.frozen["mixing"])

    def descriptions(self, action: str) -> np.ndarray:
        """Effect-description embeddings of ``action`` under the frozen text table."""
        vocab = self.vocab
        return np.stack([stub_text_encoder(t, vocab)
                         for t in self.meta["effect_descriptions"][action]])

    def effect_frame(self, segment) -> int:
        return sample_effect_frame(segment, self.descriptions(segment.action), self.config.sampler)

    def tensors(self) -> dict[str, Tensor]:
        """Parameters as tape-less tensors, for inference."""
        return {k: Tensor(v) for k, v in self.params.items()}

    def copy(self) -> "ModelState":
        cp = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return ModelState(self.config, dict(self.meta), cp(self.params), cp(self.frozen),
                          list(self.vocab_words), cp(self.adam_m), cp(self.adam_v), self.step,
                          cp(self.grad_masks))


def data_signature(dataset) -> str:
    spec = dataset.spec
    blob = json.dumps({"task": spec.task_name, "actions": spec.actions,
                       "dim": dataset.config.feature_dim,
                       "max_objects": dataset.config.max_objects}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def init_model(dataset, config: TrainConfig) -> ModelState:
    dim = dataset.config.feature_dim
    d_effect = config.d_effect or dim
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 11]))
    n_tokens = len(dataset.spec.actions) if config.token == "per_action" else 1
    params = effect.init_params(rng, dim, d_effect, layers=config.layers, num_tokens=n_tokens)
    params.update(knowledge.init_params(rng, dim, d_effect, dataset.config.max_objects,
                                        config.gat_layers))
    params["prompt.prefix"] = rng.normal(0.0, 0.02, size=dim)
    if config.prefix_init == "centered":
        bank = PromptBank.build(dataset.spec.task_name, dataset.spec.actions,
                                dataset.vocab_embeddings, frozen_mixing_map(dim, dataset.seed))
        params["prompt.prefix"] -= bank.token_sums.mean(axis=0)
    masks = {}
    if not config.effect_fusion:
        params["fuse.w"][dim:] = 0.0
        m = np.ones_like(params["fuse.w"])
        m[dim:] = 0.0
        masks["fuse.w"] = m
    if config.freeze_text_branch:
        for k in params:
            if k.startswith(("gat.", "pool_")):
                masks[k] = np.zeros_like(params[k])
    words = sorted(dataset.vocab_embeddings)
    frozen = {
        "mixing": frozen_mixing_map(dim, dataset.seed),
        "vocab": np.stack([dataset.vocab_embeddings[w] for w in words]),
    }
    meta = {
        "task_name": dataset.spec.task_name,
        "actions": list(dataset.spec.actions),
        "dim": dim,
        "d_effect": d_effect,
        "max_objects": dataset.config.max_objects,
        "data_signature": data_signature(dataset),
        "effect_descriptions": {a: list(t) for a, t in dataset.spec.effect_descriptions.items()},
    }
    return ModelState(config, meta, params, frozen, words,
                      {k: np.zeros_like(v) for k, v in params.items()},
                      {k: np.zeros_like(v) for k, v in params.items()}, 0, masks)


# -- forward passes --------------------------------------------------------


def token_for(P, model: ModelState, action_idx) -> Tensor:
    if model.config.token == "per_action":
        return nx.take_rows(P["token"], np.asarray(action_idx))
    return P["token"]


def effect_frame_mask(frame_mask: np.ndarray, effect_frames) -> np.ndarray:
    """Key mask under which the token sees only its effect frame and itself."""
    mask = effect.key_mask(frame_mask)
    T = frame_mask.shape[1]
    for b, f in enumerate(effect_frames):
        row = np.full(T + 1, nx.NEG_INF)
        row[f] = 0.0
        row[T] = 0.0
        mask[b, 0, T] = row
    return mask


def segment_forward(P, model: ModelState, frames: list[np.ndarray], action_idx,
                    mask_add=None, active=None, effect_frames=None):
    """Encoder, fusion and pooling for a batch; returns (x_a, proj_s, proj_r, frame_mask).

    With ``effect_frames`` the effect token attends only to that frame of each
    segment (and to itself); frame positions attend as usual.
    """
    cfg = model.config
    X, fmask = effect.pad_batch(frames)
    if mask_add is None and effect_frames is not None:
        mask_add = effect_frame_mask(fmask, effect_frames)
    tok = token_for(P, model, action_idx)
    X_enc, e_enc = effect.encode_with_token(
        P, X, fmask, tok, layers=cfg.layers, heads=cfg.heads,
        position_scale=cfg.position_scale, mask_add=mask_add)
    if active is None:
        active = ("s", "r") if cfg.effect_fusion else ()
    fused = effect.fuse(P, X_enc, e_enc, active=active)
    x_a = action_embedding(fused, fmask)
    proj_s = effect.project_token(P, e_enc, "s")
    proj_r = effect.project_token(P, e_enc, "r")
    return x_a, proj_s, proj_r, fmask


def score_segments(model: ModelState, segments, batch_size: int = 64,
                   mode: str = "joint") -> np.ndarray:
    """Deployed mistake probability per segment.

    ``"joint"`` fuses both effect projections, as in training.
    ``"symmetric"`` averages the two single-projection scores.  With
    ``token_focus`` the token sees only the frame chosen by the model's sampler.
    """
    if mode not in ("joint", "symmetric"):
        raise ValueError(f"unknown score mode {mode!r}")
    P = model.tensors()
    bank = model.prompt_bank()
    Y = bank.embed_all(P["prompt.prefix"]).data
    cfg = model.config
    if not cfg.effect_fusion:
        passes = [()]
    elif mode == "joint":
        passes = [("s", "r")]
    else:
        passes = [("s",), ("r",)]
    out = []
    for i in range(0, len(segments), batch_size):
        chunk = segments[i:i + batch_size]
        idx = [bank.index(s.action) for s in chunk]
        frames = [s.frames.astype(np.float64) for s in chunk]
        focus = [model.effect_frame(s) for s in chunk] if cfg.token_focus else None
        sc = 0.0
        for active in passes:
            x_a, *_ = segment_forward(P, model, frames, idx, active=active, effect_frames=focus)
            sc = sc + mistake_probability(x_a.data, Y[idx])
        out.append(sc / len(passes))
    return np.concatenate(out) if out else np.zeros(0)


def frame_descriptor_scores(model: ModelState, segment) -> np.ndarray:
    """Mistake probability per (frame, descriptor), shape (T, 2).

    For frame f the effect token may attend only to frame f and itself; for
    descriptor i only that descriptor's projection enters the fusion.
    """
    P = model.tensors()
    bank = model.prompt_bank()
    a = bank.index(segment.action)
    y = bank.embed_all(P["prompt.prefix"]).data[a]
    T = segment.T
    frames = [segment.frames.astype(np.float64)] * T
    mask = effect_frame_mask(np.ones((T, T)), range(T))
    scores = np.zeros((T, 2))
    for i, which in enumerate(("s", "r")):
        x_a, *_ = segment_forward(P, model, frames, [a] * T, mask_add=mask, active=(which,))
        scores[:, i] = mistake_probability(x_a.data, y[None, :])
    return scores
