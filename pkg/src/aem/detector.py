"""Prompt-based mistake detector.

Each action gets a text prompt.  Its embedding is the frozen text encoder
applied to a learnable prefix plus the prompt's word vectors.  A segment is
scored by the cosine between its pooled embedding and its own action's prompt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .simulator import hash_vector, tokenize

PROMPT_TEMPLATE = "An image showing {action} for {task}"


def build_prompt(action: str, task: str) -> str:
    return PROMPT_TEMPLATE.format(action=action, task=task)


def frozen_mixing_map(dim: int, seed: int) -> np.ndarray:
    """Seeded random orthonormal matrix standing in for the frozen text encoder."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


@dataclass
class PromptBank:
    task_name: str
    actions: list[str]
    prompts: list[str]
    token_sums: np.ndarray  # (C, D) sum of prompt word vectors
    mixing: np.ndarray  # (D, D), frozen

    @classmethod
    def build(cls, task_name: str, actions, vocab: dict, mixing: np.ndarray) -> "PromptBank":
        actions = list(actions)
        dim = mixing.shape[0]
        prompts = [build_prompt(a, task_name) for a in actions]
        sums = []
        for text in prompts:
            words = tokenize(text)
            sums.append(np.sum([vocab[w] if w in vocab else hash_vector(w, dim) for w in words],
                               axis=0))
        return cls(task_name, actions, prompts, np.stack(sums), mixing)

    def index(self, action: str) -> int:
        try:
            return self.actions.index(action)
        except ValueError:
            raise KeyError(f"unknown action {action!r}") from None

    def embed_all(self, prefix) -> Tensor:
        """Prompt embeddings (C, D), unit rows.

        The prefix and word vectors are pooled by summation; after the final
        normalisation this is identical to mean pooling, and ``prefix = 0``
        reproduces the pure prompt-text path bit for bit.
        """
        prefix = prefix if isinstance(prefix, Tensor) else Tensor(prefix)
        pooled = nx.add(Tensor(self.token_sums), prefix)
        return nx.l2_normalize(nx.matmul(pooled, Tensor(self.mixing.T)))

    def embed(self, prefix, action: str) -> np.ndarray:
        return self.embed_all(prefix).data[self.index(action)]

    def text_embedding(self, action: str) -> np.ndarray:
        """Prompt embedding without any prefix."""
        v = self.token_sums @ self.mixing.T
        norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
        return (v / np.maximum(norm, nx.COS_EPS))[self.index(action)]


class DegenerateSegmentError(ValueError):
    pass


def action_embedding(X_fused: Tensor, frame_mask: np.ndarray | None = None) -> Tensor:
    """Temporal mean of the fused features, unit-normalised.  (B, T, D) or (T, D)."""
    X_fused = X_fused if isinstance(X_fused, Tensor) else Tensor(X_fused)
    if X_fused.ndim == 2:
        pooled = nx.mean(X_fused, axis=0)
    else:
        if frame_mask is None:
            frame_mask = np.ones(X_fused.shape[:2])
        m = np.asarray(frame_mask, dtype=np.float64)
        pooled = nx.sum_(nx.mul(X_fused, m[:, :, None]), axis=1) * (1.0 / m.sum(axis=1))[:, None]
    norms = np.linalg.norm(pooled.data, axis=-1)
    if np.any(norms < nx.COS_EPS):
        raise DegenerateSegmentError("pooled segment feature is the zero vector")
    return nx.l2_normalize(pooled)


def detection_loss(x, targets, prompts, rho: float) -> Tensor:
    """Mean InfoNCE of each action embedding against all prompt embeddings of the task."""
    if rho <= 0:
        raise ValueError("temperature must be positive")
    x = x if isinstance(x, Tensor) else Tensor(x)
    prompts = prompts if isinstance(prompts, Tensor) else Tensor(prompts)
    logits = nx.cosine_matrix(x, prompts) * (1.0 / rho)
    return nx.cross_entropy(logits, np.asarray(targets), reduction="mean")


def mistake_probability(x_a, y_a) -> float | np.ndarray:
    """``(1 - cos) / 2``: a monotone map of the similarity onto [0, 1]."""
    x = np.asarray(x_a, dtype=np.float64)
    y = np.asarray(y_a, dtype=np.float64)
    xn = x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), nx.COS_EPS)
    yn = y / np.maximum(np.linalg.norm(y, axis=-1, keepdims=True), nx.COS_EPS)
    cos = np.clip((xn * yn).sum(axis=-1), -1.0, 1.0)
    out = (1.0 - cos) / 2.0
    return float(out) if np.ndim(out) == 0 else out


def classify(score, tau: float):
    """1 iff ``score > tau`` (strict)."""
    return (np.asarray(score) > tau).astype(int) if np.ndim(score) else int(score > tau)


def marginalize(frame_probs, scores, descriptor_probs=None) -> float:
    """``sum_f sum_i P(f) * P(i | f) * score[f, i]`` for a (T, K) score table."""
    frame_probs = np.asarray(frame_probs, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    T, K = scores.shape
    if descriptor_probs is None:
        descriptor_probs = np.full((T, K), 1.0 / K)
    w = frame_probs[:, None] * np.asarray(descriptor_probs, dtype=np.float64)
    return float((w * scores).sum())


def top1_symmetric_score(frame_probs, scores) -> float:
    """Score of the top-ranked frame with both descriptors weighted equally."""
    f = int(np.argmax(frame_probs))
    return float(np.mean(np.asarray(scores, dtype=np.float64)[f]))


def exact_marginal(segment, model, descriptions, frame_probs=None, descriptor_probs=None):
    """Marginal mistake probability over effect frames and the two effect descriptors.

    Diagnostic only.  Returns ``(marginal, top1_symmetric, scores)`` where
    ``scores`` is the (T, 2) per-(frame, descriptor) table.
    """
    from .model import frame_descriptor_scores
    from .sampling import select_effect_frame

    if frame_probs is None:
        frame_probs = select_effect_frame(segment.frames, segment.patches,
                                          descriptions).distribution
    scores = frame_descriptor_scores(model, segment)
    return (marginalize(frame_probs, scores, descriptor_probs),
            top1_symmetric_score(frame_probs, scores), scores)
