"""Effect token, temporal encoder, effect losses and feature fusion."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .knowledge import glorot
from .numerics import Tensor


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / dim))
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def pad_batch(frames: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length (T_i, D) arrays into (B, T_max, D) plus a (B, T_max) mask."""
    t_max = max(f.shape[0] for f in frames)
    dim = frames[0].shape[1]
    X = np.zeros((len(frames), t_max, dim))
    mask = np.zeros((len(frames), t_max))
    for b, f in enumerate(frames):
        X[b, :len(f)] = f
        mask[b, :len(f)] = 1.0
    return X, mask


def key_mask(frame_mask: np.ndarray) -> np.ndarray:
    """Additive attention mask (B, 1, L, L) for frames plus the trailing token."""
    B = frame_mask.shape[0]
    keys = np.concatenate([frame_mask, np.ones((B, 1))], axis=1)
    add = np.where(keys > 0, 0.0, nx.NEG_INF)
    L = keys.shape[1]
    return np.broadcast_to(add[:, None, None, :], (B, 1, L, L)).copy()


def _attention(P, prefix: str, h: Tensor, mask_add: np.ndarray, heads: int) -> Tensor:
    B, L, D = h.shape
    dh = D // heads
    qkv = nx.linear(h, P[f"{prefix}.qkv.w"])  # no bias: a key bias cannot change attention

    def split(part):
        x = qkv[:, :, part * D:(part + 1) * D]
        return nx.transpose(nx.reshape(x, (B, L, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(0), split(1), split(2)
    scores = nx.matmul(q, nx.swap_last(k)) * (1.0 / np.sqrt(dh))
    att = nx.softmax(nx.add(scores, mask_add), axis=-1)
    ctx = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, L, D))
    return nx.linear(ctx, P[f"{prefix}.out.w"], P[f"{prefix}.out.b"])


def encoder_layer(P, layer: int, h: Tensor, mask_add: np.ndarray, heads: int) -> Tensor:
    pre = f"enc.{layer}"
    h = h + _attention(P, pre, nx.layer_norm(h, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"]),
                       mask_add, heads)
    z = nx.layer_norm(h, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"])
    z = nx.linear(nx.gelu(nx.linear(z, P[f"{pre}.ff1.w"], P[f"{pre}.ff1.b"])),
                  P[f"{pre}.ff2.w"], P[f"{pre}.ff2.b"])
    return h + z


def encode_with_token(P, X: np.ndarray, frame_mask: np.ndarray, token: Tensor, *,
                      layers: int = 2, heads: int = 2, position_scale: float = 0.1,
                      mask_add: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Run ``[X_1..X_T, e]`` through pre-norm encoder layers.

    ``X`` is a padded (B, T_max, D) batch; ``token`` is (D,) shared or (B, D).
    Returns the frame outputs (B, T_max, D) and the token outputs (B, D).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
        frame_mask = np.ones((1, X.shape[1]))
    B, T, D = X.shape
    if T < 1:
        raise ValueError("encoder needs at least one frame")
    if position_scale:
        X = X + position_scale * sinusoidal_positions(T, D)[None]
    tok = nx.reshape(token, (1, 1, D)) if token.ndim == 1 else nx.reshape(token, (B, 1, D))
    if tok.shape[0] != B:
        tok = nx.broadcast_to(tok, (B, 1, D))
    h = nx.concat([Tensor(X), tok], axis=1)
    if mask_add is None:
        mask_add = key_mask(frame_mask)
    for layer in range(layers):
        h = encoder_layer(P, layer, h, mask_add, heads)
    h = nx.layer_norm(h, P["enc.lnf.g"], P["enc.lnf.b"])
    return h[:, :T, :], h[:, T, :]


def project_token(P, e_enc: Tensor, which: str) -> Tensor:
    return nx.linear(e_enc, P[f"proj_{which}.w"], P[f"proj_{which}.b"])


def squared_distance(a: Tensor, b) -> Tensor:
    """Row-wise squared Euclidean distance, (B,)."""
    return nx.sum_(nx.square(nx.sub(a, b)), axis=-1)


def effect_alignment_loss(proj: Tensor, visual, textual, *, use_visual: bool = True,
                          use_textual: bool = True) -> Tensor:
    """Batch mean of ``|proj - v|^2 + |proj - t|^2``.

    ``visual`` is treated as a constant target (no gradient reaches it);
    ``textual`` keeps its gradient path.
    """
    terms = []
    if use_visual:
        v = visual.data if isinstance(visual, Tensor) else np.asarray(visual, dtype=np.float64)
        terms.append(squared_distance(proj, v))
    if use_textual:
        terms.append(squared_distance(proj, textual))
    if not terms:
        return Tensor(0.0)
    total = terms[0] if len(terms) == 1 else nx.add(terms[0], terms[1])
    return nx.mean(total)


def effect_contrastive_loss(v, t, rho: float) -> Tensor:
    """InfoNCE summed over the batch: ``v_i`` is positive with ``t_i`` only."""
    if rho <= 0:
        raise ValueError("temperature must be positive")
    v = v if isinstance(v, Tensor) else Tensor(v)
    t = t if isinstance(t, Tensor) else Tensor(t)
    logits = nx.cosine_matrix(v, t) * (1.0 / rho)
    return nx.cross_entropy(logits, np.arange(v.shape[0]), reduction="sum")


def fuse(P, X_enc: Tensor, e_enc: Tensor, active=("s", "r")) -> Tensor:
    """``F(X || proj_s(e) || proj_r(e))`` with the token blocks broadcast over time.

    Blocks not listed in ``active`` are replaced by zeros.
    """
    X_enc = X_enc if isinstance(X_enc, Tensor) else Tensor(X_enc)
    squeeze = X_enc.ndim == 2
    if squeeze:
        X_enc = nx.reshape(X_enc, (1,) + X_enc.shape)
        e_enc = nx.reshape(e_enc, (1, -1))
    B, T, _ = X_enc.shape
    blocks = [X_enc]
    for which in ("s", "r"):
        p = project_token(P, e_enc, which)
        d_e = p.shape[-1]
        if which not in active:
            blocks.append(Tensor(np.zeros((B, T, d_e))))
        else:
            blocks.append(nx.broadcast_to(nx.reshape(p, (B, 1, d_e)), (B, T, d_e)))
    out = nx.linear(nx.concat(blocks, axis=-1), P["fuse.w"], P["fuse.b"])
    return nx.reshape(out, out.shape[1:]) if squeeze else out


def init_params(rng: np.random.Generator, dim: int, d_effect: int, *, layers: int = 2,
                num_tokens: int = 1) -> dict[str, np.ndarray]:
    p = {}
    p["token"] = rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim if num_tokens == 1 else (num_tokens, dim))
    for layer in range(layers):
        pre = f"enc.{layer}"
        p[f"{pre}.ln1.g"] = np.ones(dim)
        p[f"{pre}.ln1.b"] = np.zeros(dim)
        p[f"{pre}.qkv.w"] = glorot(rng, dim, 3 * dim)
        p[f"{pre}.out.w"] = glorot(rng, dim, dim)
        p[f"{pre}.out.b"] = np.zeros(dim)
        p[f"{pre}.ln2.g"] = np.ones(dim)
        p[f"{pre}.ln2.b"] = np.zeros(dim)
        p[f"{pre}.ff1.w"] = glorot(rng, dim, 4 * dim)
        p[f"{pre}.ff1.b"] = np.zeros(4 * dim)
        p[f"{pre}.ff2.w"] = glorot(rng, 4 * dim, dim)
        p[f"{pre}.ff2.b"] = np.zeros(dim)
    p["enc.lnf.g"] = np.ones(dim)
    p["enc.lnf.b"] = np.zeros(dim)
    for which in ("s", "r"):
        p[f"proj_{which}.w"] = glorot(rng, dim, d_effect)
        p[f"proj_{which}.b"] = np.zeros(d_effect)
    p["fuse.w"] = glorot(rng, dim + 2 * d_effect, dim)
    p["fuse.b"] = np.zeros(dim)
    return p
