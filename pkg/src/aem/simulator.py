"""Synthetic procedural-task videos with injected mistakes.

A ``World`` is derived from ``(config, seed)`` and holds everything the
generator needs: the task (actions, objects, attributes, canonical layouts,
effect descriptions), the frozen word-vector table, and per-action feature
prototypes.  Each segment is a noisy walk along its action's prototype with a
single *effect frame* at which an effect signature is added and the image
patch is rendered sharp.  The effect signature encodes the object states and
the spatial layout, so state and relation mistakes only touch that frame.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

MISTAKE_KINDS = ("execution", "state", "relation")
SPLITS = ("train", "val", "test")
PATCH_SIZE = 16
RELATION_INVERSE = {
    "left of": "right of",
    "right of": "left of",
    "above": "below",
    "below": "above",
    "inside": "contains",
    "contains": "inside",
}

_VERBS = [
    "cut", "pour", "stir", "place", "spread", "fold", "heat", "add", "slice", "mix",
    "roll", "boil", "wrap", "press", "sprinkle", "peel", "whisk", "rinse", "scoop", "flip",
]
_OBJECTS = [
    "cucumber", "tortilla", "water", "kettle", "bowl", "plate", "knife", "cup", "pan",
    "butter", "jam", "oats", "banana", "spoon", "cheese", "mug", "teabag", "filter",
    "lid", "board", "egg", "milk", "honey", "bread", "salsa", "pot", "towel", "jar",
]
_ATTRIBUTES = [
    "whole", "sliced", "diced", "folded", "flat", "empty", "full", "hot", "cold", "melted",
    "open", "closed", "wet", "dry", "browned", "raw", "mixed", "peeled", "clean", "dirty",
]
_RELATIONS = ["left", "right", "of", "above", "below", "inside", "contains"]
_FILLER = ["the", "is", "an", "image", "showing", "for", "a", "with", "now", "and", "done"]


class ConfigError(ValueError):
    pass


class InjectionError(ValueError):
    pass


# -- configuration ---------------------------------------------------------


@dataclass
class SimConfig:
    task_name: str = "synthetic recipe"
    num_actions: int = 6
    feature_dim: int = 64
    min_len: int = 8
    max_len: int = 24
    max_objects: int = 4
    descriptions_per_action: int = 3
    train_videos: int = 50
    val_videos: int = 6
    test_videos: int = 200
    mistake_rates: dict = field(
        default_factory=lambda: {"execution": 0.05, "state": 0.2, "relation": 0.2}
    )
    frame_noise: float = 1.0
    prototype_scale: float = 0.2
    effect_description_strength: float = 0.2
    effect_state_strength: float = 3.0
    effect_geometry_strength: float = 4.0
    attribute_delta: float = 1.0
    crop_noise: float = 0.1
    box_jitter: float = 0.02
    intensity_range: tuple = (0.7, 1.0)
    effect_position: str = "uniform"
    blur_sharpness_max: float = 0.75

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        if isinstance(cfg.intensity_range, list):
            cfg.intensity_range = tuple(cfg.intensity_range)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensity_range"] = list(self.intensity_range)
        d["mistake_rates"] = {k: float(self.mistake_rates[k]) for k in sorted(self.mistake_rates)}
        return d

    def validate(self) -> None:
        if self.num_actions < 2:
            raise ConfigError("num_actions must be >= 2")
        if self.num_actions > min(len(_VERBS), len(_OBJECTS)):
            raise ConfigError("num_actions exceeds the word pools")
        if self.feature_dim < 8 or self.feature_dim % 8:
            raise ConfigError("feature_dim must be a positive multiple of 8")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if not 2 <= self.max_objects <= 8:
            raise ConfigError("max_objects must be in [2, 8]")
        if self.descriptions_per_action < 1:
            raise ConfigError("descriptions_per_action must be >= 1")
        for name in ("train_videos", "val_videos", "test_videos"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        unknown = set(self.mistake_rates) - set(MISTAKE_KINDS)
        if unknown:
            raise ConfigError(f"unknown mistake kinds: {sorted(unknown)}")
        rates = [float(self.mistake_rates.get(k, 0.0)) for k in MISTAKE_KINDS]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ConfigError("mistake rates must lie in [0, 1]")
        if sum(rates) > 1.0 + 1e-12:
            raise ConfigError("mistake rates must sum to at most 1")
        if self.effect_position not in ("uniform", "final"):
            raise ConfigError("effect_position must be 'uniform' or 'final'")
        lo, hi = self.intensity_range
        if not 0 < lo <= hi:
            raise ConfigError("intensity_range must satisfy 0 < lo <= hi")
        if not 0.0 <= self.blur_sharpness_max <= 0.75:
            raise ConfigError("blur_sharpness_max must lie in [0, 0.75]")


# -- domain types ----------------------------------------------------------


@dataclass
class TaskSpec:
    task_name: str
    actions: list[str]
    objects_per_action: dict[str, list[str]]
    effect_descriptions: dict[str, list[str]]
    attribute_values: dict[str, list[str]]
    effect_attributes: dict[str, list[str]]
    pre_attributes: dict[str, list[str]]
    layouts: dict[str, list[list[float]]]
    pre_layouts: dict[str, list[list[float]]]

    def validate(self, max_objects: int | None = None) -> None:
        if len(self.actions) < 2:
            raise ConfigError("a task needs at least two actions")
        if len(set(self.actions)) != len(self.actions):
            raise ConfigError("action labels must be unique")
        for a in self.actions:
            objs = self.objects_per_action.get(a, [])
            if not objs:
                raise ConfigError(f"action {a!r} has no objects")
            if max_objects is not None and len(objs) > max_objects:
                raise ConfigError(f"action {a!r} has more than {max_objects} objects")
            if not self.effect_descriptions.get(a):
                raise ConfigError(f"action {a!r} has no effect description")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


@dataclass(eq=False)
class ObjectObs:
    label: str
    box: tuple  # (cx, cy, w, h)
    attribute: str
    intensity: float
    crop: np.ndarray  # float32 (D,)

    def __eq__(self, other):
        return (
            isinstance(other, ObjectObs)
            and self.label == other.label
            and tuple(self.box) == tuple(other.box)
            and self.attribute == other.attribute
            and self.intensity == other.intensity
            and np.array_equal(self.crop, other.crop)
        )

    def copy(self) -> "ObjectObs":
        return ObjectObs(self.label, tuple(self.box), self.attribute, self.intensity, self.crop.copy())


@dataclass(eq=False)
class Segment:
    segment_id: str
    video_id: str
    t_s: int
    t_e: int
    action: str
    mistake: int
    mistake_kind: str
    frames: np.ndarray  # float32 (T, D)
    patches: np.ndarray  # float32 (T, 16, 16)
    objects: list[ObjectObs]
    pre_objects: list[ObjectObs]
    gt_effect_index: int

    @property
    def T(self) -> int:
        return self.t_e - self.t_s

    def __eq__(self, other):
        if not isinstance(other, Segment):
            return NotImplemented
        scalars = ("segment_id", "video_id", "t_s", "t_e", "action", "mistake",
                   "mistake_kind", "gt_effect_index")
        return (
            all(getattr(self, k) == getattr(other, k) for k in scalars)
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.patches, other.patches)
            and self.objects == other.objects
            and self.pre_objects == other.pre_objects
        )

    def copy(self) -> "Segment":
        return Segment(
            self.segment_id, self.video_id, self.t_s, self.t_e, self.action, self.mistake,
            self.mistake_kind, self.frames.copy(), self.patches.copy(),
            [o.copy() for o in self.objects], [o.copy() for o in self.pre_objects],
            self.gt_effect_index,
        )

    def observations(self, frame_index: int) -> list[ObjectObs]:
        """Object observations a detector would return at ``frame_index``."""
        return self.objects if frame_index == self.gt_effect_index else self.pre_objects


@dataclass(eq=False)
class Dataset:
    config: SimConfig
    spec: TaskSpec
    splits: dict[str, list[Segment]]
    vocab_embeddings: dict[str, np.ndarray]
    seed: int

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.config == other.config
            and self.spec == other.spec
            and self.seed == other.seed
            and sorted(self.vocab_embeddings) == sorted(other.vocab_embeddings)
            and all(np.array_equal(v, other.vocab_embeddings[k])
                    for k, v in self.vocab_embeddings.items())
            and self.splits.keys() == other.splits.keys()
            and all(self.splits[k] == other.splits[k] for k in self.splits)
        )

    def segments(self, split: str) -> list[Segment]:
        return self.splits[split]

    def descriptions(self, action: str) -> np.ndarray:
        """Unit-normalised effect-description embeddings, shape (K, D)."""
        return np.stack([stub_text_encoder(t, self.vocab_embeddings)
                         for t in self.spec.effect_descriptions[action]])

    def world(self) -> "World":
        return build_world(self.config, self.seed)


# -- text encoder stub -----------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def hash_vector(word: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return _unit(rng.standard_normal(dim))


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def stub_text_encoder(text: str, vocab_embeddings: dict[str, np.ndarray]) -> np.ndarray:
    """Frozen bag-of-words text encoder: mean of word vectors, unit-normalised.

    Words missing from the table get a vector derived from a hash of the word.
    """
    words = tokenize(text)
    if not words:
        raise ValueError("cannot encode empty text")
    dim = len(next(iter(vocab_embeddings.values())))
    vecs = [vocab_embeddings[w] if w in vocab_embeddings else hash_vector(w, dim) for w in words]
    return _unit(np.mean(vecs, axis=0))


def build_vocab(dim: int, rng: np.random.Generator, extra_words=()) -> dict[str, np.ndarray]:
    words = sorted(set(_VERBS + _OBJECTS + _ATTRIBUTES + _RELATIONS + _FILLER) | set(extra_words))
    return {w: _unit(rng.standard_normal(dim)) for w in words}


# -- geometry --------------------------------------------------------------


def spatial_relation(a, b) -> str:
    """Relation of box ``a`` relative to box ``b`` from their centres."""
    acx, acy, aw, ah = a
    bcx, bcy, bw, bh = b
    a_in_b = abs(acx - bcx) <= bw / 2 and abs(acy - bcy) <= bh / 2
    b_in_a = abs(bcx - acx) <= aw / 2 and abs(bcy - acy) <= ah / 2
    if a_in_b and aw * ah < bw * bh:
        return "inside"
    if b_in_a and bw * bh < aw * ah:
        return "contains"
    dx, dy = acx - bcx, acy - bcy
    if abs(dx) >= abs(dy):
        return "left of" if dx < 0 else "right of"
    return "above" if dy < 0 else "below"


def box_in_unit_square(box) -> bool:
    cx, cy, w, h = box
    return (
        all(0.0 <= v <= 1.0 for v in box)
        and cx - w / 2 >= -1e-12 and cx + w / 2 <= 1 + 1e-12
        and cy - h / 2 >= -1e-12 and cy + h / 2 <= 1 + 1e-12
    )


def chain_relations(boxes) -> list[str]:
    return [spatial_relation(boxes[i], boxes[i + 1]) for i in range(len(boxes) - 1)]


def _random_layout(n: int, rng: np.random.Generator) -> list[list[float]]:
    # consecutive objects are kept well apart (or clearly nested) so that small
    # jitter never flips a relation
    nested = bool(rng.uniform() < 0.25)
    for _ in range(1000):
        boxes = []
        for i in range(n):
            if nested and i == 1:
                w, h = rng.uniform(0.3, 0.4, size=2)
                cx = float(np.clip(boxes[0][0] + rng.uniform(-0.03, 0.03), w / 2, 1 - w / 2))
                cy = float(np.clip(boxes[0][1] + rng.uniform(-0.03, 0.03), h / 2, 1 - h / 2))
            else:
                w, h = rng.uniform(0.08, 0.18, size=2)
                cx, cy = rng.uniform(0.2, 0.8, size=2)
            boxes.append([float(cx), float(cy), float(w), float(h)])
        ok = True
        for i, (a, b) in enumerate(zip(boxes, boxes[1:])):
            if nested and i == 0:
                ok &= spatial_relation(a, b) == "inside" and (
                    abs(a[0] - b[0]) < b[2] / 2 - 0.08 and abs(a[1] - b[1]) < b[3] / 2 - 0.08)
                continue
            dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
            need = max(a[2], a[3], b[2], b[3]) / 2 + 0.12
            if max(dx, dy) < need or abs(dx - dy) < 0.1:
                ok = False
        if ok:
            return boxes
    raise RuntimeError("could not place a layout")  # pragma: no cover


# -- scene graphs from observations -----------------------------------------


def scene_graph_record(segment_id: str, objects: list[ObjectObs], view: str = "effect") -> dict:
    """Ground-truth scene-graph record: objects, one attribute each, chained relations."""
    nodes, edges = [], []
    for i, o in enumerate(objects):
        nodes.append({"id": f"o{i}", "kind": "object", "label": o.label})
    for i, o in enumerate(objects):
        nodes.append({"id": f"a{i}", "kind": "attribute", "label": o.attribute})
        edges.append([f"o{i}", f"a{i}"])
    for i, rel in enumerate(chain_relations([o.box for o in objects])):
        nodes.append({"id": f"r{i}", "kind": "relation", "label": rel})
        edges.append([f"o{i}", f"r{i}"])
        edges.append([f"r{i}", f"o{i + 1}"])
    return {"segment_id": segment_id, "view": view, "nodes": nodes, "edges": edges}


# -- patches ---------------------------------------------------------------


def box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out / 9.0


def blur_passes(sharpness_level: float) -> int:
    return int(math.floor((1.0 - sharpness_level) * 4 + 1e-12))


def render_patch(sharpness_level: float, rng: np.random.Generator) -> np.ndarray:
    """Random binary texture box-blurred floor((1 - sharpness) * 4) times."""
    img = rng.integers(0, 2, size=(PATCH_SIZE, PATCH_SIZE)).astype(np.float64)
    for _ in range(blur_passes(sharpness_level)):
        img = box_blur(img)
    return img


# -- the world ---------------------------------------------------------------


@dataclass
class World:
    config: SimConfig
    spec: TaskSpec
    vocab: dict[str, np.ndarray]
    prototypes: dict[str, np.ndarray]  # action -> (4, D) cosine-basis coefficients
    description_centroids: dict[str, np.ndarray]
    geometry_axes: dict[str, np.ndarray]  # object label -> (2, D)

    @property
    def dim(self) -> int:
        return self.config.feature_dim

    def trajectory(self, action: str, T: int) -> np.ndarray:
        u = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
        basis = np.stack([np.cos(np.pi * k * u) for k in range(4)], axis=1)  # (T, 4)
        return basis @ self.prototypes[action]

    def state_code(self, objects: list[ObjectObs]) -> np.ndarray:
        code = sum(o.intensity * self.vocab[o.attribute] for o in objects)
        return code / math.sqrt(len(objects))

    def geometry_code(self, objects: list[ObjectObs]) -> np.ndarray:
        code = np.zeros(self.dim)
        for o in objects:
            ax = self.geometry_axes[o.label]
            code += (o.box[0] - 0.5) * ax[0] + (o.box[1] - 0.5) * ax[1]
        return code

    def effect_signature(self, action: str, objects: list[ObjectObs]) -> np.ndarray:
        c = self.config
        return (
            c.effect_description_strength * self.description_centroids[action]
            + c.effect_state_strength * self.state_code(objects)
            + c.effect_geometry_strength * self.geometry_code(objects)
        )

    def crop_embedding(self, label: str, attribute: str, intensity: float,
                       rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal(self.dim) * (self.config.crop_noise / math.sqrt(self.dim))
        return self.vocab[label] + intensity * self.vocab[attribute] + noise


def _make_task(config: SimConfig, rng: np.random.Generator) -> TaskSpec:
    C = config.num_actions
    verbs = [str(v) for v in rng.choice(_VERBS, size=C, replace=False)]
    primaries = [str(o) for o in rng.choice(_OBJECTS, size=C, replace=False)]
    actions = [f"{v} {o}" for v, o in zip(verbs, primaries)]
    attribute_values: dict[str, list[str]] = {}
    for o in _OBJECTS:
        k = int(rng.integers(2, 4))
        attribute_values[o] = [str(a) for a in rng.choice(_ATTRIBUTES, size=k, replace=False)]
    objects_per_action, effect_attrs, pre_attrs = {}, {}, {}
    layouts, pre_layouts, descriptions = {}, {}, {}
    for a, prim in zip(actions, primaries):
        n = int(rng.integers(2, config.max_objects + 1))
        others = [str(o) for o in rng.choice([o for o in _OBJECTS if o != prim], size=n - 1,
                                               replace=False)]
        objs = [prim] + others
        objects_per_action[a] = objs
        eff, pre = [], []
        for o in objs:
            vals = attribute_values[o]
            i, j = rng.choice(len(vals), size=2, replace=False)
            eff.append(vals[i])
            pre.append(vals[j])
        effect_attrs[a], pre_attrs[a] = eff, pre
        layouts[a] = _random_layout(n, rng)
        pre_layouts[a] = _random_layout(n, rng)
        rels = chain_relations(layouts[a])
        texts = []
        for k in range(config.descriptions_per_action):
            if k % 2 == 0:
                i = (k // 2) % n
                texts.append(f"the {objs[i]} is {eff[i]}")
            else:
                i = (k // 2) % len(rels)
                texts.append(f"the {objs[i]} is {rels[i]} the {objs[i + 1]}")
        descriptions[a] = texts
    spec = TaskSpec(config.task_name, actions, objects_per_action, descriptions,
                    {o: attribute_values[o] for o in sorted({x for v in objects_per_action.values()
                                                              for x in v})},
                    effect_attrs, pre_attrs, layouts, pre_layouts)
    spec.validate(config.max_objects)
    return spec


def build_world(config: SimConfig, seed: int) -> World:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    spec = _make_task(config, rng)
    D = config.feature_dim
    vocab = build_vocab(D, rng, extra_words=tokenize(config.task_name))
    prototypes = {
        a: rng.standard_normal((4, D)) * (config.prototype_scale / math.sqrt(D))
        for a in spec.actions
    }
    centroids = {}
    for a in spec.actions:
        desc = np.stack([stub_text_encoder(t, vocab) for t in spec.effect_descriptions[a]])
        centroids[a] = _unit(desc.mean(axis=0))
    geometry_axes = {
        o: np.stack([hash_vector(f"{o}#x#{seed}", D), hash_vector(f"{o}#y#{seed}", D)])
        for o in _OBJECTS
    }
    return World(config, spec, vocab, prototypes, centroids, geometry_axes)


# -- generation --------------------------------------------------------------


def _jittered_boxes(layout, jitter: float, rng: np.random.Generator):
    target = chain_relations(layout)
    for _ in range(20):
        boxes = []
        for cx, cy, w, h in layout:
            ncx, ncy = np.array([cx, cy]) + rng.normal(0.0, jitter, size=2)
            ncx = float(np.clip(ncx, w / 2, 1 - w / 2))
            ncy = float(np.clip(ncy, h / 2, 1 - h / 2))
            boxes.append((ncx, ncy, float(w), float(h)))
        if chain_relations(boxes) == target:
            return boxes
    return [tuple(b) for b in layout]


def _observe(world: World, action: str, layout, attributes, rng) -> list[ObjectObs]:
    lo, hi = world.config.intensity_range
    labels = world.spec.objects_per_action[action]
    boxes = _jittered_boxes(layout, world.config.box_jitter, rng)
    out = []
    for label, box, attr in zip(labels, boxes, attributes):
        intensity = float(rng.uniform(lo, hi))
        crop = world.crop_embedding(label, attr, intensity, rng).astype(np.float32)
        out.append(ObjectObs(label, box, attr, intensity, crop))
    return out


def generate_segment(world: World, action: str, T: int, segment_id: str, video_id: str,
                     t_s: int, rng: np.random.Generator) -> Segment:
    """One normal segment of ``action`` with ``T`` frames."""
    c = world.config
    D = world.dim
    if c.effect_position == "final":
        gt = T - 1
    else:
        gt = int(rng.integers(0, T))
    objects = _observe(world, action, world.spec.layouts[action],
                       world.spec.effect_attributes[action], rng)
    pre_objects = _observe(world, action, world.spec.pre_layouts[action],
                           world.spec.pre_attributes[action], rng)
    noise = rng.standard_normal((T, D)) * (c.frame_noise / math.sqrt(D))
    X = world.trajectory(action, T) + noise
    X[gt] += world.effect_signature(action, objects)
    sharp = rng.uniform(0.0, c.blur_sharpness_max, size=T)
    sharp[gt] = 1.0
    patches = np.stack([render_patch(s, rng) for s in sharp])
    return Segment(segment_id, video_id, t_s, t_s + T, action, 0, "none",
                   X.astype(np.float32), patches.astype(np.float32), objects, pre_objects, gt)


def inject_mistake(segment: Segment, kind: str, rng: np.random.Generator, world: World) -> Segment:
    """Return a copy of a normal segment carrying a mistake of ``kind``.

    execution: frames follow another action's prototype; the effect frame is kept.
    state: one object's attribute is flipped, its crop and the effect frame shift.
    relation: two related objects swap boxes; the effect frame's layout code follows.
    """
    if kind not in MISTAKE_KINDS:
        raise InjectionError(f"unknown mistake kind {kind!r}")
    if segment.mistake:
        raise InjectionError(f"segment {segment.segment_id} already carries a mistake")
    seg = segment.copy()
    X = seg.frames.astype(np.float64)
    gt = seg.gt_effect_index
    before = world.effect_signature(seg.action, seg.objects)

    if kind == "execution":
        others = [a for a in world.spec.actions if a != seg.action]
        other = others[int(rng.integers(0, len(others)))]
        delta = world.trajectory(other, seg.T) - world.trajectory(seg.action, seg.T)
        keep = X[gt].copy()
        X = X + delta
        X[gt] = keep
    elif kind == "state":
        values = world.spec.attribute_values
        candidates = [i for i, o in enumerate(seg.objects) if len(values[o.label]) > 1]
        if not candidates:
            raise InjectionError(
                f"action {seg.action!r} has no object with more than one attribute value")
        i = candidates[int(rng.integers(0, len(candidates)))]
        o = seg.objects[i]
        choices = [v for v in values[o.label] if v != o.attribute]
        new_attr = choices[int(rng.integers(0, len(choices)))]
        shift = (world.config.attribute_delta * o.intensity
                 * (world.vocab[new_attr] - world.vocab[o.attribute]))
        o.crop = (o.crop.astype(np.float64) + shift).astype(np.float32)
        o.attribute = new_attr
        X[gt] += world.effect_signature(seg.action, seg.objects) - before
    else:
        n = len(seg.objects)
        if n < 2:
            raise InjectionError(f"action {seg.action!r} has a single object; nothing to swap")
        i = int(rng.integers(0, n - 1))
        a, b = seg.objects[i], seg.objects[i + 1]
        a.box, b.box = b.box, a.box
        X[gt] += world.effect_signature(seg.action, seg.objects) - before

    seg.frames = X.astype(np.float32)
    seg.mistake = 1
    seg.mistake_kind = kind
    return seg


def _draw_kind(rates: dict, rng: np.random.Generator) -> str:
    u = rng.uniform()
    acc = 0.0
    for k in MISTAKE_KINDS:
        acc += float(rates.get(k, 0.0))
        if u < acc:
            return k
    return "none"


def generate_video(world: World, split: str, index: int, seed: int) -> list[Segment]:
    c = world.config
    split_id = SPLITS.index(split)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1, split_id, index]))
    video_id = f"{split}{index:04d}"
    t = 0
    out = []
    for k, action in enumerate(world.spec.actions):
        T = int(rng.integers(c.min_len, c.max_len + 1))
        seg = generate_segment(world, action, T, f"{video_id}_{k:02d}", video_id, t, rng)
        if split == "test":
            kind = _draw_kind(c.mistake_rates, rng)
            if kind != "none":
                seg = inject_mistake(seg, kind, rng, world)
        out.append(seg)
        t += T
    return out


def generate_dataset(config: SimConfig, seed: int) -> Dataset:
    """Deterministic synthetic dataset for ``(config, seed)``.

    Each video gets its own RNG stream derived from the seed, so the output does
    not depend on the order in which videos are produced.
    """
    config.validate()
    world = build_world(config, seed)
    counts = {"train": config.train_videos, "val": config.val_videos, "test": config.test_videos}
    splits = {}
    for split in SPLITS:
        segs = []
        for i in range(counts[split]):
            segs.extend(generate_video(world, split, i, seed))
        splits[split] = segs
    ds = Dataset(config, world.spec, splits, world.vocab, int(seed))
    check_occ(ds)
    return ds


class OCCViolation(ValueError):
    pass


def check_occ(ds: Dataset) -> None:
    for split in ("train", "val"):
        bad = [s.segment_id for s in ds.splits.get(split, []) if s.mistake]
        if bad:
            raise OCCViolation(f"{split} split contains mistake segments: {bad[:5]}")
    for split, segs in ds.splits.items():
        for s in segs:
            if s.mistake == 0 and s.mistake_kind != "none":
                raise OCCViolation(f"{s.segment_id}: normal segment with kind {s.mistake_kind}")
