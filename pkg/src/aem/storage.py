"""On-disk dataset format.

    manifest.json   task spec, config, seed, vocab table, split listing,
                    per-segment blob offsets and CRC-32 checksums
    features.bin    frame features and crop embeddings, float32 LE, row-major
    patches.bin     16x16 patches, float32 LE, row-major
    graphs.json     scene-graph records for the effect and pre-effect views
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .simulator import (
    SPLITS,
    Dataset,
    ObjectObs,
    OCCViolation,
    Segment,
    SimConfig,
    TaskSpec,
    box_in_unit_square,
    check_occ,
    scene_graph_record,
)

FORMAT = "aem-dataset/1"
_F32 = np.dtype("<f4")


class DatasetIOError(IOError):
    pass


class ManifestError(DatasetIOError):
    pass


class BlobLengthError(DatasetIOError):
    pass


class ChecksumError(DatasetIOError):
    pass


class DatasetValidationError(DatasetIOError):
    pass


def _crc(b: bytes) -> int:
    return zlib.crc32(b) & 0xFFFFFFFF


class _BlobWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, arr: np.ndarray) -> dict:
        b = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        ref = {"offset": self.offset, "nbytes": len(b), "shape": list(arr.shape), "crc32": _crc(b)}
        self.chunks.append(b)
        self.offset += len(b)
        return ref

    def bytes(self) -> bytes:
        return b"".join(self.chunks)


def _objects_record(objs: list[ObjectObs], feats: _BlobWriter) -> dict:
    meta = [{"label": o.label, "box": list(o.box), "attribute": o.attribute,
             "intensity": o.intensity} for o in objs]
    crops = np.stack([o.crop for o in objs]) if objs else np.zeros((0, 0), np.float32)
    return {"objects": meta, "crops": feats.add(crops)}


def manifest_and_blobs(ds: Dataset) -> tuple[dict, bytes, bytes, list]:
    feats, patches = _BlobWriter(), _BlobWriter()
    graphs = []
    splits = {}
    for split in SPLITS:
        records = []
        for s in ds.splits[split]:
            rec = {
                "segment_id": s.segment_id, "video_id": s.video_id, "t_s": s.t_s, "t_e": s.t_e,
                "action": s.action, "mistake": s.mistake, "mistake_kind": s.mistake_kind,
                "gt_effect_index": s.gt_effect_index,
                "frames": feats.add(s.frames),
                "effect": _objects_record(s.objects, feats),
                "pre_effect": _objects_record(s.pre_objects, feats),
                "patches": patches.add(s.patches),
            }
            records.append(rec)
            graphs.append(scene_graph_record(s.segment_id, s.objects, "effect"))
            graphs.append(scene_graph_record(s.segment_id, s.pre_objects, "pre"))
        splits[split] = records
    fb, pb = feats.bytes(), patches.bytes()
    manifest = {
        "format": FORMAT,
        "seed": ds.seed,
        "config": ds.config.to_dict(),
        "task": ds.spec.to_dict(),
        "feature_dim": ds.config.feature_dim,
        "vocab": {w: [float(x) for x in v] for w, v in sorted(ds.vocab_embeddings.items())},
        "blobs": {
            "features.bin": {"nbytes": len(fb), "crc32": _crc(fb)},
            "patches.bin": {"nbytes": len(pb), "crc32": _crc(pb)},
        },
        "splits": splits,
    }
    return manifest, fb, pb, graphs


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8")


def write_dataset(ds: Dataset, directory) -> dict:
    """Serialise ``ds`` to ``directory``; returns ``{filename: crc32}``."""
    check_occ(ds)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest, fb, pb, graphs = manifest_and_blobs(ds)
    files = {
        "manifest.json": _dump(manifest),
        "features.bin": fb,
        "patches.bin": pb,
        "graphs.json": _dump(graphs),
    }
    for name, b in files.items():
        (d / name).write_bytes(b)
    return {name: _crc(b) for name, b in files.items()}


def _read_blob(buf: bytes, ref: dict, what: str) -> np.ndarray:
    start, n = int(ref["offset"]), int(ref["nbytes"])
    if start < 0 or start + n > len(buf):
        raise BlobLengthError(f"{what}: slice [{start}, {start + n}) exceeds blob of {len(buf)} bytes")
    chunk = buf[start:start + n]
    if _crc(chunk) != ref["crc32"]:
        raise ChecksumError(f"{what}: CRC-32 mismatch")
    shape = tuple(ref["shape"])
    if int(np.prod(shape)) * _F32.itemsize != n:
        raise BlobLengthError(f"{what}: shape {shape} does not match {n} bytes")
    return np.frombuffer(chunk, dtype=_F32).reshape(shape).astype(np.float32)


def _read_objects(rec: dict, feats: bytes, what: str) -> list[ObjectObs]:
    crops = _read_blob(feats, rec["crops"], f"{what} crops")
    out = []
    for i, o in enumerate(rec["objects"]):
        box = tuple(float(x) for x in o["box"])
        if len(box) != 4 or not box_in_unit_square(box):
            raise DatasetValidationError(f"{what}: box {box} outside the unit square")
        out.append(ObjectObs(o["label"], box, o["attribute"], float(o["intensity"]),
                             crops[i].copy()))
    return out


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DatasetIOError(f"missing manifest: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest.json: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise ManifestError(f"manifest.json is not an {FORMAT} manifest")
    try:
        blobs = {}
        for name in ("features.bin", "patches.bin"):
            try:
                b = (d / name).read_bytes()
            except FileNotFoundError as e:
                raise DatasetIOError(f"missing blob {name}") from e
            meta = manifest["blobs"][name]
            if _crc(b) != meta["crc32"]:
                raise ChecksumError(
                    f"{name}: CRC-32 mismatch ({len(b)} bytes on disk, {meta['nbytes']} expected)")
            if len(b) != meta["nbytes"]:
                raise BlobLengthError(f"{name}: {len(b)} bytes, expected {meta['nbytes']}")
            blobs[name] = b
        feats, pats = blobs["features.bin"], blobs["patches.bin"]
        config = SimConfig.from_dict(manifest["config"])
        spec = TaskSpec.from_dict(manifest["task"])
        vocab = {w: np.array(v, dtype=np.float64) for w, v in manifest["vocab"].items()}
        splits = {}
        for split in SPLITS:
            segs = []
            for rec in manifest["splits"][split]:
                sid = rec["segment_id"]
                frames = _read_blob(feats, rec["frames"], f"{sid} frames")
                seg = Segment(
                    sid, rec["video_id"], int(rec["t_s"]), int(rec["t_e"]), rec["action"],
                    int(rec["mistake"]), rec["mistake_kind"], frames,
                    _read_blob(pats, rec["patches"], f"{sid} patches"),
                    _read_objects(rec["effect"], feats, sid),
                    _read_objects(rec["pre_effect"], feats, sid),
                    int(rec["gt_effect_index"]),
                )
                _validate_segment(seg, spec)
                segs.append(seg)
            splits[split] = segs
    except (KeyError, TypeError) as e:
        raise ManifestError(f"manifest.json missing or malformed field: {e}") from e
    ds = Dataset(config, spec, splits, vocab, int(manifest["seed"]))
    try:
        check_occ(ds)
    except OCCViolation as e:
        raise DatasetValidationError(str(e)) from e
    return ds


def _validate_segment(seg: Segment, spec: TaskSpec) -> None:
    T = seg.T
    if T < 1:
        raise DatasetValidationError(f"{seg.segment_id}: empty segment")
    if not 0 <= seg.gt_effect_index < T:
        raise DatasetValidationError(f"{seg.segment_id}: effect index out of range")
    if seg.frames.shape[0] != T or seg.patches.shape[0] != T:
        raise DatasetValidationError(f"{seg.segment_id}: frame count does not match t_e - t_s")
    if seg.action not in spec.actions:
        raise DatasetValidationError(f"{seg.segment_id}: unknown action {seg.action!r}")
    allowed = set(spec.objects_per_action[seg.action])
    for o in seg.objects + seg.pre_objects:
        if o.label not in allowed:
            raise DatasetValidationError(
                f"{seg.segment_id}: object {o.label!r} not listed for {seg.action!r}")
