"""Command-line entry point: ``aem <command> ...``.

Exit codes: 0 ok, 1 failed check, 2 usage or configuration error, 3 I/O error,
4 one-class violation in training data, 5 training diverged, 6 model and data
do not match.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_OCC, EXIT_NAN, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5, 6
VERSION = "0.1.0"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("AEM_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"AEM_SEED must be an integer, got {env!r}", EXIT_USAGE) from None


def _load_json(path) -> tuple[dict, str]:
    if path is None:
        return {}, ""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}", EXIT_IO) from e
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CliError(f"config {path} is not valid JSON: {e}", EXIT_USAGE) from e
    if not isinstance(data, dict):
        raise CliError(f"config {path} must hold a JSON object", EXIT_USAGE)
    return data, hashlib.sha256(raw).hexdigest()[:16]


def _write_manifest(out_dir, command: str, args, config_path, config_hash, seed, artifacts,
                    extra=None) -> None:
    rec = {
        "command": command,
        "argv": sys.argv[1:],
        "config_path": str(config_path) if config_path else None,
        "config_hash": config_hash,
        "seed": seed,
        "artifacts": sorted(str(a) for a in artifacts),
        "tool_version": VERSION,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    if extra:
        rec.update(extra)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "run_manifest.json").write_text(json.dumps(rec, indent=2, sort_keys=True)
                                                     + "\n", encoding="utf-8")


def _read_data(path):
    from .storage import DatasetIOError, DatasetValidationError, read_dataset
    from .simulator import OCCViolation

    try:
        return read_dataset(path)
    except OCCViolation as e:
        raise CliError(str(e), EXIT_OCC) from e
    except DatasetValidationError as e:
        code = EXIT_OCC if isinstance(e.__cause__, OCCViolation) else EXIT_IO
        raise CliError(str(e), code) from e
    except (DatasetIOError, OSError) as e:
        raise CliError(f"cannot read dataset {path}: {e}", EXIT_IO) from e


def _train_config(path, seed_flag):
    from .model import TrainConfig
    from .simulator import ConfigError

    data, h = _load_json(path)
    try:
        if seed_flag is not None or "seed" not in data:
            data = {**data, "seed": _seed(seed_flag)}
        return TrainConfig.from_dict(data), h
    except (ConfigError, TypeError, ValueError) as e:
        raise CliError(f"invalid training config: {e}", EXIT_USAGE) from e


# -- commands ----------------------------------------------------------------


def cmd_generate(args) -> int:
    from .simulator import ConfigError, SimConfig, generate_dataset
    from .storage import write_dataset

    data, h = _load_json(args.config)
    try:
        cfg = SimConfig.from_dict(data)
    except (ConfigError, TypeError, ValueError) as e:
        raise CliError(f"invalid simulator config: {e}", EXIT_USAGE) from e
    seed = _seed(args.seed)
    ds = generate_dataset(cfg, seed)
    try:
        crcs = write_dataset(ds, args.out)
        _write_manifest(args.out, "generate", args, args.config, h, seed, crcs.keys(),
                        {"crc32": crcs})
    except OSError as e:
        raise CliError(f"cannot write dataset to {args.out}: {e}", EXIT_IO) from e
    for name in sorted(crcs):
        print(f"{name}\t{crcs[name]:08x}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .simulator import OCCViolation
    from .training import DivergenceError, train

    cfg, h = _train_config(args.config, args.seed)
    ds = _read_data(args.data)
    out = Path(args.out)

    def log(rec):
        _err(f"epoch {rec['epoch']}: train {rec['train'].get('total', float('nan')):.4f} "
             f"val {rec['val'].get('total', float('nan')):.4f}")

    try:
        train(ds, cfg, out_dir=out, log=None if args.quiet else log)
    except OCCViolation as e:
        raise CliError(str(e), EXIT_OCC) from e
    except DivergenceError as e:
        _write_manifest(out, "train", args, args.config, h, cfg.seed, ["last_finite.ckpt"],
                        {"diverged": True})
        raise CliError(f"{e}; last finite checkpoint kept in {out / 'last_finite.ckpt'}",
                       EXIT_NAN) from e
    except OSError as e:
        raise CliError(f"cannot write to {out}: {e}", EXIT_IO) from e
    arts = ["final.ckpt", "best.ckpt", "train_log.jsonl"]
    _write_manifest(out, "train", args, args.config, h, cfg.seed, arts,
                    {"train_config_hash": cfg.hash()})
    for a in arts:
        print(out / a)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .detector import exact_marginal
    from .evaluation import build_report, scored_segments, write_report, write_scores
    from .model import data_signature, score_segments
    from .training import CheckpointError, load_checkpoint

    try:
        model = load_checkpoint(args.model)
    except (CheckpointError, OSError, ValueError) as e:
        raise CliError(f"cannot load checkpoint {args.model}: {e}", EXIT_IO) from e
    ds = _read_data(args.data)
    if model.meta.get("data_signature") != data_signature(ds) or model.dim != \
            ds.config.feature_dim:
        raise CliError("checkpoint was trained on a task with different actions or shapes",
                       EXIT_MISMATCH)
    segs = ds.splits[args.split]
    scores = score_segments(model, segs)
    extra = {}
    if args.exact_marginal:
        extra["exact_marginal"] = np.array(
            [exact_marginal(s, model, model.descriptions(s.action))[0] for s in segs])
    scored = scored_segments(segs, scores, extra)
    report = build_report(scored, variant=model.config.variant, seed=model.config.seed,
                          config_hash=model.config.hash())
    out = Path(args.report)
    try:
        write_report(report, out)
        write_scores(scored, out / "scores.csv", extra_columns=list(extra))
        _write_manifest(out, "eval", args, None, model.config.hash(), model.config.seed,
                        ["report.json", "report.csv", "curve.csv", "scores.csv"])
    except OSError as e:
        raise CliError(f"cannot write report to {out}: {e}", EXIT_IO) from e
    prec = "nan" if report["precision"] is None else f"{report['precision']:.2f}"
    print(f"auc\t{report['auc']:.2f}\neda\t{report['eda']:.2f}\nprecision\t{prec}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import format_table, run_ablation
    from .training import VARIANTS

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise CliError(f"unknown variant(s) {bad}; expected names from {list(VARIANTS)}",
                       EXIT_USAGE)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise CliError(f"--seeds must be a comma-separated integer list, got {args.seeds!r}",
                       EXIT_USAGE) from None
    if len(seeds) < 2:
        raise CliError("ablations need at least two seeds", EXIT_USAGE)
    cfg, h = _train_config(args.config, seeds[0])
    ds = _read_data(args.data)
    result = run_ablation(ds, variants, seeds, cfg,
                          log=lambda r: _err(f"{r['variant']} seed {r['seed']}: "
                                             f"AUC {r['auc']:.2f}"))
    out = Path(args.report)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
        _write_manifest(out, "ablate", args, args.config, h, seeds, ["ablation.json"],
                        {"seeds": seeds, "variants": variants})
    except OSError as e:
        raise CliError(f"cannot write report to {out}: {e}", EXIT_IO) from e
    print(format_table(result))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradients import SUITE_LOSSES, TOLERANCE, run_suite

    res = run_suite(seed=_seed(args.seed), batches=args.batches, corrupt=args.corrupt_gradient)
    worst = max(res[k]["worst"] for k in SUITE_LOSSES)
    for k in SUITE_LOSSES:
        r = res[k]
        print(f"{k}\t{r['worst']:.3e}\t{r['param']}")
    print(f"worst\t{worst:.3e}")
    _err(f"gradient suite {'passed' if res['passed'] else 'FAILED'} "
         f"(tolerance {TOLERANCE:g}, {res['seconds']:.1f}s)")
    return EXIT_OK if res["passed"] else EXIT_FAIL


def cmd_sample_frames(args) -> int:
    from .sampling import last_frame_baseline, sampler_accuracy, select_effect_frame

    ds = _read_data(args.data)
    desc = {a: ds.descriptions(a) for a in ds.spec.actions}
    print("segment_id\tgt\tranked\tlast_frame")
    for s in ds.splits[args.split]:
        fs = select_effect_frame(s.frames, s.patches, desc[s.action])
        print(f"{s.segment_id}\t{s.gt_effect_index}\t{fs.selected}\t{last_frame_baseline(s)}")
    acc = sampler_accuracy(ds, args.split)
    _err(f"normal segments {acc['segments']}: ranked {acc['ranked']:.3f}, "
         f"last_frame {acc['last_frame']:.3f}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: error: {message}", EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aem", description="Action effect modelling for mistake detection.")
    p.add_argument("--version", action="version", version=f"aem {VERSION}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--config", help="simulator config (JSON)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, help="seed (default: $AEM_SEED or 0)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="training config (JSON)")
    t.add_argument("--out", required=True, help="directory for checkpoints and the log")
    t.add_argument("--seed", type=int)
    t.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a split and write a report")
    e.add_argument("--model", required=True, help="checkpoint file")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="report directory")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--exact-marginal", action="store_true",
                   help="add the marginal over effect frames and descriptors as a column")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare ablation variants over seeds")
    a.add_argument("--data", required=True)
    a.add_argument("--variants", default="full,no_effect,last_frame,no_align")
    a.add_argument("--seeds", default="0,1,2,3,4")
    a.add_argument("--config", help="base training config (JSON)")
    a.add_argument("--report", required=True)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    c.add_argument("--seed", type=int)
    c.add_argument("--batches", type=int, default=10)
    c.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sample-frames", help="print selected effect frames per segment")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.set_defaults(func=cmd_sample_frames)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as e:
        _err(str(e))
        return e.code
    except SystemExit as e:  # --help and --version
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
