"""``ddghm`` command line: preprocess, train, evaluate, gradcheck.

Exit codes: 0 success, 2 bad config or arguments, 3 data or checkpoint
problem, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import ConfigError, DataConfig, TrainConfig, load_config, to_dict
from .data import (
    DOMAINS,
    DatasetExhausted,
    FormatError,
    Preprocessed,
    dumps_processed,
    parse_log,
    preprocess,
    read_processed,
    split,
)
from .metrics import evaluate
from .model import DDGHM, CheckpointError
from .training import DivergenceError, LOG_COLUMNS, gradcheck_full_loss, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
SPLITS = ("train", "validation", "test")

log = logging.getLogger("ddghm")


class DataError(RuntimeError):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict  # path -> sha256
    outputs: dict = field(default_factory=dict)
    started: str = field(default_factory=_now)
    finished: str | None = None
    status: str = "running"

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    def verify_inputs(self) -> list[str]:
        """Paths whose current digest no longer matches."""
        return [p for p, d in self.inputs.items() if sha256_file(p) != d]

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def format_stats(stats: dict) -> str:
    keys = ("overlapped_users", "items_A", "items_B", "sequences", "avg_length")
    extra = sorted(k for k in stats if k not in keys)
    width = max(len(k) for k in keys + tuple(extra))
    lines = ["dataset statistics"]
    lines += [f"  {k:<{width}}  {stats.get(k, '-')}" for k in keys]
    lines += [f"  {k:<{width}}  {stats[k]}" for k in extra]
    return "\n".join(lines)


def _load_processed(path: str) -> Preprocessed:
    try:
        with open(path, encoding="utf-8") as fh:
            return read_processed(fh)
    except OSError as exc:
        raise DataError(f"cannot read processed file: {exc}") from None


def _configs(args) -> tuple[DataConfig, TrainConfig]:
    overrides = {"seed": args.seed} if getattr(args, "seed", None) is not None else None
    return load_config(args.config, overrides=overrides)


# --------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    data_cfg, _ = _configs(args)
    try:
        with open(args.input, encoding="utf-8") as fh:
            parsed = parse_log(fh)
    except OSError as exc:
        raise DataError(f"cannot read input log: {exc}") from None
    for rej in parsed.rejects[:10]:
        log.warning("line %d rejected: %s", rej.line_no, rej.reason)
    if len(parsed.rejects) > 10:
        log.warning("%d more rejected lines", len(parsed.rejects) - 10)
    try:
        result = preprocess(
            parsed.events,
            min_interactions=data_cfg.min_interactions,
            period_length=data_cfg.period_seconds,
            min_items_per_domain=data_cfg.min_items_per_domain,
        )
    except DatasetExhausted as exc:
        exc.stats["rejected_lines"] = len(parsed.rejects)
        print(format_stats(exc.stats))
        raise DataError(str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    result.stats["rejected_lines"] = len(parsed.rejects)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps_processed(result), encoding="utf-8")
    stats_path = out.with_suffix(out.suffix + ".stats.json")
    stats_path.write_text(json.dumps(result.stats, indent=2, sort_keys=True) + "\n")
    print(format_stats(result.stats))
    return EXIT_OK


def cmd_train(args) -> int:
    data_cfg, train_cfg = _configs(args)
    data = _load_processed(args.processed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command="train",
        config=to_dict(data_cfg, train_cfg),
        seed=train_cfg.seed,
        inputs={str(args.processed): sha256_file(args.processed)},
    )
    if args.config:
        manifest.inputs[str(args.config)] = sha256_file(args.config)
    manifest.write(out / "manifest.json")

    parts = split(data.triples, data_cfg.split_ratios, seed=train_cfg.seed, vocab=data.vocab)
    n_items = {d: data.vocab.size(d) for d in DOMAINS}
    log_path, timing_path = out / "epochs.tsv", out / "timing.tsv"
    with open(log_path, "w", encoding="utf-8") as lf, open(timing_path, "w", encoding="utf-8") as tf:
        lf.write("\t".join(LOG_COLUMNS) + "\n")
        tf.write("epoch\tseconds\n")

        def on_epoch(entry):
            lf.write(entry.tsv() + "\n")
            lf.flush()
            tf.write(f"{entry.epoch}\t{entry.seconds:.3f}\n")

        try:
            result = train(parts, train_cfg, n_items, on_epoch=on_epoch)
        except DivergenceError as exc:
            manifest.status = "diverged"
            manifest.finished = _now()
            manifest.outputs["norms"] = {k: float(v) for k, v in exc.norms.items()}
            manifest.write(out / "manifest.json")
            raise

    ckpt = out / "checkpoint.ckpt"
    result.model.save(
        ckpt,
        extra={
            "vocab_digest": data.vocab.digest(),
            "data": to_dict(data_cfg, train_cfg)["data"],
            "best_epoch": result.best_epoch,
        },
    )
    manifest.outputs.update(
        {"checkpoint": str(ckpt), "epoch_log": str(log_path), "timing": str(timing_path),
         "best_epoch": result.best_epoch}
    )
    manifest.status = "complete"
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    print(f"best epoch {result.best_epoch}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        model, extra = DDGHM.load(args.checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from None
    data = _load_processed(args.processed)
    digest = extra.get("vocab_digest")
    sizes = {d: data.vocab.size(d) for d in DOMAINS}
    if (digest is not None and digest != data.vocab.digest()) or sizes != model.n_items:
        raise DataError(
            f"vocabulary mismatch: checkpoint has {model.n_items} items, data has {sizes}"
        )
    if args.split == "all":
        triples = data.triples
    else:
        ratios = tuple(extra.get("data", {}).get("split_ratios", DataConfig().split_ratios))
        triples = getattr(split(data.triples, ratios, seed=model.config.seed), args.split)
    if not triples:
        raise DataError(f"{args.split} split is empty")
    cutoffs = tuple(int(k) for k in args.cutoffs.split(","))
    report = evaluate(model, triples, cutoffs)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json() + "\n")
        (out / "metrics.tsv").write_text(_report_tsv(report, cutoffs))
    print(_report_tsv(report, cutoffs), end="")
    return EXIT_OK


def _report_tsv(report, cutoffs) -> str:
    keys = [k for k in next(iter(report.table.values()), {})]
    lines = ["domain\tn\tskipped\t" + "\t".join(keys)]
    for d in DOMAINS:
        row = report.table.get(d)
        vals = "\t".join(f"{row[k]:.6f}" for k in keys) if row else "\t".join("nan" for _ in keys)
        lines.append(f"{d}\t{report.counts[d]}\t{report.skipped[d]}\t{vals}")
    return "\n".join(lines) + "\n"


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    res = gradcheck_full_loss(seed=seed, dim=args.dim, eps=args.eps)
    status = "PASS" if res["max_relative_error"] < args.tol else "FAIL"
    print(
        f"max relative error {res['max_relative_error']:.3e} over {res['parameters']} entries "
        f"in {res['seconds']:.1f}s: {status}"
    )
    if args.out:
        Path(args.out).write_text(json.dumps({k: float(v) for k, v in res.items()}, indent=2) + "\n")
    return EXIT_OK if status == "PASS" else 1


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddghm", description="Cross-domain sequential recommendation with dynamic graphs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config; DDGHM_<FIELD> env vars override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("preprocess", help="raw TSV log -> processed sequences")
    sp.add_argument("input")
    common(sp)
    sp.set_defaults(fn=cmd_preprocess)

    sp = sub.add_parser("train", help="train on a processed file")
    sp.add_argument("processed")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="rank held-out items with a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("processed")
    sp.add_argument("--split", choices=SPLITS + ("all",), default="test")
    sp.add_argument("--cutoffs", default="5,10,20")
    common(sp, out_required=False)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    sp.add_argument("--dim", type=int, default=3)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    common(sp, out_required=False)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
