"""simreuse command-line front end.

    simreuse analyze|tune|train|bench|sweep [--config PATH] [--seed N] [--out DIR]

Primary outputs are deterministic for a given config and seed; wall-clock
timings go to a separate `timing.json`.  Exit codes: 0 ok, 2 input error,
3 numeric failure, 4 config error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, StreamSpec, load_config
from .models import ToyModel, init_model
from .regularizers import ConfigError, RegConfig
from .streams import (
    FrameStream, analyze_similarity, gen_stream, lag_similarity, layer_similarity_profile,
    load_stream,
)
from .tensor_core import ShapeError, SimilarityError
from .training import (
    TrainingError, evaluate, load_checkpoint, pretrain, sa_train, save_checkpoint,
)
from .tuner import apply_tuning, load_tuning, results_to_dict, tune_model

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4


class InputError(Exception):
    """A file the run depends on is missing, unreadable or inconsistent."""


# -- output helpers ---------------------------------------------------------------

def atomic_write(path: Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_checkpoint(path: Path, model: ToyModel, extra: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        save_checkpoint(tmp, model, extra)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: list, rows: list, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- inputs -----------------------------------------------------------------------

def get_stream(spec: StreamSpec, seed: int) -> FrameStream:
    if spec.path is not None:
        try:
            return load_stream(spec.path)
        except FileNotFoundError as exc:
            raise InputError(f"{spec.path}: no such stream file") from exc
        except (ValueError, OSError) as exc:
            raise InputError(f"{spec.path}: {exc}") from exc
    return gen_stream(spec.n_frames, spec.shape, spec.rho, spec.n_classes, seed + spec.seed_offset,
                      amplitude=spec.amplitude, brightness=spec.brightness)


def read_checkpoint(path) -> tuple[ToyModel, dict]:
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise InputError(f"{path}: no such checkpoint") from exc
    except (ValueError, KeyError, OSError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: unreadable checkpoint ({exc})") from exc


def get_model(cfg: RunConfig, stream: FrameStream) -> ToyModel:
    spec = cfg.model
    if spec.checkpoint is not None:
        model, _ = read_checkpoint(spec.checkpoint)
        if model.arch != spec.arch:
            raise ConfigError(f"{spec.checkpoint}: checkpoint holds {model.arch}, config asks for {spec.arch}")
    else:
        n_classes = max(stream.n_classes, 1)
        try:
            model = init_model(spec.arch, stream.frame_shape, n_classes, cfg.seed,
                               hash_size=spec.hash_size, input_dim=spec.input_dim)
        except ShapeError as exc:
            raise InputError(str(exc)) from exc
    model.weight_by_count = spec.weight_by_count
    if spec.tuning is not None:
        try:
            model = apply_tuning(model, load_tuning(spec.tuning))
        except FileNotFoundError as exc:
            raise InputError(f"{spec.tuning}: no such tuning file") from exc
        except (ValueError, KeyError) as exc:
            raise InputError(f"{spec.tuning}: {exc}") from exc
    return model


def check_compatible(model: ToyModel, stream: FrameStream, what: str) -> None:
    if tuple(model.frame_shape) != tuple(stream.frame_shape):
        raise InputError(f"{what}: frames {stream.frame_shape} do not fit model input {model.frame_shape}")
    if stream.labels is not None and stream.labels.size and stream.labels.max() >= model.n_classes:
        raise InputError(f"{what}: labels exceed the model's {model.n_classes} classes")


# -- commands ---------------------------------------------------------------------

def cmd_analyze(cfg: RunConfig, out: Path) -> dict:
    stream = get_stream(cfg.stream, cfg.seed)
    n = min(stream.n_frames, cfg.analyze.max_frames)
    if n < 2:
        raise InputError("analyze needs at least two frames")
    try:
        sim = analyze_similarity(stream.frames[:n])
    except SimilarityError as exc:
        raise InputError(str(exc)) from exc
    h = cfg.hash()
    rows = [[f"{v:.17g}" for v in row] for row in sim]
    atomic_write(out / "similarity.csv",
                 csv_text([f"f{i}" for i in range(n)], rows, comment=f"config_hash={h}"))
    lags = {str(k): lag_similarity(sim, k) for k in cfg.analyze.lags if k < n}
    report = {"config_hash": h, "n_frames": n, "lag_similarity": lags}
    if lags:
        far = max(int(k) for k in lags)
        report["adjacent_mean"] = lags["1"] if "1" in lags else None
        report["far_lag"] = far
        report["far_mean"] = lags[str(far)]
    model = get_model(cfg, stream)
    check_compatible(model, stream, "analyze")
    report["model"] = model.arch
    report["layer_profile"] = layer_similarity_profile(model, stream, cfg.analyze.profile_frames)
    atomic_write(out / "analyze.json", dump_json(report))
    return report


def cmd_tune(cfg: RunConfig, out: Path) -> dict:
    stream = get_stream(cfg.stream, cfg.seed)
    model = get_model(cfg, stream)
    check_compatible(model, stream, "tune")
    results = tune_model(model, stream.frames, cfg.tune.budget(), cfg.seed, workers=cfg.tune.workers)
    payload = {
        "config_hash": cfg.hash(),
        "meta": {"arch": model.arch, "seed": cfg.seed},
        "layers": results_to_dict(results),
    }
    atomic_write(out / "tuning.json", dump_json(payload))
    return payload


def _eval_row(model: ToyModel, stream: FrameStream, batch_size: int, quantize: bool) -> dict:
    acc_exact, _ = evaluate(model, stream, False, batch_size=batch_size)
    acc_reuse, st = evaluate(model, stream, True, batch_size=batch_size, with_mse=True)
    row = {
        "metric_exact": acc_exact,
        "metric_reuse": acc_reuse,
        "macs_exact": st.macs_exact,
        "macs_reuse": st.macs_reuse,
        "speedup": st.speedup,
        "sigma": st.sigma,
        "reduction_pct": st.reduction_pct,
        "layers": {k: v.to_dict() for k, v in st.parts.items()},
        "hashers": model.hasher_config(),
    }
    if quantize:
        acc_q, sq = evaluate(model, stream, True, batch_size=batch_size, quantize=True)
        row.update(metric_quant=acc_q, sigma_quant=sq.sigma, speedup_quant=sq.speedup)
    return row


def _pretrain(cfg: RunConfig, stream: FrameStream, model: ToyModel):
    reps = []
    model = pretrain(model, stream, cfg.train.train_config(cfg.seed), reps)
    return model, [{"phase": "pretrain", **r.to_dict()} for r in reps]


def _train_one(cfg: RunConfig, stream: FrameStream, model: ToyModel, reg: RegConfig, out: Path,
               pretrained=None) -> dict:
    """Pretrain (unless handed a `_pretrain` result) then SA-train; write checkpoint + JSONL."""
    h = cfg.hash()
    model, lines = _pretrain(cfg, stream, model) if pretrained is None else pretrained
    lines = list(lines)
    if cfg.train.sa_epochs > 0:
        model, reps = sa_train(model, stream, cfg.train.train_config(cfg.seed, cfg.train.sa_epochs), reg)
        lines += [{"phase": "sa", **r.to_dict()} for r in reps]
    body = "".join(json.dumps({"config_hash": h, **ln}, sort_keys=True) + "\n" for ln in lines)
    atomic_write(out / "reports.jsonl", body)
    write_checkpoint(out / "model.rfck", model, {"config_hash": h})
    return {"model": model, "reports": lines}


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    stream = get_stream(cfg.stream, cfg.seed)
    if stream.labels is None:
        raise InputError("training needs a labelled stream")
    model = get_model(cfg, stream)
    check_compatible(model, stream, "train")
    res = _train_one(cfg, stream, model, cfg.reg, out)
    ev = get_stream(cfg.eval_stream, cfg.seed)
    check_compatible(res["model"], ev, "eval_stream")
    summary = {"config_hash": cfg.hash(), "eval": _eval_row(res["model"], ev, cfg.bench.batch_size, False),
               "epochs": len(res["reports"])}
    atomic_write(out / "train.json", dump_json(summary))
    return summary


def cmd_bench(cfg: RunConfig, out: Path) -> dict:
    paths = list(cfg.bench.checkpoints)
    if not paths:
        raise ConfigError("bench.checkpoints must list at least one checkpoint")
    ev = get_stream(cfg.eval_stream, cfg.seed)
    if ev.labels is None:
        raise InputError("bench needs a labelled evaluation stream")
    rows = []
    for p in paths:
        model, _ = read_checkpoint(p)
        check_compatible(model, ev, str(p))
        if cfg.bench.hash_size is not None or cfg.bench.input_dim is not None:
            for layer in model.reuse_layers:
                cur = model.hashers.get(layer)
                hs = cfg.bench.hash_size or (cur.hash_size if cur else cfg.model.hash_size)
                dim = cfg.bench.input_dim or (cur.input_dim if cur else cfg.model.input_dim)
                model.set_hasher(layer, hs, min(dim, model.row_len(layer)),
                                 cur.seed if cur else None)
        rows.append({"model": Path(p).name, **_eval_row(model, ev, cfg.bench.batch_size, cfg.bench.quantize)})
    h = cfg.hash()
    report = {"config_hash": h, "rows": rows}
    atomic_write(out / "bench.json", dump_json(report))
    cols = ["model", "metric_exact", "metric_reuse", "speedup", "sigma", "reduction_pct",
            "macs_exact", "macs_reuse"]
    if cfg.bench.quantize:
        cols += ["metric_quant", "sigma_quant", "speedup_quant"]
    table = [[h] + [f"{r[c]:.17g}" if isinstance(r[c], float) else r[c] for c in cols] for r in rows]
    atomic_write(out / "bench.csv", csv_text(["config_hash"] + cols, table))
    return report


def _sweep_reg(reg: RegConfig, param: str, value) -> RegConfig:
    d = reg.to_dict()
    d[param] = int(value) if param == "window" else float(value)
    return RegConfig(**d)


def cmd_sweep(cfg: RunConfig, out: Path) -> dict:
    stream = get_stream(cfg.stream, cfg.seed)
    if stream.labels is None:
        raise InputError("sweeping needs a labelled stream")
    model = get_model(cfg, stream)
    check_compatible(model, stream, "sweep")
    ev = get_stream(cfg.eval_stream, cfg.seed)
    check_compatible(model, ev, "eval_stream")
    pre = _pretrain(cfg, stream, model)
    param = cfg.sweep.param
    h = cfg.hash()
    rows = []
    for value in cfg.sweep.values:
        sub = out / f"{param}_{value}"
        try:
            reg = _sweep_reg(cfg.reg, param, value)
            res = _train_one(cfg, stream, model, reg, sub, pretrained=pre)
            ev_row = _eval_row(res["model"], ev, cfg.bench.batch_size, False)
            rows.append([h, param, value, f"{ev_row['metric_exact']:.17g}", f"{ev_row['metric_reuse']:.17g}",
                         f"{ev_row['sigma']:.17g}", f"{ev_row['reduction_pct']:.17g}", "ok"])
        except (TrainingError, ConfigError, ValueError) as exc:
            rows.append([h, param, value, "", "", "", "", f"error: {exc}"])
    header = ["config_hash", "param", "value", "final_metric", "metric_reuse", "sigma",
              "reduction_pct", "status"]
    atomic_write(out / "sweep.csv", csv_text(header, rows))
    return {"rows": rows}


COMMANDS = {
    "analyze": cmd_analyze,
    "tune": cmd_tune,
    "train": cmd_train,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simreuse", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="JSON run config (defaults apply when omitted)")
    p.add_argument("--seed", type=_u64, help="overrides the config seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig() if args.config is None else load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        started = time.perf_counter()
        with np.errstate(over="raise", invalid="raise", divide="ignore"):
            COMMANDS[args.command](cfg, args.out)
        timing = {"command": args.command, "config_hash": cfg.hash(),
                  "wall_clock_s": time.perf_counter() - started}
        atomic_write(args.out / "timing.json", dump_json(timing))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"input error: {exc.filename or exc}: not found", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ShapeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
