"""Batch command-line frontend.

Every command reads one nested run configuration (defaults below, then an
optional ``--config`` file, then command-line flags) and writes its outputs,
including the fully resolved ``config.json``, into ``--out``.

Each config leaf has a matching flag, e.g. ``--adacalib.epochs 5`` or
``--data.train train.csv``. Exit codes: 0 success, 1 runtime error, 2 usage
error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from ._io import atomic_write_json, atomic_write_text, atomic_writer, read_json
from .adacalib import ABLATION_VARIANTS, AdaCalibModel, TrainConfig
from .baselines import calibrator_from_dict, fit_baseline
from .data import (
    Dataset,
    DataFormatError,
    SyntheticSpec,
    _detect_format,
    generate_synthetic,
    iter_rows,
    load_dataset,
    load_ground_truth,
    save_dataset,
    save_ground_truth,
    sigmoid,
    split_indices,
)
from .metrics import EvalReport, field_auc, field_rce

LOGGER = logging.getLogger("fieldcal")

METHODS = ("histogram", "isotonic", "platt", "gamma", "sir", "adacalib")
DISPLAY_NAMES = {
    "histogram": "Histogram Binning",
    "isotonic": "Isotonic Regression",
    "platt": "Platt Scaling",
    "gamma": "Gamma Calibration",
    "sir": "SIR",
    "adacalib": "AdaCalib",
}
NO_CALIB = "No Calib."


def _default_train_config() -> dict:
    d = TrainConfig().to_dict()
    # the run-level seed drives AdaCalib
    del d["seed"]
    return d


DEFAULTS = {
    "seed": 0,
    "out": "out",
    "data": {
        "train": None,
        "dev": None,
        "test": None,
        "input": None,
        "ground_truth": None,
        "format": None,
    },
    "checkpoint": None,
    "method": "adacalib",
    "methods": list(METHODS),
    "per_field": False,
    "bins": 10,
    "adacalib": _default_train_config(),
    "generate": {
        "fields": [
            {"name": "z1", "count": 50000, "curve": {"kind": "logit_normal", "mean": -2.0, "std": 1.0}, "score_bias": 2.0},
            {"name": "z2", "count": 50000, "curve": {"kind": "logit_normal", "mean": -2.0, "std": 1.0}, "score_bias": 0.5},
            {"name": "z3", "count": 50000, "curve": {"kind": "logit_normal", "mean": -2.0, "std": 1.0}, "score_bias": 1.0},
        ],
        "noise_std": 0.3,
        "feature_dim": 0,
        "shuffle": True,
        "splits": {"train": 0.4, "dev": 0.1, "test": 0.5},
        "format": "csv",
    },
    "apply": {"chunk_size": 65536},
    "plotdata": {"fields": []},
}

# mappings that are replaced whole rather than merged key by key
OPAQUE = {("generate", "splits")}


class UsageError(Exception):
    """Bad configuration or arguments; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration


def _leaves(d: dict, prefix=()):
    for k, v in d.items():
        path = prefix + (k,)
        if isinstance(v, dict) and path not in OPAQUE:
            yield from _leaves(v, path)
        else:
            yield path, v


def _coerce(value, default, path):
    """Light typing: numbers from strings, lists from comma-separated strings."""
    name = ".".join(path)
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        if not isinstance(value, bool):
            raise UsageError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, (int, float)) and value is not None:
        if isinstance(value, bool):
            raise UsageError(f"{name}: expected a number, got {value!r}")
        try:
            num = float(value)
        except (TypeError, ValueError):
            raise UsageError(f"{name}: expected a number, got {value!r}") from None
        if isinstance(default, int) and not isinstance(default, bool):
            if num != int(num):
                raise UsageError(f"{name}: expected an integer, got {value!r}")
            return int(num)
        return num
    if isinstance(default, list) and isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def merge_config(base: dict, override: dict, prefix=()) -> dict:
    """Deep-merge ``override`` into a copy of ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        path = prefix + (k,)
        if k not in base:
            raise UsageError(f"unknown config key {'.'.join(path)!r}")
        if isinstance(base[k], dict) and path not in OPAQUE:
            if not isinstance(v, dict):
                raise UsageError(f"{'.'.join(path)}: expected a mapping")
            out[k] = merge_config(base[k], v, path)
        else:
            out[k] = _coerce(v, base[k], path)
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            d = yaml.safe_load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise UsageError(f"config {path} must hold a mapping at the top level")
    return d


def _parse_flag_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return yaml.safe_load(text)


def _set_path(d: dict, path, value) -> None:
    for k in path[:-1]:
        d = d.setdefault(k, {})
    d[path[-1]] = value


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        cfg = merge_config(cfg, load_config_file(args.config))
    overrides: dict = {}
    for path, _ in _leaves(DEFAULTS):
        value = getattr(args, "cfg__" + "__".join(path), None)
        if value is not None:
            _set_path(overrides, path, _parse_flag_value(value))
    cfg = merge_config(cfg, overrides)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["method"] not in METHODS:
        raise UsageError(f"invalid method {cfg['method']!r}; choose from {', '.join(METHODS)}")
    bad = [m for m in cfg["methods"] if m not in METHODS]
    if bad:
        raise UsageError(f"invalid methods {bad}; choose from {', '.join(METHODS)}")
    if cfg["bins"] < 1:
        raise UsageError("bins must be >= 1")
    try:
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"adacalib: {exc}") from None


def train_config(cfg: dict, **flags) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["adacalib"], "seed": cfg["seed"], **flags})


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg["data"].get(k)]
    if missing:
        raise UsageError("missing required data path(s): " + ", ".join(f"data.{k}" for k in missing))


# ---------------------------------------------------------------------------
# shared helpers


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(cfg: dict, key: str) -> Dataset:
    return load_dataset(cfg["data"][key], cfg["data"]["format"])


def _fit_data(cfg: dict) -> Dataset:
    """Calibrators are trained on train plus dev when a dev split is given."""
    train = _load(cfg, "train")
    if cfg["data"]["dev"]:
        return Dataset.concat(train, _load(cfg, "dev"))
    return train


def fit_method(method: str, data: Dataset, cfg: dict, **flags):
    if method == "adacalib":
        return AdaCalibModel(train_config(cfg, **flags)).fit(data)
    return fit_baseline(method, data, K=cfg["bins"], per_field=cfg["per_field"])


def predict(model, data: Dataset) -> np.ndarray:
    if isinstance(model, AdaCalibModel):
        return model.calibrate_dataset(data)
    return model.apply(data.scores, data.fields)


def load_checkpoint(path):
    d = read_json(path)
    if not isinstance(d, dict):
        raise ValueError(f"{path}: not a checkpoint")
    if d.get("kind") == "adacalib":
        return AdaCalibModel.from_dict(d)
    return calibrator_from_dict(d)


def _truth(cfg: dict, n: int):
    path = cfg["data"]["ground_truth"]
    if not path:
        return None
    q = load_ground_truth(path)
    if q.size != n:
        raise DataFormatError(f"ground truth has {q.size} rows, data has {n}")
    return q


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: dict) -> Path:
    out = _out_dir(cfg)
    g = cfg["generate"]
    spec = SyntheticSpec.from_dict({**g, "noise_seed": cfg["seed"]})
    data, truth = generate_synthetic(spec)
    fmt = g["format"]
    _detect_format("", fmt)
    files = {"data": f"data.{fmt}", "ground_truth": "truth.csv"}
    save_dataset(data, out / files["data"], fmt)
    save_ground_truth(truth, out / files["ground_truth"])
    splits = {k: float(v) for k, v in g["splits"].items() if float(v) > 0}
    counts = {"data": len(data)}
    if splits:
        names = list(splits)
        parts = split_indices(data.fields, [splits[k] for k in names], cfg["seed"])
        for name, idx in zip(names, parts):
            files[name] = f"{name}.{fmt}"
            files[f"{name}_truth"] = f"{name}_truth.csv"
            save_dataset(data.subset(idx), out / files[name], fmt)
            save_ground_truth(truth[idx], out / files[f"{name}_truth"])
            counts[name] = int(idx.size)
    manifest = {"seed": cfg["seed"], "spec": spec.to_dict(), "files": files, "rows": counts}
    atomic_write_json(out / "manifest.json", manifest)
    LOGGER.info("generated %d rows into %s", len(data), out)
    return out


def cmd_fit(cfg: dict) -> Path:
    _require(cfg, "train")
    out = _out_dir(cfg)
    data = _fit_data(cfg)
    model = fit_method(cfg["method"], data, cfg)
    log = {"method": cfg["method"], "n_samples": len(data)}
    if isinstance(model, AdaCalibModel):
        log["history"] = model.history
        log["selected_k"] = {v: model.selected_k(v) for v in model.vocab}
    else:
        log["parameters"] = model.to_dict()
    atomic_write_json(out / "model.json", model.to_dict())
    atomic_write_json(out / "fit_log.json", log)
    return out


def cmd_apply(cfg: dict) -> Path:
    _require(cfg, "input")
    if not cfg["checkpoint"]:
        raise UsageError("apply needs a checkpoint path")
    out = _out_dir(cfg)
    model = load_checkpoint(cfg["checkpoint"])
    src = cfg["data"]["input"]
    fmt = _detect_format(src, cfg["data"]["format"])
    chunk = int(cfg["apply"]["chunk_size"])
    if chunk < 1:
        raise UsageError("apply.chunk_size must be >= 1")
    dest = out / f"scored.{fmt}"
    n = 0
    with atomic_writer(dest) as fh:
        writer = None
        buf_raw, buf = [], []

        def flush():
            nonlocal writer
            preds = predict(model, Dataset.from_samples(buf))
            for raw, p in zip(buf_raw, preds):
                if fmt == "csv":
                    if writer is None:
                        writer = csv.DictWriter(fh, fieldnames=list(raw) + ["calibrated"], lineterminator="\n")
                        writer.writeheader()
                    writer.writerow({**raw, "calibrated": repr(float(p))})
                else:
                    fh.write(json.dumps({**raw, "calibrated": float(p)}) + "\n")
            buf_raw.clear()
            buf.clear()

        for raw, sample in iter_rows(src, fmt):
            if "calibrated" in raw:
                raise DataFormatError("input already has a 'calibrated' column")
            buf_raw.append(raw)
            buf.append(sample)
            n += 1
            if len(buf) >= chunk:
                flush()
        if buf:
            flush()
        if fmt == "csv" and writer is None:
            # empty input: echo the header only
            with open(src, encoding="utf-8", newline="") as inp:
                header = next(csv.reader(inp), [])
            fh.write(",".join(header + ["calibrated"]) + "\n")
    LOGGER.info("wrote %d calibrated rows to %s", n, dest)
    return out


def _read_scored(path, fmt):
    samples, calibrated = [], []
    for raw, s in iter_rows(path, fmt):
        samples.append(s)
        if "calibrated" in raw:
            calibrated.append(float(raw["calibrated"]))
    data = Dataset.from_samples(samples)
    if calibrated and len(calibrated) != len(samples):
        raise DataFormatError("'calibrated' column missing on some rows")
    return data, (np.asarray(calibrated) if calibrated else None)


def _write_report(out: Path, stem: str, report: EvalReport) -> str:
    text = report.to_text()
    atomic_write_json(out / f"{stem}.json", report.to_dict())
    atomic_write_text(out / f"{stem}.txt", text)
    return text


def cmd_eval(cfg: dict) -> Path:
    _require(cfg, "input")
    out = _out_dir(cfg)
    data, calibrated = _read_scored(cfg["data"]["input"], cfg["data"]["format"])
    if len(data) == 0:
        raise DataFormatError("cannot evaluate an empty file")
    truth = _truth(cfg, len(data))
    report = EvalReport()
    report.add(NO_CALIB, data.fields, data.labels, data.scores, truth)
    if calibrated is not None:
        report.add("Calibrated", data.fields, data.labels, calibrated, truth)
    sys.stdout.write(_write_report(out, "report", report))
    return out


def cmd_compare(cfg: dict) -> Path:
    _require(cfg, "train", "test")
    out = _out_dir(cfg)
    fit_data = _fit_data(cfg)
    test = _load(cfg, "test")
    truth = _truth(cfg, len(test))
    report = EvalReport()
    report.add(NO_CALIB, test.fields, test.labels, test.scores, truth)
    for method in cfg["methods"]:
        name = DISPLAY_NAMES[method]
        try:
            model = fit_method(method, fit_data, cfg)
            report.add(name, test.fields, test.labels, predict(model, test), truth)
        except Exception as exc:  # one failed method must not sink the table
            LOGGER.error("%s failed: %s", name, exc)
            report.errors[name] = f"{type(exc).__name__}: {exc}"
    sys.stdout.write(_write_report(out, "compare", report))
    return out


def ablation_rows(cfg: dict, fit_data: Dataset, test: Dataset) -> list[dict]:
    rows = []
    for name, post, func, binning, aux in ABLATION_VARIANTS:
        flags = {
            "posterior_guidance_enabled": post,
            "adaptive_function_enabled": func,
            "adaptive_binning_enabled": binning,
            "aux_enabled": aux,
        }
        model = fit_method("adacalib", fit_data, cfg, **flags)
        p = model.calibrate_dataset(test)
        rows.append(
            {
                "variant": name,
                **flags,
                "field_rce": field_rce(test.fields, test.labels, p),
                "field_auc": field_auc(test.fields, test.labels, p),
            }
        )
    return rows


def ablation_text(rows: list[dict]) -> str:
    cols = [("Posterior", "posterior_guidance_enabled"), ("Function", "adaptive_function_enabled"),
            ("Binning", "adaptive_binning_enabled"), ("Aux", "aux_enabled")]
    width = max(len(r["variant"]) for r in rows) + 2
    head = "Variant".ljust(width) + "".join(c.rjust(10) for c, _ in cols) + "Field-RCE".rjust(11) + "Field-AUC".rjust(11)
    lines = [head, "-" * len(head)]
    for r in rows:
        flags = "".join(("yes" if r[k] else "no").rjust(10) for _, k in cols)
        auc = "n/a" if r["field_auc"] is None else f"{r['field_auc']:.4f}"
        lines.append(r["variant"].ljust(width) + flags + f"{r['field_rce']:.4f}".rjust(11) + auc.rjust(11))
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: dict) -> Path:
    _require(cfg, "train", "test")
    out = _out_dir(cfg)
    rows = ablation_rows(cfg, _fit_data(cfg), _load(cfg, "test"))
    text = ablation_text(rows)
    atomic_write_json(out / "ablation.json", {"rows": rows})
    atomic_write_text(out / "ablation.txt", text)
    sys.stdout.write(text)
    return out


def anchor_curves(model: AdaCalibModel, values) -> list[dict]:
    """Selected candidate's anchors per field value as ``(index, bound, sigmoid(anchor))`` rows."""
    rows = []
    for v in values:
        i = model.selected_candidate(v)
        lay = model.layouts[i]
        entry = lay.table.entry_key(v)
        bounds = lay.table.entries[entry].bounds.bounds
        for k, (b, a) in enumerate(zip(bounds, model.anchors_for(i, v)), start=1):
            rows.append({"field_value": v, "K": lay.K, "entry": entry, "index": k, "bound": float(b), "prob": float(sigmoid(a))})
    return rows


def selected_k_deciles(model: AdaCalibModel, groups: int = 10) -> list[dict]:
    """Field values split into deciles by positive count, with a histogram of selected K per decile."""
    values = sorted(model.vocab, key=lambda v: (model.freq_stats.positives(v), v))
    ks = [lay.K for lay in model.layouts]
    rows = []
    for g, chunk in enumerate(np.array_split(np.array(values, dtype=object), groups), start=1):
        chosen = [model.selected_k(v) for v in chunk]
        pos = [model.freq_stats.positives(v) for v in chunk]
        rows.append(
            {
                "decile": g,
                "n_fields": len(chunk),
                "min_positives": min(pos) if pos else None,
                "max_positives": max(pos) if pos else None,
                "histogram": {str(k): chosen.count(k) for k in ks},
            }
        )
    return rows


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with atomic_writer(path) as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def cmd_plotdata(cfg: dict) -> Path:
    if not cfg["checkpoint"]:
        raise UsageError("plotdata needs a checkpoint path")
    model = load_checkpoint(cfg["checkpoint"])
    if not isinstance(model, AdaCalibModel):
        raise ValueError("plotdata needs an AdaCalib checkpoint")
    out = _out_dir(cfg)
    values = cfg["plotdata"]["fields"] or list(model.vocab)
    curves = anchor_curves(model, values)
    deciles = selected_k_deciles(model)
    atomic_write_json(out / "anchor_curves.json", {"rows": curves})
    _write_csv(out / "anchor_curves.csv", curves, ["field_value", "K", "entry", "index", "bound", "prob"])
    atomic_write_json(out / "selected_k_deciles.json", {"candidates": [lay.K for lay in model.layouts], "rows": deciles})
    flat = [{**{k: v for k, v in r.items() if k != "histogram"}, **{f"K{k}": c for k, c in r["histogram"].items()}} for r in deciles]
    _write_csv(out / "selected_k_deciles.csv", flat, list(flat[0]) if flat else ["decile"])
    return out


COMMANDS = {
    "generate": (cmd_generate, "draw a synthetic dataset with ground truth"),
    "fit": (cmd_fit, "fit one calibrator and write its checkpoint"),
    "apply": (cmd_apply, "append a calibrated column to a data file"),
    "eval": (cmd_eval, "evaluate raw and calibrated scores"),
    "compare": (cmd_compare, "fit several methods on the same splits and compare"),
    "ablate": (cmd_ablate, "run the five AdaCalib ablation variants"),
    "plotdata": (cmd_plotdata, "emit anchor curves and selected-K histograms"),
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON or YAML run configuration")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    for path, default in _leaves(DEFAULTS):
        key = ".".join(path)
        names = ["--" + key]
        if "_" in key:
            names.append("--" + key.replace("_", "-"))
        shown = json.dumps(default) if not isinstance(default, str) else default
        common.add_argument(*names, dest="cfg__" + "__".join(path), metavar="VALUE", help=f"default: {shown}")
    parser = argparse.ArgumentParser(prog="fieldcal", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_, description=help_)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        COMMANDS[args.command][0](cfg)
        atomic_write_json(out / "config.json", cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fieldcal: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        LOGGER.debug("command failed", exc_info=True)
        print(f"fieldcal: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
