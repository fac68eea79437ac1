"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence.

Every option can also be given in a flat ``key = value`` config file
(``--config``); keys are option names with or without leading dashes and
with ``-`` or ``_``.  Precedence is command line > config file > default.
Z̄ values on the command line are in unordered-pair units (the number of
pairs is n(n-1)/2); they are doubled internally.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data_io import (
    DataMatrix, ExportRecord, export, load_idx_labels, load_matrix, pca_init, pca_reduce,
    write_json,
)
from .errors import (
    ArgumentError, CNEError, DegenerateInputError, DivergenceError, FormatError, SizeError,
    StateError, ValidationError,
)
from .knn_graph import build_sknn
from .metrics import compute_report, rms_distance
from .model import LossSpec, Mode, partition_function
from .optimizer import (
    EmbeddingState, OptimizerConfig, equilibrium_distance_toy, run_toy, run_training,
    zbar_from_slider,
)
from .parametric import forward, init_network, load_network, save_network, train_parametric
from .reference_tsne import TsneConfig, run_reference_tsne

log = logging.getLogger("cne")

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 1, 2, 3
PARAMETRIC_LR = 1e-3

DEFAULTS = {
    "input": None, "format": "csv", "header": False, "labels": None, "config": None, "replay": None,
    "out_dir": ".", "svg": False, "metrics": False, "epoch_log": False, "csv_header": False,
    "track_partition": False, "threads": None, "seed": 0, "pca": 50, "k": 15, "dim": 2,
    "init": "pca", "mode": "neg", "kernel": "cauchy", "zbar": None, "slider": None,
    "slider_anchor": None, "zbar_from": None, "m": 5, "batch_size": 1024, "epochs": 750,
    "lr": None, "z_lr": None, "eps": 1e-10, "early_exag_epochs": 250, "anneal": "linear",
    "no_anneal_reset": False, "negatives": "node", "parametric": False, "hidden": "100,100,100",
    "grid": "0,0.5,1",
    # reference-tsne
    "iterations": 1000, "exaggeration": 12.0, "exag_iterations": 250,
    # metrics
    "reference": None, "embedding": None, "sample_size": 5000, "kl": False, "out": None,
    # transform
    "checkpoint": None,
    # toy
    "toy_grid": "1,2,3,4,5,6,7,8,10", "toy_epochs": 2000, "toy_lr": 0.01,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--threads", type=int, help="cap worker threads (env CNE_THREADS)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", help="output directory (default: current)")


def _data_opts(p):
    p.add_argument("--input", help="data matrix")
    p.add_argument("--format", choices=["csv", "raw_f32", "idx"])
    p.add_argument("--header", action="store_true", help="CSV input has a header row")
    p.add_argument("--labels", help="IDX1 label file or text file with one integer per line")
    p.add_argument("--pca", type=int, help="PCA dimensions before the kNN graph (0 = off)")
    p.add_argument("--k", type=int, help="neighbors per point")


def _embed_opts(p):
    _data_opts(p)
    p.add_argument("--replay", help="run.json of an earlier run")
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--kernel", choices=["cauchy", "inverse_square"])
    p.add_argument("--zbar", type=float, help="fixed normalization, unordered-pair units")
    p.add_argument("--slider", type=float,
                   help="spectrum position: 0 = t-SNE-like anchor, 1 = n(n-1)/(2m)")
    p.add_argument("--slider-anchor", type=float,
                   help="Z̄ at slider 0, unordered-pair units (default 100 n)")
    p.add_argument("--zbar-from", help="JSON from reference-tsne; its Z_tsne anchors slider 0")
    p.add_argument("--m", type=int, help="noise samples per edge")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="default 1 (non-parametric) or 0.001 (parametric)")
    p.add_argument("--z-lr", type=float, help="learning rate of log Z in nce mode")
    p.add_argument("--eps", type=float, help="lower clip for log arguments")
    p.add_argument("--early-exag-epochs", type=int)
    p.add_argument("--anneal", choices=["linear", "none"])
    p.add_argument("--no-anneal-reset", action="store_true",
                   help="one annealing ramp over all epochs")
    p.add_argument("--negatives", choices=["node", "slot"])
    p.add_argument("--init", choices=["pca", "random"])
    p.add_argument("--dim", type=int, help="embedding dimension")
    p.add_argument("--parametric", action="store_true")
    p.add_argument("--hidden", help="hidden layer widths, comma separated")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--metrics", action="store_true", help="write metrics.json")
    p.add_argument("--epoch-log", action="store_true", help="write epochs.jsonl")
    p.add_argument("--track-partition", action="store_true",
                   help="exact partition function in the epoch log (O(n^2) per epoch)")
    p.add_argument("--csv-header", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cne", description="Contrastive neighbor embeddings.",
                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"cne {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    kw = dict(argument_default=argparse.SUPPRESS)
    p = sub.add_parser("embed", help="embed a data matrix", **kw)
    _common(p)
    _embed_opts(p)

    p = sub.add_parser("spectrum", help="NEG embeddings over a slider grid", **kw)
    _common(p)
    _embed_opts(p)
    p.add_argument("--grid", help="comma separated slider positions")

    p = sub.add_parser("metrics", help="kNN recall, Spearman and KL of an embedding", **kw)
    _common(p)
    p.add_argument("--reference", help="reference matrix (CSV)")
    p.add_argument("--embedding", help="embedding (CSV)")
    p.add_argument("--format", choices=["csv", "raw_f32", "idx"], help="reference format")
    p.add_argument("--header", action="store_true")
    p.add_argument("--k", type=int)
    p.add_argument("--sample-size", type=int)
    p.add_argument("--kl", action="store_true", help="KL to the reference skNN graph")
    p.add_argument("--out", help="output JSON (default: stdout)")

    p = sub.add_parser("reference-tsne", help="exact t-SNE oracle", **kw)
    _common(p)
    _data_opts(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float, help="default max(n / exaggeration, 50)")
    p.add_argument("--exaggeration", type=float)
    p.add_argument("--exag-iterations", type=int)
    p.add_argument("--csv-header", action="store_true")

    p = sub.add_parser("transform", help="embed new rows with a saved network", **kw)
    _common(p)
    p.add_argument("--checkpoint", help="network.cnen")
    p.add_argument("--input")
    p.add_argument("--format", choices=["csv", "raw_f32", "idx"])
    p.add_argument("--header", action="store_true")
    p.add_argument("--out", help="output CSV (default: <out-dir>/transformed.csv)")

    p = sub.add_parser("toy", help="three-point partition function experiment", **kw)
    _common(p)
    p.add_argument("--toy-grid", help="comma separated Z̄ values")
    p.add_argument("--toy-epochs", type=int)
    p.add_argument("--toy-lr", type=float)
    return parser


def _action_types(parser) -> dict:
    """Map option dest -> converter, over all subcommands."""
    types = {}
    stack = [parser]
    while stack:
        p = stack.pop()
        for action in p._actions:
            if isinstance(action, argparse._SubParsersAction):
                stack.extend(action.choices.values())
            elif action.dest not in ("help", "version"):
                if isinstance(action, argparse._StoreTrueAction):
                    types[action.dest] = _bool
                else:
                    types[action.dest] = action.type or str
    return types


def read_config_file(path, types: dict) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.lstrip("-").replace("-", "_")
            if key not in types:
                raise UsageError(f"{path}:{lineno}: unknown option {key!r}")
            try:
                values[key] = types[key](value)
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: {exc}") from None
    return values


def resolve(argv=None) -> dict:
    """Parse ``argv`` and merge command line, replay/config file and defaults."""
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    types = _action_types(parser)
    merged = dict(DEFAULTS)
    if ns.get("replay"):
        with open(ns["replay"], "r", encoding="utf-8") as fh:
            stored = json.load(fh).get("config", {})
        merged.update({k: v for k, v in stored.items() if k in DEFAULTS})
    if ns.get("config"):
        merged.update(read_config_file(ns["config"], types))
    merged.update(ns)
    if merged["threads"] is None and os.environ.get("CNE_THREADS"):
        try:
            merged["threads"] = int(os.environ["CNE_THREADS"])
        except ValueError:
            raise UsageError(f"CNE_THREADS must be an integer, got {os.environ['CNE_THREADS']!r}")
    return merged


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma separated numbers, got {text!r}") from None


def _load_labels(path):
    if path is None:
        return None
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label file not found: {path}")
    if b"\x00\x00\x08\x01" == path.read_bytes()[:4]:
        return load_idx_labels(path)
    try:
        return np.loadtxt(path, dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _load_data(cfg) -> DataMatrix:
    if not cfg.get("input"):
        raise UsageError("--input is required")
    return load_matrix(cfg["input"], cfg["format"], cfg["header"], _load_labels(cfg["labels"]))


def _graph_data(data: DataMatrix, cfg) -> DataMatrix:
    dims = cfg["pca"]
    if dims and dims < min(data.n, data.D):
        return pca_reduce(data, dims)
    return data


def _initial_coords(reduced: DataMatrix, cfg) -> np.ndarray:
    if cfg["init"] == "pca":
        return pca_init(reduced, cfg["dim"])
    return np.random.default_rng(cfg["seed"]).normal(size=(reduced.n, cfg["dim"]))


def _zbar_internal(cfg, n: int) -> float | None:
    """Ordered-pair Z̄ for NEG, or None for the other modes."""
    if cfg["mode"] != "neg":
        return None
    if cfg["zbar"] is not None and cfg["slider"] is not None:
        raise UsageError("give either --zbar or --slider, not both")
    if cfg["zbar"] is not None:
        return 2.0 * cfg["zbar"]
    s = 1.0 if cfg["slider"] is None else cfg["slider"]
    return 2.0 * zbar_from_slider(n, cfg["m"], s, _slider_anchor(cfg))


def _slider_anchor(cfg) -> float | None:
    if cfg["zbar_from"]:
        with open(cfg["zbar_from"], "r", encoding="utf-8") as fh:
            z_tsne = float(json.load(fh)["Z_tsne"])
        # Z_tsne sums over ordered pairs
        return z_tsne / 2.0
    return cfg["slider_anchor"]


def _optimizer_config(cfg) -> OptimizerConfig:
    lr = cfg["lr"]
    if lr is None:
        lr = PARAMETRIC_LR if cfg["parametric"] else 1.0
    return OptimizerConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=lr, anneal=cfg["anneal"],
        early_exag_epochs=cfg["early_exag_epochs"], seed=cfg["seed"], z_lr=cfg["z_lr"],
        anneal_reset=not cfg["no_anneal_reset"], negatives=cfg["negatives"])


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt_s(s: float) -> str:
    return format(s, "g")


class _EpochLog:
    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8") if path else None

    def __call__(self, info):
        if self.fh is None:
            return
        record = info.as_dict() if hasattr(info, "as_dict") else info
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _embed_once(cfg, data, reduced, graph, init, zbar, out: Path, stem: str, log_path=None):
    """Train one embedding and write its outputs; returns the coordinates."""
    n = data.n
    spec = LossSpec(mode=cfg["mode"], n=n, zbar=zbar, m=cfg["m"], eps=cfg["eps"],
                    kernel=cfg["kernel"])
    opt = _optimizer_config(cfg)
    epoch_log = _EpochLog(log_path)
    started = time.perf_counter()
    Z = None
    try:
        if cfg["parametric"]:
            hidden = [int(v) for v in _floats(cfg["hidden"])]
            net = init_network([data.D, *hidden, cfg["dim"]], cfg["seed"])
            net = train_parametric(graph, data, spec, opt, net=net,
                                   hook=lambda e, loss: epoch_log({"epoch": e, "loss": loss}))
            coords = forward(net, data.values)
            Z = net.Z
            save_network(net, out / "network.cnen")
        else:
            state = run_training(graph, EmbeddingState(init), spec, opt, hook=epoch_log,
                                 track_partition=cfg["track_partition"])
            coords, Z = state.coords, state.Z
    finally:
        epoch_log.close()
    log.info("trained %s in %.2fs", stem, time.perf_counter() - started)

    export(ExportRecord(coords, data.labels), "csv", out / f"{stem}.csv", header=cfg["csv_header"])
    if cfg["svg"]:
        if coords.shape[1] != 2:
            raise UsageError("--svg needs --dim 2")
        export(ExportRecord(coords, data.labels), "svg", out / f"{stem}.svg")
    if cfg["metrics"]:
        report = compute_report(data, coords, graph, k=cfg["k"], seed=cfg["seed"]).as_dict()
        if Z is not None:
            report["Z"] = Z
        write_json(out / ("metrics.json" if stem == "embedding" else f"metrics_{stem}.json"), report)
    return coords


def _write_run_json(out: Path, cfg, extra=None):
    stored = {k: cfg[k] for k in DEFAULTS if k not in ("replay", "config")}
    payload = {"command": cfg["command"], "version": __version__, "config": stored}
    if extra:
        payload.update(extra)
    write_json(out / "run.json", payload)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _prepare(cfg):
    data = _load_data(cfg)
    reduced = _graph_data(data, cfg)
    graph = build_sknn(reduced, cfg["k"])
    init = _initial_coords(reduced, cfg)
    return data, reduced, graph, init


def cmd_embed(cfg) -> int:
    data, reduced, graph, init = _prepare(cfg)
    zbar = _zbar_internal(cfg, data.n)
    out = _out_dir(cfg)
    _write_run_json(out, cfg, {"zbar_internal": zbar})
    _embed_once(cfg, data, reduced, graph, init, zbar, out, "embedding",
                out / "epochs.jsonl" if cfg["epoch_log"] else None)
    return 0


def cmd_spectrum(cfg) -> int:
    if cfg["mode"] != "neg":
        raise UsageError("spectrum needs --mode neg")
    if cfg["zbar"] is not None:
        raise UsageError("spectrum takes slider positions, not --zbar")
    grid = _floats(cfg["grid"])
    if not grid:
        raise UsageError("--grid is empty")
    data, reduced, graph, init = _prepare(cfg)
    out = _out_dir(cfg)
    _write_run_json(out, cfg)
    anchor = _slider_anchor(cfg)
    rows = []
    for s in grid:
        zbar_user = zbar_from_slider(data.n, cfg["m"], s, anchor)
        stem = "embedding" if len(grid) == 1 else f"embedding_s{_fmt_s(s)}"
        log_path = out / f"epochs_s{_fmt_s(s)}.jsonl" if cfg["epoch_log"] else None
        coords = _embed_once(cfg, data, reduced, graph, init, 2.0 * zbar_user, out, stem, log_path)
        rows.append((s, zbar_user, partition_function(coords), rms_distance(coords)))
    lines = ["slider,zbar,partition_function,rms_distance"]
    lines += [",".join(format(v, ".10g") for v in row) for row in rows]
    (out / "spectrum.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_metrics(cfg) -> int:
    if not cfg["reference"] or not cfg["embedding"]:
        raise UsageError("--reference and --embedding are required")
    ref = load_matrix(cfg["reference"], cfg["format"], cfg["header"])
    emb = load_matrix(cfg["embedding"], "csv", cfg["header"])
    if ref.n != emb.n:
        raise UsageError(f"reference has {ref.n} rows, embedding has {emb.n}")
    graph = build_sknn(ref, cfg["k"]) if cfg["kl"] else None
    report = compute_report(ref, emb.values, graph, k=cfg["k"],
                            sample_size=cfg["sample_size"], seed=cfg["seed"])
    if cfg["out"]:
        write_json(cfg["out"], report.as_dict())
    else:
        print(json.dumps(report.as_dict(), sort_keys=True, indent=2))
    return 0


def cmd_reference_tsne(cfg) -> int:
    data = _load_data(cfg)
    reduced = _graph_data(data, cfg)
    graph = build_sknn(reduced, cfg["k"])
    init = pca_init(reduced, 2, target_std=1e-4)
    tcfg = TsneConfig(iterations=cfg["iterations"], lr=cfg.get("lr"),
                      exaggeration=cfg["exaggeration"], exag_iterations=cfg["exag_iterations"])
    coords, z_tsne = run_reference_tsne(graph, init, tcfg)
    out = _out_dir(cfg)
    export(ExportRecord(coords, data.labels), "csv", out / "embedding.csv", header=cfg["csv_header"])
    write_json(out / "tsne.json", {"Z_tsne": z_tsne, "n": data.n, "k": cfg["k"],
                                   "iterations": cfg["iterations"], "lr": tcfg.resolved_lr(data.n)})
    _write_run_json(out, cfg, {"Z_tsne": z_tsne})
    print(f"Z_tsne = {z_tsne:.10g}")
    return 0


def cmd_transform(cfg) -> int:
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    path = Path(cfg["checkpoint"])
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    net = load_network(path)
    data = _load_data(cfg)
    if data.D != net.dims[0]:
        raise ValidationError(f"network expects {net.dims[0]} columns, input has {data.D}")
    coords = forward(net, data.values)
    target = Path(cfg["out"]) if cfg["out"] else _out_dir(cfg) / "transformed.csv"
    export(ExportRecord(coords), "csv", target)
    return 0


def cmd_toy(cfg) -> int:
    rows = ["zbar,partition_function,mean_distance,equilibrium_distance"]
    for zbar in _floats(cfg["toy_grid"]):
        state = run_toy(zbar, seed=cfg["seed"], epochs=cfg["toy_epochs"], lr=cfg["toy_lr"])
        c = state.coords
        d = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))[np.triu_indices(3, 1)]
        eq = equilibrium_distance_toy(zbar) if zbar <= 6 else 0.0
        rows.append(f"{zbar:g},{partition_function(c):.6f},{d.mean():.6f},{eq:.6f}")
    print("\n".join(rows))
    return 0


COMMANDS = {
    "embed": cmd_embed,
    "spectrum": cmd_spectrum,
    "metrics": cmd_metrics,
    "reference-tsne": cmd_reference_tsne,
    "transform": cmd_transform,
    "toy": cmd_toy,
}

DATA_ERRORS = (FileNotFoundError, IsADirectoryError, FormatError, ValidationError,
               DegenerateInputError, SizeError, StateError)


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        cfg = resolve(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"cne: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"cne: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(cfg["threads"]):
            return COMMANDS[cfg["command"]](cfg)
    except (UsageError, ArgumentError) as exc:
        print(f"cne: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"cne: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DATA_ERRORS as exc:
        print(f"cne: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CNEError as exc:
        print(f"cne: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
