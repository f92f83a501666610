"""Command-line harness: gen-data, run, correlate, report.

Every output is a pure function of the inputs and seed: no timestamps, no
absolute paths of the output directory, fixed float formatting.
Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import active_learning as AL
from . import metrics as M
from .nn.model import ArchConfig, save_checkpoint
from .nn.training import OptimizerState
from .volume import DatasetManifest, PhantomSpec, generate_phantom, write_volume

log = logging.getLogger("attnal")

STRATEGY_ALIASES = {
    "attention": None,  # resolved per task
    "random": AL.RANDOM,
    "interval": AL.EQUAL_INTERVAL,
    "uncertainty": AL.UNCERTAINTY,
}


class ConfigError(ValueError):
    """Invalid configuration; reported with the offending field path."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class PhantomSection:
    task: str = "brain"
    size: list = field(default_factory=lambda: [32, 32, 32])
    noise_sigma: float = 0.05


@dataclass
class NetworkSection:
    features: int = 8
    depth: int = 1
    reduction: int = 2


@dataclass
class OptimizerSection:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 2


@dataclass
class LoopSection:
    spacing: int = 16
    budget_step: float = 0.05
    sigma: float = 0.005
    max_rounds: int = 6
    iters: int = 150
    restart: bool = False
    pseudo_pair: str = AL.PAIR_ATTENTION_MAP


@dataclass
class RunConfig:
    phantom: PhantomSection = field(default_factory=PhantomSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    loop: LoopSection = field(default_factory=LoopSection)
    strategies: list = field(default_factory=lambda: ["attention", "random", "interval",
                                                       "uncertainty"])
    n_train: int = 8
    n_test: int = 4
    out: str | None = None
    seed: int = 0

    SECTIONS = {"phantom": PhantomSection, "network": NetworkSection,
                "optimizer": OptimizerSection, "loop": LoopSection}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be an object")
        cfg = cls()
        known = {f.name for f in fields(cls)}
        for key, value in doc.items():
            if key not in known:
                raise ConfigError(f"config.{key}: unknown key")
            if key in cls.SECTIONS:
                setattr(cfg, key, _section(cls.SECTIONS[key], value, key))
            else:
                setattr(cfg, key, _typed(getattr(cfg, key), value, key))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def arch(self, num_classes: int, attention: bool = True) -> ArchConfig:
        n = self.network
        return ArchConfig(num_classes=num_classes, features=n.features, depth=n.depth,
                          reduction=n.reduction, attention=attention)

    def optim(self) -> OptimizerState:
        o = self.optimizer
        return OptimizerState(o.lr, o.momentum, o.weight_decay, o.batch_size)

    def loop_config(self, seed: int) -> AL.LoopConfig:
        lp = self.loop
        return AL.LoopConfig(lp.spacing, lp.budget_step, lp.sigma, lp.max_rounds, lp.iters,
                             lp.restart, seed, lp.pseudo_pair)

    def phantom_spec(self, seed: int) -> PhantomSpec:
        p = self.phantom
        return PhantomSpec(p.task, tuple(int(s) for s in p.size), p.noise_sigma, seed,
                           2**self.network.depth)

    def validate(self) -> None:
        checks = [
            ("phantom", lambda: self.phantom_spec(0).validate()),
            ("network", lambda: self.arch(2)),
            ("loop", lambda: self.loop_config(0).validate()),
        ]
        for name, check in checks:
            try:
                check()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config.{name}: {exc}") from exc
        o = self.optimizer
        if o.lr <= 0 or not 0 <= o.momentum < 1 or o.weight_decay < 0 or o.batch_size < 1:
            raise ConfigError("config.optimizer: need lr > 0, 0 <= momentum < 1, "
                              "weight_decay >= 0, batch_size >= 1")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("config.n_train/n_test: need n_train >= 1 and n_test >= 0")
        for s in self.strategies:
            if s not in STRATEGY_ALIASES and s not in AL.STRATEGIES:
                raise ConfigError(f"config.strategies: unknown strategy {s!r}")


def _typed(default, value, path):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:  # optional fields
        ok = value is None or isinstance(value, str)
    if not ok:
        raise ConfigError(f"config.{path}: expected {type(default).__name__}, "
                          f"got {type(value).__name__}")
    return value


def _section(cls, doc, name):
    if not isinstance(doc, dict):
        raise ConfigError(f"config.{name}: must be an object")
    obj = cls()
    known = {f.name for f in fields(cls)}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"config.{name}.{key}: unknown key")
        setattr(obj, key, _typed(getattr(obj, key), value, f"{name}.{key}"))
    return obj


def resolve_strategy(name: str, num_classes: int) -> str:
    if name == "attention":
        return AL.attention_strategy(num_classes)
    if name in STRATEGY_ALIASES:
        return STRATEGY_ALIASES[name]
    if name in AL.STRATEGIES:
        return name
    raise ConfigError(f"unknown strategy {name!r}")


# ---------------------------------------------------------------------------
# Small output helpers
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _seed_of(seed_seq: np.random.SeedSequence) -> int:
    return int(seed_seq.generate_state(1)[0])


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    if args.task:
        cfg.phantom.task = args.task
    if args.size:
        cfg.phantom.size = args.size
    if args.noise is not None:
        cfg.phantom.noise_sigma = args.noise
    n_train = cfg.n_train if args.n_train is None else args.n_train
    n_test = cfg.n_test if args.n_test is None else args.n_test
    if n_train < 1 or n_test < 0:
        raise ConfigError("--n-train must be >= 1 and --n-test >= 0")
    seed = cfg.seed if args.seed is None else args.seed
    cfg.validate()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [_seed_of(s) for s in np.random.SeedSequence(seed).spawn(n_train + n_test)]
    parts = {"A": [], "B": []}
    for i, s in enumerate(seeds):
        part, j = ("A", i) if i < n_train else ("B", i - n_train)
        sub = out / f"part{part}"
        sub.mkdir(exist_ok=True)
        vol, lab = generate_phantom(cfg.phantom_spec(s))
        img_rel, lab_rel = f"part{part}/img_{j:03d}.svol", f"part{part}/lab_{j:03d}.svol"
        write_volume(out / img_rel, vol)
        write_volume(out / lab_rel, lab)
        parts[part].append((img_rel, lab_rel))
    spec = cfg.phantom_spec(0)
    DatasetManifest(spec.task, spec.num_classes, parts["A"], parts["B"], seed).write(
        out / "manifest.json")
    log.info("wrote %d + %d phantom pairs to %s", n_train, n_test, out)
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(args, cfg: RunConfig) -> int:
    man = DatasetManifest.read(args.data)
    seed = cfg.seed if args.seed is None else args.seed
    if args.full:
        strategy = "full"
    else:
        if args.strategy is None:
            raise ConfigError("run: --strategy is required unless --full is given")
        strategy = resolve_strategy(args.strategy, man.num_classes)
    attention = not args.no_attention
    if strategy in (AL.ATTENTION_PDSC, AL.ATTENTION_PACC) and not attention:
        raise ConfigError("run: attention strategies cannot be combined with --no-attention")
    cfg.phantom.task = man.task
    cfg.seed = seed

    train, test = man.load("A"), man.load("B")
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "scores").mkdir(exist_ok=True)
    (out / "losses").mkdir(exist_ok=True)
    meta = {
        "task": man.task,
        "num_classes": man.num_classes,
        "strategy": strategy,
        "attention": attention,
        "full": bool(args.full),
        "seed": seed,
        "data": str(args.data),
        "config": json.loads(cfg.to_json()),
    }
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def on_round(rnd, model):
        save_checkpoint(out / "checkpoints" / f"round_{rnd:02d}.ckpt", model)

    hist = AL.run_al_loop(
        cfg.loop_config(seed), train, test,
        AL.RANDOM if args.full else strategy,
        cfg.arch(man.num_classes, attention), cfg.optim(), full=args.full, on_round=on_round,
    )
    (out / "history.csv").write_text(hist.history_csv())
    if not args.full:
        (out / "selections.csv").write_text(hist.selection_csv())
    for rnd, rows in enumerate(hist.scores):
        (out / "scores" / f"round_{rnd:02d}.csv").write_text(M.scores_to_csv(rows))
    for rnd, trace in enumerate(hist.losses):
        _write_csv(out / "losses" / f"round_{rnd:02d}.csv", ["iteration", "loss"],
                   [(i, _fmt(v)) for i, v in enumerate(trace)])
    last = hist.rounds[-1]
    log.info("%s: %d rounds, final ratio %.4f, Part B F1 %.4f", strategy, len(hist.rounds),
             last.ratio, last.part_b_f1)
    return 0


# ---------------------------------------------------------------------------
# correlate
# ---------------------------------------------------------------------------


def _score_file(run: Path, rnd: int | None) -> Path:
    files = sorted((run / "scores").glob("round_*.csv"))
    if not files:
        raise FileNotFoundError(f"{run}: no per-slice score tables")
    if rnd is None:
        return files[-1]
    path = run / "scores" / f"round_{rnd:02d}.csv"
    if not path.exists():
        raise FileNotFoundError(f"{run}: no scores for round {rnd}")
    return path


def correlation_reports(rows: list[dict], num_classes: int):
    """Per-volume (real, pseudo) pairs and rank statistics."""
    real_name, pseudo_name = ((M.R_DSC, M.P_DSC) if num_classes == 2 else (M.R_ACC, M.P_ACC))
    by_vol: dict[str, dict[str, dict[int, float]]] = defaultdict(lambda: defaultdict(dict))
    for r in rows:
        by_vol[r["volume_id"]][r["metric"]][int(r["slice"])] = float(r["value"])
    out = []
    for vid in sorted(by_vol, key=lambda v: (len(v), v)):
        real, pseudo = by_vol[vid].get(real_name), by_vol[vid].get(pseudo_name)
        if not real or not pseudo:
            raise ValueError(f"volume {vid}: scores lack {real_name} or {pseudo_name}")
        slices = sorted(set(real) & set(pseudo))
        if len(slices) < 3:
            raise ValueError(f"volume {vid}: {len(slices)} scored slices, need at least 3")
        r = np.array([real[i] for i in slices])
        p = np.array([pseudo[i] for i in slices])
        out.append((vid, real_name, pseudo_name, slices, r, p, M.rank_correlation(p, r)))
    return out


def cmd_correlate(args, cfg: RunConfig) -> int:
    run = Path(args.run)
    meta = json.loads((run / "run.json").read_text())
    path = _score_file(run, args.round)
    reports = correlation_reports(_read_csv(path), meta["num_classes"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for vid, real_name, pseudo_name, slices, r, p, rc in reports:
        _write_csv(out / f"volume_{vid}.csv",
                   ["slice", real_name, pseudo_name, "rank_real", "rank_pseudo"],
                   [(i, _fmt(a), _fmt(b), _fmt(ra), _fmt(rb))
                    for i, a, b, ra, rb in zip(slices, r, p, rc.rank_real, rc.rank_est)])
        summary.append((vid, real_name, pseudo_name, rc.n, _fmt(rc.spearman), _fmt(rc.slope),
                        _fmt(rc.pearson_r), "" if rc.defined else "undefined correlation"))
        if rc.defined:
            log.info("volume %s: rho %.3f over %d slices", vid, rc.spearman, rc.n)
        else:
            log.warning("volume %s: undefined correlation (constant scores)", vid)
    _write_csv(out / "summary.csv",
               ["volume_id", "real_metric", "pseudo_metric", "n", "spearman", "slope",
                "pearson_r", "note"], summary)
    (out / "source.txt").write_text(f"{path.parent.name}/{path.name}\n")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _mean_std(values):
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def load_runs(paths):
    runs = []
    for p in paths:
        p = Path(p)
        meta = json.loads((p / "run.json").read_text())
        runs.append((p, meta, _read_csv(p / "history.csv")))
    tasks = sorted({m["task"] for _, m, _ in runs})
    if len(tasks) > 1:
        raise ValueError(f"runs mix tasks {tasks}; report one task at a time")
    return runs


def _arm(meta) -> str:
    name = meta["strategy"]
    return name if meta["attention"] else f"{name}_no_attention"


def aggregate(runs):
    """``{(arm, ratio): [(run, partA, partB), ...]}``; full runs contribute their final round."""
    cells = defaultdict(list)
    for path, meta, hist in runs:
        rows = hist[-1:] if meta["full"] else hist
        for row in rows:
            key = (_arm(meta), round(float(row["ratio"]), 6))
            cells[key].append((path.name, float(row["partA_f1"]), float(row["partB_f1"])))
    return cells


def table2_rows(cells):
    rows = []
    for (arm, ratio), vals in sorted(cells.items()):
        a_mean, a_std = _mean_std([v[1] for v in vals])
        b_mean, b_std = _mean_std([v[2] for v in vals])
        rows.append((arm, _fmt(ratio), len(vals), _fmt(a_mean), _fmt(a_std), _fmt(b_mean),
                     _fmt(b_std), ";".join(sorted(v[0] for v in vals))))
    return rows


def table1_rows(runs):
    arms = defaultdict(list)
    for path, meta, hist in runs:
        if meta["full"]:
            last = hist[-1]
            arms["attention" if meta["attention"] else "no_attention"].append(
                (path.name, float(last["partA_f1"]), float(last["partB_f1"])))
    rows = []
    for arm in ("attention", "no_attention"):
        if arm in arms:
            vals = arms[arm]
            a_mean, a_std = _mean_std([v[1] for v in vals])
            b_mean, b_std = _mean_std([v[2] for v in vals])
            rows.append((arm, len(vals), _fmt(a_mean), _fmt(a_std), _fmt(b_mean), _fmt(b_std),
                         ";".join(sorted(v[0] for v in vals))))
    return rows


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def f1_chart_svg(cells, part: str, title: str) -> str:
    """Line chart of mean F1 vs annotation ratio; full-supervision arms are horizontal lines."""
    col = 1 if part == "A" else 2
    curves = defaultdict(list)
    refs = {}
    for (arm, ratio), vals in sorted(cells.items()):
        y = float(np.mean([v[col] for v in vals]))
        if arm.startswith("full"):
            refs[arm] = y
        else:
            curves[arm].append((ratio, y))
    ys = [y for pts in curves.values() for _, y in pts] + list(refs.values())
    lo = min(ys + [1.0]) if ys else 0.0
    lo = math.floor(lo * 20) / 20
    hi = 1.0
    if hi - lo < 0.05:
        lo = hi - 0.05
    W, H, L, R, T, B = 480, 320, 60, 150, 30, 40

    def px(r):
        return L + r * (W - L - R)

    def py(y):
        return T + (hi - y) / (hi - lo) * (H - T - B)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}">',
           f'<title>{escape(title)}</title>',
           f'<rect x="{L}" y="{T}" width="{W - L - R}" height="{H - T - B}" fill="none" '
           f'stroke="#000"/>']
    for k in range(6):
        r = k / 5
        out.append(f'<text x="{px(r):.1f}" y="{H - B + 16}" font-size="10" '
                   f'text-anchor="middle">{r:.1f}</text>')
        y = lo + (hi - lo) * k / 5
        out.append(f'<text x="{L - 6}" y="{py(y) + 3:.1f}" font-size="10" '
                   f'text-anchor="end">{y:.3f}</text>')
    out.append(f'<text x="{(L + W - R) / 2:.1f}" y="{H - 6}" font-size="11" '
               f'text-anchor="middle">annotation ratio</text>')
    out.append(f'<text x="14" y="{(T + H - B) / 2:.1f}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 14 {(T + H - B) / 2:.1f})">Part {part} F1</text>')
    legend_y = T + 10
    for i, arm in enumerate(sorted(refs)):
        color = "#555"
        y = py(refs[arm])
        out.append(f'<line class="reference" x1="{L}" y1="{y:.2f}" x2="{W - R}" y2="{y:.2f}" '
                   f'stroke="{color}" stroke-dasharray="4 3"><title>{escape(arm)}</title></line>')
        out.append(f'<text x="{W - R + 8}" y="{legend_y:.1f}" font-size="10" '
                   f'fill="{color}">{escape(arm)} (ref)</text>')
        legend_y += 14
    for i, arm in enumerate(sorted(curves)):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(r):.2f},{py(y):.2f}" for r, y in curves[arm])
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
                   f'<title>{escape(arm)}</title></polyline>')
        out.append(f'<text x="{W - R + 8}" y="{legend_y:.1f}" font-size="10" '
                   f'fill="{color}">{escape(arm)}</text>')
        legend_y += 14
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_report(args, cfg: RunConfig) -> int:
    runs = load_runs(args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = aggregate(runs)
    _write_csv(out / "table2.csv",
               ["strategy", "ratio", "n_seeds", "partA_f1_mean", "partA_f1_std",
                "partB_f1_mean", "partB_f1_std", "runs"], table2_rows(cells))
    t1 = table1_rows(runs)
    if t1:
        _write_csv(out / "table1.csv",
                   ["model", "n_seeds", "partA_f1_mean", "partA_f1_std", "partB_f1_mean",
                    "partB_f1_std", "runs"], t1)
    task = runs[0][1]["task"]
    for part in ("A", "B"):
        (out / f"f1_vs_ratio_part{part}.svg").write_text(
            f1_chart_svg(cells, part, f"{task}: Part {part} F1 vs annotation ratio"))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _size(text: str) -> list[int]:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("size is N or D,H,W")
    return parts


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--config", default=None, help="JSON run configuration")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="attnal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic phantom datasets")
    g.add_argument("--task", choices=["brain", "tissue"])
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--size", type=_size, help="N or D,H,W")
    g.add_argument("--noise", type=float)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", parents=[common], help="one AL or full-supervision run")
    r.add_argument("--data", required=True, help="dataset directory or manifest")
    r.add_argument("--strategy", choices=sorted(STRATEGY_ALIASES) + list(AL.STRATEGIES))
    r.add_argument("--full", action="store_true", help="annotate every slice from the start")
    r.add_argument("--no-attention", action="store_true",
                   help="replace every attention block by the identity")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("correlate", parents=[common], help="pseudo vs real metric ranks")
    c.add_argument("--run", required=True)
    c.add_argument("--round", type=int, default=None, help="default: last round")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_correlate)

    p = sub.add_parser("report", parents=[common], help="tables and charts over runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"attnal {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"attnal {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
