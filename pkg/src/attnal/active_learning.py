"""Query strategies, slice selection, simulated annotation and the AL loop.

One loop round: reveal ground truth on annotated slices, fine-tune, score
every slice of every training volume, add the ``ceil(budget_step * D)``
lowest-scoring unannotated slices per volume, and stop once the mean
pseudo-metric moves by less than ``sigma`` between consecutive rounds.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics as M
from .nn.model import ArchConfig, ForwardOutput, Model, forward, init_params
from .nn.training import OptimizerState, train_round
from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)

ATTENTION_PDSC = "attention_pdsc"
ATTENTION_PACC = "attention_paccuracy"
RANDOM = "random"
EQUAL_INTERVAL = "equal_interval"
UNCERTAINTY = "uncertainty_entropy"
STRATEGIES = (ATTENTION_PDSC, ATTENTION_PACC, RANDOM, EQUAL_INTERVAL, UNCERTAINTY)

# how the two predictions compared by the pseudo metrics are derived
PAIR_ATTENTION_MAP = "attention_map"  # argmax Zr vs argmax A
PAIR_RECALIBRATION = "recalibration"  # argmax Z vs argmax Zr
PSEUDO_PAIRS = (PAIR_ATTENTION_MAP, PAIR_RECALIBRATION)


def attention_strategy(num_classes: int) -> str:
    """P-DSC for binary tasks, P-accuracy for multi-class ones."""
    return ATTENTION_PDSC if num_classes == 2 else ATTENTION_PACC


def pseudo_metric_name(num_classes: int) -> str:
    return M.P_DSC if num_classes == 2 else M.P_ACC


# ---------------------------------------------------------------------------
# Masks and simulated annotation
# ---------------------------------------------------------------------------


def seed_equal_interval(depth: int, spacing: int) -> np.ndarray:
    """Annotate slices ``0, K, 2K, ...``."""
    if not 1 <= spacing <= depth:
        raise ValueError(f"spacing {spacing} outside 1..{depth}")
    mask = np.zeros(depth, dtype=bool)
    mask[::spacing] = True
    return mask


def annotation_ratio(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / len(mask)


def reveal_annotation(gt: LabelVolume, mask: np.ndarray) -> LabelVolume:
    """Ground truth on annotated slices, UNLABELED everywhere else."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (gt.dims[0],):
        raise ValueError(f"mask length {mask.shape} does not match {gt.dims[0]} slices")
    out = np.full(gt.dims, gt.unlabeled, dtype=np.uint8)
    out[mask] = gt.data[mask]
    return LabelVolume(out, gt.num_classes)


# ---------------------------------------------------------------------------
# Scoring and selection
# ---------------------------------------------------------------------------


def prediction_pair(fo: ForwardOutput, pair: str = PAIR_ATTENTION_MAP):
    """(SR1, SR2) label grids compared by the pseudo metrics."""
    if pair == PAIR_ATTENTION_MAP:
        return fo.sr1(), fo.sr2()
    if pair == PAIR_RECALIBRATION:
        if fo.A is None:
            raise ValueError("model has no attention")
        return fo.sr_z(), fo.sr1()
    raise ValueError(f"unknown pseudo pair {pair!r}")


def slice_entropy(P: np.ndarray) -> np.ndarray:
    """Sum over each axial slice of the voxel entropy (nats) of the class posterior.

    Only the first C channels are used, renormalized; the UNLABELED channel
    is dropped.
    """
    p = P[:-1].astype(np.float64)
    p = p / p.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=0)
    return h.reshape(h.shape[0], -1).sum(axis=1)


def score_slices(strategy: str, fo: ForwardOutput | None, mask: np.ndarray,
                 rng: np.random.Generator | None = None,
                 pair: str = PAIR_ATTENTION_MAP) -> M.ScoreTable:
    """Per-slice scores where the lowest values are the most informative."""
    mask = np.asarray(mask, dtype=bool)
    depth = len(mask)
    if strategy in (ATTENTION_PDSC, ATTENTION_PACC):
        sr1, sr2 = prediction_pair(fo, pair)
        c = fo.num_classes
        if strategy == ATTENTION_PDSC:
            if c > 2:
                log.warning("P-DSC used on a %d-class task; P-accuracy is intended", c)
            return M.ScoreTable(M.P_DSC, M.slice_dsc(sr1, sr2, c))
        return M.ScoreTable(M.P_ACC, M.slice_accuracy(sr1, sr2, c))
    if strategy == UNCERTAINTY:
        return M.ScoreTable("query:" + UNCERTAINTY, -slice_entropy(fo.P))
    if strategy == RANDOM:
        if rng is None:
            raise ValueError("random strategy needs an rng")
        return M.ScoreTable("query:" + RANDOM, rng.random(depth))
    if strategy == EQUAL_INTERVAL:
        annotated = np.flatnonzero(mask)
        idx = np.arange(depth)
        if len(annotated) == 0:
            dist = np.full(depth, float(depth))
        else:
            dist = np.abs(idx[:, None] - annotated[None, :]).min(axis=1).astype(float)
        return M.ScoreTable("query:" + EQUAL_INTERVAL, -dist)
    raise ValueError(f"unknown strategy {strategy!r}")


def select_slices(table: M.ScoreTable, mask: np.ndarray, budget: int) -> np.ndarray:
    """The ``budget`` lowest-scoring unannotated slices, sorted ascending."""
    mask = np.asarray(mask, dtype=bool)
    if len(table) != len(mask):
        raise ValueError("score table and mask differ in length")
    if budget <= 0:
        return np.zeros(0, dtype=np.int64)
    order = table.ordering()
    free = order[~mask[order]]
    return np.sort(free[:budget])


def select_equal_interval(mask: np.ndarray, budget: int) -> np.ndarray:
    """Farthest-point picks, one at a time, re-measuring distances after each."""
    grown = np.asarray(mask, dtype=bool).copy()
    picked = []
    for _ in range(budget):
        sel = select_slices(score_slices(EQUAL_INTERVAL, None, grown), grown, 1)
        if len(sel) == 0:
            break
        grown[sel] = True
        picked.append(int(sel[0]))
    return np.array(sorted(picked), dtype=np.int64)


def stopping_check(prev_mean: float | None, cur_mean: float, sigma: float) -> bool:
    """Stop when the mean pseudo-metric changed by strictly less than ``sigma``."""
    if prev_mean is None or not math.isfinite(prev_mean) or not math.isfinite(cur_mean):
        return False
    return abs(cur_mean - prev_mean) < sigma


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


@dataclass
class LoopConfig:
    spacing: int = 16
    budget_step: float = 0.05
    sigma: float = 0.005
    max_rounds: int = 10
    iters: int = 150
    restart: bool = False  # re-initialize the model each round instead of fine-tuning
    seed: int = 0
    pseudo_pair: str = PAIR_ATTENTION_MAP

    def validate(self) -> None:
        if self.spacing < 1:
            raise ValueError("spacing must be >= 1")
        if not 0 < self.budget_step <= 1:
            raise ValueError("budget_step must be in (0, 1]")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.pseudo_pair not in PSEUDO_PAIRS:
            raise ValueError(f"pseudo_pair must be one of {PSEUDO_PAIRS}")

    def budget(self, depth: int) -> int:
        return math.ceil(self.budget_step * depth - 1e-9)


@dataclass
class RoundRecord:
    round: int
    ratio: float
    mean_pseudo: float
    delta: float | None
    part_a_f1: float
    part_b_f1: float
    stopped: bool
    loss_first: float
    loss_last: float
    selected: dict[int, list[int]] = field(default_factory=dict)


@dataclass
class LoopHistory:
    strategy: str
    metric: str = ""  # pseudo metric driving the stopping rule; empty without attention
    rounds: list[RoundRecord] = field(default_factory=list)
    losses: list[list[float]] = field(default_factory=list)
    scores: list[list[tuple]] = field(default_factory=list)  # per round: score rows
    masks: list[list[np.ndarray]] = field(default_factory=list)
    model: Model | None = None

    HEADER = ("round", "ratio", "metric", "mean_pseudo", "delta", "partA_f1", "partB_f1", "stopped")

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.rounds:
            w.writerow([
                r.round, repr(r.ratio), self.metric, repr(r.mean_pseudo),
                "" if r.delta is None else repr(r.delta),
                repr(r.part_a_f1), repr(r.part_b_f1), int(r.stopped),
            ])
        return buf.getvalue()

    def selection_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["volume_id", "round", "slice_index"])
        for r in self.rounds:
            for vid in sorted(r.selected):
                for i in r.selected[vid]:
                    w.writerow([vid, r.round, i])
        return buf.getvalue()


def _predictions(model: Model, volumes: Sequence[Volume]) -> list[ForwardOutput]:
    return [forward(model, v) for v in volumes]


def _mean_f1(outputs: Sequence[ForwardOutput], gts: Sequence[LabelVolume]) -> float:
    if not gts:
        return float("nan")
    return float(np.mean([M.volume_f1(fo.sr1(), gt.data, gt.num_classes)
                          for fo, gt in zip(outputs, gts)]))


def _slice_scores(vid: int, fo: ForwardOutput, gt: LabelVolume, pair: str):
    """R/P DSC and accuracy rows for one training volume."""
    c = gt.num_classes
    rows = []
    sr = fo.sr1()
    tables = [M.ScoreTable(M.R_DSC, M.slice_dsc(sr, gt.data, c)),
              M.ScoreTable(M.R_ACC, M.slice_accuracy(sr, gt.data, c))]
    if fo.A is not None:
        a, b = prediction_pair(fo, pair)
        tables += [M.ScoreTable(M.P_DSC, M.slice_dsc(a, b, c)),
                   M.ScoreTable(M.P_ACC, M.slice_accuracy(a, b, c))]
    tables.append(M.ScoreTable(M.ENTROPY, slice_entropy(fo.P)))
    for t in tables:
        rows.extend(M.score_rows(vid, t))
    return rows


def _pseudo_mean(outputs, num_classes: int, pair: str) -> float:
    if any(fo.A is None for fo in outputs):
        return float("nan")
    vals = []
    for fo in outputs:
        a, b = prediction_pair(fo, pair)
        f = M.slice_dsc if num_classes == 2 else M.slice_accuracy
        vals.append(f(a, b, num_classes))
    return float(np.concatenate(vals).mean())


def run_al_loop(config: LoopConfig, train: Sequence[tuple[Volume, LabelVolume]],
                test: Sequence[tuple[Volume, LabelVolume]], strategy: str,
                arch: ArchConfig, optim: OptimizerState, full: bool = False,
                on_round=None) -> LoopHistory:
    """Run the query/annotate/fine-tune cycle until the stopping rule fires.

    With ``full=True`` every slice is annotated from the start and all
    ``max_rounds`` rounds retrain without stopping, giving a full-supervision
    reference with the largest training budget an AL run can get.
    ``on_round(round, model)`` is called after each round's training.
    """
    config.validate()
    if not train:
        raise ValueError("empty training set")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy in (ATTENTION_PDSC, ATTENTION_PACC) and not arch.attention:
        raise ValueError("attention strategies need a model with attention")
    num_classes = train[0][1].num_classes
    depth = train[0][1].dims[0]
    budget = config.budget(depth)
    ss = np.random.SeedSequence(config.seed)
    init_seed, train_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))

    model = init_params(arch, init_seed)
    masks = [np.ones(depth, bool) if full else seed_equal_interval(depth, config.spacing)
             for _ in train]
    hist = LoopHistory(strategy="full" if full else strategy,
                       metric=pseudo_metric_name(num_classes) if arch.attention else "")
    prev = None
    for rnd in range(config.max_rounds):
        if config.restart and rnd > 0:
            model = init_params(arch, init_seed)
            optim = OptimizerState(optim.lr, optim.momentum, optim.weight_decay, optim.batch_size)
        targets = [reveal_annotation(gt, mk).data for (_, gt), mk in zip(train, masks)]
        losses = train_round(model, [v.data for v, _ in train], targets, config.iters,
                             optim, seed=train_seed + rnd)
        outs_a = _predictions(model, [v for v, _ in train])
        outs_b = _predictions(model, [v for v, _ in test])
        cur = _pseudo_mean(outs_a, num_classes, config.pseudo_pair)
        stop = not full and stopping_check(prev, cur, config.sigma)
        rec = RoundRecord(
            round=rnd,
            ratio=float(np.mean([annotation_ratio(m) for m in masks])),
            mean_pseudo=cur,
            delta=None if prev is None else abs(cur - prev),
            part_a_f1=_mean_f1(outs_a, [gt for _, gt in train]),
            part_b_f1=_mean_f1(outs_b, [gt for _, gt in test]),
            stopped=stop,
            loss_first=losses[0] if losses else float("nan"),
            loss_last=losses[-1] if losses else float("nan"),
        )
        hist.losses.append(losses)
        hist.masks.append([m.copy() for m in masks])
        hist.scores.append([row for vid, (fo, (_, gt)) in enumerate(zip(outs_a, train))
                            for row in _slice_scores(vid, fo, gt, config.pseudo_pair)])
        hist.rounds.append(rec)
        if on_round is not None:
            on_round(rnd, model)
        log.info("%s round %d ratio %.4f pseudo %.4f A %.4f B %.4f", hist.strategy, rnd,
                 rec.ratio, cur, rec.part_a_f1, rec.part_b_f1)
        prev = cur
        if stop or rnd == config.max_rounds - 1:
            break
        if not full:
            any_new = False
            for vid, (fo, mk) in enumerate(zip(outs_a, masks)):
                sel = _select(strategy, fo, mk, budget, config, vid, rnd)
                if len(sel):
                    any_new = True
                    mk[sel] = True
                    rec.selected[vid] = [int(i) for i in sel]
            if not any_new:
                break
    hist.model = model
    return hist


def _select(strategy, fo, mask, budget, config: LoopConfig, vid: int, rnd: int):
    if strategy == EQUAL_INTERVAL:
        return select_equal_interval(mask, budget)
    rng = None
    if strategy == RANDOM:
        rng = np.random.default_rng([config.seed, vid, rnd])
    table = score_slices(strategy, fo, mask, rng=rng, pair=config.pseudo_pair)
    return select_slices(table, mask, budget)
