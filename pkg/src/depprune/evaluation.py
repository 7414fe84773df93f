"""Perplexity, rank statistics, and the toy-scale ablation study."""

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import DataError, UndefinedCorrelationError
from .importance import _positions, parameter_importance
from .model import forward

EVAL_BATCH = 16


def eval_windows(tokens, seq_len):
    """Consecutive ``seq_len + 1`` token windows; inputs never overlap, so each token is predicted once."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if seq_len < 1:
        raise DataError("seq_len must be >= 1")
    if tokens.size < seq_len + 1:
        raise DataError(f"corpus has {tokens.size} tokens; perplexity at seq_len {seq_len} needs {seq_len + 1}")
    n = (tokens.size - 1) // seq_len
    return np.stack([tokens[i * seq_len: i * seq_len + seq_len + 1] for i in range(n)])


def window_nll(model, windows):
    """Summed next-token NLL per window."""
    out = np.empty(len(windows))
    for s in range(0, len(windows), EVAL_BATCH):
        w = windows[s:s + EVAL_BATCH]
        logits = forward(model, w[:, :-1]).data
        m = logits.max(axis=1, keepdims=True)
        lse = (np.log(np.exp(logits - m).sum(axis=1, keepdims=True)) + m).ravel()
        tgt = w[:, 1:].ravel()
        nll = lse - logits[np.arange(tgt.size), tgt]
        out[s:s + len(w)] = nll.reshape(len(w), -1).sum(axis=1)
    return out


def mean_nll(model, tokens, seq_len=128):
    windows = eval_windows(tokens, seq_len)
    per = window_nll(model, windows)
    return float(math.fsum(per) / (windows.shape[0] * seq_len))


def perplexity(model, tokens, seq_len=128):
    return float(math.exp(mean_nll(model, tokens, seq_len)))


def _check_vectors(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError("rank statistics need two equal-length vectors")
    if a.size < 3:
        raise DataError("rank statistics need at least 3 items")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    return a, b


def rank_agreement(estimated, oracle):
    """Spearman rank correlation with average ranks for ties."""
    a, b = _check_vectors(estimated, oracle)
    return float(sps.spearmanr(a, b)[0])


def kendall_tau(x, y):
    a, b = _check_vectors(x, y)
    return float(sps.kendalltau(a, b)[0])


@dataclass
class EvalReport:
    tag: str
    ppl: float
    tokens: int
    digest: str = ""
    stats: dict = field(default_factory=dict)
    timestamp: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_record(self):
        return asdict(self)


def evaluate(model, tokens, seq_len=128, tag="model", digest="", stats=None, timestamp=None, **extra):
    windows = eval_windows(tokens, seq_len)
    nll = math.fsum(window_nll(model, windows)) / (windows.shape[0] * seq_len)
    ts = time.time() if timestamp is None else timestamp
    return EvalReport(tag, float(math.exp(nll)), int(windows.shape[0] * seq_len), digest,
                      stats.to_record() if hasattr(stats, "to_record") else (stats or {}), ts, dict(extra))


# ---------------------------------------------------------------- dependency-free ablation


def dependency_free_mask(model, plan, stats):
    """Zero-mask the same per-matrix budget as ``plan`` without group coupling.

    For every ``(tensor, axis)`` touched by the plan, the same number of
    slices along that axis is zeroed, picked independently by that matrix's own
    order-1 scores.  Shapes are unchanged.  Returns a masked copy.
    """
    budget = {}
    for g in plan.selected_groups():
        for s in g.members:
            budget[(s.tensor, s.axis)] = budget.get((s.tensor, s.axis), 0) + len(s.indices)
    out = model.copy()
    for (name, axis), k in sorted(budget.items()):
        W = model.params[name].data
        score = parameter_importance(W, stats.g_mean[name], stats.s2_mean[name], "1")
        if W.ndim == 2:
            score = score.sum(axis=1 - axis)
        order = np.lexsort((np.arange(score.size), score))[:k]
        idx = [slice(None)] * W.ndim
        idx[axis] = np.sort(order)
        out.params[name].data[tuple(idx)] = 0.0
    return out


def zero_groups(model, groups):
    """Zero every member slice of ``groups`` on a copy (masking instead of excision)."""
    out = model.copy()
    for g in groups:
        for s in g.members:
            arr = out.params[s.tensor].data
            idx = [slice(None)] * arr.ndim
            idx[s.axis] = _positions(out, s)
            arr[tuple(idx)] = 0.0
    return out



# ---------------------------------------------------------------- ablation study


@dataclass
class AblationSettings:
    ratios: tuple = (0.2, 0.5)
    sweep: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    methods: tuple = ("L2", "Random", "Weight", "Param1", "Param2", "Param12")
    unit: str = "Block"
    fisher: str = "per_sample"
    protected: object = None  # None -> automatic policy
    calib_n: int = 10
    calib_seq_len: int = 128
    eval_seq_len: int = 128
    seed: int = 0
    random_seed: int = 0
    recover: bool = True
    recover_kw: dict = field(default_factory=dict)


def ablation_suite(base, tokens, settings=None, digest="", log=None):
    """Toy-scale ablations on a trained ``base`` model.

    ``tokens`` maps ``calib``, ``eval`` and (for recovery) ``recover`` /
    ``recover_val`` to token arrays.  Runs (a) every scoring method at each
    ratio in ``settings.ratios``, (b) the dependency-free masking variant at
    the first ratio, (c) every aggregation at the first ratio, (d) the Param1
    ratio sweep.  Each variant is evaluated without recovery and, when
    ``settings.recover`` is set, after adapter recovery.  Returns EvalReports.
    """
    from .depgraph import build_graph, discover_groups
    from .importance import (AGGREGATIONS, accumulate_gradients, auto_protected_layers, make_calibration,
                             rank_and_select, score_groups)
    from .pruner import apply_plan, count_stats
    from .recovery import attach_lora, merge_lora, train_lora

    st = settings or AblationSettings()
    ev = tokens["eval"]
    calib = make_calibration(tokens["calib"], st.calib_n, st.calib_seq_len, st.seed)
    stats = accumulate_gradients(base, calib)
    groups = discover_groups(build_graph(base.config), st.unit)
    reports = []
    plans = {}

    def emit(model, **info):
        r = evaluate(model, ev, st.eval_seq_len, tag=info.get("variant", ""), digest=digest, timestamp=0.0, **info)
        reports.append(r)
        if log:
            log(r)
        return r

    def recovered(model, info):
        if not st.recover:
            return
        kw = dict(st.recover_kw)
        adapted = attach_lora(model, kw.pop("rank", 4), kw.pop("alpha", 8.0), seed=kw.pop("lora_seed", 0))
        kw["seed"] = kw.pop("batch_seed", 0)
        train_lora(adapted, tokens["recover"], eval_tokens=tokens.get("recover_val"), **kw)
        emit(merge_lora(adapted), **dict(info, recovered=True))

    def run(method, aggregation, ratio, variant):
        key = (method, aggregation, ratio)
        if key not in plans:
            scores = score_groups(base, groups, method, aggregation, stats, st.fisher, st.random_seed)
            prot = st.protected if st.protected is not None else auto_protected_layers(groups, base, st.unit, ratio)
            plans[key] = rank_and_select(groups, scores, ratio, prot, base, st.unit)
        plan = plans[key]
        pruned = apply_plan(base, plan)
        info = dict(variant=variant, method=method, aggregation=aggregation, ratio=ratio,
                    achieved_ratio=plan.achieved_ratio, protected=list(plan.protected_layers))
        emit(pruned, stats=count_stats(pruned, reference=base).to_record(), recovered=False, **info)
        recovered(pruned, info)
        return plan

    emit(base, variant="base", method="none", ratio=0.0, recovered=False)
    for ratio in st.ratios:
        for method in st.methods:
            run(method, "Sum", ratio, "method")
    first = st.ratios[0]
    plan = run("Param1", "Sum", first, "dependency")
    masked = dependency_free_mask(base, plan, stats)
    info = dict(variant="dependency_free", method="Param1", aggregation="none", ratio=first,
                achieved_ratio=plan.achieved_ratio)
    emit(masked, recovered=False, **info)
    recovered(masked, info)
    for agg in AGGREGATIONS:
        run("Param1", agg, first, "aggregation")
    for ratio in st.sweep:
        run("Param1", "Sum", ratio, "sweep")
    return reports
