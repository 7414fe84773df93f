"""Gradient-based group importance, baselines, and prune-set selection."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .depgraph import Kind, group_param_delta
from .errors import ContractError, DataError, SelectionError
from .model import forward, next_token_loss, sample_windows
from .rng import Stream

METHODS = ("Weight", "Param1", "Param2", "Param12", "L2", "Random")
AGGREGATIONS = ("Sum", "Prod", "Max", "LastOnly")
FISHER_MODES = ("per_sample", "mean_grad")
_ORDERS = {"1": "Param1", "2": "Param2", "1+2": "Param12", 1: "Param1", 2: "Param2"}


@dataclass
class CalibrationSet:
    sequences: np.ndarray  # [N x seq_len] token ids
    seed: int = 0

    def __post_init__(self):
        self.sequences = np.atleast_2d(np.asarray(self.sequences, dtype=np.int64))

    @property
    def n(self):
        return self.sequences.shape[0] if self.sequences.size else 0

    @property
    def seq_len(self):
        return self.sequences.shape[1]


def make_calibration(tokens, n=10, seq_len=128, seed=0):
    """``n`` windows of ``seq_len`` tokens drawn from ``tokens`` with a seeded stream."""
    return CalibrationSet(sample_windows(tokens, n, seq_len, Stream(seed, "calibration")), seed)


@dataclass
class GradStats:
    """Per-tensor mean gradient and mean per-sample squared salience ``(g * W)**2``."""

    g_mean: dict
    s2_mean: dict
    n: int


def accumulate_gradients(model, calib):
    if calib.n == 0:
        raise DataError("empty calibration set")
    params = model.params
    saved = {k: p.requires_grad for k, p in params.items()}
    g_sum = {k: np.zeros(p.shape) for k, p in params.items()}
    s2_sum = {k: np.zeros(p.shape) for k, p in params.items()}
    try:
        for p in params.values():
            p.requires_grad = True
        for seq in calib.sequences:
            model.zero_grad()
            with T.Tape():
                loss = next_token_loss(model, seq)
                T.backward(loss)
            for k, p in params.items():
                g = p.grad if p.grad is not None else np.zeros(p.shape)
                g_sum[k] += g
                s2_sum[k] += (g * p.data) ** 2
    finally:
        model.zero_grad()
        for k, p in params.items():
            p.requires_grad = saved[k]
    n = calib.n
    return GradStats({k: v / n for k, v in g_sum.items()}, {k: v / n for k, v in s2_sum.items()}, n)


def weight_importance(W, g_mean):
    """``|sum_k g_k W_k|`` for one structure (Hessian term dropped)."""
    return float(abs(np.sum(np.asarray(g_mean) * np.asarray(W))))


def parameter_importance(W, g_mean, s2_mean, order="1", fisher="per_sample"):
    """Elementwise importance of every parameter of ``W``.

    first-order ``s1 = g * W``; second-order ``s2 = 0.5 * E[(g_n * W)**2]``
    (``fisher='per_sample'``) or ``0.5 * (g * W)**2`` (``'mean_grad'``).
    order 1 -> ``|s1|``, order 2 -> ``s2``, order 1+2 -> ``|s1 + s2|``.
    """
    method = _ORDERS.get(order, order)
    W = np.asarray(W)
    s1 = np.asarray(g_mean) * W
    if method == "Param1":
        return np.abs(s1)
    if fisher == "per_sample":
        s2 = 0.5 * np.asarray(s2_mean)
    elif fisher == "mean_grad":
        s2 = 0.5 * s1 ** 2
    else:
        raise ContractError(f"unknown fisher mode {fisher!r}")
    if method == "Param2":
        return s2
    if method == "Param12":
        return np.abs(s1 + s2)
    raise ContractError(f"invalid order flag {order!r}")


def _take(arr, model, s):
    pos = _positions(model, s)
    return np.take(arr, pos, axis=s.axis)


def _positions(model, s):
    space = model.index_space(s.tensor, s.axis)
    lookup = {int(v): i for i, v in enumerate(space)}
    try:
        return np.array([lookup[i] for i in s.indices], dtype=np.int64)
    except KeyError as exc:
        from .errors import PlanStaleError
        raise PlanStaleError(f"{s.tensor} axis {s.axis}: index {exc.args[0]} is not live") from None


def member_scores(model, group, stats, method, fisher="per_sample"):
    """Importance of each member slice of ``group`` (dict ``Slice -> float``)."""
    out = {}
    for s in group.members:
        W = _take(model.params[s.tensor].data, model, s)
        g = _take(stats.g_mean[s.tensor], model, s)
        if method == "Weight":
            out[s] = weight_importance(W, g)
        else:
            s2 = _take(stats.s2_mean[s.tensor], model, s)
            out[s] = float(np.sum(parameter_importance(W, g, s2, method, fisher)))
    return out


def group_importance(group, scores, aggregation="Sum"):
    """Combine member importances: Sum, Prod, Max, or LastOnly (last-executing member)."""
    if not group.members:
        raise ContractError("empty group")
    vals = [abs(scores[s]) for s in group.members]
    if aggregation == "Sum":
        return float(np.sum(vals))
    if aggregation == "Prod":
        return float(np.prod(vals))
    if aggregation == "Max":
        return float(np.max(vals))
    if aggregation == "LastOnly":
        return float(abs(scores[group.last_member]))
    raise ContractError(f"unknown aggregation {aggregation!r}")


def baseline_score(group, model, method, seed=0):
    if method == "L2":
        return float(np.sqrt(sum(np.sum(_take(model.params[s.tensor].data, model, s) ** 2) for s in group.members)))
    if method == "Random":
        return float(Stream(seed, "random-scorer").child(group.id).uniform(1)[0])
    raise ContractError(f"{method!r} is not a baseline scorer")


@dataclass
class GroupScore:
    group_id: str
    method: str
    aggregation: str
    value: float

    def to_record(self):
        return {"group_id": self.group_id, "method": self.method, "aggregation": self.aggregation, "score": self.value}


def score_groups(model, groups, method="Param1", aggregation="Sum", stats=None, fisher="per_sample", seed=0):
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")
    if aggregation not in AGGREGATIONS:
        raise ContractError(f"unknown aggregation {aggregation!r}")
    out = []
    for g in groups:
        if method in ("L2", "Random"):
            v = baseline_score(g, model, method, seed)
        else:
            if stats is None:
                raise ContractError(f"method {method} needs gradient statistics")
            v = group_importance(g, member_scores(model, g, stats, method, fisher), aggregation)
        out.append(GroupScore(g.id, method, aggregation, v))
    return out


# ---------------------------------------------------------------- selection


@dataclass
class PrunePlan:
    unit: str
    target_ratio: float
    protected_layers: list
    ranking: list  # [(group_id, score)] ascending
    selected: list  # group ids, in selection order
    predicted_delta: int
    total_params: int
    groups: dict = field(default_factory=dict)  # id -> DependencyGroup

    @property
    def achieved_ratio(self):
        return self.predicted_delta / self.total_params if self.total_params else 0.0

    def selected_groups(self):
        return [self.groups[i] for i in self.selected]

    def to_record(self):
        return {"unit": self.unit, "target_ratio": self.target_ratio, "protected_layers": list(self.protected_layers),
                "ranking": [[gid, s] for gid, s in self.ranking], "selected": list(self.selected),
                "predicted_delta": self.predicted_delta, "total_params": self.total_params,
                "achieved_ratio": self.achieved_ratio,
                "groups": [self.groups[i].to_record() for i in self.selected]}

    @classmethod
    def from_record(cls, rec):
        from .depgraph import DependencyGroup
        groups = {r["id"]: DependencyGroup.from_record(r) for r in rec["groups"]}
        return cls(rec["unit"], rec["target_ratio"], rec["protected_layers"], [tuple(x) for x in rec["ranking"]],
                   rec["selected"], rec["predicted_delta"], rec["total_params"], groups)


class _Guard:
    """Tracks what would survive so selection never empties a layer."""

    def __init__(self, model):
        self.heads = [model.n_heads(l) for l in range(model.config.n_layers)]
        self.mlp = [model.d_ff(l) for l in range(model.config.n_layers)]
        self.channels = model.d_model
        self.min_channels = max(max(self.heads), 1)

    def admit(self, g):
        if g.kind == Kind.ATTENTION_HEAD:
            if self.heads[g.layer] <= 1:
                return False
            self.heads[g.layer] -= 1
        elif g.kind == Kind.MLP_CHANNEL:
            if self.mlp[g.layer] <= 1:
                return False
            self.mlp[g.layer] -= 1
        else:
            if self.channels - 1 < self.min_channels:
                return False
            self.channels -= 1
        return True


def _candidates(groups, protected):
    protected = set(protected or ())
    return [g for g in groups if g.layer is None or g.layer not in protected]


def achievable_ratio(groups, model, protected_layers=()):
    total = model.param_count()
    guard = _Guard(model)
    delta = sum(group_param_delta(g, model) for g in _candidates(groups, protected_layers) if guard.admit(g))
    return delta / total


def auto_protected_layers(groups, model, unit, ratio):
    """Protect first and last layer in Block mode, releasing protection only when the ratio needs it.

    Tries ``{first, last}``, then ``{first}``, then nothing.  Channel groups span
    every layer, so Channel mode never protects.
    """
    if str(unit).lower() != "block":
        return []
    L = model.config.n_layers
    for prot in (sorted({0, L - 1}), [0], []):
        if achievable_ratio(groups, model, prot) >= ratio:
            return prot
    return []


def rank_and_select(groups, scores, ratio, protected_layers, model, unit="Block"):
    """Greedy lowest-score-first selection until the removed fraction reaches ``ratio``."""
    if not 0 <= ratio < 1:
        raise SelectionError(f"ratio must lie in [0, 1), got {ratio}")
    by_id = {g.id: g for g in groups}
    value = {s.group_id: s.value for s in scores} if scores and hasattr(scores[0], "group_id") else dict(scores)
    for v in value.values():
        if not np.isfinite(v) or v < 0:
            raise ContractError(f"group score must be finite and non-negative, got {v}")
    cands = _candidates(groups, protected_layers)
    cands.sort(key=lambda g: (value[g.id],) + g.sort_key())
    ranking = [(g.id, value[g.id]) for g in cands]
    total = model.param_count()
    selected, delta = [], 0
    if ratio > 0:
        guard = _Guard(model)
        for g in cands:
            if delta / total >= ratio:
                break
            if not guard.admit(g):
                continue
            selected.append(g.id)
            delta += group_param_delta(g, model)
        if delta / total < ratio:
            best = achievable_ratio(groups, model, protected_layers)
            raise SelectionError(f"ratio {ratio} unreachable with protected layers {list(protected_layers)}; "
                                 f"achievable maximum is {best:.6f}", achievable=best)
    return PrunePlan(unit, float(ratio), list(protected_layers), ranking, selected, int(delta), int(total),
                     {gid: by_id[gid] for gid in selected})


# ---------------------------------------------------------------- oracle


def calibration_loss(model, calib):
    """Mean next-token loss over the calibration set, without recording a tape."""
    ids = calib.sequences
    logits = forward(model, ids[:, :-1])
    return T.cross_entropy(logits, ids[:, 1:].ravel()).item()


def scale_group(model, group, factor):
    """Multiply every member slice of ``group`` by ``factor`` in place; returns a restore callback."""
    saved = []
    for s in group.members:
        arr = model.params[s.tensor].data
        pos = _positions(model, s)
        idx = [slice(None)] * arr.ndim
        idx[s.axis] = pos
        idx = tuple(idx)
        saved.append((arr, idx, arr[idx].copy()))
        arr[idx] = arr[idx] * factor

    def restore():
        for arr, idx, orig in saved:
            arr[idx] = orig

    return restore


def oracle_delta_loss(model, group, calib, t=1.0, signed=False, base_loss=None):
    """Exact loss change from shrinking ``group`` by a fraction ``t`` (``t=1`` zeroes it).

    The model is restored bit-exactly.  Returns ``|L_after - L_before|`` or the
    signed difference.
    """
    before = calibration_loss(model, calib) if base_loss is None else base_loss
    restore = scale_group(model, group, 1.0 - t)
    try:
        after = calibration_loss(model, calib)
    finally:
        restore()
    d = after - before
    return d if signed else abs(d)


def first_order_change(model, group, stats):
    """Signed first-order loss change for zeroing ``group``: ``-sum_k g_k W_k`` over every member."""
    tot = 0.0
    for s in group.members:
        tot += float(np.sum(_take(stats.g_mean[s.tensor], model, s) * _take(model.params[s.tensor].data, model, s)))
    return -tot
