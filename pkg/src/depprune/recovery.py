"""Low-rank adapters: attach to linear projections, train with the base frozen, merge back."""

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .model import LINEAR_TENSORS, layer_name, next_token_loss, sample_windows, sgd_step
from .rng import Stream


class LoraAdapter:
    """``delta W = (alpha / rank) * P @ Q`` with ``P`` [d_out x r] and ``Q`` [r x d_in]."""

    def __init__(self, target, P, Q, rank, alpha):
        self.target = target
        self.P = P if isinstance(P, T.Tensor) else T.Tensor(P, requires_grad=True, name=f"{target}.lora_P")
        self.Q = Q if isinstance(Q, T.Tensor) else T.Tensor(Q, requires_grad=True, name=f"{target}.lora_Q")
        self.rank = int(rank)
        self.alpha = float(alpha)

    @property
    def scale(self):
        return self.alpha / self.rank

    def delta(self):
        return self.scale * (self.P.data @ self.Q.data)

    def copy(self):
        return LoraAdapter(self.target, T.Tensor(self.P.data.copy(), self.P.requires_grad, self.P.name),
                           T.Tensor(self.Q.data.copy(), self.Q.requires_grad, self.Q.name), self.rank, self.alpha)

    def tensors(self):
        return [self.P, self.Q]


def default_targets(model):
    names = [layer_name(l, w) for l in range(model.config.n_layers) for w in LINEAR_TENSORS]
    return names + ["lm_head"]


def attach_lora(model, rank=4, alpha=8.0, targets=None, seed=0):
    """Return a copy of ``model`` with adapters on ``targets`` and every base weight frozen.

    ``P`` is drawn from ``N(0, 1/rank)`` per target, ``Q`` starts at zero, so the
    adapted model computes exactly what the base model does.  A target thinner
    than ``rank`` (a layer pruned down to a few channels) gets rank
    ``min(d_out, d_in)``.
    """
    if rank < 1:
        raise ConfigError(f"adapter rank must be >= 1, got {rank}")
    if model.adapters:
        raise ContractError("model already has adapters attached")
    allowed = set(default_targets(model))
    targets = default_targets(model) if targets is None else list(targets)
    for name in targets:
        if name not in allowed:
            raise ConfigError(f"{name!r} is not a linear projection")
    out = model.copy()
    out.set_requires_grad(False)
    root = Stream(seed, "lora")
    for name in targets:
        d_out, d_in = out.params[name].shape
        r = min(rank, d_out, d_in)
        P = root.child(name).normal((d_out, r), std=1.0 / np.sqrt(r))
        out.adapters[name] = LoraAdapter(name, P, np.zeros((r, d_in)), r, alpha)
    return out


def adapter_tensors(model):
    return [t for a in model.adapters.values() for t in a.tensors()]


def _snapshot(model):
    return {k: (a.P.data.copy(), a.Q.data.copy()) for k, a in model.adapters.items()}


def _restore(model, snap):
    for k, (P, Q) in snap.items():
        model.adapters[k].P.data[...] = P
        model.adapters[k].Q.data[...] = Q


def train_lora(model, tokens, lr=0.01, steps=500, batch=4, seq_len=128, seed=0, eval_tokens=None,
               eval_every=25, early_stop=True, eval_seq_len=128, log=None):
    """SGD on the adapters of ``model`` (in place).  Base weights are never touched.

    Returns a trace: one record per step with ``train_loss``, plus
    ``eval_loss`` every ``eval_every`` steps when ``eval_tokens`` is given.
    With ``early_stop`` the adapters end at the best evaluated checkpoint.
    """
    from .evaluation import mean_nll

    if not model.adapters:
        raise ContractError("train_lora needs attached adapters")
    if any(p.requires_grad for p in model.params.values()):
        raise ContractError("base weights must be frozen during adapter training")
    tokens = np.asarray(tokens, dtype=np.int64)
    trainable = adapter_tensors(model)
    stream = Stream(seed, "recover-batches")
    trace = []
    best = None
    if eval_tokens is not None and eval_every:
        loss0 = mean_nll(model, eval_tokens, eval_seq_len)
        trace.append({"step": 0, "eval_loss": loss0})
        best = (loss0, 0, _snapshot(model))
    for step in range(1, steps + 1):
        ids = sample_windows(tokens, batch, seq_len, stream)
        with T.Tape():
            loss = next_token_loss(model, ids)
            T.backward(loss)
        sgd_step(trainable, lr)
        rec = {"step": step, "train_loss": loss.item()}
        if eval_tokens is not None and eval_every and (step % eval_every == 0 or step == steps):
            ev = mean_nll(model, eval_tokens, eval_seq_len)
            rec["eval_loss"] = ev
            if ev < best[0]:
                best = (ev, step, _snapshot(model))
        trace.append(rec)
        if log:
            log(rec)
    if early_stop and best is not None:
        _restore(model, best[2])
    return trace


def best_step(trace):
    evals = [(r["eval_loss"], r["step"]) for r in trace if "eval_loss" in r]
    return min(evals)[1] if evals else None


def merge_lora(model):
    """Fold every adapter into its base weight; returns a plain copy with no adapters."""
    out = model.copy()
    for name, a in out.adapters.items():
        out.params[name].data = out.params[name].data + a.delta()
    out.adapters = {}
    return out
