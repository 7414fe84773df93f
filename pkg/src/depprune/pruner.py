"""Physical excision of dependency groups and model statistics."""

from dataclasses import asdict, dataclass

import numpy as np

from .depgraph import Kind
from .errors import ContractError, PlanStaleError
from .model import forward, layer_name

BYTES_PER_SCALAR = 8


def _removals(model, groups):
    """Map ``(tensor, axis) -> sorted positions`` to delete; rejects overlaps and stale indices."""
    claimed = {}
    for g in groups:
        for s in g.members:
            if s.tensor not in model.params:
                raise PlanStaleError(f"plan names unknown tensor {s.tensor}")
            seen = claimed.setdefault((s.tensor, s.axis), {})
            for i in s.indices:
                if i in seen:
                    raise ContractError(f"groups {seen[i]} and {g.id} overlap on {s.tensor} axis {s.axis} index {i}")
                seen[i] = g.id
    out = {}
    for (name, axis), idx in claimed.items():
        space = model.index_space(name, axis)
        lookup = {int(v): p for p, v in enumerate(space)}
        missing = [i for i in idx if i not in lookup]
        if missing:
            raise PlanStaleError(f"{name} axis {axis}: indices {missing[:5]} are not live")
        out[(name, axis)] = np.array(sorted(lookup[i] for i in idx), dtype=np.int64)
    return out


def apply_plan(model, plan):
    """Return a copy of ``model`` with every selected group of ``plan`` excised."""
    if model.adapters:
        raise ContractError("merge or drop adapters before pruning")
    groups = plan.selected_groups() if hasattr(plan, "selected_groups") else list(plan)
    if hasattr(plan, "total_params") and groups and plan.total_params != model.param_count():
        raise PlanStaleError(f"plan was made for {plan.total_params} parameters, model has {model.param_count()}")
    out = model.copy()
    if not groups:
        return out
    removals = _removals(model, groups)

    heads = [set(h.tolist()) for h in model.live_heads]
    mlp = [set(m.tolist()) for m in model.live_mlp]
    channels = set(model.live_channels.tolist())
    for g in groups:
        if g.kind == Kind.ATTENTION_HEAD:
            heads[g.layer].discard(g.index)
        elif g.kind == Kind.MLP_CHANNEL:
            mlp[g.layer].discard(g.index)
        else:
            channels.discard(g.index)
    for l in range(model.config.n_layers):
        if not heads[l]:
            raise ContractError(f"plan removes every attention head of layer {l}")
        if not mlp[l]:
            raise ContractError(f"plan removes every MLP channel of layer {l}")
    if len(channels) < max(len(h) for h in heads):
        raise ContractError(f"plan leaves d_model={len(channels)} below the head count")

    for (name, axis), pos in removals.items():
        p = out.params[name]
        p.data = np.ascontiguousarray(np.delete(p.data, pos, axis=axis))
        p.grad = None
    out.live_heads = [np.array(sorted(h), dtype=np.int64) for h in heads]
    out.live_mlp = [np.array(sorted(m), dtype=np.int64) for m in mlp]
    out.live_channels = np.array(sorted(channels), dtype=np.int64)
    return out


def validate_consistency(model, probe_len=8):
    """List of shape violations (empty when consistent); a clean model must also run a probe forward."""
    cfg = model.config
    p = model.params
    bad = []
    d = p["tok_emb"].shape[1] if p["tok_emb"].data.ndim == 2 else -1
    dh = cfg.d_head

    def expect(name, shape):
        if name not in p:
            bad.append(f"{name}: missing")
        elif p[name].shape != shape:
            bad.append(f"{name}: shape {p[name].shape}, expected {shape}")

    expect("tok_emb", (cfg.vocab_size, d))
    expect("pos_emb", (cfg.max_seq, d))
    expect("final_norm", (d,))
    expect("lm_head", (cfg.vocab_size, d))
    if len(model.live_channels) != d:
        bad.append(f"live_channels: {len(model.live_channels)} entries for d_model {d}")
    for l in range(cfg.n_layers):
        wq = p.get(layer_name(l, "wq"))
        a = wq.shape[0] if wq is not None else -1
        wg = p.get(layer_name(l, "w_gate"))
        f = wg.shape[0] if wg is not None else -1
        if a % dh or a <= 0:
            bad.append(f"{layer_name(l, 'wq')}: {a} rows is not a positive multiple of d_head {dh}")
        for w in ("attn_norm", "mlp_norm"):
            expect(layer_name(l, w), (d,))
        for w in ("wq", "wk", "wv"):
            expect(layer_name(l, w), (a, d))
        expect(layer_name(l, "wo"), (d, a))
        for w in ("w_gate", "w_up"):
            expect(layer_name(l, w), (f, d))
        expect(layer_name(l, "w_down"), (d, f))
        if f <= 0:
            bad.append(f"{layer_name(l, 'w_gate')}: no MLP channels")
        if len(model.live_heads[l]) * dh != a:
            bad.append(f"layer {l}: {len(model.live_heads[l])} live heads for {a} attention channels")
        if len(model.live_mlp[l]) != f:
            bad.append(f"layer {l}: {len(model.live_mlp[l])} live MLP channels for d_ff {f}")
    extra = set(p) - set(_expected_names(cfg))
    bad.extend(f"{name}: unexpected tensor" for name in sorted(extra))
    if bad:
        return bad
    ids = (np.arange(min(probe_len, cfg.max_seq)) % (cfg.vocab_size - 3)) + 3
    try:
        logits = forward(model, ids)
    except Exception as exc:  # noqa: BLE001 - any failure is a violation
        return [f"probe forward failed: {exc}"]
    if not np.isfinite(logits.data).all():
        return ["probe forward produced non-finite logits"]
    return []


def _expected_names(cfg):
    names = ["tok_emb", "pos_emb", "final_norm", "lm_head"]
    for l in range(cfg.n_layers):
        names += [layer_name(l, w) for w in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")]
    return names


@dataclass
class ModelStats:
    param_count: int
    macs: int
    memory_estimate: int  # bytes at 8 bytes per scalar
    achieved_ratio: float = 0.0
    seq_len: int = 64

    def to_record(self):
        return asdict(self)


def forward_macs(model, seq_len=64):
    """Multiply-accumulates of one forward pass over ``seq_len`` tokens.

    Per layer: q/k/v ``3*T*d*a``, scores and context ``2*H*T*T*d_head``,
    output ``T*a*d``, MLP ``3*T*d*f``; plus ``T*d*V`` for the head.
    Embedding lookups and norms are not matmuls and count zero.
    """
    Tn = int(seq_len)
    d = model.d_model
    dh = model.d_head
    total = Tn * d * model.config.vocab_size
    for l in range(model.config.n_layers):
        H = model.n_heads(l)
        a = H * dh
        f = model.d_ff(l)
        total += 3 * Tn * d * a + 2 * H * Tn * Tn * dh + Tn * a * d + 3 * Tn * d * f
    return int(total)


def count_stats(model, seq_len=64, reference=None):
    """Parameters, MACs and memory; ``reference`` (a model or a count) sets the achieved ratio."""
    bad = validate_consistency(model)
    if bad:
        raise ContractError("inconsistent model: " + "; ".join(bad))
    n = int(model.param_count())
    ratio = 0.0
    if reference is not None:
        before = reference if isinstance(reference, (int, np.integer)) else reference.param_count()
        ratio = achieved_ratio(before, n)
    return ModelStats(n, forward_macs(model, seq_len), n * BYTES_PER_SCALAR, ratio, int(seq_len))


def achieved_ratio(before, after):
    """Fraction of parameters removed: ``(before - after) / before``."""
    if before <= 0:
        raise ContractError("parameter count before pruning must be positive")
    return (before - after) / before


def probe_outputs_finite(model, ids):
    out = forward(model, ids)
    return bool(np.isfinite(out.data).all()), out.shape

