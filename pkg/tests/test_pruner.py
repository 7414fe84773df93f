import numpy as np
import pytest

from depprune import tensor as T
from depprune.checkpoint import encode_model
from depprune.depgraph import Kind, build_graph, discover_groups, group_param_delta
from depprune.errors import ContractError, PlanStaleError
from depprune.importance import GroupScore, rank_and_select
from depprune.model import ModelConfig, forward, init_model, layer_name
from depprune.pruner import (BYTES_PER_SCALAR, achieved_ratio, apply_plan, count_stats, forward_macs,
                             validate_consistency)

from conftest import SMALL

ODD = ModelConfig(vocab_size=30, d_model=12, n_heads=3, d_ff=10, n_layers=3, max_seq=16)


def _groups(cfg, unit="Block"):
    return discover_groups(build_graph(cfg), unit)


def counted_macs(model, seq_len, monkeypatch):
    """Run a real forward with the matmul primitives instrumented to tally m*k*n."""
    tally = [0]
    matmul, linear = T.matmul, T.linear

    def count_matmul(a, b):
        out = matmul(a, b)
        tally[0] += int(np.prod(out.shape)) * a.shape[-1]
        return out

    def count_linear(x, w):
        out = linear(x, w)
        tally[0] += int(np.prod(out.shape)) * x.shape[-1]
        return out

    monkeypatch.setattr(T, "matmul", count_matmul)
    monkeypatch.setattr(T, "linear", count_linear)
    forward(model, np.arange(seq_len) % 20 + 3)
    monkeypatch.undo()
    return tally[0]


def test_empty_plan_is_bit_identical(small_model):
    out = apply_plan(small_model, [])
    assert out is not small_model
    for k, p in small_model.params.items():
        assert out.params[k].data.tobytes() == p.data.tobytes()


def test_single_mlp_group_is_local():
    cfg = ModelConfig()
    m = init_model(cfg)
    g = next(x for x in _groups(cfg) if x.kind == Kind.MLP_CHANNEL and x.layer == 2)
    out = apply_plan(m, [g])
    assert out.d_ff(2) == cfg.d_ff - 1
    changed = {k for k in m.params if out.params[k].shape != m.params[k].shape}
    assert changed == {layer_name(2, w) for w in ("w_gate", "w_up", "w_down")}
    for k in m.params:
        if k not in changed:
            assert out.params[k].data.tobytes() == m.params[k].data.tobytes()
    # the surviving rows are the original rows minus the excised one
    keep = [i for i in range(cfg.d_ff) if i != g.index]
    np.testing.assert_array_equal(out.params[layer_name(2, "w_up")].data, m.params[layer_name(2, "w_up")].data[keep])


def test_source_model_untouched(small_model):
    before = {k: p.data.tobytes() for k, p in small_model.params.items()}
    apply_plan(small_model, _groups(SMALL)[2:7])
    assert {k: p.data.tobytes() for k, p in small_model.params.items()} == before


def test_all_heads_of_a_layer_rejected(small_model):
    heads = [g for g in _groups(SMALL) if g.kind == Kind.ATTENTION_HEAD and g.layer == 0]
    with pytest.raises(ContractError):
        apply_plan(small_model, heads)
    mlp = [g for g in _groups(SMALL) if g.kind == Kind.MLP_CHANNEL and g.layer == 1]
    with pytest.raises(ContractError):
        apply_plan(small_model, mlp)


def test_overlapping_groups_rejected(small_model):
    g = _groups(SMALL)[0]
    with pytest.raises(ContractError):
        apply_plan(small_model, [g, g])


def test_stale_plan_rejected(small_model):
    g = _groups(SMALL)[0]
    once = apply_plan(small_model, [g])
    with pytest.raises(PlanStaleError):
        apply_plan(once, [g])
    plan = rank_and_select(_groups(SMALL), [GroupScore(x.id, "L2", "Sum", 1.0) for x in _groups(SMALL)], 0.1, [],
                           small_model)
    with pytest.raises(PlanStaleError):
        apply_plan(once, plan)


def test_adapters_must_be_merged_first(small_model):
    from depprune.recovery import attach_lora
    with pytest.raises(ContractError):
        apply_plan(attach_lora(small_model, rank=2), [_groups(SMALL)[0]])


def test_fresh_model_is_consistent(small_model):
    assert validate_consistency(small_model) == []
    assert validate_consistency(init_model(ModelConfig())) == []


def test_corrupted_wo_gives_one_violation(small_model):
    m = small_model.copy()
    w = m.params[layer_name(1, "wo")]
    w.data = np.concatenate([w.data, np.zeros((w.shape[0], 1))], axis=1)
    bad = validate_consistency(m)
    assert len(bad) == 1 and layer_name(1, "wo") in bad[0]


def test_missing_and_extra_tensors_reported(small_model):
    m = small_model.copy()
    del m.params[layer_name(0, "w_up")]
    m.params["stray"] = T.Tensor(np.zeros(3))
    bad = validate_consistency(m)
    assert any("w_up" in b and "missing" in b for b in bad) and any("stray" in b for b in bad)


@pytest.mark.parametrize("unit", ["Block", "Channel"])
def test_random_plans_stay_consistent(unit):
    model = init_model(ODD, seed=4)
    groups = _groups(ODD, unit)
    rng = np.random.default_rng(11)
    ids = np.arange(3, 11)
    before = model.param_count()
    for trial in range(50):
        scores = [GroupScore(g.id, "Random", "Sum", float(v)) for g, v in zip(groups, rng.random(len(groups)))]
        ratio = float(rng.uniform(0.0, 0.2 if unit == "Block" else 0.4))
        plan = rank_and_select(groups, scores, ratio, [], model, unit)
        out = apply_plan(model, plan)
        assert validate_consistency(out) == []
        assert before - out.param_count() == plan.predicted_delta
        assert achieved_ratio(before, out.param_count()) == plan.achieved_ratio
        logits = forward(out, ids).data
        assert logits.shape == (8, ODD.vocab_size) and np.isfinite(logits).all()


def test_sequential_plans_use_live_indices():
    model = init_model(ODD, seed=1)
    groups = _groups(ODD)
    first = apply_plan(model, [groups[0], groups[5]])
    second = apply_plan(first, [groups[6], groups[1]])
    assert validate_consistency(second) == []
    both = apply_plan(model, [groups[0], groups[1], groups[5], groups[6]])
    for k in model.params:
        np.testing.assert_array_equal(second.params[k].data, both.params[k].data)


@pytest.mark.parametrize("seq_len", [1, 7, 64])
def test_mac_formula_matches_instrumented_forward(seq_len, monkeypatch):
    cfg = ModelConfig()
    model = init_model(cfg)
    assert forward_macs(model, seq_len) == counted_macs(model, seq_len, monkeypatch)
    rng = np.random.default_rng(0)
    for unit in ("Block", "Channel"):
        groups = _groups(cfg, unit)
        scores = [GroupScore(g.id, "Random", "Sum", float(v)) for g, v in zip(groups, rng.random(len(groups)))]
        pruned = apply_plan(model, rank_and_select(groups, scores, 0.3, [], model, unit))
        assert forward_macs(pruned, seq_len) == counted_macs(pruned, seq_len, monkeypatch)


def test_default_stats():
    cfg = ModelConfig()
    m = init_model(cfg)
    s = count_stats(m)
    assert s.param_count == cfg.analytic_param_count() == 239552
    assert s.memory_estimate == 239552 * BYTES_PER_SCALAR
    assert s.seq_len == 64
    T_, d, V, f = 64, 64, 259, 172
    assert s.macs == T_ * d * V + 4 * (3 * T_ * d * d + 2 * 4 * T_ * T_ * 16 + T_ * d * d + 3 * T_ * d * f)
    assert count_stats(m) == s


def test_stats_conservation_and_ratio():
    cfg = ModelConfig()
    m = init_model(cfg)
    groups = _groups(cfg)
    plan = rank_and_select(groups, [GroupScore(g.id, "L2", "Sum", float(i)) for i, g in enumerate(groups)], 0.2,
                           [0, 3], m)
    out = apply_plan(m, plan)
    s = count_stats(out, reference=m)
    assert s.param_count == m.param_count() - sum(group_param_delta(g, m) for g in plan.selected_groups())
    assert s.achieved_ratio == plan.predicted_delta / m.param_count()
    with pytest.raises(ContractError):
        achieved_ratio(0, 0)


def test_inconsistent_model_has_no_stats(small_model):
    m = small_model.copy()
    m.params["final_norm"].data = np.ones(3)
    with pytest.raises(ContractError):
        count_stats(m)


def test_checkpoint_size_arithmetic(small_model):
    g = _groups(SMALL)
    for model in (small_model, apply_plan(small_model, g[:3] + g[-2:])):
        buf = encode_model(model)
        rec_len = int.from_bytes(buf[8:12], "little")
        header = 4 + 4 + 4 + rec_len + 4 + 4  # magic, version, record length, record, count, crc
        per_tensor = sum(4 + len(k.encode()) + 4 + 8 * p.data.ndim for k, p in model.params.items())
        assert len(buf) == header + per_tensor + BYTES_PER_SCALAR * model.param_count()
