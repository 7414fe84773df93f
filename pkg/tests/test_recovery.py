import hashlib

import numpy as np
import pytest

from depprune.depgraph import build_graph, discover_groups
from depprune.errors import ConfigError, ContractError
from depprune.evaluation import mean_nll
from depprune.model import ModelConfig, forward, init_model, layer_name, train_base
from depprune.pruner import apply_plan, count_stats
from depprune.recovery import LoraAdapter, attach_lora, best_step, default_targets, merge_lora, train_lora

from conftest import SMALL


def _hash(model):
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(model.params[k].data.tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pruned(corpus_tokens_module):
    m = init_model(SMALL, seed=0)
    train_base(m, corpus_tokens_module[:20000], lr=0.003, steps=80, batch=4, seq_len=32, optimizer="adam")
    groups = discover_groups(build_graph(SMALL), "Block")
    return apply_plan(m, groups[1:3] + groups[10:20])


@pytest.fixture(scope="module")
def corpus_tokens_module():
    from depprune.config import bundled_corpus
    from depprune.model import tokenize
    return np.array(tokenize(bundled_corpus()), dtype=np.int64)


def test_attach_is_output_preserving(pruned):
    ids = np.arange(3, 30)
    ref = forward(pruned, ids).data
    adapted = attach_lora(pruned, rank=4, alpha=8.0, seed=1)
    assert forward(adapted, ids).data.tobytes() == ref.tobytes()
    assert set(adapted.adapters) == set(default_targets(pruned))
    assert all(not p.requires_grad for p in adapted.params.values())
    assert not pruned.adapters and any(p.requires_grad for p in pruned.params.values())


def test_attach_is_seeded(pruned):
    a, b = attach_lora(pruned, seed=3), attach_lora(pruned, seed=3)
    c = attach_lora(pruned, seed=4)
    k = layer_name(0, "wq")
    assert a.adapters[k].P.data.tobytes() == b.adapters[k].P.data.tobytes()
    assert a.adapters[k].P.data.tobytes() != c.adapters[k].P.data.tobytes()
    assert (a.adapters[k].Q.data == 0).all()


def test_attach_errors(pruned):
    with pytest.raises(ConfigError):
        attach_lora(pruned, rank=0)
    with pytest.raises(ConfigError):
        attach_lora(pruned, targets=["tok_emb"])
    with pytest.raises(ContractError):
        attach_lora(attach_lora(pruned), rank=2)


def test_rank_clamped_to_thin_targets():
    m = init_model(SMALL)
    groups = [g for g in discover_groups(build_graph(SMALL), "Block") if g.layer == 0 and g.kind.value == "MlpChannel"]
    thin = apply_plan(m, groups[:-2])  # layer 0 keeps 2 MLP channels
    a = attach_lora(thin, rank=4)
    assert a.adapters[layer_name(0, "w_up")].rank == 2
    assert a.adapters[layer_name(0, "w_down")].P.shape == (16, 2)
    assert a.adapters[layer_name(1, "w_up")].rank == 4


def test_adapter_parameter_count():
    a = LoraAdapter("x", np.zeros((64, 8)), np.zeros((8, 64)), 8, 16.0)
    assert a.P.size + a.Q.size == 1024 < 64 * 64
    assert a.scale == 2.0


def test_merge_after_attach_equals_pruned(pruned):
    merged = merge_lora(attach_lora(pruned))
    assert not merged.adapters
    for k in pruned.params:
        assert merged.params[k].data.tobytes() == pruned.params[k].data.tobytes()


def test_merge_matches_adapted_forward(pruned):
    a = attach_lora(pruned, seed=2)
    rng = np.random.default_rng(0)
    for ad in a.adapters.values():
        ad.Q.data[...] = rng.normal(scale=0.5, size=ad.Q.shape)
    merged = merge_lora(a)
    worst = 0.0
    for i in range(32):
        ids = rng.integers(3, 259, size=int(rng.integers(1, 33)))
        worst = max(worst, np.abs(forward(merged, ids).data - forward(a, ids).data).max())
    assert worst < 1e-9
    assert count_stats(merged).param_count == count_stats(pruned).param_count


def test_full_rank_adapter_fits_any_target():
    d_out, d_in = 5, 3
    rng = np.random.default_rng(1)
    target = rng.normal(size=(d_out, d_in))
    # with r = min(d_out, d_in) a random Q is invertible, so least squares for P is exact
    Q = rng.normal(size=(3, d_in))
    Pt, *_ = np.linalg.lstsq(Q.T, target.T / 2.0, rcond=None)
    P = Pt.T
    ad = LoraAdapter("w", P, Q, 3, 6.0)
    np.testing.assert_allclose(ad.delta(), target, atol=1e-12)


def test_training_touches_only_adapters(pruned, corpus_tokens_module):
    a = attach_lora(pruned, seed=0)
    before = _hash(a)
    P0 = {k: ad.P.data.copy() for k, ad in a.adapters.items()}
    train_lora(a, corpus_tokens_module[:8000], lr=0.01, steps=5, batch=2, seq_len=32)
    assert _hash(a) == before
    assert any(not np.array_equal(P0[k], ad.P.data) for k, ad in a.adapters.items())


def test_zero_steps_is_noop(pruned, corpus_tokens_module):
    a = attach_lora(pruned, seed=0)
    snap = {k: (ad.P.data.copy(), ad.Q.data.copy()) for k, ad in a.adapters.items()}
    trace = train_lora(a, corpus_tokens_module[:8000], steps=0, seq_len=32)
    assert trace == []
    for k, ad in a.adapters.items():
        np.testing.assert_array_equal(ad.P.data, snap[k][0])
        np.testing.assert_array_equal(ad.Q.data, snap[k][1])


def test_training_is_deterministic_and_helps(pruned, corpus_tokens_module):
    train = corpus_tokens_module[20000:30000]
    held = corpus_tokens_module[30000:32000]
    traces, models = [], []
    for _ in range(2):
        a = attach_lora(pruned, seed=0)
        traces.append(train_lora(a, train, lr=0.02, steps=60, batch=4, seq_len=32, eval_tokens=held,
                                 eval_every=10, eval_seq_len=32))
        models.append(a)
    assert traces[0] == traces[1]
    assert traces[0][0] == {"step": 0, "eval_loss": mean_nll(pruned, held, 32)}
    assert mean_nll(merge_lora(models[0]), held, 32) < mean_nll(pruned, held, 32)
    assert best_step(traces[0]) > 0
    assert [r["step"] for r in traces[0] if "eval_loss" in r] == [0, 10, 20, 30, 40, 50, 60]


def test_early_stop_restores_best(pruned, corpus_tokens_module):
    held = corpus_tokens_module[30000:31000]
    a = attach_lora(pruned, seed=0)
    trace = train_lora(a, corpus_tokens_module[20000:30000], lr=0.02, steps=30, batch=4, seq_len=32,
                       eval_tokens=held, eval_every=10, eval_seq_len=32)
    best = min(r["eval_loss"] for r in trace if "eval_loss" in r)
    assert mean_nll(a, held, 32) == best


def test_training_contract_errors(pruned, corpus_tokens_module):
    with pytest.raises(ContractError):
        train_lora(pruned, corpus_tokens_module[:1000], steps=1, seq_len=16)
    a = attach_lora(pruned)
    a.params["lm_head"].requires_grad = True
    with pytest.raises(ContractError):
        train_lora(a, corpus_tokens_module[:1000], steps=1, seq_len=16)


def test_best_step():
    assert best_step([{"step": 0, "eval_loss": 3.0}, {"step": 5, "train_loss": 1.0}, {"step": 10, "eval_loss": 2.0},
                      {"step": 20, "eval_loss": 2.5}]) == 10
    assert best_step([{"step": 1, "train_loss": 1.0}]) is None
