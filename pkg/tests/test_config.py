import pytest

from depprune.config import DEFAULTS, PipelineConfig, bundled_corpus, parse_floats, parse_range, parse_text
from depprune.errors import ConfigError


def test_defaults_validate_and_round_trip():
    c = PipelineConfig()
    assert c.values == DEFAULTS
    again = PipelineConfig.from_text(c.to_text())
    assert again.values == c.values and again.digest() == c.digest()
    assert c.model_config().n_layers == 4


def test_parse_text_comments_and_overrides():
    vals = parse_text("# header\nprune.ratio = 0.3  # trailing\n\nprune.ratio=0.4\n")
    assert vals == {"prune.ratio": "0.4"}
    c = PipelineConfig.from_text("prune.ratio = 0.3\n", ["prune.ratio=0.25", "prune.unit=Channel"])
    assert c["prune.ratio"] == 0.25 and c["prune.unit"] == "Channel"
    with pytest.raises(ConfigError):
        parse_text("no equals sign")


def test_typed_coercion():
    c = PipelineConfig({"recover.early_stop": "off", "train.steps": "7", "recover.alpha": "2"})
    assert c["recover.early_stop"] is False and c["train.steps"] == 7 and c["recover.alpha"] == 2.0
    with pytest.raises(ConfigError):
        PipelineConfig({"train.steps": "many"})
    with pytest.raises(ConfigError):
        PipelineConfig({"recover.early_stop": "maybe"})


@pytest.mark.parametrize("key,value", [
    ("prune.ratio", "1.5"), ("prune.ratio", "-0.1"), ("prune.unit", "Layer"), ("prune.method", "Taylor"),
    ("prune.aggregation", "Mean"), ("prune.fisher", "exact"), ("prune.protected", "9"), ("prune.protected", "x"),
    ("train.optimizer", "lbfgs"), ("recover.rank", "0"), ("train.seq_len", "200"), ("eval.seq_len", "129"),
    ("recover.lr", "0"), ("data.eval_range", "10:5"), ("ablate.sweep", "0.1,1.2"), ("model.n_heads", "5"),
    ("no.such.key", "1"),
])
def test_invalid_values_rejected(key, value):
    with pytest.raises(ConfigError):
        PipelineConfig({key: value})


def test_protected_layers():
    assert PipelineConfig().protected_layers("auto-default") == "auto-default"
    assert PipelineConfig({"prune.protected": "none"}).protected_layers(None) == []
    assert PipelineConfig({"prune.protected": "3, 0,3"}).protected_layers(None) == [0, 3]


def test_digests():
    a, b = PipelineConfig(), PipelineConfig({"prune.ratio": "0.3"})
    assert a.digest() != b.digest()
    assert a.model_digest() == b.model_digest()
    assert a.model_digest() != PipelineConfig({"train.lr": "0.001"}).model_digest()
    assert a.model_digest() != PipelineConfig({"seed.init": "1"}).model_digest()


def test_ranges_and_lists():
    assert parse_range("3:9") == (3, 9)
    assert parse_floats("0.1, 0.2,", "k") == [0.1, 0.2]
    with pytest.raises(ConfigError):
        parse_range("3-9")
    with pytest.raises(ConfigError):
        parse_floats("a,b", "k")


def test_corpus_splits(tmp_path):
    data = bundled_corpus()
    assert len(data) == 65536
    c = PipelineConfig()
    sizes = {s: len(c.corpus_bytes(s)) for s in ("base", "calib", "recover", "recover_val", "eval")}
    assert sizes == {"base": 45056, "calib": 4096, "recover": 6144, "recover_val": 2048, "eval": 8192}
    assert sum(sizes.values()) == len(data)
    f = tmp_path / "c.txt"
    f.write_bytes(b"abcdefghij" * 10)
    c = PipelineConfig({"data.corpus": str(f), "data.eval_range": "5:15"})
    assert c.corpus_bytes("eval") == b"fghijabcde"
    c = PipelineConfig({"data.eval_path": str(f), "data.eval_range": "0:3"})
    assert c.corpus_bytes("eval") == b"abc" and len(c.corpus_bytes("base")) == 45056
