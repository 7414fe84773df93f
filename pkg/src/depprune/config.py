"""Pipeline configuration: flat dotted ``key = value`` text with typed defaults."""

import hashlib
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig

# key -> default; the default's type is the key's type
DEFAULTS = {
    "model.vocab_size": 259,
    "model.d_model": 64,
    "model.n_heads": 4,
    "model.d_ff": 172,
    "model.n_layers": 4,
    "model.max_seq": 128,
    "model.norm_eps": 1e-6,
    # corpus: empty path means the bundled sample; ranges are byte offsets "start:end"
    "data.corpus": "",
    "data.base_path": "",
    "data.calib_path": "",
    "data.recover_path": "",
    "data.eval_path": "",
    "data.base_range": "0:45056",
    "data.calib_range": "45056:49152",
    "data.recover_range": "49152:55296",
    "data.recover_val_range": "55296:57344",
    "data.eval_range": "57344:65536",
    "train.optimizer": "adam",
    "train.lr": 0.003,
    "train.steps": 2000,
    "train.batch": 4,
    "train.seq_len": 128,
    "prune.unit": "Block",
    "prune.ratio": 0.2,
    "prune.method": "Param1",
    "prune.aggregation": "Sum",
    "prune.fisher": "per_sample",
    "prune.protected": "auto",
    "prune.calib_n": 10,
    "prune.calib_seq_len": 128,
    "recover.rank": 4,
    "recover.alpha": 8.0,
    "recover.lr": 0.01,
    "recover.steps": 500,
    "recover.batch": 4,
    "recover.seq_len": 128,
    "recover.eval_every": 25,
    "recover.early_stop": True,
    "recover.targets": "all",
    "eval.seq_len": 128,
    "eval.stats_seq_len": 64,
    "ablate.ratios": "0.2,0.5",
    "ablate.sweep": "0.1,0.2,0.3,0.4,0.5,0.6",
    "ablate.recover": True,
    "ablate.recover_steps": 100,
    "pipeline.ablate": False,
    "seed.init": 0,
    "seed.data": 0,
    "seed.random": 0,
    "seed.lora": 0,
}

UNITS = ("Block", "Channel")
SPLITS = ("base", "calib", "recover", "recover_val", "eval")


def _coerce(key, raw):
    default = DEFAULTS[key]
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text):
    """``key = value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def parse_range(text, key="range"):
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError:
        raise ConfigError(f"{key}: expected start:end, got {text!r}") from None
    if a < 0 or b <= a:
        raise ConfigError(f"{key}: empty or negative range {text!r}")
    return a, b


def parse_floats(text, key):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from None


class PipelineConfig:
    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for key, raw in (values or {}).items():
            self.set(key, raw)
        self.validate()

    @classmethod
    def from_text(cls, text, overrides=()):
        vals = parse_text(text)
        vals.update(parse_overrides(overrides))
        return cls(vals)

    @classmethod
    def load(cls, path=None, overrides=()):
        text = Path(path).read_text(encoding="utf-8") if path else ""
        return cls.from_text(text, overrides)

    def set(self, key, raw):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, raw)

    def __getitem__(self, key):
        return self.values[key]

    def validate(self):
        v = self.values
        if not 0 <= v["prune.ratio"] < 1:
            raise ConfigError(f"prune.ratio must lie in [0, 1), got {v['prune.ratio']}")
        if v["train.optimizer"] not in ("sgd", "adam"):
            raise ConfigError("train.optimizer must be sgd or adam")
        if v["prune.unit"] not in UNITS:
            raise ConfigError(f"prune.unit must be one of {UNITS}")
        from .importance import AGGREGATIONS, FISHER_MODES, METHODS
        if v["prune.method"] not in METHODS:
            raise ConfigError(f"prune.method must be one of {METHODS}")
        if v["prune.aggregation"] not in AGGREGATIONS:
            raise ConfigError(f"prune.aggregation must be one of {AGGREGATIONS}")
        if v["prune.fisher"] not in FISHER_MODES:
            raise ConfigError(f"prune.fisher must be one of {FISHER_MODES}")
        self.protected_layers(None)
        for key in ("train.steps", "recover.steps", "ablate.recover_steps", "recover.eval_every"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0")
        for key in ("train.batch", "recover.batch", "prune.calib_n", "recover.rank"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        # training windows hold seq_len tokens (seq_len - 1 inputs); eval windows feed seq_len inputs
        for key in ("train.seq_len", "recover.seq_len", "prune.calib_seq_len"):
            if not 2 <= v[key] <= v["model.max_seq"] + 1:
                raise ConfigError(f"{key} must lie in [2, model.max_seq + 1]")
        if not 1 <= v["eval.seq_len"] <= v["model.max_seq"]:
            raise ConfigError("eval.seq_len must lie in [1, model.max_seq]")
        if v["eval.stats_seq_len"] < 1:
            raise ConfigError("eval.stats_seq_len must be >= 1")
        for key in ("train.lr", "recover.lr"):
            if not v[key] > 0:
                raise ConfigError(f"{key} must be positive")
        for s in SPLITS:
            parse_range(v[f"data.{s}_range"], f"data.{s}_range")
        for key in ("ablate.ratios", "ablate.sweep"):
            for r in parse_floats(v[key], key):
                if not 0 <= r < 1:
                    raise ConfigError(f"{key}: ratio {r} outside [0, 1)")
        self.model_config()

    def model_config(self):
        v = self.values
        return ModelConfig(v["model.vocab_size"], v["model.d_model"], v["model.n_heads"], v["model.d_ff"],
                           v["model.n_layers"], v["model.max_seq"], v["model.norm_eps"], v["seed.init"])

    def protected_layers(self, default):
        """Explicit protected-layer list, or ``default`` when the key is ``auto``."""
        text = self.values["prune.protected"].strip().lower()
        if text == "auto":
            return default
        if text in ("", "none"):
            return []
        try:
            layers = sorted({int(x) for x in text.split(",")})
        except ValueError:
            raise ConfigError(f"prune.protected: expected auto, none or a layer list, got {text!r}") from None
        if any(not 0 <= l < self.values["model.n_layers"] for l in layers):
            raise ConfigError("prune.protected names a layer outside the model")
        return layers

    def to_text(self):
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def model_digest(self):
        """Hash of the settings that decide the base model (architecture, base data, training, init seed)."""
        keys = [k for k in sorted(self.values) if k.startswith(("model.", "train.")) or k in
                ("seed.init", "seed.data", "data.corpus", "data.base_path", "data.base_range")]
        text = "".join(f"{k} = {_format(self.values[k])}\n" for k in keys)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    # -- corpus
    def corpus_bytes(self, split):
        v = self.values
        path = v[f"data.{'recover' if split == 'recover_val' else split}_path"] or v["data.corpus"]
        data = Path(path).read_bytes() if path else bundled_corpus()
        a, b = parse_range(v[f"data.{split}_range"], f"data.{split}_range")
        return data[a:b]


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def bundled_corpus():
    return resources.files("depprune").joinpath("data/sample_corpus.txt").read_bytes()
