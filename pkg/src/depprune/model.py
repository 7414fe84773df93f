"""Toy LLaMA-style decoder: byte tokenizer, parameters, forward, base training.

Weights are stored ``[out x in]`` (``y = x @ W.T``) and carry no biases.
Positions use a learned absolute table rather than rotary embeddings.  After
pruning, layers may have different head counts and MLP widths; the model
keeps the original index of every surviving head, MLP channel and embedding
channel so plans written against the unpruned architecture stay addressable.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, LengthError, TokenIndexError
from .rng import Stream

PAD, BOS, EOS = 0, 1, 2
BYTE_OFFSET = 3


def tokenize(data) -> list:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return (np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64) + BYTE_OFFSET).tolist()


def detokenize(ids, vocab_size=259) -> bytes:
    arr = np.asarray(list(ids), dtype=np.int64)
    if arr.size and (arr.max() >= vocab_size or arr.min() < 0):
        raise TokenIndexError(f"token id outside [0, {vocab_size})")
    arr = arr[arr >= BYTE_OFFSET] - BYTE_OFFSET
    if arr.size and arr.max() > 255:
        raise TokenIndexError("token id does not map to a byte")
    return arr.astype(np.uint8).tobytes()


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 172
    n_layers: int = 4
    max_seq: int = 128
    norm_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "n_layers", "max_seq"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_seq < 2:
            raise ConfigError("max_seq must be >= 2")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.norm_eps < 0:
            raise ConfigError("norm_eps must be >= 0")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    def analytic_param_count(self):
        v, d, f, L, s = self.vocab_size, self.d_model, self.d_ff, self.n_layers, self.max_seq
        return v * d + s * d + L * (4 * d * d + 3 * d * f + 2 * d) + d + d * v


LAYER_TENSORS = ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")
LINEAR_TENSORS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


def layer_name(layer, what):
    return f"layers.{layer}.{what}"


def parse_name(name):
    """``'layers.2.wq'`` -> ``(2, 'wq')``; global tensors -> ``(None, name)``."""
    if name.startswith("layers."):
        _, l, what = name.split(".", 2)
        return int(l), what
    return None, name


def execution_rank(name):
    """Position of a tensor in forward execution order."""
    layer, what = parse_name(name)
    if layer is None:
        return {"tok_emb": 0, "pos_emb": 1, "final_norm": 10**6, "lm_head": 10**6 + 1}[what]
    return 10 + layer * 100 + LAYER_TENSORS.index(what)


class TransformerModel:
    """Parameters plus live-index bookkeeping.

    ``params`` maps tensor name to :class:`Tensor`.  ``live_channels``,
    ``live_heads[l]`` and ``live_mlp[l]`` hold the original indices of the
    surviving embedding channels, heads and MLP channels.
    """

    def __init__(self, config, params, live_channels=None, live_heads=None, live_mlp=None):
        self.config = config
        self.params = params
        L = config.n_layers
        self.live_channels = np.arange(config.d_model) if live_channels is None else np.asarray(live_channels, np.int64)
        self.live_heads = [np.arange(config.n_heads) for _ in range(L)] if live_heads is None else [np.asarray(h, np.int64) for h in live_heads]
        self.live_mlp = [np.arange(config.d_ff) for _ in range(L)] if live_mlp is None else [np.asarray(m, np.int64) for m in live_mlp]
        self.adapters = {}

    # -- shape helpers
    @property
    def d_model(self):
        return self.params["tok_emb"].shape[1]

    @property
    def d_head(self):
        return self.config.d_head

    def n_heads(self, layer):
        return self.params[layer_name(layer, "wq")].shape[0] // self.d_head

    def d_ff(self, layer):
        return self.params[layer_name(layer, "w_gate")].shape[0]

    def names(self):
        return list(self.params)

    def param_count(self):
        n = sum(p.size for p in self.params.values())
        n += sum(a.P.size + a.Q.size for a in self.adapters.values())
        return n

    def copy(self):
        params = {k: T.Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        m = TransformerModel(self.config, params, self.live_channels.copy(),
                             [h.copy() for h in self.live_heads], [x.copy() for x in self.live_mlp])
        m.adapters = {k: a.copy() for k, a in self.adapters.items()}
        return m

    def set_requires_grad(self, flag):
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
        for a in self.adapters.values():
            a.P.grad = None
            a.Q.grad = None

    def attn_live_channels(self, layer):
        """Original attention-channel indices alive in ``layer`` (head-major)."""
        dh = self.d_head
        heads = self.live_heads[layer]
        return (heads[:, None] * dh + np.arange(dh)[None, :]).ravel()

    def index_space(self, name, axis):
        """Original indices laid out along ``axis`` of tensor ``name``."""
        layer, what = parse_name(name)
        emb = self.live_channels
        if what in ("tok_emb", "pos_emb", "lm_head"):
            return emb if axis == 1 else np.arange(self.params[name].shape[0])
        if what in ("attn_norm", "mlp_norm", "final_norm"):
            return emb
        if what in ("wq", "wk", "wv"):
            return self.attn_live_channels(layer) if axis == 0 else emb
        if what == "wo":
            return emb if axis == 0 else self.attn_live_channels(layer)
        if what in ("w_gate", "w_up"):
            return self.live_mlp[layer] if axis == 0 else emb
        if what == "w_down":
            return emb if axis == 0 else self.live_mlp[layer]
        raise KeyError(name)

    def layer_dims(self):
        return {"d_model": self.d_model, "heads": [self.n_heads(l) for l in range(self.config.n_layers)],
                "d_ff": [self.d_ff(l) for l in range(self.config.n_layers)]}

    def proj(self, x, name):
        """Linear projection through ``params[name]`` plus its adapter if attached."""
        y = T.linear(x, self.params[name])
        ad = self.adapters.get(name)
        if ad is not None:
            low = T.linear(T.linear(x, ad.Q), ad.P)
            y = T.add(y, T.scale(low, ad.alpha / ad.rank))
        return y


def init_model(config, seed=None):
    seed = config.seed if seed is None else seed
    root = Stream(seed, "init")
    d, f, v, s = config.d_model, config.d_ff, config.vocab_size, config.max_seq
    shapes = {"tok_emb": (v, d), "pos_emb": (s, d)}
    for l in range(config.n_layers):
        shapes.update({
            layer_name(l, "attn_norm"): (d,), layer_name(l, "wq"): (d, d), layer_name(l, "wk"): (d, d),
            layer_name(l, "wv"): (d, d), layer_name(l, "wo"): (d, d), layer_name(l, "mlp_norm"): (d,),
            layer_name(l, "w_gate"): (f, d), layer_name(l, "w_up"): (f, d), layer_name(l, "w_down"): (d, f),
        })
    shapes.update({"final_norm": (d,), "lm_head": (v, d)})
    params = {}
    for name, shape in shapes.items():
        if name.endswith("norm"):
            data = np.ones(shape)
        else:
            data = root.child(name).normal(shape, std=0.02)
        params[name] = T.Tensor(data, requires_grad=True, name=name)
    return TransformerModel(config, params)


def _as_batch(token_ids):
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise LengthError("token ids must be 1-d or 2-d")
    return ids


def forward(model, token_ids):
    """Logits ``[B*T x vocab]`` (``[T x vocab]`` for a single sequence)."""
    cfg = model.config
    ids = _as_batch(token_ids)
    B, Tn = ids.shape
    if Tn < 1 or Tn > cfg.max_seq:
        raise LengthError(f"sequence length {Tn} outside [1, {cfg.max_seq}]")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise TokenIndexError(f"token id outside [0, {cfg.vocab_size})")
    p = model.params
    dh = cfg.d_head
    eps = cfg.norm_eps
    x = T.add(T.take_rows(p["tok_emb"], ids.ravel()), T.take_rows(p["pos_emb"], np.tile(np.arange(Tn), B)))
    inv_sqrt = 1.0 / math.sqrt(dh)
    for l in range(cfg.n_layers):
        H = model.n_heads(l)
        h = T.rms_norm(x, p[layer_name(l, "attn_norm")], eps)

        def heads(t):
            t = T.reshape(t, (B, Tn, H, dh))
            return T.reshape(T.transpose(t, (0, 2, 1, 3)), (B * H, Tn, dh))

        q = heads(model.proj(h, layer_name(l, "wq")))
        k = heads(model.proj(h, layer_name(l, "wk")))
        v = heads(model.proj(h, layer_name(l, "wv")))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), inv_sqrt)
        probs = T.softmax(scores, causal_mask=True)
        ctx = T.matmul(probs, v)
        ctx = T.reshape(T.transpose(T.reshape(ctx, (B, H, Tn, dh)), (0, 2, 1, 3)), (B * Tn, H * dh))
        x = T.add(x, model.proj(ctx, layer_name(l, "wo")))
        h = T.rms_norm(x, p[layer_name(l, "mlp_norm")], eps)
        m = T.swiglu(model.proj(h, layer_name(l, "w_gate")), model.proj(h, layer_name(l, "w_up")))
        x = T.add(x, model.proj(m, layer_name(l, "w_down")))
    x = T.rms_norm(x, p["final_norm"], eps)
    return model.proj(x, "lm_head")


def next_token_loss(model, token_ids):
    """Mean next-token cross-entropy; accepts one sequence or a batch of equal-length ones."""
    ids = _as_batch(token_ids)
    if ids.shape[1] < 2:
        raise LengthError("next_token_loss needs at least 2 tokens")
    logits = forward(model, ids[:, :-1])
    return T.cross_entropy(logits, ids[:, 1:].ravel())


def sample_windows(tokens, n, seq_len, stream):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < seq_len + 1:
        raise DataError(f"corpus has {tokens.size} tokens; need at least {seq_len + 1}")
    starts = stream.integers(tokens.size - seq_len + 1, n)
    return np.stack([tokens[s:s + seq_len] for s in starts])


def sgd_step(tensors, lr):
    for t in tensors:
        if t.grad is not None:
            t.data -= lr * t.grad
            t.grad = None


class Adam:
    """Adam with bias correction, fixed learning rate, no weight decay."""

    def __init__(self, tensors, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(t.shape) for t in self.tensors]
        self.v = [np.zeros(t.shape) for t in self.tensors]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.tensors, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


class SGD:
    def __init__(self, tensors, lr):
        self.tensors = list(tensors)
        self.lr = lr

    def step(self):
        sgd_step(self.tensors, self.lr)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def make_optimizer(name, tensors, lr):
    try:
        return OPTIMIZERS[name](tensors, lr)
    except KeyError:
        raise ConfigError(f"unknown optimizer {name!r}; expected one of {sorted(OPTIMIZERS)}") from None


def train_base(model, corpus_tokens, lr=0.5, steps=2000, batch=8, seq_len=128, seed=0, log_every=0, log=None,
               optimizer="sgd"):
    """Fixed-learning-rate training on random corpus windows.  Trains ``model`` in place.

    ``optimizer`` is ``'sgd'`` (plain) or ``'adam'``.  Returns ``(model, losses)``
    with one loss per step.
    """
    tokens = np.asarray(corpus_tokens, dtype=np.int64)
    if tokens.size == 0:
        raise DataError("empty corpus")
    if tokens.size < seq_len + 1:
        raise DataError(f"corpus has {tokens.size} tokens; need at least {seq_len + 1}")
    if seq_len > model.config.max_seq + 1:
        raise LengthError(f"seq_len {seq_len} exceeds max_seq + 1 = {model.config.max_seq + 1}")
    stream = Stream(seed, "train-batches")
    opt = make_optimizer(optimizer, [p for p in model.params.values() if p.requires_grad], lr)
    losses = []
    for step in range(steps):
        ids = sample_windows(tokens, batch, seq_len, stream)
        with T.Tape():
            loss = next_token_loss(model, ids)
            T.backward(loss)
        opt.step()
        losses.append(loss.item())
        if log and log_every and (step + 1) % log_every == 0:
            log(step + 1, float(np.mean(losses[-log_every:])))
    return model, losses
