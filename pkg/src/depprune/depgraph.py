"""Neuron-level dependency graph and coupled-group discovery.

The graph is described by *families* of neurons (one site in one layer) and
*bundles* of edges between two families.  A bundle is dense (every source
feeds every target, through a weight matrix), diagonal (source i feeds target
i, optionally through an elementwise scale), ``gather`` (attention channel j
feeds head j // d_head) or ``scatter`` (head h feeds its d_head output
channels).  Degrees are uniform inside a family, so they are computed per
bundle instead of per edge.

The residual stream channel c is a single neuron (``embedding-channel``): all
residual adds share it, which is what couples a channel across every layer.

Trigger propagation pulls a neighbour across an edge ``src -> dst`` when
``Deg-(dst) == 1`` (out-neighbour rule) or ``Deg+(src) == 1`` (in-neighbour
rule).  Both rules are applied from whichever endpoint is being expanded, so a
group is the same closed set no matter which member triggers it.
"""

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .model import ModelConfig, execution_rank, layer_name


class Site(str, Enum):
    TOKEN_IN = "token-input"
    POSITION_IN = "position-input"
    EMBED = "embedding-channel"
    ATTN_NORM = "attn-norm-channel"
    Q_OUT = "q-output-channel"
    K_OUT = "k-output-channel"
    V_OUT = "v-output-channel"
    HEAD = "attention-head"
    O_IN = "o-input-channel"
    MLP_NORM = "mlp-norm-channel"
    GATE_OUT = "gate-output-channel"
    UP_OUT = "up-output-channel"
    MLP_HIDDEN = "mlp-hidden-channel"
    FINAL_NORM = "final-norm-channel"
    LOGIT = "logit"


BOUNDARY = {Site.TOKEN_IN, Site.POSITION_IN, Site.LOGIT}


class Neuron(NamedTuple):
    site: Site
    layer: object  # int or None
    index: int


class Kind(str, Enum):
    ATTENTION_HEAD = "AttentionHead"
    MLP_CHANNEL = "MlpChannel"
    EMBEDDING_CHANNEL = "EmbeddingChannel"


KIND_ORDER = {Kind.ATTENTION_HEAD: 0, Kind.MLP_CHANNEL: 1, Kind.EMBEDDING_CHANNEL: 2}
BLOCK_KINDS = (Kind.ATTENTION_HEAD, Kind.MLP_CHANNEL)
CHANNEL_KINDS = (Kind.EMBEDDING_CHANNEL,)


class Slice(NamedTuple):
    tensor: str
    axis: int
    indices: tuple


@dataclass(frozen=True)
class Bundle:
    src: tuple  # (site, layer)
    dst: tuple
    kind: str  # dense | diag | gather | scatter
    tensor: object = None
    src_axis: int = 0
    dst_axis: int = 0


@dataclass(frozen=True)
class DependencyGroup:
    kind: Kind
    layer: object
    index: int
    members: tuple  # sorted Slice tuple
    neurons: frozenset

    @property
    def id(self):
        layer = "-" if self.layer is None else self.layer
        return f"{self.kind.value}:{layer}:{self.index}"

    @property
    def last_member(self):
        return max(self.members, key=lambda s: (execution_rank(s.tensor), s.axis))

    def member(self, tensor, axis=None):
        for s in self.members:
            if s.tensor == tensor and (axis is None or s.axis == axis):
                return s
        raise KeyError(tensor)

    def sort_key(self):
        layer = -1 if self.layer is None else self.layer
        return (layer, KIND_ORDER[self.kind], self.index)

    def to_record(self):
        return {"id": self.id, "kind": self.kind.value, "layer": self.layer, "index": self.index,
                "members": [[s.tensor, s.axis, list(s.indices)] for s in self.members]}

    @classmethod
    def from_record(cls, rec):
        members = tuple(Slice(t, int(a), tuple(int(i) for i in idx)) for t, a, idx in rec["members"])
        return cls(Kind(rec["kind"]), rec["layer"], int(rec["index"]), members, frozenset())


class NeuronGraph:
    def __init__(self, config):
        self.config = config
        c = config
        d, a, f, H = c.d_model, c.n_heads * c.d_head, c.d_ff, c.n_heads
        self.d_head = c.d_head
        self.sizes = {(Site.TOKEN_IN, None): c.vocab_size, (Site.POSITION_IN, None): c.max_seq,
                      (Site.EMBED, None): d, (Site.FINAL_NORM, None): d, (Site.LOGIT, None): c.vocab_size}
        b = [Bundle((Site.TOKEN_IN, None), (Site.EMBED, None), "dense", "tok_emb", 0, 1),
             Bundle((Site.POSITION_IN, None), (Site.EMBED, None), "dense", "pos_emb", 0, 1)]
        for l in range(c.n_layers):
            self.sizes.update({(Site.ATTN_NORM, l): d, (Site.Q_OUT, l): a, (Site.K_OUT, l): a,
                               (Site.V_OUT, l): a, (Site.HEAD, l): H, (Site.O_IN, l): a,
                               (Site.MLP_NORM, l): d, (Site.GATE_OUT, l): f, (Site.UP_OUT, l): f,
                               (Site.MLP_HIDDEN, l): f})
            b.append(Bundle((Site.EMBED, None), (Site.ATTN_NORM, l), "diag", layer_name(l, "attn_norm")))
            for site, w in ((Site.Q_OUT, "wq"), (Site.K_OUT, "wk"), (Site.V_OUT, "wv")):
                b.append(Bundle((Site.ATTN_NORM, l), (site, l), "dense", layer_name(l, w), 1, 0))
                b.append(Bundle((site, l), (Site.HEAD, l), "gather"))
            b.append(Bundle((Site.HEAD, l), (Site.O_IN, l), "scatter"))
            b.append(Bundle((Site.O_IN, l), (Site.EMBED, None), "dense", layer_name(l, "wo"), 1, 0))
            b.append(Bundle((Site.EMBED, None), (Site.MLP_NORM, l), "diag", layer_name(l, "mlp_norm")))
            b.append(Bundle((Site.MLP_NORM, l), (Site.GATE_OUT, l), "dense", layer_name(l, "w_gate"), 1, 0))
            b.append(Bundle((Site.MLP_NORM, l), (Site.UP_OUT, l), "dense", layer_name(l, "w_up"), 1, 0))
            b.append(Bundle((Site.GATE_OUT, l), (Site.MLP_HIDDEN, l), "diag"))
            b.append(Bundle((Site.UP_OUT, l), (Site.MLP_HIDDEN, l), "diag"))
            b.append(Bundle((Site.MLP_HIDDEN, l), (Site.EMBED, None), "dense", layer_name(l, "w_down"), 1, 0))
        b.append(Bundle((Site.EMBED, None), (Site.FINAL_NORM, None), "diag", "final_norm"))
        b.append(Bundle((Site.FINAL_NORM, None), (Site.LOGIT, None), "dense", "lm_head", 1, 0))
        self.bundles = b
        self.out_bundles = {fam: [] for fam in self.sizes}
        self.in_bundles = {fam: [] for fam in self.sizes}
        for bun in b:
            self.out_bundles[bun.src].append(bun)
            self.in_bundles[bun.dst].append(bun)

    # -- per-bundle edge fan
    def _fan_out(self, bun):
        """Edges each source neuron sends through ``bun``."""
        return {"dense": self.sizes[bun.dst], "diag": 1, "gather": 1, "scatter": self.d_head}[bun.kind]

    def _fan_in(self, bun):
        return {"dense": self.sizes[bun.src], "diag": 1, "gather": self.d_head, "scatter": 1}[bun.kind]

    def _targets(self, bun, i):
        if bun.kind == "dense":
            return range(self.sizes[bun.dst])
        if bun.kind == "diag":
            return (i,)
        if bun.kind == "gather":
            return (i // self.d_head,)
        return range(i * self.d_head, (i + 1) * self.d_head)

    def _sources(self, bun, j):
        if bun.kind == "dense":
            return range(self.sizes[bun.src])
        if bun.kind == "diag":
            return (j,)
        if bun.kind == "gather":
            return range(j * self.d_head, (j + 1) * self.d_head)
        return (j // self.d_head,)

    # -- public graph queries
    def families(self):
        return list(self.sizes)

    def neurons(self, include_boundary=True):
        for (site, layer), n in self.sizes.items():
            if include_boundary or site not in BOUNDARY:
                for i in range(n):
                    yield Neuron(site, layer, i)

    def neuron_count(self, include_boundary=True):
        return sum(n for (site, _), n in self.sizes.items() if include_boundary or site not in BOUNDARY)

    def _family_deg_in(self, fam):
        return sum(self._fan_in(b) for b in self.in_bundles[fam])

    def _family_deg_out(self, fam):
        return sum(self._fan_out(b) for b in self.out_bundles[fam])

    def deg_in(self, n):
        self._check(n)
        return self._family_deg_in((n.site, n.layer))

    def deg_out(self, n):
        self._check(n)
        return self._family_deg_out((n.site, n.layer))

    def out_neighbors(self, n):
        return [Neuron(b.dst[0], b.dst[1], j) for b in self.out_bundles[(n.site, n.layer)] for j in self._targets(b, n.index)]

    def in_neighbors(self, n):
        return [Neuron(b.src[0], b.src[1], i) for b in self.in_bundles[(n.site, n.layer)] for i in self._sources(b, n.index)]

    def edges(self):
        """Enumerate every edge ``(src, dst, label)`` explicitly (slow; for checks)."""
        for b in self.bundles:
            for i in range(self.sizes[b.src]):
                for j in self._targets(b, i):
                    yield Neuron(b.src[0], b.src[1], i), Neuron(b.dst[0], b.dst[1], j), b.tensor

    def _check(self, n):
        size = self.sizes.get((n.site, n.layer))
        if size is None or not 0 <= n.index < size:
            raise KeyError(f"no neuron {n}")


def build_graph(config: ModelConfig) -> NeuronGraph:
    return NeuronGraph(config)


def _closure(graph, seed):
    graph._check(seed)
    if seed.site in BOUNDARY:
        return {seed}
    group = {seed}
    queue = deque([seed])
    deg_in = {}
    deg_out = {}

    def din(fam):
        if fam not in deg_in:
            deg_in[fam] = graph._family_deg_in(fam)
        return deg_in[fam]

    def dout(fam):
        if fam not in deg_out:
            deg_out[fam] = graph._family_deg_out(fam)
        return deg_out[fam]

    while queue:
        n = queue.popleft()
        fam = (n.site, n.layer)
        for b in graph.out_bundles[fam]:
            if b.dst[0] in BOUNDARY or not (din(b.dst) == 1 or dout(fam) == 1):
                continue
            for j in graph._targets(b, n.index):
                m = Neuron(b.dst[0], b.dst[1], j)
                if m not in group:
                    group.add(m)
                    queue.append(m)
        for b in graph.in_bundles[fam]:
            if b.src[0] in BOUNDARY or not (dout(b.src) == 1 or din(fam) == 1):
                continue
            for i in graph._sources(b, n.index):
                m = Neuron(b.src[0], b.src[1], i)
                if m not in group:
                    group.add(m)
                    queue.append(m)
    return group


def _slices(graph, neurons):
    acc = {}
    for n in neurons:
        fam = (n.site, n.layer)
        for b in graph.in_bundles[fam]:
            if b.tensor is not None:
                acc.setdefault((b.tensor, b.dst_axis), set()).add(n.index)
        for b in graph.out_bundles[fam]:
            if b.tensor is not None:
                acc.setdefault((b.tensor, b.src_axis), set()).add(n.index)
    return tuple(sorted(Slice(t, a, tuple(sorted(ix))) for (t, a), ix in acc.items()))


def _classify(neurons):
    sites = {n.site for n in neurons}
    if Site.EMBED in sites:
        kind = Kind.EMBEDDING_CHANNEL
        anchor = [n for n in neurons if n.site == Site.EMBED]
    elif Site.HEAD in sites:
        kind = Kind.ATTENTION_HEAD
        anchor = [n for n in neurons if n.site == Site.HEAD]
    elif Site.MLP_HIDDEN in sites:
        kind = Kind.MLP_CHANNEL
        anchor = [n for n in neurons if n.site == Site.MLP_HIDDEN]
    else:
        return None, None, None
    first = min(anchor, key=lambda n: n.index)
    return kind, first.layer, first.index


def trigger(graph, seed):
    """Closed dependency group reached from ``seed``; ``None`` for boundary/unclassifiable seeds."""
    neurons = _closure(graph, seed)
    kind, layer, index = _classify(neurons)
    if kind is None:
        return None
    return DependencyGroup(kind, layer, index, _slices(graph, neurons), frozenset(neurons))


def discover_groups(graph, unit="Block"):
    """Every coupled group, found by triggering from every prunable neuron.

    ``unit='Block'`` keeps attention-head and MLP-channel groups,
    ``unit='Channel'`` keeps embedding-channel groups.
    """
    kinds = _unit_kinds(unit)
    seen = set()
    groups = {}
    for n in graph.neurons(include_boundary=False):
        if n in seen:
            continue
        g = trigger(graph, n)
        if g is None:
            continue
        seen |= g.neurons
        groups.setdefault(g.members, g)
    out = [g for g in groups.values() if g.kind in kinds]
    return sorted(out, key=DependencyGroup.sort_key)


def _unit_kinds(unit):
    u = str(unit).lower()
    if u == "block":
        return BLOCK_KINDS
    if u == "channel":
        return CHANNEL_KINDS
    raise ValueError(f"unknown pruning unit {unit!r}; expected Block or Channel")


def _live_shape(arch, name):
    if hasattr(arch, "params"):
        return arch.params[name].shape
    return config_shapes(arch)[name]


def config_shapes(config):
    d, f, v, s = config.d_model, config.d_ff, config.vocab_size, config.max_seq
    shapes = {"tok_emb": (v, d), "pos_emb": (s, d), "final_norm": (d,), "lm_head": (v, d)}
    for l in range(config.n_layers):
        shapes.update({layer_name(l, "attn_norm"): (d,), layer_name(l, "mlp_norm"): (d,),
                       layer_name(l, "wq"): (d, d), layer_name(l, "wk"): (d, d), layer_name(l, "wv"): (d, d),
                       layer_name(l, "wo"): (d, d), layer_name(l, "w_gate"): (f, d),
                       layer_name(l, "w_up"): (f, d), layer_name(l, "w_down"): (d, f)})
    return shapes


def slice_size(arch, s):
    shape = _live_shape(arch, s.tensor)
    other = int(np.prod([n for ax, n in enumerate(shape) if ax != s.axis], dtype=np.int64))
    return len(s.indices) * other


def group_param_delta(group, arch):
    """Scalar parameters removed by pruning ``group``; ``arch`` is a config or a (possibly pruned) model."""
    return sum(slice_size(arch, s) for s in group.members)
