"""Configurable graph-recurrent GRU cell.

A cell is described by three choices: how the input enters the gates
(``multiplication``, ``convolution`` or ``attention``), how the previous hidden
state enters them (same three options) and how weights relate across nodes
(``shared``, ``independent`` or ``factorized``).  Each gate computes

    pre_g = In_g(X) + Hid_g(K) + b_g

where ``In_g`` is ``W_g x_i`` for multiplication and ``W_g sum_n a_in x_n``
otherwise, and likewise for ``Hid_g`` with ``U_g``.  The candidate uses the
target node's reset gate inside the aggregation, ``U_m (r_i * sum_n a_in k_n)``,
and the state update is ``k = (1 - z) * k_prev + z * m``.

Aggregation coefficients come from a fixed matrix (convolution), a learned
scoring function over the current inputs (attention, shared weights), a
free neighborhood-masked matrix (attention, independent weights) or a softmax
of node-embedding similarities (attention, factorized weights).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

MULT = "multiplication"
CONV = "convolution"
ATT = "attention"
OPS = (MULT, CONV, ATT)

SHARED = "shared"
INDEPENDENT = "independent"
FACTORIZED = "factorized"
MODES = (SHARED, INDEPENDENT, FACTORIZED)

GATES = ("z", "r", "m")

# name -> (input op, hidden op, weight mode)
PRESETS = {
    "GRU": (MULT, MULT, SHARED),
    "GRNN": (MULT, CONV, SHARED),
    "GA-GRU (input)": (ATT, MULT, SHARED),
    "GA-GRU (hidden)": (MULT, ATT, SHARED),
    "GA-GRU (both)": (ATT, ATT, SHARED),
    "AGRNN (input)": (ATT, MULT, INDEPENDENT),
    "AGRNN (hidden)": (MULT, ATT, INDEPENDENT),
    "AGRNN (both)": (ATT, ATT, INDEPENDENT),
    "AGCRN": (ATT, ATT, FACTORIZED),
}

TABLE_ORDER = [
    "GRNN",
    "GA-GRU (input)",
    "GA-GRU (hidden)",
    "GA-GRU (both)",
    "AGRNN (input)",
    "AGRNN (hidden)",
    "AGRNN (both)",
    "AGCRN",
]


@dataclass(frozen=True)
class CellSpec:
    input_op: str
    hidden_op: str
    weight_mode: str
    input_dim: int
    hidden_dim: int
    n_nodes: int
    k: int = 1
    embed_dim: int = 4
    att_dim: int | None = None
    per_gate_attention: bool = False

    def __post_init__(self):
        if self.input_op not in OPS or self.hidden_op not in OPS:
            raise ValueError(f"unknown op in ({self.input_op}, {self.hidden_op})")
        if self.weight_mode not in MODES:
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if min(self.input_dim, self.hidden_dim, self.n_nodes, self.k, self.embed_dim) < 1:
            raise ValueError("dimensions must be positive")

    @property
    def uses_attention(self):
        return ATT in (self.input_op, self.hidden_op)

    @property
    def uses_convolution(self):
        return CONV in (self.input_op, self.hidden_op)

    @property
    def attention_dim(self):
        return self.att_dim or self.hidden_dim

    def to_dict(self):
        return asdict(self)


def make_spec(preset, input_dim, hidden_dim, n_nodes, **kw):
    try:
        ops = PRESETS[canonical_name(preset)]
    except KeyError:
        raise ValueError(f"unknown cell preset {preset!r}") from None
    return CellSpec(*ops, input_dim=input_dim, hidden_dim=hidden_dim, n_nodes=n_nodes, **kw)


def canonical_name(name):
    """Map loose spellings like ``agrnn-input`` onto registry names."""
    key = _squash(name)
    for known in list(PRESETS) + ["GCN", "HA", "ARI", "RF"]:
        if _squash(known) == key:
            return known
    return name


def _squash(name):
    return "".join(ch for ch in name.lower() if ch.isalnum())


# ---------------------------------------------------------------------------
# parameter layout


def param_shapes(spec):
    d, h, n, e = spec.input_dim, spec.hidden_dim, spec.n_nodes, spec.embed_dim
    shapes = {}
    for g in GATES:
        if spec.weight_mode == SHARED:
            shapes[f"W_{g}"] = (d, h)
            shapes[f"U_{g}"] = (h, h)
            shapes[f"b_{g}"] = (h,)
        elif spec.weight_mode == INDEPENDENT:
            shapes[f"W_{g}"] = (n, d, h)
            shapes[f"U_{g}"] = (n, h, h)
            shapes[f"b_{g}"] = (n, h)
        else:
            shapes[f"Wpool_{g}"] = (e, d, h)
            shapes[f"Upool_{g}"] = (e, h, h)
            shapes[f"bpool_{g}"] = (e, h)
    if spec.weight_mode == FACTORIZED:
        shapes["E"] = (n, e)
    elif spec.uses_attention and spec.weight_mode == INDEPENDENT:
        shapes["a"] = (n, n)
    elif spec.uses_attention:
        ha = spec.attention_dim
        for suffix in _attention_suffixes(spec):
            shapes[f"att_W{suffix}"] = (d, ha)
            shapes[f"att_alpha{suffix}"] = (2 * ha, 1)
    return shapes


def _attention_suffixes(spec):
    return [f"_{g}" for g in GATES] if spec.per_gate_attention else [""]


def _default_mask(spec, mask):
    if mask is None:
        return np.ones((spec.n_nodes, spec.n_nodes), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (spec.n_nodes, spec.n_nodes):
        raise ValueError(f"mask shape {mask.shape} does not match {spec.n_nodes} nodes")
    return mask


def init_params(spec, seed, mask=None):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, uniform learnable
    coefficients over each neighborhood, N(0, 1/e) embeddings."""
    rng = np.random.default_rng(seed)
    mask = _default_mask(spec, mask)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        elif name == "a":
            params[name] = mask / mask.sum(axis=1, keepdims=True)
        elif name == "E":
            params[name] = rng.standard_normal(shape) / math.sqrt(spec.embed_dim)
        else:
            fan_in = shape[-2]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def param_count(spec, mask=None):
    """Trainable scalars in the cell; learnable coefficients count only inside the mask."""
    mask = _default_mask(spec, mask)
    total = 0
    for name, shape in param_shapes(spec).items():
        total += int(mask.sum()) if name == "a" else math.prod(shape)
    return total


# ---------------------------------------------------------------------------
# expression builders


class StepBuilder:
    """Builds cell steps over parameter leaves; per-graph terms are made once."""

    def __init__(self, spec, params, agg=None, mask=None):
        self.spec = spec
        self.p = params
        self.mask = _default_mask(spec, mask)
        if spec.uses_convolution:
            if agg is None:
                raise ValueError("convolution ops need an aggregation matrix")
            agg = np.asarray(agg, dtype=np.float64)
            if agg.shape != (spec.n_nodes, spec.n_nodes):
                raise ValueError(f"aggregation matrix shape {agg.shape} does not match spec")
            self.agg = ad.const(agg, name="agg")
        missing = set(param_shapes(spec)) - set(params)
        if missing:
            raise ValueError(f"missing cell parameters: {sorted(missing)}")
        self._weights = {}
        self._static_att = None
        mode = spec.weight_mode
        if mode == FACTORIZED:
            E = params["E"]
            for g in GATES:
                self._weights[f"W_{g}"] = ad.einsum("ne,edh->ndh", E, params[f"Wpool_{g}"])
                self._weights[f"U_{g}"] = ad.einsum("ne,edh->ndh", E, params[f"Upool_{g}"])
                self._weights[f"b_{g}"] = E @ params[f"bpool_{g}"]
            if spec.uses_attention:
                sim = ad.relu(E @ ad.transpose(E))
                self._static_att = ad.softmax_over_set(sim, self.mask)
        else:
            for g in GATES:
                for kind in "WUb":
                    self._weights[f"{kind}_{g}"] = params[f"{kind}_{g}"]
            if mode == INDEPENDENT and spec.uses_attention:
                self._static_att = params["a"] * ad.const(self.mask.astype(float))

    def _apply(self, y, w):
        if self.spec.weight_mode == SHARED:
            return y @ w
        return ad.einsum("bnd,ndh->bnh", y, w)

    def attention(self, x, suffix=""):
        if self._static_att is not None:
            return self._static_att
        ha = self.spec.attention_dim
        alpha = self.p[f"att_alpha{suffix}"]
        proj = x @ self.p[f"att_W{suffix}"]
        src = proj @ alpha[:ha]
        dst = proj @ alpha[ha:]
        logits = src + ad.transpose(dst)
        return ad.softmax_over_set(ad.leaky_relu(logits), self.mask)

    def _coeffs(self, op, x, gate):
        if op == CONV:
            return self.agg
        if op == ATT:
            suffix = f"_{gate}" if self.spec.per_gate_attention else ""
            return self.attention(x, suffix)
        return None

    def step(self, x, k):
        """One recurrent step; ``x`` is (B, N, d) and ``k`` is (B, N, h)."""
        spec, w = self.spec, self._weights
        coeffs, cache = {}, {}

        def agg(op, value, gate, tag):
            if op == MULT:
                return value
            ckey = (op, gate if op == ATT and spec.per_gate_attention else "")
            if ckey not in coeffs:
                coeffs[ckey] = self._coeffs(op, x, gate)
            key = (tag, ckey)
            if key not in cache:
                cache[key] = coeffs[ckey] @ value
            return cache[key]

        pre = {}
        for g in ("z", "r"):
            xin = agg(spec.input_op, x, g, "x")
            kin = agg(spec.hidden_op, k, g, "k")
            pre[g] = self._apply(xin, w[f"W_{g}"]) + self._apply(kin, w[f"U_{g}"]) + w[f"b_{g}"]
        z = ad.sigmoid(pre["z"])
        r = ad.sigmoid(pre["r"])
        xin = agg(spec.input_op, x, "m", "x")
        kin = agg(spec.hidden_op, k, "m", "k")
        m = ad.tanh(self._apply(xin, w["W_m"]) + self._apply(r * kin, w["U_m"]) + w["b_m"])
        return k + z * (m - k)


def param_leaves(names):
    return {name: ad.param(name) for name in names}


def _bind_step(spec, params, x, k, agg, mask):
    leaves = param_leaves(param_shapes(spec))
    b = StepBuilder(spec, leaves, agg, mask)
    xe, ke = ad.input("x"), ad.input("k")
    out = b.step(xe, ke)
    bindings = dict(params)
    bindings.update(x=x, k=k)
    return out, bindings, b


def cell_step(spec, params, x_t, k_prev, agg=None, mask=None):
    """Numeric single step for one (N, d) input and (N, h) state."""
    x_t = np.asarray(x_t, dtype=np.float64)
    k_prev = np.asarray(k_prev, dtype=np.float64)
    n, d, h = spec.n_nodes, spec.input_dim, spec.hidden_dim
    if x_t.shape != (n, d) or k_prev.shape != (n, h):
        raise ValueError(f"expected X {(n, d)} and K {(n, h)}, got {x_t.shape} and {k_prev.shape}")
    for name, shape in param_shapes(spec).items():
        if name not in params or np.shape(params[name]) != shape:
            raise ValueError(f"parameter '{name}' missing or not shaped {shape}")
    out, bindings, _ = _bind_step(spec, params, x_t[None], k_prev[None], agg, mask)
    return ad.evaluate(out, bindings)[0]


def attention_coefficients(x, params, mask=None, suffix=""):
    """Shared-weight attention matrix for node inputs ``x`` (N, d)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    mask = np.ones((n, n), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    w = params[f"att_W{suffix}"]
    alpha = params[f"att_alpha{suffix}"]
    ha = np.shape(w)[1]
    xe = ad.input("x")
    proj = xe @ ad.const(w)
    logits = proj @ ad.const(np.asarray(alpha)[:ha]) + ad.transpose(proj @ ad.const(np.asarray(alpha)[ha:]))
    out = ad.softmax_over_set(ad.leaky_relu(logits), mask)
    return ad.evaluate(out, {"x": x})


ACTIVATIONS = {
    "identity": lambda e: e,
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
}


def gcn_expr(x, agg, w, b, activation="relu"):
    """Row i = act(sum_n a_in W x_n + b) with row-vector inputs."""
    return ACTIVATIONS[activation](ad.as_expr(agg) @ x @ w + b)


def gcn_layer(x, agg, w, b, activation="relu"):
    x = np.asarray(x, dtype=np.float64)
    out = gcn_expr(ad.const(x), ad.const(agg), ad.const(np.atleast_2d(w)), ad.const(b), activation)
    return ad.evaluate(out, {})


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, meta, tensors):
    """Self-describing JSON: metadata plus named tensors as shape + row-major data."""
    doc = {
        "meta": meta,
        "tensors": {
            name: {"shape": list(np.shape(t)), "data": np.asarray(t, dtype=np.float64).ravel().tolist()}
            for name, t in sorted(tensors.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def read_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    tensors = {
        name: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"]) for name, t in doc["tensors"].items()
    }
    return doc["meta"], tensors
