"""Dual-encoder MLPs and the optimizers that consume their gradients.

Encoders are small dense networks mapping input rows to embedding rows.
Hidden layers use one activation (tanh or relu); the final layer is
linear so embeddings are unconstrained. The same code path runs taped
and graph-less, which is what makes the two modes bit-identical.

Optimizer steps are pure functions: they return fresh parameter and
state objects and never mutate their inputs. That property is what lets
replicated workers stay bit-identical by construction.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import kernels

ACTIVATIONS = ("tanh", "relu", "linear")

CHECKPOINT_FORMAT = "splitgrad-params"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderParams:
    """Layer list of (weight, bias) pairs plus per-layer activations."""

    layers: list
    activations: list
    out_dim: int

    def copy(self):
        return EncoderParams(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            activations=list(self.activations),
            out_dim=self.out_dim,
        )

    @property
    def in_dim(self):
        return self.layers[0][0].shape[0] if self.layers else self.out_dim

    def dims(self):
        if not self.layers:
            return [self.out_dim]
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]


def init_params(seed, dims, activation="tanh"):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.

    Hidden layers take the given activation; the final layer is linear.
    """
    if len(dims) < 2:
        raise ValueError(f"dims needs an input and an output size, got {dims}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    layers = []
    activations = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        layers.append((w, b))
        activations.append(activation if k < len(dims) - 2 else "linear")
    return EncoderParams(layers=layers, activations=activations, out_dim=dims[-1])


def identity_params(dim):
    """A single linear layer that reproduces its input exactly."""
    return EncoderParams(
        layers=[(np.eye(dim), np.zeros(dim))],
        activations=["linear"],
        out_dim=dim,
    )


def _apply_activation(name, x):
    if name == "tanh":
        return ad.tanh(x)
    if name == "relu":
        return ad.relu(x)
    if name == "linear":
        return x
    raise ValueError(f"unknown activation {name!r}")


def _check_input(params, inputs):
    if params.layers and inputs.shape[1] != params.layers[0][0].shape[0]:
        raise ad.ShapeMismatchError(
            f"encode: input width {inputs.shape[1]} does not match first "
            f"layer input dim {params.layers[0][0].shape[0]}"
        )


def encode(params, inputs, taped=False):
    """Embed input rows; value-level API returning a plain array.

    taped=False routes through the graph-less scope; taped=True records
    onto the active tape (or a throwaway one) with the inputs as the
    leaf, exercising the identical arithmetic.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    _check_input(params, inputs)
    if not taped:
        with ad.no_graph():
            return _encode_value(params, inputs)
    if ad.active_tape() is None:
        with ad.recording(ad.Tape()):
            return _encode_taped_value(params, inputs)
    return _encode_taped_value(params, inputs)


def _encode_value(params, inputs):
    x = ad.constant(inputs)
    for (w, b), act in zip(params.layers, params.activations):
        x = _apply_activation(act, ad.add(ad.matmul(x, w), b))
    return x.data


def _encode_taped_value(params, inputs):
    x = ad.leaf(inputs)
    for (w, b), act in zip(params.layers, params.activations):
        x = _apply_activation(act, ad.add(ad.matmul(x, w), b))
    return x.data


@dataclass
class EncoderLeaves:
    """Per-layer leaf Tensors for a params object on one tape."""

    layers: list
    activations: list

    def flat(self):
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out


def make_leaves(params):
    """Register every parameter array as a leaf on the active tape."""
    layers = [(ad.leaf(w), ad.leaf(b)) for w, b in params.layers]
    return EncoderLeaves(layers=layers, activations=list(params.activations))


def encode_graph(leaves, x):
    """Embed a Tensor of input rows through leaf parameters."""
    for (w, b), act in zip(leaves.layers, leaves.activations):
        x = _apply_activation(act, ad.add(ad.matmul(x, w), b))
    return x


def param_arrays(params):
    """Flat list of parameter arrays in a fixed order (w, b per layer)."""
    out = []
    for w, b in params.layers:
        out.append(w)
        out.append(b)
    return out


def params_from_arrays(params, arrays):
    """Rebuild an EncoderParams from a flat array list (same layout)."""
    layers = []
    it = iter(arrays)
    for _ in params.layers:
        layers.append((next(it), next(it)))
    return EncoderParams(
        layers=layers,
        activations=list(params.activations),
        out_dim=params.out_dim,
    )


def leaf_grads(tape, leaves):
    """Gradients of the flat parameter list after a backward pass."""
    return [tape.grad(t) for t in leaves.flat()]


def total_floats(params):
    return sum(w.size + b.size for w, b in params.layers)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    t: int = 0
    m: list = field(default=None)
    v: list = field(default=None)


def init_optimizer(kind="adam", lr=1e-3, beta1=0.9, beta2=0.999, eps_adam=1e-8):
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    return OptimizerState(
        kind=kind, lr=lr, beta1=beta1, beta2=beta2, eps_adam=eps_adam
    )


def optimizer_step(state, params, grads):
    """One update over a flat list of arrays; pure in all arguments."""
    if len(params) != len(grads):
        raise ValueError(
            f"optimizer_step: {len(params)} params vs {len(grads)} grads"
        )
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ad.ShapeMismatchError(
                f"optimizer_step: param shape {tuple(p.shape)} vs grad "
                f"shape {tuple(g.shape)}"
            )
    t = state.t + 1
    if state.kind == "sgd":
        new_params = [p - state.lr * g for p, g in zip(params, grads)]
        return new_params, replace(state, t=t)
    m = state.m if state.m is not None else [np.zeros_like(p) for p in params]
    v = state.v if state.v is not None else [np.zeros_like(p) for p in params]
    new_params, new_m, new_v = [], [], []
    for p, g, mk, vk in zip(params, grads, m, v):
        p2, m2, v2 = p.copy(), mk.copy(), vk.copy()
        kernels.adam_update(
            p2, m2, v2, g, state.lr, state.beta1, state.beta2, state.eps_adam, t
        )
        new_params.append(p2)
        new_m.append(m2)
        new_v.append(v2)
    return new_params, replace(state, t=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

def params_to_group(params):
    """Serializable description of one encoder's parameters."""
    return {
        "kind": "encoder",
        "meta": {
            "dims": [int(d) for d in params.dims()],
            "activations": list(params.activations),
            "out_dim": int(params.out_dim),
        },
        "arrays": {
            f"layer{k}.{name}": arr.tolist()
            for k, (w, b) in enumerate(params.layers)
            for name, arr in (("w", w), ("b", b))
        },
    }


def params_from_group(group):
    meta = group["meta"]
    n_layers = len(meta["activations"])
    layers = []
    for k in range(n_layers):
        w = np.asarray(group["arrays"][f"layer{k}.w"], dtype=np.float64)
        b = np.asarray(group["arrays"][f"layer{k}.b"], dtype=np.float64)
        layers.append((w, b))
    return EncoderParams(
        layers=layers,
        activations=list(meta["activations"]),
        out_dim=int(meta["out_dim"]),
    )


def save_params_file(path, groups):
    """Write named parameter groups as versioned JSON.

    JSON numbers are written with full repr so float64 values round-trip
    exactly.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "groups": groups,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_params_file(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {payload.get('version')}"
        )
    return payload["groups"]
