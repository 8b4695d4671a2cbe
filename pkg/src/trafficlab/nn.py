"""Small dense networks with exact backprop, plain/adaptive gradient steps,
and Kronecker-factored curvature for natural-gradient preconditioning.

Everything is float64 numpy. Parameters flatten in a fixed order (per layer:
weight matrix row-major, then bias), which the checkpoint format and the
curvature code both rely on.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")

_MAGIC = b"TLNN"
_FORMAT_VERSION = 1


class DivergenceError(RuntimeError):
    """A gradient or update direction stopped being finite."""


class SingularCurvatureError(RuntimeError):
    """A curvature factor could not be inverted (no damping to rescue it)."""


class CheckpointError(RuntimeError):
    """Base class for unreadable checkpoint files."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _apply_activation(name: str, s: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(s)
    if name == "relu":
        return np.maximum(s, 0.0)
    return s


def _activation_grad(name: str, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """d activation / d pre-activation, elementwise (a = activation(s))."""
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (s > 0.0).astype(s.dtype)
    return np.ones_like(s)


@dataclass
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError("layer weight/bias shapes are inconsistent")


class ForwardCache:
    """Per-layer activations captured by forward(); backward() adds the
    per-sample pre-activation gradients the curvature stats feed on."""

    def __init__(self, inputs: list[np.ndarray], pre_activations: list[np.ndarray]):
        self.inputs = inputs              # inputs[l]: (B, in_l)
        self.pre_activations = pre_activations  # (B, out_l)
        self.pre_grads: list[np.ndarray] | None = None


class Gradients:
    """Weight/bias gradients shaped like their source network."""

    def __init__(self, dw: list[np.ndarray], db: list[np.ndarray]):
        self.dw = dw
        self.db = db

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([g * factor for g in self.dw], [g * factor for g in self.db])

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.dw, self.db):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def norm(self) -> float:
        return float(math.sqrt(sum(
            float(np.sum(w * w)) + float(np.sum(b * b))
            for w, b in zip(self.dw, self.db))))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) and np.all(np.isfinite(b))
                   for w, b in zip(self.dw, self.db))


class Mlp:
    """Fixed-topology feed-forward net: affine layers plus activations."""

    def __init__(self, layers: list[Layer], seed: int | None = None):
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.w.shape[1] != prev.w.shape[0]:
                raise ValueError("adjacent layer dimensions are incompatible")
        self.layers = layers
        self.seed = seed

    @classmethod
    def create(cls, sizes: list[int], activations: list[str], seed: int) -> "Mlp":
        """Scaled uniform fan-in init (+/- 1/sqrt(fan_in)), zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        layers = []
        for i, act in enumerate(activations):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layers.append(Layer(w=w, b=np.zeros(fan_out), activation=act))
        return cls(layers, seed=seed)

    @property
    def input_size(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def output_size(self) -> int:
        return self.layers[-1].w.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_size] + [layer.w.shape[0] for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def clone(self) -> "Mlp":
        return Mlp([Layer(l.w.copy(), l.b.copy(), l.activation) for l in self.layers],
                   seed=self.seed)

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.shape[1] != self.input_size:
            raise ValueError(
                f"input size {a.shape[1]} does not match net input {self.input_size}")
        inputs = []
        pre = []
        for layer in self.layers:
            inputs.append(a)
            s = a @ layer.w.T + layer.b
            pre.append(s)
            a = _apply_activation(layer.activation, s)
        out = a[0] if squeeze else a
        return out, ForwardCache(inputs, pre)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, output_grad: np.ndarray) -> Gradients:
        """Exact gradients of the scalar whose output gradient is supplied.

        ``output_grad`` carries any loss scaling (e.g. 1/B for a mean), so
        the returned gradients sum over the batch. The per-sample
        pre-activation gradients are left on the cache for curvature stats.
        """
        g = np.asarray(output_grad, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != cache.pre_activations[-1].shape:
            raise ValueError("output gradient shape does not match forward cache")
        dw: list[np.ndarray] = [None] * len(self.layers)
        db: list[np.ndarray] = [None] * len(self.layers)
        pre_grads: list[np.ndarray] = [None] * len(self.layers)
        da = g
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            s = cache.pre_activations[idx]
            a_out = _apply_activation(layer.activation, s)
            ds = da * _activation_grad(layer.activation, s, a_out)
            pre_grads[idx] = ds
            dw[idx] = ds.T @ cache.inputs[idx]
            db[idx] = ds.sum(axis=0)
            if idx > 0:
                da = ds @ layer.w
        cache.pre_grads = pre_grads
        return Gradients(dw, db)

    # -- flat parameter view --------------------------------------------------

    @property
    def num_params(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)

    def flatten(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.w.ravel())
            parts.append(layer.b)
        return np.concatenate(parts)

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_params,):
            raise ValueError(
                f"flat vector has {vec.shape} entries, net needs {self.num_params}")
        off = 0
        for layer in self.layers:
            n = layer.w.size
            layer.w = vec[off:off + n].reshape(layer.w.shape).copy()
            off += n
            n = layer.b.size
            layer.b = vec[off:off + n].copy()
            off += n

    # -- persistence ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = json.dumps({
            "format_version": _FORMAT_VERSION,
            "layer_shapes": [list(l.w.shape) for l in self.layers],
            "activations": self.activations,
            "seed": self.seed,
        }).encode("utf-8")
        params = self.flatten().astype("<f8").tobytes()
        return _MAGIC + struct.pack("<II", _FORMAT_VERSION, len(header)) + header + params

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Mlp":
        net, used = cls._parse(blob)
        if used != len(blob):
            raise CheckpointFormatError("trailing bytes after network block")
        return net

    @classmethod
    def _parse(cls, blob: bytes, offset: int = 0) -> tuple["Mlp", int]:
        """Parse one serialized network; returns (net, end offset)."""
        end = offset + len(_MAGIC) + 8
        if len(blob) < end:
            raise CheckpointTruncatedError("network block header cut short")
        if blob[offset:offset + len(_MAGIC)] != _MAGIC:
            raise CheckpointFormatError("bad network magic bytes")
        version, header_len = struct.unpack_from("<II", blob, offset + len(_MAGIC))
        if version != _FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported network format version {version}")
        if len(blob) < end + header_len:
            raise CheckpointTruncatedError("network header cut short")
        try:
            header = json.loads(blob[end:end + header_len].decode("utf-8"))
            shapes = [tuple(s) for s in header["layer_shapes"]]
            activations = header["activations"]
            seed = header["seed"]
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise CheckpointFormatError(f"unreadable network header: {exc}") from exc
        n_params = sum(o * i + o for o, i in shapes)
        start = end + header_len
        stop = start + n_params * 8
        if len(blob) < stop:
            raise CheckpointTruncatedError("parameter block cut short")
        flat = np.frombuffer(blob[start:stop], dtype="<f8").astype(np.float64)
        layers = []
        off = 0
        for (out_dim, in_dim), act in zip(shapes, activations):
            w = flat[off:off + out_dim * in_dim].reshape(out_dim, in_dim).copy()
            off += out_dim * in_dim
            b = flat[off:off + out_dim].copy()
            off += out_dim
            layers.append(Layer(w=w, b=b, activation=act))
        try:
            net = cls(layers, seed=seed)
        except ValueError as exc:
            raise CheckpointShapeError(str(exc)) from exc
        return net, stop

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SgdOptimizer:
    """W <- W + lr * direction (ascent; callers negate for descent)."""

    kind = "sgd"

    def __init__(self, net: Mlp):
        self._shape_ref = net.sizes

    def step(self, net: Mlp, direction: Gradients, learning_rate: float) -> None:
        if not direction.is_finite():
            raise DivergenceError("non-finite update direction")
        for layer, dw, db in zip(net.layers, direction.dw, direction.db):
            layer.w += learning_rate * dw
            layer.b += learning_rate * db

    def state_arrays(self) -> list[np.ndarray]:
        return []

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        if arrays:
            raise CheckpointShapeError("sgd optimizer carries no state arrays")

    def state_meta(self) -> dict:
        return {"kind": self.kind}


class AdamOptimizer:
    """First/second-moment adaptive steps, ascent convention."""

    kind = "adam"

    def __init__(self, net: Mlp, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(l.w) for l in net.layers] + \
                 [np.zeros_like(l.b) for l in net.layers]
        self.v = [np.zeros_like(arr) for arr in self.m]

    def _moments(self, net: Mlp, direction: Gradients):
        arrays = list(direction.dw) + list(direction.db)
        targets = [l.w for l in net.layers] + [l.b for l in net.layers]
        return arrays, targets

    def step(self, net: Mlp, direction: Gradients, learning_rate: float) -> None:
        if not direction.is_finite():
            raise DivergenceError("non-finite update direction")
        self.t += 1
        grads, targets = self._moments(net, direction)
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for m, v, g, target in zip(self.m, self.v, grads, targets):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            target += learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        if len(arrays) != len(self.m) + len(self.v):
            raise CheckpointShapeError("adam state array count mismatch")
        for dst, src in zip(self.m + self.v, arrays):
            if dst.shape != src.shape:
                raise CheckpointShapeError("adam state shape mismatch")
            dst[...] = src

    def state_meta(self) -> dict:
        return {"kind": self.kind, "t": self.t, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps}


def make_optimizer(kind: str, net: Mlp) -> SgdOptimizer | AdamOptimizer:
    if kind == "sgd":
        return SgdOptimizer(net)
    if kind == "adam":
        return AdamOptimizer(net)
    raise ValueError(f"unknown optimizer kind {kind!r}")


# ---------------------------------------------------------------------------
# Kronecker-factored curvature
# ---------------------------------------------------------------------------

class KfacStats:
    """Per-layer running factors A ~ E[a a^T] and S ~ E[ds ds^T].

    Preconditioning applies (S + damping I)^-1 G (A + damping I)^-1 per
    layer, the Kronecker realization of the inverse-curvature product.
    Biases use the S factor alone unless ``augment_bias`` is set, in which
    case activations gain a constant 1 and the bias column rides inside
    the weight block.
    """

    def __init__(self, net: Mlp, damping: float = 1e-2, decay: float = 0.95,
                 augment_bias: bool = False):
        if damping < 0:
            raise ValueError("damping must be non-negative")
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        self.damping = damping
        self.decay = decay
        self.augment_bias = augment_bias
        self.a_factors = []
        self.s_factors = []
        for layer in net.layers:
            in_dim = layer.w.shape[1] + (1 if augment_bias else 0)
            self.a_factors.append(np.eye(in_dim))
            self.s_factors.append(np.eye(layer.w.shape[0]))

    def update(self, activations: list[np.ndarray],
               pre_grads: list[np.ndarray]) -> None:
        """Fold one minibatch of per-sample activations and pre-activation
        gradients into the running factors."""
        if len(activations) != len(self.a_factors):
            raise ValueError("layer count mismatch in curvature update")
        d = self.decay
        for idx, (a, ds) in enumerate(zip(activations, pre_grads)):
            a = np.atleast_2d(a)
            ds = np.atleast_2d(ds)
            batch = a.shape[0]
            if self.augment_bias:
                a = np.concatenate([a, np.ones((batch, 1))], axis=1)
            new_a = d * self.a_factors[idx] + (1 - d) * (a.T @ a) / batch
            new_s = d * self.s_factors[idx] + (1 - d) * (ds.T @ ds) / batch
            # keep exact symmetry against float drift
            self.a_factors[idx] = 0.5 * (new_a + new_a.T)
            self.s_factors[idx] = 0.5 * (new_s + new_s.T)

    def state_arrays(self) -> list[np.ndarray]:
        return list(self.a_factors) + list(self.s_factors)

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        n = len(self.a_factors)
        if len(arrays) != 2 * n:
            raise CheckpointShapeError("curvature state array count mismatch")
        for dst_list, src_list in ((self.a_factors, arrays[:n]),
                                   (self.s_factors, arrays[n:])):
            for i, src in enumerate(src_list):
                if dst_list[i].shape != src.shape:
                    raise CheckpointShapeError("curvature factor shape mismatch")
                dst_list[i] = src.copy()

    def state_meta(self) -> dict:
        return {"kind": "kfac"}

    def _solve(self, factor: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        mat = factor
        if self.damping > 0:
            mat = factor + self.damping * np.eye(factor.shape[0])
        try:
            return np.linalg.solve(mat, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularCurvatureError(
                "curvature factor is singular and damping is zero") from exc

    def precondition(self, grads: Gradients) -> Gradients:
        """(S + damping I)^-1 G (A + damping I)^-1 per layer."""
        out_w = []
        out_b = []
        for idx, (dw, db) in enumerate(zip(grads.dw, grads.db)):
            a_fac = self.a_factors[idx]
            s_fac = self.s_factors[idx]
            if self.augment_bias:
                block = np.concatenate([dw, db[:, None]], axis=1)
                left = self._solve(s_fac, block)
                solved = self._solve(a_fac, left.T).T
                out_w.append(np.ascontiguousarray(solved[:, :-1]))
                out_b.append(np.ascontiguousarray(solved[:, -1]))
            else:
                left = self._solve(s_fac, dw)
                out_w.append(self._solve(a_fac, left.T).T)
                out_b.append(self._solve(s_fac, db))
        return Gradients(out_w, out_b)
