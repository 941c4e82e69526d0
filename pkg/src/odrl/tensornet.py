"""A small convolutional Q-network with hand-written forward and backward passes.

Layers operate on float64 arrays in ``(N, C, H, W)`` layout. The layer menu is
fixed: ``conv`` (stride 1, no padding), ``maxpool`` (2x2, stride 2), ``relu``,
``dense`` (flattens its input) and ``dueling_head``. Conventions at kinks:
ReLU passes no gradient at exactly 0, and a pooling window with tied maxima
routes its gradient to the first maximal element in row-major order.

Output sizes: ``conv`` with kernel k maps H to H - k + 1; ``maxpool`` maps H
to H // 2 (an odd trailing row/column is dropped).
"""

from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError, FormatError, TrainingError, UsageError

LAYER_KINDS = ("conv", "maxpool", "dense", "relu", "dueling_head")

RMSPROP_LR = 2.5e-4
RMSPROP_DECAY = 0.95
RMSPROP_EPS = 1e-8

CHECKPOINT_MAGIC = b"ODRLNET\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 0
    units: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_text(self) -> str:
        if self.kind == "conv":
            return f"conv {self.filters} {self.kernel}"
        if self.kind in ("dense", "dueling_head"):
            return f"{self.kind} {self.units}"
        return self.kind

    @classmethod
    def from_text(cls, line: str) -> "LayerSpec":
        parts = line.split()
        kind = parts[0]
        if kind == "conv":
            return cls("conv", filters=int(parts[1]), kernel=int(parts[2]))
        if kind in ("dense", "dueling_head"):
            return cls(kind, units=int(parts[1]))
        return cls(kind)


def conv(filters, kernel):
    return LayerSpec("conv", filters=filters, kernel=kernel)


def dense(units):
    return LayerSpec("dense", units=units)


POOL = LayerSpec("maxpool")
RELU = LayerSpec("relu")


def profile_layers(profile: str, n_actions: int, dueling: bool = False) -> list[LayerSpec]:
    """Layer stacks by name.

    ``paper``: conv 32@5x5, pool, conv 32@5x5, pool, conv 64@4x4, pool,
    conv 64@3x3, dense 512, output. ``tiny``: two pools on the raw input (a
    4-pixel cell becomes one pixel), then two small conv layers and a 64-unit
    dense layer; cheap enough to train on one CPU core. ``linear``: the output
    layer alone.
    """
    if profile == "paper":
        body = [
            conv(32, 5), RELU, POOL,
            conv(32, 5), RELU, POOL,
            conv(64, 4), RELU, POOL,
            conv(64, 3), RELU,
            dense(512), RELU,
        ]
    elif profile == "tiny":
        body = [POOL, POOL, conv(16, 3), RELU, conv(32, 3), RELU, dense(64), RELU]
    elif profile == "linear":
        body = []
    else:
        raise ValueError(f"unknown profile {profile!r}")
    head = LayerSpec("dueling_head", units=n_actions) if dueling else dense(n_actions)
    return body + [head]


# --- layer kernels -----------------------------------------------------------
# Module-level so tests can swap one out (e.g. to check that a broken backward
# is caught by grad_check).


def _conv_forward(x, W, b):
    F, C, k, _ = W.shape
    N, _, H, Wd = x.shape
    Ho, Wo = H - k + 1, Wd - k + 1
    cols = sliding_window_view(x, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * k * k)
    out = cols @ W.reshape(F, -1).T + b
    return out.reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, x_shape, W, cols, need_dx):
    F, C, k, _ = W.shape
    N, _, Ho, Wo = dout.shape
    d = dout.transpose(0, 2, 3, 1).reshape(-1, F)
    dW = (d.T @ cols).reshape(W.shape)
    db = d.sum(axis=0)
    if not need_dx:
        return None, dW, db
    dcols = (d @ W.reshape(F, -1)).reshape(N, Ho, Wo, C, k, k)
    dx = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + Ho, j : j + Wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dW, db


def _pool_forward(x, need_arg=True):
    N, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    a = x[:, :, 0 : 2 * H2 : 2, 0 : 2 * W2 : 2]
    b = x[:, :, 0 : 2 * H2 : 2, 1 : 2 * W2 : 2]
    c = x[:, :, 1 : 2 * H2 : 2, 0 : 2 * W2 : 2]
    d = x[:, :, 1 : 2 * H2 : 2, 1 : 2 * W2 : 2]
    out = np.maximum(np.maximum(a, b), np.maximum(c, d))
    if not need_arg:
        return out, None
    # index of the first maximal element in row-major window order
    arg = np.full(out.shape, 3, dtype=np.uint8)
    arg[c == out] = 2
    arg[b == out] = 1
    arg[a == out] = 0
    return out, arg


def _pool_backward(dout, x_shape, arg):
    N, C, H2, W2 = dout.shape
    dx = np.zeros(x_shape)
    for idx, (oy, ox) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, :, oy : 2 * H2 : 2, ox : 2 * W2 : 2] = np.where(arg == idx, dout, 0.0)
    return dx


def _dense_forward(x, W, b):
    return x.reshape(x.shape[0], -1) @ W + b


def _dense_backward(dout, x, W):
    flat = x.reshape(x.shape[0], -1)
    dW = flat.T @ dout
    db = dout.sum(axis=0)
    dx = (dout @ W.T).reshape(x.shape)
    return dx, dW, db


def dueling_combine(value, advantages):
    """Q(a) = V + A(a) - mean over a' of A(a').

    ``value`` has shape (N,) or (N, 1); ``advantages`` has shape (N, A).
    """
    adv = np.asarray(advantages, dtype=np.float64)
    v = np.asarray(value, dtype=np.float64).reshape(adv.shape[0], 1)
    return v + adv - adv.mean(axis=1, keepdims=True)


# --- network -----------------------------------------------------------------


@dataclass
class GradientBundle:
    """Per-layer parameter gradients (``{"W", "b"}`` or ``{}``) and the input gradient."""

    params: list
    input: np.ndarray | None = None

    def flat(self) -> np.ndarray:
        parts = [g[name].ravel() for g in self.params for name in ("W", "b") if name in g]
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class ForwardCache:
    owner: int
    version: int
    input_shape: tuple
    layers: list = field(default_factory=list)


class QNet:
    """Convolutional Q-network over ``(C, H, W)`` inputs.

    Parameters
    ----------
    input_shape : (C, H, W)
    layers : list of LayerSpec
        The last layer must be ``dense`` (plain head) or ``dueling_head``; its
        ``units`` is the number of actions.
    seed : int
        Seeds the Glorot-uniform initialisation; biases start at zero.
    """

    def __init__(self, input_shape, layers, seed: int = 0):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        if not self.layers or self.layers[-1].kind not in ("dense", "dueling_head"):
            raise DimensionError("the last layer must be dense or dueling_head")
        self.shapes = self._infer_shapes()
        rng = np.random.default_rng(seed)
        self.params = []
        for spec, in_shape, out_shape in zip(self.layers, self.shapes[:-1], self.shapes[1:]):
            if spec.kind == "conv":
                c = in_shape[0]
                fan_in = c * spec.kernel**2
                fan_out = spec.filters * spec.kernel**2
                lim = np.sqrt(6.0 / (fan_in + fan_out))
                W = rng.uniform(-lim, lim, size=(spec.filters, c, spec.kernel, spec.kernel))
                self.params.append({"W": W, "b": np.zeros(spec.filters)})
            elif spec.kind in ("dense", "dueling_head"):
                d = int(np.prod(in_shape))
                m = spec.units + (1 if spec.kind == "dueling_head" else 0)
                lim = np.sqrt(6.0 / (d + m))
                self.params.append({"W": rng.uniform(-lim, lim, size=(d, m)), "b": np.zeros(m)})
            else:
                self.params.append({})
        self.opt_state = [{name: np.zeros_like(p) for name, p in layer.items()} for layer in self.params]
        self.global_step = 0
        self._version = 0

    # -- shape bookkeeping
    def _infer_shapes(self):
        shapes = [self.input_shape]
        for spec in self.layers:
            cur = shapes[-1]
            if spec.kind == "conv":
                if len(cur) != 3 or spec.kernel > cur[1] or spec.kernel > cur[2]:
                    raise DimensionError(f"conv kernel {spec.kernel} does not fit input {cur}")
                shapes.append((spec.filters, cur[1] - spec.kernel + 1, cur[2] - spec.kernel + 1))
            elif spec.kind == "maxpool":
                if len(cur) != 3 or cur[1] < 2 or cur[2] < 2:
                    raise DimensionError(f"maxpool needs at least 2x2 input, got {cur}")
                shapes.append((cur[0], cur[1] // 2, cur[2] // 2))
            elif spec.kind == "relu":
                shapes.append(cur)
            else:
                shapes.append((spec.units,))
        return shapes

    @property
    def head(self) -> str:
        return "dueling" if self.layers[-1].kind == "dueling_head" else "plain"

    @property
    def n_actions(self) -> int:
        return self.layers[-1].units

    def param_count(self) -> int:
        return sum(p.size for layer in self.params for p in layer.values())

    def copy(self) -> "QNet":
        return copy.deepcopy(self)

    def load_params_from(self, other: "QNet") -> None:
        self.params = copy.deepcopy(other.params)
        self._version += 1

    def touch(self) -> None:
        """Invalidate outstanding forward caches after editing ``params`` in place."""
        self._version += 1

    # -- passes
    def forward(self, x, keep_cache: bool = True):
        """Q-values for a batch ``(N, C, H, W)`` (a single ``(C, H, W)`` is batched).

        Returns ``(qvalues of shape (N, n_actions), cache)``.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise DimensionError(f"expected input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        cache = ForwardCache(id(self), self._version, x.shape)
        h = x
        for spec, p in zip(self.layers, self.params):
            if spec.kind == "conv":
                out, cols = _conv_forward(h, p["W"], p["b"])
                entry = (h.shape, cols)
            elif spec.kind == "maxpool":
                out, arg = _pool_forward(h, keep_cache)
                entry = (h.shape, arg)
            elif spec.kind == "relu":
                out = np.maximum(h, 0.0)
                entry = h > 0
            elif spec.kind == "dense":
                out = _dense_forward(h, p["W"], p["b"])
                entry = h
            else:
                z = _dense_forward(h, p["W"], p["b"])
                out = dueling_combine(z[:, 0], z[:, 1:])
                entry = h
            if keep_cache:
                cache.layers.append(entry)
            h = out
        return h, cache

    def predict(self, x) -> np.ndarray:
        return self.forward(x, keep_cache=False)[0]

    def backward(self, cache: ForwardCache, output_grad, need_input_grad: bool = True) -> GradientBundle:
        """Gradients of ``sum(output_grad * Q)`` with respect to every parameter and the input."""
        if not isinstance(cache, ForwardCache) or cache.owner != id(self) or cache.version != self._version:
            raise UsageError("forward cache is stale or belongs to another network")
        if len(cache.layers) != len(self.layers):
            raise UsageError("forward was run with keep_cache=False")
        g = np.asarray(output_grad, dtype=np.float64)
        expected = (cache.input_shape[0], self.n_actions)
        if g.shape != expected:
            raise DimensionError(f"output_grad must have shape {expected}, got {g.shape}")
        first_param = next(i for i, p in enumerate(self.params) if p)
        grads = [{} for _ in self.layers]
        for i in range(len(self.layers) - 1, -1, -1):
            if i < first_param and not need_input_grad:
                break
            spec, p, entry = self.layers[i], self.params[i], cache.layers[i]
            need_dx = need_input_grad or i > first_param
            if spec.kind == "conv":
                x_shape, cols = entry
                g, dW, db = _conv_backward(g, x_shape, p["W"], cols, need_dx)
                grads[i] = {"W": dW, "b": db}
            elif spec.kind == "maxpool":
                x_shape, arg = entry
                g = _pool_backward(g, x_shape, arg)
            elif spec.kind == "relu":
                g = g * entry
            elif spec.kind == "dense":
                g, dW, db = _dense_backward(g, entry, p["W"])
                grads[i] = {"W": dW, "b": db}
            else:
                dz = np.concatenate([g.sum(axis=1, keepdims=True), g - g.mean(axis=1, keepdims=True)], axis=1)
                g, dW, db = _dense_backward(dz, entry, p["W"])
                grads[i] = {"W": dW, "b": db}
        return GradientBundle(grads, g if need_input_grad else None)

    def activation_pattern(self, cache: ForwardCache) -> list:
        """ReLU masks and pool argmax indices; equal patterns mean no kink was crossed."""
        return [e if spec.kind == "relu" else e[1] for spec, e in zip(self.layers, cache.layers) if spec.kind in ("relu", "maxpool")]

    # -- optimisation
    def rmsprop_step(self, grads: GradientBundle, lr=RMSPROP_LR, decay=RMSPROP_DECAY, eps=RMSPROP_EPS) -> None:
        """In-place RMSProp: ``ms = decay*ms + (1-decay)*g**2; p -= lr*g/sqrt(ms + eps)``."""
        for layer in grads.params:
            for g in layer.values():
                if not np.all(np.isfinite(g)):
                    raise TrainingError("non-finite gradient")
        for p, ms, g in zip(self.params, self.opt_state, grads.params):
            for name in p:
                ms[name] *= decay
                ms[name] += (1.0 - decay) * g[name] * g[name]
                p[name] -= lr * g[name] / np.sqrt(ms[name] + eps)
        self.global_step += 1
        self._version += 1

    # -- serialisation
    def spec_text(self) -> str:
        lines = ["input " + " ".join(str(s) for s in self.input_shape)]
        lines += [spec.to_text() for spec in self.layers]
        return "\n".join(lines) + "\n"

    def to_bytes(self) -> bytes:
        """Checkpoint: magic, version, spec text, step, then weights and RMSProp state (float64 LE)."""
        buf = io.BytesIO()
        text = self.spec_text().encode("utf-8")
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
        buf.write(text)
        buf.write(struct.pack("<Q", self.global_step))
        for group in (self.params, self.opt_state):
            for layer in group:
                for name in ("W", "b"):
                    if name in layer:
                        buf.write(np.ascontiguousarray(layer[name], dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "QNet":
        if data[:8] != CHECKPOINT_MAGIC:
            raise FormatError("not a network checkpoint (bad magic)")
        try:
            version, n = struct.unpack_from("<II", data, 8)
            if version != CHECKPOINT_VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            pos = 16
            if pos + n + 8 > len(data):
                raise FormatError("truncated checkpoint header")
            lines = data[pos : pos + n].decode("utf-8").splitlines()
            pos += n
            input_shape = tuple(int(s) for s in lines[0].split()[1:])
            net = cls(input_shape, [LayerSpec.from_text(line) for line in lines[1:]])
            (net.global_step,) = struct.unpack_from("<Q", data, pos)
        except (struct.error, UnicodeDecodeError, ValueError, IndexError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"corrupt checkpoint header: {exc}") from None
        pos += 8
        for group in (net.params, net.opt_state):
            for layer in group:
                for name in ("W", "b"):
                    if name in layer:
                        size = layer[name].size
                        chunk = data[pos : pos + 8 * size]
                        if len(chunk) != 8 * size:
                            raise FormatError("truncated checkpoint")
                        layer[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(layer[name].shape)
                        pos += 8 * size
        if pos != len(data):
            raise FormatError("trailing bytes in checkpoint")
        return net

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "QNet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_qnet(input_shape, n_actions: int, profile: str = "tiny", dueling: bool = False, seed: int = 0) -> QNet:
    return QNet(input_shape, profile_layers(profile, n_actions, dueling), seed=seed)


def rmsprop_step(net: QNet, grads: GradientBundle, lr=RMSPROP_LR, decay=RMSPROP_DECAY, eps=RMSPROP_EPS) -> QNet:
    net.rmsprop_step(grads, lr, decay, eps)
    return net


def relative_error(analytic, numeric, floor: float = 1e-6):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from dominating."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped_kinks: int


def grad_check(net: QNet, x, eps: float = 1e-5, max_full: int = 10_000, sample: int = 256,
               seed: int = 0, detail: bool = False):
    """Compare the analytic backward pass with central finite differences.

    The scalar checked is a fixed random projection of the Q-values. Every
    parameter and input entry is checked when there are at most ``max_full``
    of them; otherwise a seeded random subsample of ``sample`` entries.
    Coordinates whose perturbation flips a ReLU mask or pool argmax are
    skipped, since the derivative is not defined across the kink.

    Returns the maximum relative error (or a :class:`GradCheckResult` with
    ``detail=True``).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    rng = np.random.default_rng(seed)
    proj = rng.uniform(-1.0, 1.0, size=(x.shape[0], net.n_actions))
    q, cache = net.forward(x)
    base_pattern = net.activation_pattern(cache)
    grads = net.backward(cache, proj)

    tensors = []  # (array to perturb, analytic gradient, is_param)
    for p, g in zip(net.params, grads.params):
        for name in ("W", "b"):
            if name in p:
                tensors.append((p[name], g[name], True))
    tensors.append((x, grads.input, False))
    sizes = np.array([t[0].size for t in tensors])
    total = int(sizes.sum())
    if total <= max_full:
        picks = [(ti, j) for ti, s in enumerate(sizes) for j in range(s)]
    else:
        flat = np.sort(rng.choice(total, size=sample, replace=False))
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        ti = np.searchsorted(offsets, flat, side="right") - 1
        picks = list(zip(ti.tolist(), (flat - offsets[ti]).tolist()))
        # make sure every tensor is represented at least once
        seen = {t for t, _ in picks}
        for t in range(len(tensors)):
            if t not in seen:
                picks.append((t, int(rng.integers(sizes[t]))))

    def objective():
        out, c = net.forward(x)
        return float(np.sum(out * proj)), net.activation_pattern(c)

    worst = 0.0
    checked = skipped = 0
    for ti, j in picks:
        arr, g, is_param = tensors[ti]
        view = arr.reshape(-1)
        old = view[j]
        view[j] = hi = old + eps
        fp, pat_p = objective()
        view[j] = lo = old - eps
        fm, pat_m = objective()
        view[j] = old
        if any(not np.array_equal(a, b) for a, b in zip(base_pattern + base_pattern, pat_p + pat_m)):
            skipped += 1
            continue
        numeric = (fp - fm) / (hi - lo)
        worst = max(worst, float(relative_error(g.reshape(-1)[j], numeric)))
        checked += 1
    net.touch()
    if detail:
        return GradCheckResult(worst, checked, skipped)
    return worst
