"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the operators the toy MLP and the image CNN need are provided:
``linear``, ``conv2d`` (valid, stride 1, cross-correlation), ``avg_pool2d``,
``tanh``, ``flatten`` and ``log_softmax``, plus the small reductions the
losses are built from (``weighted_sum``, ``add``, ``scale``).

Every op records an :class:`OpRecord` on its output.  ``backward`` walks the
records reachable from a scalar loss in reverse topological order.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Adam",
    "AdamState",
    "AutodiffError",
    "Graph",
    "OpRecord",
    "ShapeError",
    "Tensor",
    "add",
    "avg_pool2d",
    "backward",
    "conv2d",
    "flatten",
    "grad_check",
    "linear",
    "load_checkpoint",
    "log_softmax",
    "save_checkpoint",
    "scale",
    "tanh",
    "weighted_sum",
]

_ids = itertools.count()


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    """Raised when an operator receives inputs of incompatible shape."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


@dataclass(eq=False)
class OpRecord:
    kind: str
    inputs: tuple["Tensor", ...]
    output_id: int
    ctx: dict
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] = field(repr=False)

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.id for t in self.inputs)


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "op", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: OpRecord | None = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp, **ctx) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise AutodiffError(f"{kind}: non-finite value in output")
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad or t.op is not None for t in inputs)
    if out.requires_grad:
        out.op = OpRecord(kind, inputs, out.id, ctx, vjp)
    return out


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` (N, in), ``weight`` (out, in)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear", f"expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            "linear", f"input features {x.shape[1]} != weight in_features {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError("linear", f"bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data

    def vjp(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make("linear", xd @ wd.T + bias.data, (x, weight, bias), vjp)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation, stride 1.

    ``x`` is (N, C, H, W), ``weight`` is (F, C, k, k); output (N, F, H-k+1, W-k+1).
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError("conv2d", f"input channels {c} != weight channels {wc}")
    if kh > h or kw > w:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than input {h}x{w}")
    if bias.shape != (f,):
        raise ShapeError("conv2d", f"bias shape {bias.shape} != ({f},)")
    ho, wo = h - kh + 1, w - kw + 1
    # im2col: rows are (n, i, j) output positions, columns are (c, di, dj) taps
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, -1)
    need_gx = x.requires_grad or x.op is not None
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gx = None
        if need_gx:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gx = np.zeros((n, c, h, w))
            for di in range(kh):
                for dj in range(kw):
                    gx[:, :, di : di + ho, dj : dj + wo] += gcols[:, :, di, dj]
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make("conv2d", np.ascontiguousarray(out), (x, weight, bias), vjp)


def avg_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide by ``kernel``."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("avg_pool2d", f"expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError("avg_pool2d", f"spatial size {h}x{w} not divisible by kernel {kernel}")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))
    area = kernel * kernel

    def vjp(g):
        return (np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / area,)

    return _make("avg_pool2d", out, (x,), vjp, kernel=kernel)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _make("tanh", y, (x,), vjp)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    x = _as_tensor(x)
    if x.data.ndim < 1:
        raise ShapeError("flatten", "cannot flatten a 0-d tensor")
    shape = x.shape

    def vjp(g):
        return (g.reshape(shape),)

    return _make("flatten", x.data.reshape(shape[0], -1), (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis of a (N, K) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("log_softmax", f"expected (N, K) logits, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax", out, (x,), vjp)


def weighted_sum(x: Tensor, coeffs) -> Tensor:
    """Scalar ``sum(x * coeffs)`` with a constant coefficient array."""
    x = _as_tensor(x)
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape != x.shape:
        raise ShapeError("weighted_sum", f"coefficients {c.shape} != input {x.shape}")

    def vjp(g):
        return (g * c,)

    return _make("weighted_sum", np.array(np.sum(x.data * c)), (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", f"shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,), factor=c)


# ---------------------------------------------------------------------------
# graph + backward
# ---------------------------------------------------------------------------


class Graph:
    """Topologically ordered op records reachable from ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.records: list[OpRecord] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t.op is None:
                continue
            if expanded:
                self.records.append(t.op)
                continue
            if t.id in seen:
                continue
            seen.add(t.id)
            stack.append((t, True))
            for parent in t.op.inputs:
                if parent.op is not None and parent.id not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def leaves(self) -> list[Tensor]:
        out: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.op is None and t.requires_grad:
                    out.setdefault(t.id, t)
        return list(out.values())


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with requires_grad.

    Gradients add onto any existing ``.grad``; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.op is None:
        raise AutodiffError("backward called on a tensor with no recorded forward pass")
    graph = Graph(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for rec in reversed(graph.records):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not (t.requires_grad or t.op is not None):
                continue
            if t.op is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            elif t.id in grads:
                grads[t.id] = grads[t.id] + gi
            else:
                grads[t.id] = gi


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> dict[str, float]:
    """Compare analytic gradients with central finite differences.

    Returns the max relative error per parameter, where the relative error of
    one coordinate is ``|a - n| / max(|a|, |n|, floor)``.  With ``samples`` set,
    only that many randomly chosen coordinates of each parameter are probed.
    ``tolerance`` is not enforced here; callers compare the report against it.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    report: dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            idx = rng.choice(flat.size, size=samples, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report[name] = worst
    for p in params.values():
        p.zero_grad()
    return report


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: Mapping[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.state = AdamState(lr, beta1, beta2, eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        st = self.state
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError("adam_step", f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
            if not np.all(np.isfinite(g)):
                raise AutodiffError(f"adam_step: non-finite gradient for parameter {name!r}")
            grads[name] = g
        st.step += 1
        c1 = 1.0 - st.beta1**st.step
        c2 = 1.0 - st.beta2**st.step
        for name, p in self.params.items():
            g = grads[name]
            m = st.m[name] = st.beta1 * st.m[name] + (1 - st.beta1) * g
            v = st.v[name] = st.beta2 * st.v[name] + (1 - st.beta2) * g * g
            p.data -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

MAGIC = b"OODF"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write ``params`` as OODF records: u32 name length, name, u32 rank, u64 dims, f64 LE data."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, p in params.items():
        arr = np.asarray(p.data if isinstance(p, Tensor) else p, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise AutodiffError(f"{path}: not an OODF checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise AutodiffError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise AutodiffError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise AutodiffError(f"{path}: truncated checkpoint") from exc
    return out


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
