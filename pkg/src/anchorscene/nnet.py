"""Small dense-network toolkit with hand-written backward passes.

Parameters are float64 throughout. Inputs may be a single vector or a batch
of row vectors; gradients of a batch are summed over its rows.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes, atomic_write_text

ACTIVATIONS = ("tanh", "relu", "none")
MAGIC = b"ANCREC01"


class NetError(ValueError):
    pass


class GradTape:
    """Gradient buffers mirroring the parameter list of a block."""

    def __init__(self, grads):
        self.grads = [np.asarray(g, dtype=np.float64) for g in grads]

    @classmethod
    def zeros_for(cls, block) -> "GradTape":
        return cls([np.zeros_like(p) for p in block.params()])

    def add_(self, other: "GradTape") -> "GradTape":
        if len(other.grads) != len(self.grads):
            raise NetError("tape length mismatch")
        for g, o in zip(self.grads, other.grads):
            if g.shape != o.shape:
                raise NetError(f"tape shape mismatch {g.shape} vs {o.shape}")
            g += o
        return self

    def scale_(self, s: float) -> "GradTape":
        for g in self.grads:
            g *= s
        return self

    def copy(self) -> "GradTape":
        return GradTape([g.copy() for g in self.grads])

    def max_abs(self) -> float:
        return max((float(np.abs(g).max()) if g.size else 0.0) for g in self.grads)

    def check(self, block):
        ps = block.params()
        if len(ps) != len(self.grads) or any(p.shape != g.shape for p, g in zip(ps, self.grads)):
            raise NetError("gradient tape does not match parameter shapes")


class _Trainable:
    """Shared optimizer state (Adam moments) for any parameter block."""

    def params(self):
        raise NotImplementedError

    def _ensure_moments(self):
        if getattr(self, "m", None) is None:
            self.m = [np.zeros_like(p) for p in self.params()]
            self.v = [np.zeros_like(p) for p in self.params()]
            self.t = 0

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


class ParamBlock(_Trainable):
    """Free-standing named parameter arrays (e.g. fusion weights)."""

    def __init__(self, arrays: dict):
        self.names = list(arrays)
        self.arrays = [np.array(arrays[k], dtype=np.float64) for k in self.names]
        self.m = self.v = None
        self.t = 0

    def params(self):
        return self.arrays

    def __getitem__(self, name):
        return self.arrays[self.names.index(name)]

    def copy(self) -> "ParamBlock":
        out = ParamBlock(dict(zip(self.names, self.arrays)))
        if self.m is not None:
            out.m = [a.copy() for a in self.m]
            out.v = [a.copy() for a in self.v]
            out.t = self.t
        return out


class DenseNet(_Trainable):
    """Stack of affine layers, each followed by tanh, relu or identity."""

    def __init__(self, sizes, activations, seed: int = 0):
        if isinstance(activations, str):
            activations = [activations] * (len(sizes) - 1)
        if len(activations) != len(sizes) - 1:
            raise NetError("need one activation per layer")
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self.activations = list(activations)
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise NetError(f"unknown activation {a!r}")
        self._cache = None
        self.m = self.v = None
        self.t = 0

    @classmethod
    def from_layers(cls, layers) -> "DenseNet":
        net = cls.__new__(cls)
        net.weights = [np.array(W, dtype=np.float64) for W, _, _ in layers]
        net.biases = [np.array(b, dtype=np.float64) for _, b, _ in layers]
        net.activations = [a for _, _, a in layers]
        for W, nxt in zip(net.weights[:-1], net.weights[1:]):
            if nxt.shape[1] != W.shape[0]:
                raise NetError("adjacent layer dimensions are incompatible")
        net._cache = None
        net.m = net.v = None
        net.t = 0
        return net

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def zero_(self) -> "DenseNet":
        for p in self.params():
            p[...] = 0.0
        return self

    def copy(self) -> "DenseNet":
        net = DenseNet.from_layers(list(zip(self.weights, self.biases, self.activations)))
        if self.m is not None:
            net.m = [a.copy() for a in self.m]
            net.v = [a.copy() for a in self.v]
            net.t = self.t
        return net

    def run(self, x):
        """Forward pass returning ``(output, cache)`` without touching state."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x.reshape(1, -1) if single else x
        if h.shape[1] != self.in_dim:
            raise NetError(f"input width {h.shape[1]} != expected {self.in_dim}")
        inputs, outs = [], []
        for W, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            z = h @ W.T + b
            if act == "tanh":
                h = np.tanh(z)
            elif act == "relu":
                h = np.maximum(z, 0.0)
            else:
                h = z
            outs.append((z, h))
        cache = (single, inputs, outs)
        return (h[0] if single else h), cache

    def forward(self, x):
        y, self._cache = self.run(x)
        return y

    __call__ = forward

    def backward(self, upstream, cache=None):
        """Return ``(GradTape, input_gradient)`` for the cached forward pass."""
        if cache is None:
            cache = self._cache
        if cache is None:
            raise NetError("backward called before forward")
        single, inputs, outs = cache
        g = np.asarray(upstream, dtype=np.float64)
        g = g.reshape(1, -1) if single else g
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            z, h = outs[i]
            act = self.activations[i]
            if act == "tanh":
                g = g * (1.0 - h * h)
            elif act == "relu":
                g = g * (z > 0)
            grads[2 * i] = g.T @ inputs[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
        return GradTape(grads), (g[0] if single else g)


def adam_step(block, tape: GradTape, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One Adam update in place; moment state lives on the block."""
    tape.check(block)
    block._ensure_moments()
    block.t += 1
    bc1 = 1.0 - beta1 ** block.t
    bc2 = 1.0 - beta2 ** block.t
    for p, g, m, v in zip(block.params(), tape.grads, block.m, block.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if not np.all(np.isfinite(p)):
            raise NetError("non-finite parameter after update")
    return block


class PlateauScheduler:
    """Halve the learning rate when the monitored loss stops improving."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 10,
                 threshold: float = 1e-4, min_lr: float = 1e-7):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad_epochs": self.bad_epochs}

    def load_state(self, s: dict):
        self.lr, self.best, self.bad_epochs = s["lr"], s["best"], s["bad_epochs"]


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(block, loss_fn, eps: float = 1e-4, floor: float = 1e-6, max_entries=None,
               seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(block)`` must return ``(loss, GradTape)``. With ``max_entries``
    set, that many coordinates per parameter array are checked (chosen with
    ``seed``); otherwise every coordinate is.
    """
    if eps <= 0:
        raise NetError("eps must be positive")
    _, tape = loss_fn(block)
    tape = tape.copy()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(block.params(), tape.grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = loss_fn(block)
            flat[i] = orig - eps
            lm, _ = loss_fn(block)
            flat[i] = orig
            num = (lp - lm) / (2.0 * eps)
            worst = max(worst, float(relative_error(gflat[i], num, floor)))
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_ACT_CODE = {"tanh": 0, "relu": 1, "none": 2}
_CODE_ACT = {v: k for k, v in _ACT_CODE.items()}


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def _unpack_array(buf: bytes, off: int):
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, "<f8", n, off).reshape(shape).astype(np.float64)
    return arr, off + 8 * n


def checkpoint_bytes(blocks: dict, meta: dict | None = None) -> bytes:
    """Serialize named blocks: header JSON, then per block its arrays and
    Adam moments as row-major little-endian doubles."""
    out = [MAGIC]
    head = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(head)) + head)
    out.append(struct.pack("<I", len(blocks)))
    for name, block in blocks.items():
        nb = name.encode("utf-8")
        dense = isinstance(block, DenseNet)
        params = block.params()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BIQ", 0 if dense else 1, len(params), block.t or 0))
        if dense:
            out.append(bytes(_ACT_CODE[a] for a in block.activations))
        else:
            names = json.dumps(block.names).encode("utf-8")
            out.append(struct.pack("<I", len(names)) + names)
        has_m = block.m is not None
        out.append(struct.pack("<B", int(has_m)))
        for i, p in enumerate(params):
            out.append(_pack_array(p))
            if has_m:
                out.append(_pack_array(block.m[i]))
                out.append(_pack_array(block.v[i]))
    return b"".join(out)


def save_checkpoint(path, blocks: dict, meta: dict | None = None):
    atomic_write_bytes(path, checkpoint_bytes(blocks, meta))


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise NetError(f"{path}: bad checkpoint magic")
    off = 8
    (hl,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + hl].decode("utf-8"))
    off += hl
    (nblocks,) = struct.unpack_from("<I", buf, off)
    off += 4
    blocks = {}
    for _ in range(nblocks):
        (nl,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nl].decode("utf-8")
        off += nl
        kind, narr, t = struct.unpack_from("<BIQ", buf, off)
        off += struct.calcsize("<BIQ")
        if kind == 0:
            acts = [_CODE_ACT[c] for c in buf[off:off + narr // 2]]
            off += narr // 2
        else:
            (ln,) = struct.unpack_from("<I", buf, off)
            off += 4
            names = json.loads(buf[off:off + ln].decode("utf-8"))
            off += ln
        (has_m,) = struct.unpack_from("<B", buf, off)
        off += 1
        arrays, ms, vs = [], [], []
        for _ in range(narr):
            a, off = _unpack_array(buf, off)
            arrays.append(a)
            if has_m:
                m, off = _unpack_array(buf, off)
                v, off = _unpack_array(buf, off)
                ms.append(m)
                vs.append(v)
        if kind == 0:
            block = DenseNet.from_layers(
                [(arrays[2 * i], arrays[2 * i + 1], acts[i]) for i in range(narr // 2)])
        else:
            block = ParamBlock(dict(zip(names, arrays)))
        if has_m:
            block.m, block.v, block.t = ms, vs, t
        blocks[name] = block
    return blocks, meta


def debug_dump(path, blocks: dict, meta: dict | None = None):
    """Human-readable JSON mirror of a checkpoint (no moments)."""
    doc = {"meta": meta or {}, "blocks": {}}
    for name, block in blocks.items():
        if isinstance(block, DenseNet):
            doc["blocks"][name] = {
                "kind": "dense",
                "layers": [{"weight": W.tolist(), "bias": b.tolist(), "activation": a}
                           for W, b, a in zip(block.weights, block.biases, block.activations)],
            }
        else:
            doc["blocks"][name] = {"kind": "params",
                                   "arrays": {n: a.tolist() for n, a in zip(block.names, block.arrays)}}
    atomic_write_text(path, json.dumps(doc, indent=1))
