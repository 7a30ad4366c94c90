"""Parameter store, ADAM, weight init, the recurrent layer, checkpoints.

Parameters are tape leaves (see :mod:`ktnext.autodiff`) held by name in a
:class:`ParamStore`; shapes are fixed at registration and all updates happen
in place, so the same leaves can be reused across training steps and
cascades.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .sampling import (
    BadMagicError,
    DimensionOverflowError,
    FileFormatError,
    TruncatedPayloadError,
)

__all__ = [
    "AdamState",
    "ParamStore",
    "adam_step",
    "check_gradients",
    "crnn_bidir_layer",
    "he_conv_weights",
    "init_adam",
    "load_checkpoint",
    "parameter_count",
    "save_checkpoint",
]

_MAX_PAYLOAD_BYTES = 1 << 40


class ParamStore:
    """Ordered, uniquely named collection of real trainable arrays."""

    def __init__(self):
        self._tensors: dict[str, ad.Tensor] = {}

    def add(self, name: str, value) -> ad.Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        if np.iscomplexobj(value):
            raise ValueError("parameters must be real arrays")
        tensor = ad.parameter(value, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> ad.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return self._tensors.keys()

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return self._tensors.values()

    @property
    def total_count(self) -> int:
        return sum(t.value.size for t in self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def set_values(self, mapping) -> None:
        """Copy new values into existing parameters; shapes must match."""
        for name, arr in mapping.items():
            if name not in self._tensors:
                raise KeyError(name)
            tensor = self._tensors[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != tensor.value.shape:
                raise ValueError(
                    f"parameter {name!r} has shape {tensor.value.shape}, got {arr.shape}"
                )
            tensor.value[...] = arr

    def snapshot(self) -> dict:
        return {name: t.value.copy() for name, t in self._tensors.items()}


def parameter_count(store: ParamStore) -> int:
    return store.total_count


def he_conv_weights(rng, c_out: int, c_in: int, k: int) -> np.ndarray:
    """Fan-in scaled normal init for a conv kernel [c_out][c_in][k][k]."""
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.standard_normal((c_out, c_in, k, k)) * std


# --------------------------------------------------------------- ADAM


class AdamState:
    """First/second moment arrays mirroring a ParamStore, plus a step count."""

    def __init__(self, m, v, step=0):
        self.m = m
        self.v = v
        self.step = step


def init_adam(store: ParamStore) -> AdamState:
    m = {name: np.zeros_like(t.value) for name, t in store.items()}
    v = {name: np.zeros_like(t.value) for name, t in store.items()}
    return AdamState(m, v)


def adam_step(store: ParamStore, state: AdamState, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected ADAM update; a missing gradient counts as zero."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, tensor in store.items():
        g = tensor.grad
        if g is None:
            g = 0.0
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        tensor.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# --------------------------------------------------------------- CRNN layer


def crnn_bidir_layer(seq: ad.Tensor, w_i2h: ad.Tensor, w_h2h: ad.Tensor,
                     w_ih2ih: ad.Tensor, bias: ad.Tensor, hidden_prev=None,
                     dilation: int = 3):
    """Bidirectional convolutional recurrence over the frame axis.

    seq is [t][c][h][w] with frames as the batch axis.  Each direction runs
    h_t = relu(conv(x_t) + conv(h_neighbor) + conv(hidden_prev_t) + bias)
    with one shared set of weights; the two streams are summed.  Returns the
    summed sequence twice: once as the layer output, once as the hidden
    state to feed the same layer at the next cascade iteration (conv over a
    zero hidden state contributes nothing, so an absent hidden_prev is
    simply skipped).
    """
    t_frames = seq.value.shape[0]
    base = ad.conv2d(seq, w_i2h, bias, dilation)
    if hidden_prev is not None:
        base = ad.add(base, ad.conv2d(hidden_prev, w_ih2ih, None, dilation))

    def sweep(order):
        states = [None] * t_frames
        h = None
        for t in order:
            pre = ad.slice_frame(base, t)
            if h is not None:
                pre = ad.add(pre, ad.conv2d(h, w_h2h, None, dilation))
            h = ad.relu(pre)
            states[t] = h
        return ad.stack_frames(states)

    out = ad.add(sweep(range(t_frames)), sweep(range(t_frames - 1, -1, -1)))
    return out, out


# --------------------------------------------------------------- gradient check


def check_gradients(build_loss, leaves, rng, samples: int = 8, step: float = 1e-6) -> float:
    """Central finite differences on a random coordinate subsample.

    build_loss must rebuild the graph from the leaves' current values.
    Returns the worst relative error over all probed coordinates; complex
    leaves are probed on real and imaginary parts separately.  A central
    difference of a loss L carries ~eps*|L|/step of cancellation noise, so
    coordinates where analytic and numeric values agree within that
    resolution count as exact (a hard data-consistency layer makes some
    directions genuinely dead, with both values at roundoff level).
    """
    for leaf in leaves:
        leaf.grad = None
    loss = build_loss()
    ad.backward(loss)
    fd_floor = 50.0 * np.finfo(float).eps * max(1.0, abs(float(loss.value))) / step
    analytic = []
    for leaf in leaves:
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        analytic.append(g.copy())

    def probe(value, idx, unit):
        orig = value[idx]
        value[idx] = orig + step * unit
        up = float(build_loss().value)
        value[idx] = orig - step * unit
        down = float(build_loss().value)
        value[idx] = orig
        return (up - down) / (2.0 * step)

    worst = 0.0
    for leaf, ana in zip(leaves, analytic):
        flat_n = leaf.value.size
        count = min(samples, flat_n)
        chosen = rng.choice(flat_n, size=count, replace=False)
        for flat_idx in chosen:
            idx = np.unravel_index(int(flat_idx), leaf.value.shape)
            if np.iscomplexobj(leaf.value):
                num = probe(leaf.value, idx, 1.0) + 1j * probe(leaf.value, idx, 1.0j)
            else:
                num = probe(leaf.value, idx, 1.0)
            a = ana[idx]
            if abs(num - a) <= fd_floor:
                continue
            rel = abs(num - a) / max(abs(a), abs(num), 1e-6)
            worst = max(worst, rel)
    return worst


# --------------------------------------------------------------- checkpoints


def save_checkpoint(path, store: ParamStore) -> None:
    """KTNP: magic, u32 record count, then (u16 name len, name, u8 rank,
    rank*u32 dims, f64 LE payload) per parameter, in store order."""
    chunks = [b"KTNP", struct.pack("<I", len(store))]
    for name, tensor in store.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise DimensionOverflowError(f"parameter name too long: {name!r}")
        value = tensor.value
        if value.ndim > 0xFF:
            raise DimensionOverflowError(f"rank {value.ndim} exceeds format limit")
        if max(value.shape, default=0) > 0xFFFFFFFF:
            raise DimensionOverflowError(f"dimension of {name!r} exceeds u32")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.astype("<f8", copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict:
    """Read a KTNP file back into an ordered name -> float64 array mapping."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: shorter than the magic")
    if raw[:4] != b"KTNP":
        raise BadMagicError(f"{path}: expected magic KTNP, got {raw[:4]!r}")
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: header incomplete")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    out = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedPayloadError(f"{path}: truncated while reading {what}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n_elem = 1
        for d in shape:
            n_elem *= d
        if 8 * n_elem > _MAX_PAYLOAD_BYTES:
            raise DimensionOverflowError(f"{path}: record {name!r} shape {shape} out of range")
        payload = take(8 * n_elem, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        if name in out:
            raise FileFormatError(f"{path}: duplicate record {name!r}")
        out[name] = arr
    if pos != len(raw):
        raise FileFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
