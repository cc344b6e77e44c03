"""Convolutional position regressor with hand-rolled reverse-mode gradients.

The regressor maps a real-stacked channel matrix (2, n_antennas,
n_subcarriers) to a 2D world position. Architecture: a stack of residual
blocks (two same-padded convolutions with an activation between them, added
to a skip path) followed by fully connected layers. The skip path is the
identity when the channel counts match and a 1x1 projection otherwise; there
is no activation after the addition, so zeroing every convolution weight
reduces a block to the identity.

All parameters live in one flat float vector. Besides the usual summed
gradient the module exposes per-sample parameter gradients and a fused
"per-sample gradient dotted with a reference vector" path; the latter is
what the meta-weighting training loop calls every iteration, and it never
materializes the (batch, n_params) matrix.

Numerics: training runs in float32 by default; gradient-check tests
instantiate everything in float64. Losses are computed and returned in
float64 regardless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ArchSpec",
    "ParamLayout",
    "NumericalError",
    "init_params",
    "n_params",
    "forward",
    "mse_loss",
    "mse_and_grad",
    "per_sample_losses_and_grads",
    "per_sample_grad_dots",
    "sgd_step",
]


class NumericalError(FloatingPointError):
    """Non-finite values appeared while evaluating the network."""


@dataclass(frozen=True)
class ArchSpec:
    """Shape of the position regressor.

    Attributes:
        input_shape: (2, n_antennas, n_subcarriers) of the stacked input.
        conv_channels: output channel count of each residual block.
        kernel_size: odd square kernel edge for the block convolutions.
        fc_widths: fully connected widths; the last entry must be 2.
        activation: "relu" or "tanh".
        output_scale: fixed gain on the final layer. Positions span tens of
            metres while fan-in init keeps activations near unity, so the
            head would otherwise need weights far from their init scale;
            the constant gain keeps every layer near unit magnitude.
    """

    input_shape: tuple[int, int, int]
    conv_channels: tuple[int, ...] = (4, 8)
    kernel_size: int = 3
    fc_widths: tuple[int, ...] = (128, 64, 2)
    activation: str = "relu"
    output_scale: float = 50.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        object.__setattr__(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        if len(self.input_shape) != 3 or self.input_shape[0] != 2:
            raise ValueError("arch.input_shape must be (2, n_antennas, n_subcarriers)")
        if any(d < 1 for d in self.input_shape[1:]):
            raise ValueError("arch.input_shape spatial dims must be >= 1")
        if len(self.conv_channels) < 1 or any(c < 1 for c in self.conv_channels):
            raise ValueError("arch.conv_channels must be a non-empty tuple of positive ints")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"arch.kernel_size must be odd, got {self.kernel_size}")
        if len(self.fc_widths) < 1 or self.fc_widths[-1] != 2:
            raise ValueError("arch.fc_widths must end with the 2 output coordinates")
        if any(w < 1 for w in self.fc_widths):
            raise ValueError("arch.fc_widths must be positive")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"arch.activation must be 'relu' or 'tanh', got {self.activation!r}")
        if not (np.isfinite(self.output_scale) and self.output_scale > 0):
            raise ValueError(f"arch.output_scale must be positive, got {self.output_scale}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "input_shape": list(self.input_shape),
                "conv_channels": list(self.conv_channels),
                "kernel_size": self.kernel_size,
                "fc_widths": list(self.fc_widths),
                "activation": self.activation,
                "output_scale": self.output_scale,
            }
        )

    @staticmethod
    def from_json(text: str) -> "ArchSpec":
        d = json.loads(text)
        return ArchSpec(
            input_shape=tuple(d["input_shape"]),
            conv_channels=tuple(d["conv_channels"]),
            kernel_size=int(d["kernel_size"]),
            fc_widths=tuple(d["fc_widths"]),
            activation=d["activation"],
            output_scale=float(d.get("output_scale", 50.0)),
        )


class ParamLayout:
    """Names, shapes, and flat-vector offsets of every parameter tensor."""

    def __init__(self, arch: ArchSpec):
        self.arch = arch
        self.entries: list[tuple[str, tuple[int, ...], int, int]] = []
        off = 0
        c_in = arch.input_shape[0]
        k = arch.kernel_size
        for i, c_out in enumerate(arch.conv_channels):
            off = self._add(f"block{i}.conv1.w", (c_out, c_in, k, k), off)
            off = self._add(f"block{i}.conv1.b", (c_out,), off)
            off = self._add(f"block{i}.conv2.w", (c_out, c_out, k, k), off)
            off = self._add(f"block{i}.conv2.b", (c_out,), off)
            if c_in != c_out:
                off = self._add(f"block{i}.proj.w", (c_out, c_in), off)
            c_in = c_out
        flat = c_in * arch.input_shape[1] * arch.input_shape[2]
        f_in = flat
        for j, f_out in enumerate(arch.fc_widths):
            off = self._add(f"fc{j}.w", (f_out, f_in), off)
            off = self._add(f"fc{j}.b", (f_out,), off)
            f_in = f_out
        self.size = off
        self._index = {name: (shape, a, b) for name, shape, a, b in self.entries}

    def _add(self, name: str, shape: tuple[int, ...], off: int) -> int:
        n = int(np.prod(shape))
        self.entries.append((name, shape, off, off + n))
        return off + n

    def view(self, params: np.ndarray, name: str) -> np.ndarray:
        shape, a, b = self._index[name]
        return params[a:b].reshape(shape)

    def slot(self, name: str) -> tuple[int, int]:
        _, a, b = self._index[name]
        return a, b


_LAYOUT_CACHE: dict[ArchSpec, ParamLayout] = {}


def layout_for(arch: ArchSpec) -> ParamLayout:
    lay = _LAYOUT_CACHE.get(arch)
    if lay is None:
        lay = _LAYOUT_CACHE[arch] = ParamLayout(arch)
    return lay


def n_params(arch: ArchSpec) -> int:
    return layout_for(arch).size


def init_params(
    arch: ArchSpec, rng: np.random.Generator, dtype=np.float32
) -> np.ndarray:
    """Fan-in scaled uniform weights, zero biases, as one flat vector."""
    lay = layout_for(arch)
    params = np.zeros(lay.size, dtype=np.float64)
    for name, shape, a, b in lay.entries:
        if name.endswith(".b"):
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        params[a:b] = rng.uniform(-bound, bound, size=b - a)
    return params.astype(dtype)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    return 1.0 - a * a


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, H*W) patches, same zero padding, stride 1."""
    if k == 1:
        n, c, h, w = x.shape
        return x.reshape(n, c, h * w)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)
    n, c, h, w = x.shape
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, h * w)


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    """Same-padded stride-1 convolution. Returns (out, patches)."""
    n, _, h, wd = x.shape
    cols = _im2col(x, w.shape[-1])
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    if b is not None:
        out = out + b[:, None]
    return out.reshape(n, w.shape[0], h, wd), cols

def _conv_input_grad(delta: np.ndarray, w: np.ndarray) -> np.ndarray:
    # gradient w.r.t. the conv input: same conv with the transposed,
    # spatially flipped kernel (valid for odd kernels, stride 1)
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    out, _ = _conv(delta, wt, None)
    return out


def _forward_pass(arch: ArchSpec, params: np.ndarray, x: np.ndarray, keep: bool):
    """Run the network. Returns (output, caches or None)."""
    lay = layout_for(arch)
    act = arch.activation
    cur = x
    blocks = []
    c_in = arch.input_shape[0]
    for i, c_out in enumerate(arch.conv_channels):
        w1 = lay.view(params, f"block{i}.conv1.w")
        b1 = lay.view(params, f"block{i}.conv1.b")
        w2 = lay.view(params, f"block{i}.conv2.w")
        b2 = lay.view(params, f"block{i}.conv2.b")
        z1, cols1 = _conv(cur, w1, b1)
        a1 = _act(z1, act)
        z2, cols2 = _conv(a1, w2, b2)
        if c_in != c_out:
            wp = lay.view(params, f"block{i}.proj.w")
            n, _, h, wd = cur.shape
            skip = np.matmul(wp, cur.reshape(n, c_in, h * wd)).reshape(n, c_out, h, wd)
        else:
            skip = cur
        nxt = skip + z2
        if keep:
            blocks.append((cur, cols1, z1, a1, cols2))
        cur = nxt
        c_in = c_out
    n = cur.shape[0]
    flat = cur.reshape(n, -1)
    fcs = []
    for j in range(len(arch.fc_widths)):
        w = lay.view(params, f"fc{j}.w")
        b = lay.view(params, f"fc{j}.b")
        z = flat @ w.T + b
        if keep:
            fcs.append((flat, z))
        flat = _act(z, act) if j < len(arch.fc_widths) - 1 else z
    flat = flat * flat.dtype.type(arch.output_scale)
    return flat, ((blocks, fcs) if keep else None)


def forward(arch: ArchSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Predict positions for a batch of stacked channel matrices.

    Accepts (N, 2, n_antennas, n_subcarriers) or a single unbatched sample.
    Inputs are cast to the parameter dtype.
    """
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    x = x.astype(params.dtype, copy=False)
    out, _ = _forward_pass(arch, params, x, keep=False)
    return out[0] if single else out


def _locate_nonfinite(arch: ArchSpec, params: np.ndarray, x: np.ndarray) -> str:
    """Re-run the forward pass naming the first layer with non-finite output."""
    if not np.all(np.isfinite(params)):
        return "parameters"
    if not np.all(np.isfinite(x)):
        return "input"
    lay = layout_for(arch)
    act = arch.activation
    cur = x
    c_in = arch.input_shape[0]
    for i, c_out in enumerate(arch.conv_channels):
        z1, _ = _conv(cur, lay.view(params, f"block{i}.conv1.w"), lay.view(params, f"block{i}.conv1.b"))
        if not np.all(np.isfinite(z1)):
            return f"block{i}.conv1"
        a1 = _act(z1, act)
        z2, _ = _conv(a1, lay.view(params, f"block{i}.conv2.w"), lay.view(params, f"block{i}.conv2.b"))
        if not np.all(np.isfinite(z2)):
            return f"block{i}.conv2"
        if c_in != c_out:
            n, _, h, wd = cur.shape
            skip = np.matmul(lay.view(params, f"block{i}.proj.w"), cur.reshape(n, c_in, h * wd))
            skip = skip.reshape(n, c_out, h, wd)
            if not np.all(np.isfinite(skip)):
                return f"block{i}.proj"
        else:
            skip = cur
        cur = skip + z2
        c_in = c_out
    flat = cur.reshape(cur.shape[0], -1)
    for j in range(len(arch.fc_widths)):
        z = flat @ lay.view(params, f"fc{j}.w").T + lay.view(params, f"fc{j}.b")
        if not np.all(np.isfinite(z)):
            return f"fc{j}"
        flat = _act(z, act) if j < len(arch.fc_widths) - 1 else z
    return "output"


def _backward_tapes(arch: ArchSpec, params: np.ndarray, caches, dout: np.ndarray):
    """Propagate dout to every layer. Yields (kind, names, delta, inputs).

    kind "conv": delta (N, c_out, P), inputs (N, c_in*k*k, P)
    kind "proj": delta (N, c_out, P), inputs (N, c_in, P)
    kind "fc":   delta (N, f_out),   inputs (N, f_in)
    """
    lay = layout_for(arch)
    act = arch.activation
    blocks, fcs = caches
    tapes = []
    d = dout * dout.dtype.type(arch.output_scale)
    for j in range(len(arch.fc_widths) - 1, -1, -1):
        fin, z = fcs[j]
        if j < len(arch.fc_widths) - 1:
            d = d * _act_grad(z, _act(z, act), act)
        tapes.append(("fc", f"fc{j}.w", f"fc{j}.b", d, fin))
        d = d @ lay.view(params, f"fc{j}.w")
    # reshape into the last block's output grid
    last_c = arch.conv_channels[-1]
    h, wd = arch.input_shape[1], arch.input_shape[2]
    dy = d.reshape(d.shape[0], last_c, h, wd)
    chans = (arch.input_shape[0],) + arch.conv_channels
    for i in range(len(arch.conv_channels) - 1, -1, -1):
        x_in, cols1, z1, a1, cols2 = blocks[i]
        c_in, c_out = chans[i], chans[i + 1]
        n = dy.shape[0]
        dflat = dy.reshape(n, c_out, h * wd)
        tapes.append(("conv", f"block{i}.conv2.w", f"block{i}.conv2.b", dflat, cols2))
        da1 = _conv_input_grad(dy, lay.view(params, f"block{i}.conv2.w"))
        dz1 = da1 * _act_grad(z1, a1, act)
        tapes.append(("conv", f"block{i}.conv1.w", f"block{i}.conv1.b",
                      dz1.reshape(n, c_out, h * wd), cols1))
        dx = _conv_input_grad(dz1, lay.view(params, f"block{i}.conv1.w"))
        if c_in != c_out:
            xf = x_in.reshape(n, c_in, h * wd)
            tapes.append(("proj", f"block{i}.proj.w", None, dflat, xf))
            wp = lay.view(params, f"block{i}.proj.w")
            dx = dx + np.matmul(wp.T, dflat).reshape(n, c_in, h, wd)
        else:
            dx = dx + dy
        dy = dx
    return tapes


def _tapes_to_flat(lay: ParamLayout, tapes, dtype) -> np.ndarray:
    g = np.zeros(lay.size, dtype=dtype)
    for kind, wname, bname, delta, inputs in tapes:
        a, b = lay.slot(wname)
        if kind == "fc":
            g[a:b] = (delta.T @ inputs).ravel()
            ba, bb = lay.slot(bname)
            g[ba:bb] = delta.sum(axis=0)
        else:
            co = delta.shape[1]
            dm = delta.transpose(1, 0, 2).reshape(co, -1)
            im = inputs.transpose(1, 0, 2).reshape(inputs.shape[1], -1)
            g[a:b] = (dm @ im.T).ravel()
            if bname is not None:
                ba, bb = lay.slot(bname)
                g[ba:bb] = delta.sum(axis=(0, 2))
    return g


def _tapes_to_per_sample(lay: ParamLayout, tapes, n: int, dtype) -> np.ndarray:
    g = np.zeros((n, lay.size), dtype=dtype)
    for kind, wname, bname, delta, inputs in tapes:
        a, b = lay.slot(wname)
        if kind == "fc":
            g[:, a:b] = np.einsum("no,ni->noi", delta, inputs).reshape(n, -1)
            ba, bb = lay.slot(bname)
            g[:, ba:bb] = delta
        else:
            g[:, a:b] = np.einsum("nop,nip->noi", delta, inputs).reshape(n, -1)
            if bname is not None:
                ba, bb = lay.slot(bname)
                g[:, ba:bb] = delta.sum(axis=2)
    return g


def _tapes_dot_ref(lay: ParamLayout, tapes, ref: np.ndarray, n: int) -> np.ndarray:
    dots = np.zeros(n, dtype=np.float64)
    for kind, wname, bname, delta, inputs in tapes:
        wref = lay.view(ref, wname)
        if kind == "fc":
            dots += np.einsum("no,no->n", delta, inputs @ wref.T, dtype=np.float64)
            dots += (delta @ lay.view(ref, bname)).astype(np.float64)
        else:
            proj = np.matmul(wref.reshape(wref.shape[0], -1), inputs)  # (N, c_out, P)
            dots += np.einsum("nop,nop->n", delta, proj, dtype=np.float64)
            if bname is not None:
                dots += np.einsum("nop,o->n", delta, lay.view(ref, bname), dtype=np.float64)
    return dots


def _prep_batch(params, x, targets):
    x = np.asarray(x).astype(params.dtype, copy=False)
    y = np.asarray(targets).astype(params.dtype, copy=False)
    if x.ndim == 3:
        x = x[None]
    if y.ndim == 1:
        y = y[None]
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"batch mismatch: {x.shape[0]} inputs vs {y.shape[0]} targets")
    return x, y


def mse_loss(arch: ArchSpec, params: np.ndarray, x, targets) -> float:
    """Mean over the batch of the squared position error."""
    x, y = _prep_batch(params, x, targets)
    if x.shape[0] == 0:
        return 0.0
    out, _ = _forward_pass(arch, params, x, keep=False)
    r = out.astype(np.float64) - y.astype(np.float64)
    return float(np.mean(np.sum(r * r, axis=1)))


def mse_and_grad(
    arch: ArchSpec,
    params: np.ndarray,
    x,
    targets,
    *,
    weights: np.ndarray | None = None,
    denom: float | None = None,
):
    """Loss and flat gradient of ``sum_v w_v ||F(x_v) - y_v||^2 / denom``.

    ``weights`` defaults to ones and ``denom`` to the batch size, which gives
    the plain mean squared error. Per-sample weights scale each sample's
    residual seed before backpropagation, so the returned gradient equals the
    weighted sum of per-sample gradients exactly.
    """
    x, y = _prep_batch(params, x, targets)
    n = x.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(params)
    if denom is None:
        denom = float(n)
    out, caches = _forward_pass(arch, params, x, keep=True)
    r = out - y
    per = np.sum(r.astype(np.float64) ** 2, axis=1)
    if weights is None:
        loss = float(per.sum() / denom)
        dout = (2.0 / denom) * r
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError(f"weights must have shape ({n},), got {w.shape}")
        loss = float((w * per).sum() / denom)
        dout = (2.0 / denom) * (w[:, None].astype(params.dtype) * r)
    if not np.isfinite(loss):
        raise NumericalError(
            f"non-finite values while evaluating the loss (first bad layer: "
            f"{_locate_nonfinite(arch, params, x)})"
        )
    tapes = _backward_tapes(arch, params, caches, dout.astype(params.dtype, copy=False))
    return loss, _tapes_to_flat(layout_for(arch), tapes, params.dtype)


def per_sample_losses_and_grads(arch: ArchSpec, params: np.ndarray, x, targets):
    """Unnormalized per-sample losses g_v and gradients d g_v / d params.

    Returns ``(losses (N,), grads (N, n_params))``. Materializes the full
    per-sample gradient matrix; intended for tests and small batches.
    """
    x, y = _prep_batch(params, x, targets)
    n = x.shape[0]
    out, caches = _forward_pass(arch, params, x, keep=True)
    r = out - y
    per = np.sum(r.astype(np.float64) ** 2, axis=1)
    tapes = _backward_tapes(arch, params, caches, (2.0 * r).astype(params.dtype))
    return per, _tapes_to_per_sample(layout_for(arch), tapes, n, params.dtype)


def per_sample_grad_dots(arch: ArchSpec, params: np.ndarray, x, targets, ref: np.ndarray):
    """Per-sample losses and ``<d g_v / d params, ref>`` without materialization.

    ``ref`` is a flat vector of length ``n_params`` (typically the validation
    gradient). Dots are accumulated in float64.
    """
    x, y = _prep_batch(params, x, targets)
    n = x.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros(0)
    if ref.shape != params.shape:
        raise ValueError("reference vector length must match the parameter count")
    out, caches = _forward_pass(arch, params, x, keep=True)
    r = out - y
    per = np.sum(r.astype(np.float64) ** 2, axis=1)
    if not np.all(np.isfinite(per)):
        raise NumericalError(
            f"non-finite values while evaluating per-sample losses (first bad layer: "
            f"{_locate_nonfinite(arch, params, x)})"
        )
    tapes = _backward_tapes(arch, params, caches, (2.0 * r).astype(params.dtype))
    return per, _tapes_dot_ref(layout_for(arch), tapes, ref, n)


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """One plain gradient-descent step; returns a new parameter vector."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if grad.shape != params.shape:
        raise ValueError("gradient length must match the parameter count")
    return params - params.dtype.type(lr) * grad.astype(params.dtype, copy=False)
