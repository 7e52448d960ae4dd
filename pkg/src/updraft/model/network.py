"""Convolutional encoder-decoder producing the four SHASH parameter maps."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ValidationError
from .layers import BatchNorm, Conv, MaxPool, ReLU, Upsample

__all__ = ["ModelSpec", "UNet", "INPUT_MODES", "SKIP_STYLES", "prepare_input"]

INPUT_MODES = ("composite_2d", "levels_2d", "volume_3d")
SKIP_STYLES = ("unet", "unet3plus")
N_OUTPUTS = 4


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``n_levels`` is the number of reflectivity levels in the input volume;
    it sets the channel count for ``levels_2d`` and the depth axis for
    ``volume_3d``.  Pooling is horizontal only, so only H and W need to be
    divisible by ``2**depth``.
    """

    input_mode: str = "levels_2d"
    depth: int = 2
    base_filters: int = 8
    kernel_size: int = 3
    skip_style: str = "unet"
    batch_norm: bool = False
    l2_reg: float = 0.0
    n_levels: int = 12

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ValidationError(f"input_mode must be one of {INPUT_MODES}")
        if self.skip_style not in SKIP_STYLES:
            raise ValidationError(f"skip_style must be one of {SKIP_STYLES}")
        if not 1 <= self.depth <= 3:
            raise ValidationError("depth must be 1, 2 or 3")
        if self.base_filters < 1:
            raise ValidationError("base_filters must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            raise ValidationError("kernel_size must be a positive odd integer")
        if self.l2_reg < 0:
            raise ValidationError("l2_reg must be >= 0")
        if self.n_levels < 1:
            raise ValidationError("n_levels must be >= 1")

    @property
    def spatial_ndim(self):
        return 3 if self.input_mode == "volume_3d" else 2

    @property
    def in_channels(self):
        return self.n_levels if self.input_mode == "levels_2d" else 1

    def check_patch(self, h, w):
        m = 2**self.depth
        if h % m or w % m:
            raise ValidationError(f"patch {h}x{w} is not divisible by 2**depth = {m}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in fields})


def prepare_input(spec, x):
    """Turn scaled volumes ``(N, L, H, W)`` into the network's input layout."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValidationError(f"expected (N, L, H, W) volumes, got shape {x.shape}")
    if x.shape[1] != spec.n_levels:
        raise ValidationError(f"input has {x.shape[1]} levels, model expects {spec.n_levels}")
    spec.check_patch(*x.shape[2:])
    if spec.input_mode == "composite_2d":
        return x.max(axis=1, keepdims=True)
    if spec.input_mode == "volume_3d":
        return x[:, None]
    return x


class _Block:
    """Two (conv, [batch norm], ReLU) stages."""

    def __init__(self, c_in, c_out, spec, rng, dtype):
        nd = spec.spatial_ndim
        self.layers = []
        for c in (c_in, c_out):
            self.layers.append(Conv(c, c_out, spec.kernel_size, nd, rng, dtype))
            if spec.batch_norm:
                self.layers.append(BatchNorm(c_out, nd, dtype))
            self.layers.append(ReLU())

    def forward(self, x, train):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, d):
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d


class UNet:
    """U-Net (or U-Net3+ style full-scale skips) with manual backprop.

    Level ``i`` runs at horizontal resolution ``H / 2**i`` with
    ``base_filters * 2**i`` channels; the bottleneck sits at ``depth``.
    In ``unet`` style decoder level ``i`` sees the upsampled level below plus
    the encoder skip at ``i``.  In ``unet3plus`` style it sees every encoder
    level ``j <= i`` max-pooled down and every deeper decoder output (and
    the bottleneck) upsampled.
    """

    def __init__(self, spec, seed=0, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        nd = spec.spatial_ndim
        d = spec.depth
        ch = [spec.base_filters * 2**i for i in range(d + 1)]
        self.channels = ch

        self.enc = []
        c_prev = spec.in_channels
        for i in range(d):
            self.enc.append(_Block(c_prev, ch[i], spec, rng, dtype))
            c_prev = ch[i]
        self.pool = [MaxPool(2, nd) for _ in range(d)]
        self.bottleneck = _Block(ch[d - 1], ch[d], spec, rng, dtype)

        # decoder levels are built deepest-first; self.dec[i] is level i
        self.dec = [None] * d
        self.routes = [None] * d
        for i in reversed(range(d)):
            if spec.skip_style == "unet":
                deeper = ch[d] if i == d - 1 else ch[i + 1]
                sources = [("dec", i + 1, Upsample(2, nd)), ("enc", i, None)]
                c_in = deeper + ch[i]
            else:
                sources = []
                c_in = 0
                for j in range(i + 1):
                    sources.append(("enc", j, MaxPool(2 ** (i - j), nd)))
                    c_in += ch[j]
                for j in range(i + 1, d + 1):
                    sources.append(("dec", j, Upsample(2 ** (j - i), nd)))
                    c_in += ch[d] if j == d else ch[j]
            self.routes[i] = sources
            self.dec[i] = _Block(c_in, ch[i], spec, rng, dtype)

        head_in = ch[0] * (spec.n_levels if nd == 3 else 1)
        self.head = Conv(head_in, N_OUTPUTS, 1, 2, rng, dtype)

    # -- parameter plumbing ------------------------------------------------
    def _named_layers(self):
        for i, blk in enumerate(self.enc):
            for j, layer in enumerate(blk.layers):
                yield f"enc{i}.{j}", layer
        for j, layer in enumerate(self.bottleneck.layers):
            yield f"mid.{j}", layer
        for i, blk in enumerate(self.dec):
            for j, layer in enumerate(blk.layers):
                yield f"dec{i}.{j}", layer
        yield "head", self.head

    def parameters(self):
        """Ordered ``(name, array, grad)`` triples for every trainable tensor."""
        out = []
        for lname, layer in self._named_layers():
            for k in sorted(layer.params):
                out.append((f"{lname}.{k}", layer.params[k], layer.grads[k]))
        return out

    def zero_grad(self):
        for _, layer in self._named_layers():
            layer.zero_grad()

    def state_dict(self):
        """Deep copy of weights and batch-norm running statistics."""
        state = {}
        for lname, layer in self._named_layers():
            for k, v in layer.params.items():
                state[f"{lname}.{k}"] = v.copy()
            if isinstance(layer, BatchNorm):
                state[f"{lname}.running_mean"] = layer.running_mean.copy()
                state[f"{lname}.running_var"] = layer.running_var.copy()
        return state

    def load_state_dict(self, state):
        for lname, layer in self._named_layers():
            for k in layer.params:
                arr = np.asarray(state[f"{lname}.{k}"], dtype=self.dtype)
                if arr.shape != layer.params[k].shape:
                    raise ValidationError(f"{lname}.{k}: shape {arr.shape} != {layer.params[k].shape}")
                layer.params[k] = arr.copy()
            if isinstance(layer, BatchNorm):
                layer.running_mean = np.asarray(state[f"{lname}.running_mean"], dtype=self.dtype).copy()
                layer.running_var = np.asarray(state[f"{lname}.running_var"], dtype=self.dtype).copy()
        self.zero_grad()

    def l2_penalty(self):
        """Sum of squared convolution kernels (biases and norms excluded)."""
        return sum(float(np.sum(layer.params["W"] ** 2)) for _, layer in self._named_layers() if isinstance(layer, Conv))

    def add_l2_grad(self, coef):
        for _, layer in self._named_layers():
            if isinstance(layer, Conv):
                layer.grads["W"] += 2.0 * coef * layer.params["W"]

    # -- passes --------------------------------------------------------------
    def forward(self, x, train=False):
        """Map network input ``(N, C, [L,] H, W)`` to raw maps ``(N, 4, H, W)``."""
        x = np.asarray(x, dtype=self.dtype)
        d = self.spec.depth
        skips = []
        h = x
        for i in range(d):
            h = self.enc[i].forward(h, train)
            skips.append(h)
            h = self.pool[i].forward(h, train)
        outs = {d: self.bottleneck.forward(h, train)}
        self._cat_sizes = [None] * d
        for i in reversed(range(d)):
            parts = []
            for kind, j, op in self.routes[i]:
                src = skips[j] if kind == "enc" else outs[j]
                parts.append(op.forward(src, train) if op is not None else src)
            self._cat_sizes[i] = [p.shape[1] for p in parts]
            outs[i] = self.dec[i].forward(np.concatenate(parts, axis=1), train)
        h = outs[0]
        if self.spec.spatial_ndim == 3:
            n, c, lv, hh, ww = h.shape
            h = h.reshape(n, c * lv, hh, ww)
        return self.head.forward(h, train)

    def backward(self, dout):
        """Backpropagate ``dL/d(raw maps)``; parameter grads accumulate."""
        d = self.spec.depth
        g = self.head.backward(np.asarray(dout, dtype=self.dtype))
        if self.spec.spatial_ndim == 3:
            n = g.shape[0]
            g = g.reshape(n, self.channels[0], self.spec.n_levels, *g.shape[2:])
        d_out = {0: g}
        d_skip = [None] * d
        for i in range(d):
            dcat = self.dec[i].backward(d_out.pop(i))
            pieces = np.split(dcat, np.cumsum(self._cat_sizes[i])[:-1], axis=1)
            for (kind, j, op), piece in zip(self.routes[i], pieces):
                grad = op.backward(piece) if op is not None else piece
                if kind == "enc":
                    d_skip[j] = grad if d_skip[j] is None else d_skip[j] + grad
                else:
                    d_out[j] = grad if j not in d_out else d_out[j] + grad
        # every deeper output's consumers are processed before it is popped
        h = self.bottleneck.backward(d_out.pop(d))
        for i in reversed(range(d)):
            h = self.pool[i].backward(h)
            if d_skip[i] is not None:
                h = h + d_skip[i]
            h = self.enc[i].backward(h)
        return h
