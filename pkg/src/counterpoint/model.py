"""The deep convolutional network mapping a masked score to per-cell pitch distributions.

Layer l computes a^l = BN(W^l * h^{l-1}); hidden layers pass through ReLU, and every
second layer deep inside the stack adds a skip connection from two levels below before
the ReLU. The final layer keeps its raw batch-normalized activations, which are then
softmaxed over pitch independently at every (voice, time) cell.
"""

from __future__ import annotations

import json
import struct

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .pianoroll import apply_mask, apply_mask_batch

CHECKPOINT_MAGIC = b"CPNT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs. Full scale is 64 layers x 128 channels; the desk default
    is sized to train on a laptop CPU in well under an hour."""

    num_layers: int = 16
    num_channels: int = 64
    instruments: int = 4
    pitches: int = 53
    kernel_size: tuple = (3, 3)

    def __post_init__(self):
        if self.num_layers < 2:
            raise ValueError("need at least 2 layers")
        if self.num_channels < 1:
            raise ValueError("need at least 1 channel")
        kt, kp = self.kernel_size
        if kt % 2 == 0 or kp % 2 == 0:
            raise ValueError("kernel spans must be odd")

    def layer_channels(self, layer):
        """(in, out) channel counts for 1-based layer index."""
        cin = 2 * self.instruments if layer == 1 else self.num_channels
        cout = self.instruments if layer == self.num_layers else self.num_channels
        return cin, cout


FULL_SCALE = ModelConfig(num_layers=64, num_channels=128)
DESK_SCALE = ModelConfig(num_layers=16, num_channels=64)


@dataclass
class LayerParameters:
    kernels: nd.Tensor
    norm: nd.BatchNormState


@dataclass
class ModelParameters:
    config: ModelConfig
    layers: list

    def named_tensors(self):
        """All trainable tensors, in a stable order."""
        for l, layer in enumerate(self.layers, start=1):
            yield f"layer{l}.kernels", layer.kernels
            yield f"layer{l}.gamma", layer.norm.gamma
            yield f"layer{l}.beta", layer.norm.beta

    def named_arrays(self):
        """Trainable tensors plus running statistics, for checkpointing."""
        for name, t in self.named_tensors():
            yield name, t.data
        for l, layer in enumerate(self.layers, start=1):
            yield f"layer{l}.running_mean", layer.norm.running_mean
            yield f"layer{l}.running_var", layer.norm.running_var

    @property
    def dtype(self):
        return self.layers[0].kernels.data.dtype

    def plan(self):
        """Fresh folded forward plan; cheap to build, safe under parameter updates."""
        return InferencePlan(self)


def init_parameters(config, rng, dtype=np.float64):
    """Fan-in scaled normal init for kernels (ReLU gain); identity batch norm."""
    layers = []
    kt, kp = config.kernel_size
    for l in range(1, config.num_layers + 1):
        cin, cout = config.layer_channels(l)
        std = np.sqrt(2.0 / (cin * kt * kp))
        w = rng.normal(0.0, std, size=(cout, cin, kt, kp)).astype(dtype)
        layers.append(LayerParameters(
            kernels=nd.parameter(w),
            norm=nd.batch_norm_state(cout, dtype=dtype),
        ))
    return ModelParameters(config=config, layers=layers)


def _has_residual(layer, num_layers):
    return 3 < layer < num_layers - 1 and layer % 2 == 0


def forward_logits(params, masked_input, mode="infer"):
    """Tape-connected forward pass; returns pre-softmax activations (B, I, T, P).

    Accepts (2I, T, P) or (B, 2I, T, P); activations travel channels-last internally
    and are converted back at the head.
    """
    config = params.config
    x = masked_input if isinstance(masked_input, nd.Tensor) else nd.constant(masked_input)
    if x.data.shape[-3] != 2 * config.instruments:
        raise ValueError(f"masked input must have {2 * config.instruments} channels, "
                         f"got {x.data.shape[-3]}")
    if x.data.ndim not in (3, 4):
        raise ValueError(f"masked input must have 3 or 4 axes, got {x.data.ndim}")
    batched = x.data.ndim == 4
    h_prev = nd.to_channels_last(x if batched else nd._expand_batch(x))
    h_prev2 = None
    for l, layer in enumerate(params.layers, start=1):
        a = nd.batch_norm_cl(nd.conv2d_cl(h_prev, layer.kernels), layer.norm, mode=mode)
        if l == config.num_layers:
            h = a
        elif _has_residual(l, config.num_layers):
            h = nd.relu(nd.add(a, h_prev2))
        else:
            h = nd.relu(a)
        h_prev2, h_prev = h_prev, h
    out = nd.to_channels_first(h_prev)
    return out if batched else nd._squeeze_batch(out, False)


def forward(params, config, masked_input, mode="infer"):
    """Per-cell pitch distributions for a masked input; rows sum to one over pitch."""
    if config != params.config:
        raise ValueError("config does not match parameters")
    logits = forward_logits(params, masked_input, mode=mode)
    return nd.softmax_over_last(logits).data


def conditionals(params, roll, mask, mode="infer"):
    """Distributions p(pitch | observed cells) for every cell of the roll.

    Cells already inside the context get distributions too; callers that only care
    about the complement simply ignore them.
    """
    return forward(params, params.config, apply_mask(roll, mask), mode=mode)


class InferencePlan:
    """Frozen-parameter forward pass for samplers and evaluation.

    Inference-mode normalization is an affine map per channel, so it folds into the
    convolution weights: one GEMM plus a bias per layer instead of a conv followed by
    four normalization passes. Results match the tape path to float rounding.
    """

    def __init__(self, params):
        config = params.config
        self.config = config
        self.layers = []
        for layer in params.layers:
            norm = layer.norm
            scale = norm.gamma.data / np.sqrt(norm.running_var + norm.epsilon)
            bias = norm.beta.data - norm.running_mean * scale
            w = layer.kernels.data * scale[:, None, None, None]
            self.layers.append((nd.kernel_matrix(w), bias, w.shape[2], w.shape[3]))
        # Time receptive radius of the whole stack; outputs at time t depend on
        # inputs no further than this many steps away.
        self.time_radius = sum(kt // 2 for _, _, kt, _ in self.layers)

    def _run(self, x):
        """Plan forward on channels-last activations of any (B, T', P, C) shape."""
        num_layers = self.config.num_layers
        h_prev, h_prev2 = x, None
        b, t, p, _ = x.shape
        for l, (wmat, bias, kt, kp) in enumerate(self.layers, start=1):
            a = (nd.im2col(h_prev, kt, kp) @ wmat).reshape(b, t, p, -1)
            a += bias
            if l == num_layers:
                h = a
            elif _has_residual(l, num_layers):
                a += h_prev2
                h = np.maximum(a, 0.0, out=a)
            else:
                h = np.maximum(a, 0.0, out=a)
            h_prev2, h_prev = h_prev, h
        return h_prev

    def probabilities(self, masked_cl):
        """(B, T, P, 2I) masked input to (B, I, T, P) pitch distributions."""
        out = self._run_chunked(masked_cl)
        logits = np.moveaxis(out, -1, 1)
        return nd._softmax(logits)

    def _run_chunked(self, x, budget_bytes=1 << 26):
        """Split the batch so the largest im2col buffer stays within budget."""
        b, t, p, _ = x.shape
        # wmat is (kt*kp*C_in, C_out); its row count is the im2col width.
        widest = max(wmat.shape[0] for wmat, _, _, _ in self.layers)
        per_row = widest * t * p * x.dtype.itemsize
        chunk = max(1, budget_bytes // max(per_row, 1))
        if chunk >= b:
            return self._run(x)
        parts = [self._run(x[s:s + chunk]) for s in range(0, b, chunk)]
        return np.concatenate(parts)

    def _run_slab(self, slab, valid):
        """Plan forward on boundary-aware slabs.

        valid (B, S) marks slab columns that lie inside the real roll. Zeroing the
        activations outside after every layer reproduces the full computation, where
        "same" padding reads zeros beyond the roll at each layer, never activations.
        """
        num_layers = self.config.num_layers
        gate = valid[:, :, None, None]
        h_prev = slab * gate
        h_prev2 = None
        b, s, p, _ = slab.shape
        for l, (wmat, bias, kt, kp) in enumerate(self.layers, start=1):
            a = (nd.im2col(h_prev, kt, kp) @ wmat).reshape(b, s, p, -1)
            a += bias
            if _has_residual(l, num_layers):
                a += h_prev2
            if l != num_layers:
                np.maximum(a, 0.0, out=a)
                a *= gate
            h_prev2, h_prev = h_prev, a
        return h_prev

    def column_probabilities(self, masked_cl, t_idx):
        """Pitch distributions (B, I, P) at one time column per batch row.

        Only a slab of 2 * time_radius + 1 columns around each target influences its
        output, so the forward pass runs on gathered slabs when that is narrower
        than the full roll.
        """
        b, t, p, c = masked_cl.shape
        t_idx = np.asarray(t_idx)
        r = self.time_radius
        span = 2 * r + 1
        if span >= t:
            out = self._run_chunked(masked_cl)
            center = out[np.arange(b), t_idx]  # (B, P, I)
        else:
            offsets = t_idx[:, None] + (np.arange(span)[None, :] - r)
            valid = (offsets >= 0) & (offsets < t)
            gather = np.clip(offsets, 0, t - 1)
            slab = masked_cl[np.arange(b)[:, None], gather]  # (B, span, P, C)
            out = self._run_slab(slab, valid)
            center = out[:, r]  # (B, P, I)
        logits = np.moveaxis(center, -1, 1)  # (B, I, P)
        return nd._softmax(logits)


def conditionals_batch(params, rolls, masks, mode="infer"):
    """Batched conditionals on plain arrays: (B, I, T, P) and (B, I, T).

    Inference mode runs the folded fast path; train mode stays on the tape.
    """
    if mode == "infer":
        plan = params.plan()
        masked = apply_mask_batch(rolls, masks, dtype=params.dtype, channels_last=True)
        return plan.probabilities(masked)
    masked = apply_mask_batch(rolls, masks, dtype=params.dtype)
    logits = forward_logits(params, masked, mode=mode)
    return nd._softmax(logits.data)


def conditionals_at(params, rolls, masks, t_idx, plan=None):
    """Per-voice conditionals (B, I, P) at one time column per batch row.

    Semantically identical to slicing conditionals_batch at the given columns but
    runs on receptive-field slabs, which is what makes cell-at-a-time sampling and
    evaluation affordable.
    """
    plan = plan or params.plan()
    masked = apply_mask_batch(rolls, masks, dtype=params.dtype, channels_last=True)
    return plan.column_probabilities(masked, t_idx)


def save_checkpoint(params, path):
    """Versioned container: JSON header plus raw little-endian tensor payload."""
    entries = []
    payload = bytearray()
    for name, arr in params.named_arrays():
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": len(payload),
            "length": len(raw),
        })
        payload += raw
    c = params.config
    header = json.dumps({
        "config": {
            "num_layers": c.num_layers,
            "num_channels": c.num_channels,
            "instruments": c.instruments,
            "pitches": c.pitches,
            "kernel_size": list(c.kernel_size),
        },
        "tensors": entries,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen])
    payload = blob[12 + hlen:]

    arrays = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["length"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<"))
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"])

    cfg = header["config"]
    config = ModelConfig(
        num_layers=cfg["num_layers"],
        num_channels=cfg["num_channels"],
        instruments=cfg["instruments"],
        pitches=cfg["pitches"],
        kernel_size=tuple(cfg["kernel_size"]),
    )
    layers = []
    for l in range(1, config.num_layers + 1):
        norm = nd.BatchNormState(
            gamma=nd.parameter(arrays[f"layer{l}.gamma"]),
            beta=nd.parameter(arrays[f"layer{l}.beta"]),
            running_mean=arrays[f"layer{l}.running_mean"].copy(),
            running_var=arrays[f"layer{l}.running_var"].copy(),
        )
        layers.append(LayerParameters(kernels=nd.parameter(arrays[f"layer{l}.kernels"]),
                                      norm=norm))
    return ModelParameters(config=config, layers=layers)
