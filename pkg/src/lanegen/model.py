"""Lane prediction network: convolutional backbone, transformer encoder,
decoupled-attention decoder over hierarchical queries, and the prediction
heads (centerline points, divider offsets, object/no-object class).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadResolution
from .nn import (
    MLP,
    Conv2d,
    Dropout,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    sinusoidal_positions_2d,
    trunc_normal,
)
from .raster import RasterTensor
from .tensor import Tensor, concat

BACKBONE_STAGES = 5  # five stride-2 stages: output is H/32 x W/32


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_heads: int = 8
    ffn_dim: int = 512
    n_encoder_layers: int = 6
    n_decoder_layers: int = 6
    n_queries: int = 50  # one-to-one group
    n_o2m_queries: int = 150  # one-to-many group (0 disables)
    m_points: int = 20
    backbone_width: int = 16
    dropout: float = 0.1
    extent: float = 60.0
    seed: int = 0


@dataclass
class LanePrediction:
    """Per-tile network output: N lane candidates in tile-local meters.

    Dividers derive from the centerline and the offsets, so
    ``left = centerlines + offsets`` and ``right = centerlines - offsets``
    hold by construction.
    """

    centerlines: np.ndarray  # (N, M, 2)
    offsets: np.ndarray  # (N, M, 2)
    class_logits: np.ndarray  # (N, 2) columns [no_object, object]

    @property
    def left(self) -> np.ndarray:
        return self.centerlines + self.offsets

    @property
    def right(self) -> np.ndarray:
        return self.centerlines - self.offsets

    @property
    def scores(self) -> np.ndarray:
        """Object probability per instance (softmax over the two classes)."""
        z = self.class_logits - self.class_logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e[:, 1] / e.sum(axis=1)

    def stacked(self) -> np.ndarray:
        """(N, M, 6) with columns [cx, cy, lx, ly, rx, ry]."""
        return np.concatenate([self.centerlines, self.left, self.right], axis=2)


class Backbone(Module):
    """Five stride-2 conv stages; channels double (capped) from ``width``."""

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator):
        super().__init__()
        chans = [width, 2 * width, 4 * width, 8 * width, 8 * width]
        self.stages = []
        c_prev = in_channels
        for c in chans:
            self.stages.append(Conv2d(c_prev, c, 3, rng, stride=2, pad=1))
            c_prev = c
        self.out_channels = c_prev

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        if h % 32 != 0 or w % 32 != 0:
            raise BadResolution(f"raster {h}x{w} not divisible by 32")
        for conv in self.stages:
            x = conv(x).relu()
        return x


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, cfg.dropout)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, rng, cfg.dropout)
        self.drop1 = Dropout(cfg.dropout, rng)
        self.drop2 = Dropout(cfg.dropout, rng)

    def __call__(self, x: Tensor, pos: Tensor) -> Tensor:
        u = self.norm1(x)
        qk = u + pos
        x = x + self.drop1(self.attn(qk, qk, u))
        x = x + self.drop2(self.ffn(self.norm2(x)))
        return x


class DecoderLayer(Module):
    """Decoupled attention: instance-axis self-attention, point-axis
    self-attention, then cross-attention from every query to the memory."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        d = cfg.d_model
        self.norm_inst = LayerNorm(d)
        self.attn_inst = MultiHeadAttention(d, cfg.n_heads, rng, cfg.dropout)
        self.norm_point = LayerNorm(d)
        self.attn_point = MultiHeadAttention(d, cfg.n_heads, rng, cfg.dropout)
        self.norm_cross = LayerNorm(d)
        self.attn_cross = MultiHeadAttention(d, cfg.n_heads, rng, cfg.dropout)
        self.norm_ffn = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_dim, rng, cfg.dropout)
        self.drops = [Dropout(cfg.dropout, rng) for _ in range(4)]

    def __call__(
        self,
        h: Tensor,
        qpos: Tensor,
        memory: Tensor,
        mem_pos: Tensor,
        group_sizes: tuple[int, ...] | None = None,
    ) -> Tensor:
        b, n, m, d = h.shape

        # self-attention across instances (points share the batch axis);
        # the one-to-one and one-to-many query groups attend separately
        u = self.norm_inst(h)
        qk_all = u + qpos
        groups = group_sizes if group_sizes else (n,)
        outs = []
        lo = 0
        for size in groups:
            sl = slice(lo, lo + size)
            lo += size
            qk = qk_all[:, sl].transpose(0, 2, 1, 3).reshape(b * m, size, d)
            v = u[:, sl].transpose(0, 2, 1, 3).reshape(b * m, size, d)
            a = self.attn_inst(qk, qk, v).reshape(b, m, size, d).transpose(0, 2, 1, 3)
            outs.append(a)
        a = outs[0] if len(outs) == 1 else concat(outs, axis=1)
        h = h + self.drops[0](a)

        # self-attention across points (instances share the batch axis)
        u = self.norm_point(h)
        qk = (u + qpos).reshape(b * n, m, d)
        v = u.reshape(b * n, m, d)
        a = self.attn_point(qk, qk, v).reshape(b, n, m, d)
        h = h + self.drops[1](a)

        # cross-attention to the encoder memory
        u = self.norm_cross(h)
        q = (u + qpos).reshape(b, n * m, d)
        k = memory + mem_pos
        a = self.attn_cross(q, k, memory).reshape(b, n, m, d)
        h = h + self.drops[2](a)

        h = h + self.drops[3](self.ffn(self.norm_ffn(h)))
        return h


class LaneNetwork(Module):
    """Raster in, per-decoder-layer lane predictions out."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.PCG64(cfg.seed))
        self.rng = rng
        d = cfg.d_model

        self.backbone = Backbone(6, cfg.backbone_width, rng)
        self.input_proj = Conv2d(self.backbone.out_channels, d, 1, rng)

        self.encoder_layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_encoder_layers)]
        self.decoder_layers = [DecoderLayer(cfg, rng) for _ in range(cfg.n_decoder_layers)]
        self.final_norm = LayerNorm(d)

        n_total = cfg.n_queries + cfg.n_o2m_queries
        # unit-scale init: queries must start distinct or instance attention
        # cannot break the symmetry between lane candidates
        self.query_embed = Tensor(
            trunc_normal(rng, (n_total, cfg.m_points, d), std=1.0), requires_grad=True
        )

        self.center_head = MLP(d, d, 2, rng)
        self.offset_head = MLP(d, d, 2, rng)
        self.class_head = MLP(d, d, 2, rng)
        # bias the object class toward a ~10% prior positive rate
        self.class_head.fc2.bias.data = np.array(
            [np.log(0.9), np.log(0.1)], dtype=np.float32
        )

        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- pieces ---------------------------------------------------------------

    def backbone_forward(self, x: Tensor) -> Tensor:
        return self.backbone(x)

    def project_and_flatten(self, f: Tensor) -> tuple[Tensor, Tensor]:
        """1x1-conv to d channels, flatten row-major, add 2-D sinusoidal
        positions. Returns (tokens, positions), both (B, H'W', d)."""
        z = self.input_proj(f)
        b, d, hp, wp = z.shape
        tokens = z.reshape(b, d, hp * wp).transpose(0, 2, 1)
        key = (hp, wp)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoidal_positions_2d(hp, wp, d)
        pos = Tensor(self._pos_cache[key][None, :, :].astype(tokens.dtype))
        return tokens, pos

    def transformer_forward(
        self, tokens: Tensor, pos: Tensor, active_queries: np.ndarray | None = None
    ) -> list[Tensor]:
        """Encoder over the memory, decoder over hierarchical queries.
        Returns the hidden state of every decoder layer (B, N, M, d)."""
        memory = tokens
        for layer in self.encoder_layers:
            memory = layer(memory, pos)

        b = tokens.shape[0]
        q = self.query_embed
        n_o2m = self.cfg.n_o2m_queries
        if active_queries is not None:
            q = q[active_queries]
            n_o2o = len(active_queries) - n_o2m
        else:
            n_o2o = self.cfg.n_queries
        n, m, d = q.shape
        group_sizes = (n_o2o, n_o2m) if n_o2m > 0 else (n,)
        qpos = q.reshape(1, n, m, d).expand((b, n, m, d))
        h = Tensor(np.zeros((b, n, m, d), dtype=tokens.dtype))

        states = []
        for layer in self.decoder_layers:
            h = layer(h, qpos, memory, pos, group_sizes)
            states.append(h)
        return states

    def heads_forward(self, hidden: Tensor) -> dict:
        """Apply prediction heads to one decoder state (B, N, M, d).

        Point heads regress in scaled units and are converted to meters
        here: large enough that AdamW reaches the +-extent/2 output range
        quickly, small enough that the late-phase update quantum does not
        limit precision. Offsets get a tighter scale (they stay near half a
        lane width).
        """
        u = self.final_norm(hidden)
        centers = self.center_head(u) * (self.cfg.extent / 6.0)
        offsets = self.offset_head(u) * (self.cfg.extent / 20.0)
        pooled = u.mean(axis=2)
        logits = self.class_head(pooled)
        return {"centers": centers, "offsets": offsets, "logits": logits}

    # -- full forward -----------------------------------------------------------

    def forward(
        self,
        x: Tensor,
        active_queries: np.ndarray | None = None,
        aux_head_slice: int | None = None,
    ) -> list[dict]:
        """Per-decoder-layer head outputs. ``aux_head_slice`` restricts the
        intermediate layers' heads to the first instances (the auxiliary loss
        only consumes the one-to-one group)."""
        f = self.backbone_forward(x)
        tokens, pos = self.project_and_flatten(f)
        states = self.transformer_forward(tokens, pos, active_queries)
        outs = []
        for i, h in enumerate(states):
            if aux_head_slice is not None and i < len(states) - 1:
                h = h[:, :aux_head_slice]
            outs.append(self.heads_forward(h))
        return outs

    __call__ = forward

    def predict(self, raster: RasterTensor) -> LanePrediction:
        """Inference on a single raster: one-to-one group of the last layer."""
        from .tensor import no_grad

        was_training = self.training
        self.eval()
        try:
            with no_grad():
                x = Tensor(raster.channels[None].astype(np.float32))
                out = self.forward(x)[-1]
        finally:
            self.train(was_training)
        n = self.cfg.n_queries
        return LanePrediction(
            centerlines=np.asarray(out["centers"].data[0, :n], dtype=np.float64),
            offsets=np.asarray(out["offsets"].data[0, :n], dtype=np.float64),
            class_logits=np.asarray(out["logits"].data[0, :n], dtype=np.float64),
        )


# -----------------------------------------------------------------------------
# Checkpoint format: binary tensor dump plus a text manifest
# -----------------------------------------------------------------------------

_CKPT_MAGIC = b"LGCP"
_CKPT_VERSION = 1


def save_checkpoint(model: LaneNetwork, path, manifest_path=None) -> None:
    import struct

    entries = list(model.named_parameters())
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(entries)))
        for name, p in entries:
            blob = name.encode()
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            f.write(struct.pack("<I", len(blob)) + blob)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
    if manifest_path is not None:
        with open(manifest_path, "w") as f:
            for name, p in entries:
                shape = "x".join(str(s) for s in p.data.shape)
                f.write(f"{name}\t{shape}\n")


def load_checkpoint(model: LaneNetwork, path) -> LaneNetwork:
    import struct

    params = dict(model.named_parameters())
    with open(path, "rb") as f:
        head = f.read(12)
        if head[:4] != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", head[4:])
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            data = np.frombuffer(f.read(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
            if name not in params:
                raise ValueError(f"{path}: unknown parameter {name!r}")
            if params[name].data.shape != shape:
                raise ValueError(
                    f"{path}: shape mismatch for {name!r}: "
                    f"{shape} vs {params[name].data.shape}"
                )
            params[name].data = data.copy()
    return model
