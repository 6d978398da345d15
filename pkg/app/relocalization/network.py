#!/usr/bin/env python3
"""
Point/line scene-coordinate network

Lines enter as T descriptors sampled along the segment and are reduced to a
single descriptor by a transformer block with mean pooling. Points and
lines are then refined together by a stack of self/cross attention layers
and regressed to 3D by two MLP heads. Every regressed feature also gets a
reliability logit z, mapped to 1 / (1 + |beta z|).

Parameter names:
- encoder.attn.{q,k,v,o}.{weight,bias}, encoder.norm{1,2}.{gain,bias},
  encoder.mlp.{0,1}.{weight,bias}
- layers.<i>.attn.{q,k,v,o}.*, layers.<i>.mlp.{0,1}.*
- point_head.<j>.*, line_head.<j>.*

Weights are stored (in, out). Points and lines share the weights of each
attention layer.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from app.relocalization.diffcore import ops
from app.relocalization.diffcore.tensor import Tensor
from app.relocalization.exceptions import DimensionError
from app.relocalization.models.config_models import ModelConfig

POINT_OUTPUTS = 4  # xyz + z
LINE_OUTPUTS = 7  # P, Q + z


class ModelParams:
    """Named parameter tensors of one network"""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self._tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def tensors(self) -> List[Tensor]:
        return list(self._tensors.values())

    def items(self):
        return self._tensors.items()

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def layers(self, prefix: str) -> List[Tuple[Tensor, Tensor]]:
        """Ordered (weight, bias) pairs of an MLP stored under ``prefix``."""
        pairs = []
        j = 0
        while f"{prefix}.{j}.weight" in self._tensors:
            pairs.append((self._tensors[f"{prefix}.{j}.weight"], self._tensors[f"{prefix}.{j}.bias"]))
            j += 1
        return pairs

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)) for k, v in self.items())
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=v.requires_grad)) for k, v in self.items())
        )

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], requires_grad: bool = True) -> "ModelParams":
        return cls(OrderedDict((k, Tensor(np.asarray(v), requires_grad=requires_grad)) for k, v in arrays.items()))


@dataclass
class Prediction:
    """Network outputs; coordinates and reliabilities stay on the tape"""

    point_coords: Tensor  # (N, 3)
    point_logits: Tensor  # (N,)
    point_reliability: Tensor  # (N,)
    line_coords: Tensor  # (M, 6)
    line_logits: Tensor  # (M,)
    line_reliability: Tensor  # (M,)


# ============================================================================
# Initialization
# ============================================================================


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    D = config.descriptor_dim
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()

    def linear(prefix: str, fan_in: int, fan_out: int) -> None:
        shapes[f"{prefix}.weight"] = (fan_in, fan_out)
        shapes[f"{prefix}.bias"] = (fan_out,)

    def attention(prefix: str) -> None:
        for proj in ("q", "k", "v", "o"):
            linear(f"{prefix}.{proj}", D, D)

    def mlp(prefix: str, widths: Sequence[int]) -> None:
        for j, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            linear(f"{prefix}.{j}", fan_in, fan_out)

    attention("encoder.attn")
    shapes["encoder.norm1.gain"] = (D,)
    shapes["encoder.norm1.bias"] = (D,)
    mlp("encoder.mlp", [D, config.encoder_mlp_ratio * D, D])
    shapes["encoder.norm2.gain"] = (D,)
    shapes["encoder.norm2.bias"] = (D,)

    for i in range(len(config.layer_pattern)):
        attention(f"layers.{i}.attn")
        mlp(f"layers.{i}.mlp", [2 * D, 2 * D, D])

    mlp("point_head", [D, *config.point_head, POINT_OUTPUTS])
    mlp("line_head", [D, *config.line_head, LINE_OUTPUTS])
    return shapes


def _logit_columns(config: ModelConfig) -> Dict[str, int]:
    """Output-layer weight holding each head's reliability logit, and its column."""
    return {
        f"point_head.{len(config.point_head)}.weight": POINT_OUTPUTS - 1,
        f"line_head.{len(config.line_head)}.weight": LINE_OUTPUTS - 1,
    }


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Xavier-uniform weights, zero biases, unit layer-norm gains; deterministic in ``seed``.

    The reliability logit columns are scaled by 1 / beta so |beta z| starts
    near Xavier scale and r starts well away from 0.
    """
    rng = np.random.default_rng(seed)
    logit_columns = _logit_columns(config)
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in _param_shapes(config).items():
        if name.endswith(".weight"):
            value = _xavier(rng, *shape)
            if name in logit_columns:
                value[:, logit_columns[name]] /= config.beta
        elif name.endswith(".gain"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        tensors[name] = Tensor(value.astype(dtype), requires_grad=True)
    return ModelParams(tensors)


# ============================================================================
# Blocks
# ============================================================================


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ops.linear(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    B, N, D = x.shape
    return ops.transpose(ops.reshape(x, (B, N, num_heads, D // num_heads)), (0, 2, 1, 3))


def multi_head_attention(x: Tensor, source: Tensor, params: ModelParams, prefix: str, num_heads: int) -> Tensor:
    """Messages from ``source`` (B, S, D) to ``x`` (B, N, D).

    Scores are q.k / sqrt(D / h). An empty source yields zero messages.
    """
    B, N, D = x.shape
    if source.shape[1] == 0 or N == 0:
        return ops.zeros((B, N, D), dtype=x.dtype)
    q = _split_heads(_linear(x, params, f"{prefix}.q"), num_heads)
    k = _split_heads(_linear(source, params, f"{prefix}.k"), num_heads)
    v = _split_heads(_linear(source, params, f"{prefix}.v"), num_heads)
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(D // num_heads))
    weights = ops.softmax(scores, axis=-1)
    merged = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)), (B, N, D))
    return _linear(merged, params, f"{prefix}.o")


def encode_lines(tokens: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """(M, T, D) line tokens to (M, D) line descriptors."""
    if tokens.ndim != 3 or tokens.shape[1] != config.line_tokens or tokens.shape[2] != config.descriptor_dim:
        raise DimensionError(
            f"line tokens must be (M, {config.line_tokens}, {config.descriptor_dim}), got {tokens.shape}"
        )
    M, _, D = tokens.shape
    if M == 0:
        return ops.zeros((0, D), dtype=tokens.dtype)
    attended = multi_head_attention(tokens, tokens, params, "encoder.attn", config.num_heads)
    x = ops.layer_norm(ops.add(tokens, attended), params["encoder.norm1.gain"], params["encoder.norm1.bias"])
    x = ops.layer_norm(
        ops.add(x, ops.mlp_forward(x, params.layers("encoder.mlp"))),
        params["encoder.norm2.gain"],
        params["encoder.norm2.bias"],
    )
    return ops.mean(x, axis=1)


def encode_line(tokens: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Single (T, D) line to its (D,) descriptor."""
    if tokens.ndim != 2:
        raise DimensionError(f"expected (T, D) tokens, got {tokens.shape}")
    encoded = encode_lines(ops.reshape(tokens, (1,) + tokens.shape), params, config)
    return ops.reshape(encoded, (config.descriptor_dim,))


def attention_layer(
    points: Tensor, lines: Tensor, kind: str, params: ModelParams, index: int, config: ModelConfig
) -> Tuple[Tensor, Tensor]:
    """Residual update d <- d + mlp([d | message]) for both sets.

    ``self``: each set attends within itself. ``cross``: points attend to
    lines and lines to points.
    """
    if kind not in ("self", "cross"):
        raise ValueError(f"Unknown attention kind: {kind}")
    prefix = f"layers.{index}"
    D = config.descriptor_dim
    p3 = ops.reshape(points, (1, points.shape[0], D))
    l3 = ops.reshape(lines, (1, lines.shape[0], D))
    src_p, src_l = (p3, l3) if kind == "self" else (l3, p3)

    msg_p = ops.reshape(multi_head_attention(p3, src_p, params, f"{prefix}.attn", config.num_heads), points.shape)
    msg_l = ops.reshape(multi_head_attention(l3, src_l, params, f"{prefix}.attn", config.num_heads), lines.shape)

    mlp = params.layers(f"{prefix}.mlp")
    new_points = ops.add(points, ops.mlp_forward(ops.concat([points, msg_p], axis=1), mlp))
    new_lines = ops.add(lines, ops.mlp_forward(ops.concat([lines, msg_l], axis=1), mlp))
    return new_points, new_lines


def reliability(logits: Tensor, beta: float) -> Tensor:
    """1 / (1 + |beta z|), in (0, 1]."""
    return ops.div(1.0, ops.add(1.0, ops.abs(ops.scale(logits, beta))))


def forward(desc_points, line_tokens, config: ModelConfig, params: ModelParams) -> Prediction:
    """Run the network on one image's (N, D) point descriptors and (M, T, D) line tokens."""
    dtype = params.dtype
    points = desc_points if isinstance(desc_points, Tensor) else Tensor(np.asarray(desc_points, dtype=dtype))
    tokens = line_tokens if isinstance(line_tokens, Tensor) else Tensor(np.asarray(line_tokens, dtype=dtype))
    D = config.descriptor_dim
    if points.ndim != 2 or points.shape[1] != D:
        raise DimensionError(f"point descriptors must be (N, {D}), got {points.shape}")

    lines = encode_lines(tokens, params, config)
    for i, kind in enumerate(config.layer_pattern):
        points, lines = attention_layer(points, lines, kind, params, i, config)

    point_out = ops.mlp_forward(points, params.layers("point_head"))
    line_out = ops.mlp_forward(lines, params.layers("line_head"))
    point_logits = ops.getitem(point_out, (slice(None), 3))
    line_logits = ops.getitem(line_out, (slice(None), 6))
    return Prediction(
        point_coords=ops.getitem(point_out, (slice(None), slice(0, 3))),
        point_logits=point_logits,
        point_reliability=reliability(point_logits, config.beta),
        line_coords=ops.getitem(line_out, (slice(None), slice(0, 6))),
        line_logits=line_logits,
        line_reliability=reliability(line_logits, config.beta),
    )


def storage_bytes(config: ModelConfig, bytes_per_value: int = 4) -> int:
    """Payload size of the weights of ``config`` stored as float32."""
    return int(sum(int(np.prod(shape)) for shape in _param_shapes(config).values())) * bytes_per_value
