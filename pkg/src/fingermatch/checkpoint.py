"""Self-describing binary checkpoints.

Layout: a UTF-8 text header of key=value lines (format version first,
then stage, configs, seed, epoch count, loss trace), a blank line, then one
block per parameter: an ASCII line `name dim0 [dim1]` followed by exactly
prod(dims) little-endian float32 values. Round-trips are bit-exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, EncoderParams, build_encoder_params
from .errors import DataError
from .fusion import FusionConfig, FusionParams, build_fusion_params
from .msloss import LossConfig
from .tensorops import Tensor

MAGIC = "fingermatch-checkpoint v1"

_ENCODER_KEYS = ("image_size", "patch_size", "width", "layers", "heads", "mlp_hidden", "embed_dim")
_FUSION_KEYS = ("width", "heads", "blocks", "mlp_hidden")
_LOSS_KEYS = ("alpha_pos", "alpha_neg", "tau", "margin")


@dataclass
class Checkpoint:
    stage: int
    encoder_config: EncoderConfig
    loss_config: LossConfig
    seed: int
    epochs: int
    fusion_config: FusionConfig | None = None
    loss_trace: list = field(default_factory=list)
    params: dict = field(default_factory=dict)  # name -> float32 ndarray

    def encoder_params(self, trainable: bool = False) -> EncoderParams:
        return build_encoder_params(
            self.encoder_config, _lookup_maker(self.params, "encoder.", trainable)
        )

    def fusion_params(self, trainable: bool = False) -> FusionParams:
        if self.fusion_config is None:
            raise DataError("checkpoint has no fusion parameters (stage-1 checkpoint)")
        return build_fusion_params(
            self.fusion_config, _lookup_maker(self.params, "fusion.", trainable)
        )


def _lookup_maker(values: dict, prefix: str, trainable: bool):
    def make(name: str, shape: tuple, kind: str) -> Tensor:
        arr = values.get(prefix + name)
        if arr is None:
            raise DataError(f"checkpoint missing parameter {prefix + name}")
        if tuple(arr.shape) != tuple(shape):
            raise DataError(
                f"checkpoint parameter {prefix + name} has shape {arr.shape}, expected {shape}"
            )
        return Tensor(arr.copy(), requires_grad=trainable)

    return make


def params_from_named(named: dict, prefix: str) -> dict:
    """Freeze a name->Tensor mapping into checkpoint arrays."""
    return {prefix + name: np.asarray(t.data, dtype=np.float32).copy() for name, t in named.items()}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    lines = [MAGIC, f"stage={ckpt.stage}", f"seed={ckpt.seed}", f"epochs={ckpt.epochs}"]
    for key in _ENCODER_KEYS:
        lines.append(f"encoder.{key}={getattr(ckpt.encoder_config, key)}")
    if ckpt.fusion_config is not None:
        for key in _FUSION_KEYS:
            lines.append(f"fusion.{key}={getattr(ckpt.fusion_config, key)}")
    for key in _LOSS_KEYS:
        lines.append(f"loss.{key}={getattr(ckpt.loss_config, key)!r}")
    lines.append("loss_trace=" + ",".join(repr(float(v)) for v in ckpt.loss_trace))
    lines.append(f"param_count={len(ckpt.params)}")
    blob = bytearray(("\n".join(lines) + "\n\n").encode("utf-8"))
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr, dtype=np.float32)
        dims = " ".join(str(d) for d in arr.shape)
        blob += f"{name} {dims}\n".encode("utf-8")
        blob += arr.astype("<f4").tobytes()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise DataError(f"{path}: malformed checkpoint (no header terminator)")
    header_lines = blob[:sep].decode("utf-8").split("\n")
    if header_lines[0] != MAGIC:
        raise DataError(f"{path}: unrecognized checkpoint version {header_lines[0]!r}")
    kv = {}
    for line in header_lines[1:]:
        key, _, value = line.partition("=")
        kv[key] = value

    def group(prefix, keys, caster):
        return {k: caster(kv[f"{prefix}.{k}"]) for k in keys}

    encoder_config = EncoderConfig(**group("encoder", _ENCODER_KEYS, int))
    fusion_config = None
    if "fusion.width" in kv:
        fusion_config = FusionConfig(**group("fusion", _FUSION_KEYS, int))
    loss_config = LossConfig(**group("loss", _LOSS_KEYS, float))
    trace_raw = kv.get("loss_trace", "")
    loss_trace = [float(v) for v in trace_raw.split(",")] if trace_raw else []

    params: dict = {}
    offset = sep + 2
    expected = int(kv.get("param_count", "0"))
    for _ in range(expected):
        nl = blob.find(b"\n", offset)
        if nl < 0:
            raise DataError(f"{path}: truncated checkpoint (missing parameter header)")
        fields = blob[offset:nl].decode("utf-8").split(" ")
        name, dims = fields[0], tuple(int(d) for d in fields[1:])
        count = int(np.prod(dims)) if dims else 1
        start = nl + 1
        end = start + 4 * count
        if end > len(blob):
            raise DataError(f"{path}: truncated checkpoint (parameter {name})")
        params[name] = np.frombuffer(blob[start:end], dtype="<f4").reshape(dims).copy()
        offset = end
    if offset != len(blob):
        raise DataError(f"{path}: trailing bytes after last parameter")
    return Checkpoint(
        stage=int(kv["stage"]),
        encoder_config=encoder_config,
        loss_config=loss_config,
        seed=int(kv["seed"]),
        epochs=int(kv["epochs"]),
        fusion_config=fusion_config,
        loss_trace=loss_trace,
        params=params,
    )
