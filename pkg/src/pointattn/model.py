"""The full completion network: feature extractor, seed generator, point generators.

The encoder alternates cross-attention downsampling (``gdp``) with
self-attention (``sfa``) three times, then max-pools a global shape code.
The decoder turns the code into a sparse seed cloud, merges it with the
partial input, and refines it through two cascaded point generators, each
multiplying the point count by ``split_base * prod(up_ratios)``.

Parameters live in a flat name -> Tensor map so checkpoints, the
optimizer, and gradient checks can treat them uniformly.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import blocks
from .blocks import AttentionParams, FfnParams
from .errors import CheckpointError, ConfigError
from .geometry import gather_rows
from .tensor import (Tensor, add, affine, concat_cols, concat_rows,
                     max_over_segments, relu, reshape, row_slice, tile_rows)

CHECKPOINT_MAGIC = b"PATN"
CHECKPOINT_VERSION = 1


def _prod(xs):
    out = 1
    for x in xs:
        out *= int(x)
    return out


@dataclass(frozen=True)
class ModelConfig:
    """All structural hyperparameters; defaults are the desk-scale setup."""

    n_input: int = 512              # partial cloud size fed to the encoder
    embed_width: int = 64           # per-point embedding width
    gdp_ratios: tuple = (4, 2, 2)   # encoder down-sampling per stage
    code_width: int = 1024          # global shape code width
    seed_points: int = 128          # coarse points generated from the code
    seed_width: int = 128           # feature width of the coarse points
    seed_cloud: int = 512           # seeds kept after merge + FPS (= |P0|)
    feat_width: int = 128           # per-point width inside the generators
    heads: int = 4
    gen1_up: tuple = (1, 1, 1)      # SFA up-ratios of the first generator
    gen2_up: tuple = (1, 1, 1)      # SFA up-ratios of the second generator
    split_base: int = 2             # extra split factor r = split_base * prod(up)
    disable_gdp: bool = False       # ablation: replace GDP with plain FPS
    disable_encoder_sfa: bool = False  # ablation: drop encoder SFA blocks

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def completion3d(cls) -> "ModelConfig":
        return cls(n_input=2048)

    @classmethod
    def pcn(cls) -> "ModelConfig":
        return cls(n_input=2048, gen1_up=(2, 1, 1), gen2_up=(2, 1, 2))

    # -- derived quantities ------------------------------------------------

    def encoder_stage_widths(self):
        """(width_in, width_out) per encoder stage, accounting for ablations."""
        widths = []
        w = self.embed_width
        doubles = not (self.disable_gdp and self.disable_encoder_sfa)
        for _ in self.gdp_ratios:
            w_out = 2 * w if doubles else w
            widths.append((w, w_out))
            w = w_out
        return widths

    def generator_ratio(self, gen: str) -> int:
        ups = self.gen1_up if gen == "gen1" else self.gen2_up
        return self.split_base * _prod(ups)

    def predicted_sizes(self):
        p0 = self.seed_cloud
        p1 = p0 * self.generator_ratio("gen1")
        p2 = p1 * self.generator_ratio("gen2")
        return p0, p1, p2

    def validate(self) -> None:
        h = self.heads
        if h < 1:
            raise ConfigError("heads must be >= 1")
        total_down = _prod(self.gdp_ratios)
        if self.n_input < 1 or self.n_input % total_down != 0:
            raise ConfigError(
                f"n_input={self.n_input} must be divisible by prod(gdp_ratios)={total_down}")
        if any(int(d) != d or d < 1 for d in self.gdp_ratios):
            raise ConfigError(f"gdp_ratios must be positive integers, got {self.gdp_ratios}")
        for ups in (self.gen1_up, self.gen2_up):
            if len(ups) != 3 or any(int(u) != u or u < 1 for u in ups):
                raise ConfigError(f"up-ratios must be three positive integers, got {ups}")
        if self.split_base < 1:
            raise ConfigError("split_base must be >= 1")
        if (2 * self.feat_width) % self.split_base != 0:
            raise ConfigError(
                f"split_base={self.split_base} must divide 2*feat_width={2 * self.feat_width}")
        if self.seed_cloud > self.seed_points + self.n_input:
            raise ConfigError(
                f"seed_cloud={self.seed_cloud} exceeds generated+input points "
                f"{self.seed_points + self.n_input}")
        widths = {self.embed_width, self.code_width, self.seed_width, self.feat_width}
        for w_in, w_out in self.encoder_stage_widths():
            widths.update({w_in, w_out})
        for ups in (self.gen1_up, self.gen2_up):
            w = 2 * self.feat_width
            for u in ups:
                w *= u
                widths.add(w)
        bad = sorted(w for w in widths if w % h != 0)
        if bad:
            raise ConfigError(f"channel widths {bad} not divisible by heads={h}")


class Predictions(NamedTuple):
    """The three predicted clouds, coarse to fine."""

    p0: Tensor
    p1: Tensor
    p2: Tensor


class StageState(NamedTuple):
    """Coordinates and features threaded through the encoder."""

    coords: np.ndarray
    feats: Tensor


# ---------------------------------------------------------------------------
# Parameter plan and initialization


def parameter_plan(cfg: ModelConfig) -> dict:
    """Ordered map of parameter name -> (shape, init kind)."""
    cfg.validate()
    plan: dict = {}

    def weight(name, fan_in, fan_out):
        plan[name] = ((fan_in, fan_out), "weight")

    def zeros(name, c):
        plan[name] = ((c,), "zeros")

    def ones(name, c):
        plan[name] = ((c,), "ones")

    def two_layer(prefix, c_in, c_hidden, c_out):
        weight(f"{prefix}.w1", c_in, c_hidden)
        zeros(f"{prefix}.b1", c_hidden)
        weight(f"{prefix}.w2", c_hidden, c_out)
        zeros(f"{prefix}.b2", c_out)

    def attention(prefix, c_q, c_kv, c_out):
        weight(f"{prefix}.w_q", c_q, c_out)
        weight(f"{prefix}.w_kv", c_kv, c_out)
        weight(f"{prefix}.w_out", c_out, c_out)
        ones(f"{prefix}.norm_gain", c_out)
        zeros(f"{prefix}.norm_bias", c_out)

    def ffn(prefix, c):
        weight(f"{prefix}.w1", c, 2 * c)
        zeros(f"{prefix}.b1", 2 * c)
        weight(f"{prefix}.w2", 2 * c, c)
        zeros(f"{prefix}.b2", c)
        ones(f"{prefix}.norm_gain", c)
        zeros(f"{prefix}.norm_bias", c)

    two_layer("encoder.embed", 3, cfg.embed_width, cfg.embed_width)
    for i, (w_in, _) in enumerate(cfg.encoder_stage_widths(), start=1):
        if not cfg.disable_gdp:
            attention(f"encoder.gdp{i}", w_in, w_in, w_in)
            ffn(f"encoder.gdp{i}.ffn", w_in)
        if not cfg.disable_encoder_sfa:
            u = 2 if cfg.disable_gdp else 1
            w_mid = w_in if cfg.disable_gdp else 2 * w_in
            attention(f"encoder.sfa{i}", w_mid, w_mid, u * w_mid)
            ffn(f"encoder.sfa{i}.ffn", u * w_mid)
    w_last = cfg.encoder_stage_widths()[-1][1]
    two_layer("encoder.code", w_last, cfg.code_width, cfg.code_width)

    weight("seed.expand.w", cfg.code_width, cfg.seed_points * cfg.seed_width)
    zeros("seed.expand.b", cfg.seed_points * cfg.seed_width)
    weight("seed.lift.w", cfg.seed_width, cfg.seed_width)
    zeros("seed.lift.b", cfg.seed_width)
    for i in range(1, 4):
        attention(f"seed.sfa{i}", cfg.seed_width, cfg.seed_width, cfg.seed_width)
        ffn(f"seed.sfa{i}.ffn", cfg.seed_width)
    two_layer("seed.coord", cfg.seed_width, cfg.seed_width, 3)

    for gen, ups in (("gen1", cfg.gen1_up), ("gen2", cfg.gen2_up)):
        two_layer(f"{gen}.f1", 3, cfg.feat_width, cfg.feat_width)
        two_layer(f"{gen}.f2", cfg.code_width, cfg.feat_width, cfg.feat_width)
        w = 2 * cfg.feat_width
        for j, u in enumerate(ups, start=1):
            attention(f"{gen}.sfa{j}", w, w, u * w)
            ffn(f"{gen}.sfa{j}.ffn", u * w)
            w *= u
        w_concat = cfg.feat_width + (2 * cfg.feat_width) // cfg.split_base
        two_layer(f"{gen}.coord", w_concat, w_concat, 3)

    return plan


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Fresh parameters for cfg, deterministic under seed."""
    rng = np.random.default_rng([int(seed), 0xA77])
    params = {}
    for name, (shape, kind) in parameter_plan(cfg).items():
        if kind == "weight":
            data = blocks.uniform_init(rng, shape[0], shape[1], dtype)
        elif kind == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


def param_dtype(params: dict):
    return next(iter(params.values())).data.dtype


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.zero_grad()


def _attn_view(params, prefix, heads) -> AttentionParams:
    return AttentionParams(
        w_q=params[f"{prefix}.w_q"], w_kv=params[f"{prefix}.w_kv"],
        w_out=params[f"{prefix}.w_out"], norm_gain=params[f"{prefix}.norm_gain"],
        norm_bias=params[f"{prefix}.norm_bias"], heads=heads)


def _ffn_view(params, prefix) -> FfnParams:
    return FfnParams(
        w1=params[f"{prefix}.w1"], b1=params[f"{prefix}.b1"],
        w2=params[f"{prefix}.w2"], b2=params[f"{prefix}.b2"],
        norm_gain=params[f"{prefix}.norm_gain"], norm_bias=params[f"{prefix}.norm_bias"])


def _two_layer(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = relu(affine(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return affine(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


# ---------------------------------------------------------------------------
# Forward pass


def _feature_extractor(stacked: np.ndarray, params: dict, cfg: ModelConfig,
                       batch: int) -> Tensor:
    coords = stacked
    state = StageState(coords=coords, feats=_two_layer(Tensor(coords), params, "encoder.embed"))
    for i, d in enumerate(cfg.gdp_ratios, start=1):
        coords, x = state
        if cfg.disable_gdp:
            idx = blocks.segment_fps(coords, batch, coords.shape[0] // batch // int(d))
            x = gather_rows(x, idx)
            coords = coords[idx]
        else:
            x, coords = blocks.gdp(x, coords, int(d),
                                   _attn_view(params, f"encoder.gdp{i}", cfg.heads),
                                   _ffn_view(params, f"encoder.gdp{i}.ffn"),
                                   batch=batch)
        if not cfg.disable_encoder_sfa:
            u = 2 if cfg.disable_gdp else 1
            x = blocks.sfa(x, u, _attn_view(params, f"encoder.sfa{i}", cfg.heads),
                           _ffn_view(params, f"encoder.sfa{i}.ffn"), batch=batch)
        state = StageState(coords=coords, feats=x)
    code_feats = _two_layer(state.feats, params, "encoder.code")
    return max_over_segments(code_feats, batch)


def feature_extractor(partial: np.ndarray, params: dict, cfg: ModelConfig) -> Tensor:
    """Encode a partial cloud into a 1 x code_width shape code."""
    partial = np.asarray(partial)
    if partial.shape != (cfg.n_input, 3):
        raise ValueError(
            f"feature_extractor: expected ({cfg.n_input}, 3) cloud, got {partial.shape}")
    dtype = param_dtype(params)
    return _feature_extractor(partial.astype(dtype, copy=False), params, cfg, 1)


def _seed_generator(code: Tensor, stacked: np.ndarray, params: dict,
                    cfg: ModelConfig, batch: int) -> Tensor:
    n = stacked.shape[0] // batch
    m0 = cfg.seed_points
    x = affine(code, params["seed.expand.w"], params["seed.expand.b"])
    x = reshape(x, (batch * m0, cfg.seed_width))
    x = relu(affine(x, params["seed.lift.w"], params["seed.lift.b"]))
    for i in range(1, 4):
        x = blocks.sfa(x, 1, _attn_view(params, f"seed.sfa{i}", cfg.heads),
                       _ffn_view(params, f"seed.sfa{i}.ffn"), batch=batch)
    coarse = _two_layer(x, params, "seed.coord")
    parts = []
    for s in range(batch):
        parts.append(row_slice(coarse, s * m0, (s + 1) * m0))
        parts.append(Tensor(stacked[s * n:(s + 1) * n]))
    merged = concat_rows(parts)
    idx = blocks.segment_fps(merged.data, batch, cfg.seed_cloud)
    return gather_rows(merged, idx)


def seed_generator(code: Tensor, partial: np.ndarray, params: dict,
                   cfg: ModelConfig) -> Tensor:
    """Decode the shape code into coarse points, merge with the partial
    input, and FPS the union down to the seed cloud."""
    dtype = param_dtype(params)
    return _seed_generator(code, np.asarray(partial, dtype=dtype), params, cfg, 1)


def _point_generator(seeds: Tensor, code: Tensor, params: dict,
                     cfg: ModelConfig, gen: str, batch: int) -> Tensor:
    ups = cfg.gen1_up if gen == "gen1" else cfg.gen2_up
    r = cfg.generator_ratio(gen)
    rows = seeds.data.shape[0]
    k = rows // batch
    f1 = _two_layer(seeds, params, f"{gen}.f1")
    f2 = tile_rows(_two_layer(code, params, f"{gen}.f2"), k)
    x = concat_cols([f1, f2])
    for j, u in enumerate(ups, start=1):
        x = blocks.sfa(x, int(u), _attn_view(params, f"{gen}.sfa{j}", cfg.heads),
                       _ffn_view(params, f"{gen}.sfa{j}.ffn"), batch=batch)
    total = x.data.shape[1]
    if total % r != 0:
        raise ConfigError(f"{gen}: width {total} does not split into r={r} sub-points")
    split = reshape(x, (rows * r, total // r))
    y = concat_cols([split, tile_rows(f1, r)])
    offsets = _two_layer(y, params, f"{gen}.coord")
    return add(offsets, tile_rows(seeds, r))


def point_generator(seeds: Tensor, code: Tensor, params: dict,
                    cfg: ModelConfig, gen: str) -> Tensor:
    """Refine K seed points into K*r points via widened self-attention,
    a reshape split, and residual coordinate offsets."""
    return _point_generator(seeds, code, params, cfg, gen, 1)


def forward_batch(partials: np.ndarray, params: dict, cfg: ModelConfig) -> Predictions:
    """Forward pass over a stack of partial clouds (batch, N, 3).

    Predictions come back row-stacked per sample in batch order; sample s
    occupies rows [s*size, (s+1)*size) of each cloud.
    """
    partials = np.asarray(partials)
    if partials.ndim != 3 or partials.shape[1:] != (cfg.n_input, 3):
        raise ValueError(
            f"forward_batch: expected (batch, {cfg.n_input}, 3), got {partials.shape}")
    batch = partials.shape[0]
    dtype = param_dtype(params)
    stacked = np.ascontiguousarray(partials.reshape(batch * cfg.n_input, 3),
                                   dtype=dtype)
    code = _feature_extractor(stacked, params, cfg, batch)
    p0 = _seed_generator(code, stacked, params, cfg, batch)
    p1 = _point_generator(p0, code, params, cfg, "gen1", batch)
    p2 = _point_generator(p1, code, params, cfg, "gen2", batch)
    return Predictions(p0=p0, p1=p1, p2=p2)


def forward(partial: np.ndarray, params: dict, cfg: ModelConfig) -> Predictions:
    """Full coarse-to-fine pass: seeds P0, then P1, then P2."""
    return forward_batch(np.asarray(partial)[None], params, cfg)


# ---------------------------------------------------------------------------
# Checkpoints


def _config_to_kv(cfg: ModelConfig) -> str:
    lines = []
    for field in dataclasses.fields(ModelConfig):
        value = getattr(cfg, field.name)
        if isinstance(value, tuple):
            text = ",".join(str(int(v)) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = str(value)
        lines.append(f"{field.name}={text}")
    return "\n".join(lines) + "\n"


def _config_from_kv(text: str) -> ModelConfig:
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"config block line {lineno}: missing '='")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in fields:
            raise CheckpointError(f"config block line {lineno}: unknown field {key!r}")
        default = getattr(ModelConfig, key, None)
        field = fields[key]
        if field.type == "tuple" or isinstance(default, tuple):
            values[key] = tuple(int(v) for v in raw.split(","))
        elif isinstance(default, bool):
            values[key] = raw.lower() == "true"
        else:
            values[key] = int(raw)
    missing = set(fields) - set(values)
    if missing:
        raise CheckpointError(f"config block missing fields: {sorted(missing)}")
    return ModelConfig(**values)


def save_checkpoint(path, params: dict, cfg: ModelConfig) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    cfg_blob = _config_to_kv(cfg).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_blob)))
    buf.write(cfg_blob)
    buf.write(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        name_blob = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_blob)))
        buf.write(name_blob)
        shape = tensor.data.shape
        buf.write(struct.pack("<B", len(shape)))
        for extent in shape:
            buf.write(struct.pack("<I", extent))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expected_cfg: ModelConfig | None = None,
                    dtype=np.float32):
    """Read (params, cfg) from a checkpoint, validating layout against the
    config's parameter plan (and against expected_cfg when given)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    cfg = _config_from_kv(take(cfg_len, "config block").decode("utf-8"))
    if expected_cfg is not None and cfg != expected_cfg:
        raise CheckpointError(f"{path}: checkpoint config does not match the requested config")
    plan = parameter_plan(cfg)
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    if count != len(plan):
        raise CheckpointError(
            f"{path}: {count} parameters stored, config needs {len(plan)}")
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = tuple(struct.unpack("<I", take(4, "extent"))[0] for _ in range(rank))
        n_items = int(np.prod(shape)) if shape else 1
        payload = take(4 * n_items, f"payload of {name}")
        if name not in plan:
            raise CheckpointError(f"{path}: unexpected parameter {name!r}")
        if shape != plan[name][0]:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {shape}, config needs {plan[name][0]}")
        data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True)
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes at byte {off}")
    missing = set(plan) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters: {sorted(missing)[:3]}")
    return params, cfg
