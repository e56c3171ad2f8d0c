"""Model assembly: input featurization, layer norms, feed-forward networks,
stacked two-stream blocks, prediction heads, and checkpoint I/O.

Residual wiring is pre-norm; a disabled sub-layer contributes exactly zero to
its residual stream.  With dropout off, a forward pass is bit-deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import attention as A
from . import geometry as G
from . import tensor as T
from .attention import AttentionParams, StreamPair
from .geometry import GaussianBasisParams
from .tensor import Tensor

EQU_LN_EPS = 1e-6
INV_LN_VAR_FLOOR = 1e-12


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    layers: int = 4
    width: int = 80
    heads: int = 8
    ffn_width: int = 80
    kernels: int = 64
    vocab: int = 2
    velocity_input: bool = True
    symmetry: str = "se3"          # "se3" or "e3"
    dropout_embedding: float = 0.0
    dropout_attention: float = 0.0
    dropout_hidden: float = 0.0
    droppath: float = 0.0
    seed: int = 0
    # module on/off switches; a disabled module becomes the zero function
    use_inv_self: bool = True
    use_equ_self: bool = True
    use_inv_cross: bool = True
    use_equ_cross: bool = True
    use_inv_ffn: bool = True
    use_equ_ffn: bool = True
    use_inv_ln: bool = True
    use_equ_ln: bool = True
    use_structural_bias: bool = True
    # the pairwise distance bias is invariant, hence safe in every module;
    # these allow switching it off per module
    bias_in_inv_self: bool = True
    bias_in_equ_self: bool = True
    bias_in_inv_cross: bool = True
    bias_in_equ_cross: bool = True

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.velocity_input and self.width % 2 != 0:
            raise ConfigError("velocity input needs an even width (channels split in half)")
        for name in ("dropout_embedding", "dropout_attention", "dropout_hidden", "droppath"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name}={rate} outside [0, 1)")
        if self.symmetry not in ("se3", "e3"):
            raise ConfigError(f"unknown symmetry mode {self.symmetry!r}")

    @property
    def e3(self) -> bool:
        return self.symmetry == "e3"


@dataclass
class LNParams:
    gamma: Tensor
    beta: Tensor

    def named(self, prefix):
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


@dataclass
class EquLNParams:
    gamma: Tensor

    def named(self, prefix):
        return {f"{prefix}.gamma": self.gamma}


@dataclass
class FFNParams:
    w1: Tensor
    w2: Tensor

    def named(self, prefix):
        return {f"{prefix}.w1": self.w1, f"{prefix}.w2": self.w2}


@dataclass
class EquFFNParams:
    w_up: Tensor     # equivariant path, d x r
    w_gate: Tensor   # invariant gate, d x r
    w_down: Tensor   # r x d

    def named(self, prefix):
        return {f"{prefix}.w_up": self.w_up, f"{prefix}.w_gate": self.w_gate,
                f"{prefix}.w_down": self.w_down}


@dataclass
class BlockParams:
    ln_i1: LNParams
    ln_i2: LNParams
    ln_i3: LNParams
    ln_e1: EquLNParams
    ln_e2: EquLNParams
    ln_e3: EquLNParams
    inv_self: AttentionParams
    equ_self: AttentionParams
    inv_cross: AttentionParams
    equ_cross: AttentionParams
    inv_ffn: FFNParams
    equ_ffn: EquFFNParams

    def named(self, prefix):
        out = {}
        for name in ("ln_i1", "ln_i2", "ln_i3", "ln_e1", "ln_e2", "ln_e3",
                     "inv_self", "equ_self", "inv_cross", "equ_cross",
                     "inv_ffn", "equ_ffn"):
            out.update(getattr(self, name).named(f"{prefix}.{name}"))
        return out


@dataclass
class HeadParams:
    inv_w1: Tensor   # pooled d -> d
    inv_w2: Tensor   # d -> 1
    equ_w: Tensor    # d -> 1 channel readout

    def named(self, prefix):
        return {f"{prefix}.inv_w1": self.inv_w1, f"{prefix}.inv_w2": self.inv_w2,
                f"{prefix}.equ_w": self.equ_w}


class Model:
    """Parameter container plus the forward computation."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, r, k = cfg.width, cfg.ffn_width, cfg.kernels
        equ_dim = d // 2 if cfg.velocity_input else d

        self.embedding = Tensor(rng.normal(scale=1.0 / np.sqrt(d), size=(cfg.vocab, d)))
        self.pos_basis = G.init_gaussian_basis(rng, k, equ_dim, cfg.vocab)
        self.vel_basis = (G.init_gaussian_basis(rng, k, equ_dim, cfg.vocab)
                          if cfg.velocity_input else None)
        self.bias_basis = G.init_gaussian_basis(rng, k, 0, cfg.vocab, pair_table=True)

        def ln():
            return LNParams(Tensor(np.ones(d)), Tensor(np.zeros(d)))

        def eln():
            return EquLNParams(Tensor(np.ones(d)))

        def ffn():
            return FFNParams(Tensor(rng.normal(scale=1.0 / np.sqrt(d), size=(d, r))),
                             Tensor(np.zeros((r, d))))

        def effn():
            return EquFFNParams(Tensor(rng.normal(scale=1.0 / np.sqrt(d), size=(d, r))),
                                Tensor(rng.normal(scale=1.0 / np.sqrt(d), size=(d, r))),
                                Tensor(np.zeros((r, d))))

        self.blocks = [
            BlockParams(ln(), ln(), ln(), eln(), eln(), eln(),
                        A.init_attention_params(rng, d, cfg.heads, cross=False),
                        A.init_attention_params(rng, d, cfg.heads, cross=False),
                        A.init_attention_params(rng, d, cfg.heads, cross=True),
                        A.init_attention_params(rng, d, cfg.heads, cross=True),
                        ffn(), effn())
            for _ in range(cfg.layers)
        ]
        self.head = HeadParams(
            Tensor(rng.normal(scale=1.0 / np.sqrt(d), size=(d, d))),
            Tensor(rng.normal(scale=1.0 / np.sqrt(d), size=(d, 1))),
            Tensor(rng.normal(scale=1.0 / np.sqrt(d), size=(d, 1))),
        )

    def params(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        out.update(self.pos_basis.named("pos_basis"))
        if self.vel_basis is not None:
            out.update(self.vel_basis.named("vel_basis"))
        out.update(self.bias_basis.named("bias_basis"))
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"block{i}"))
        out.update(self.head.named("head"))
        return out

    def randomize(self, seed: int) -> "Model":
        """Redraw every parameter (including the zero-initialized output
        projections) for randomized symmetry/gradient audits."""
        rng = np.random.default_rng(seed)
        for name, t in self.params().items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gamma" and t.ndim == 1:          # LN scales near 1
                t.data[...] = 1.0 + 0.2 * rng.normal(size=t.shape)
            elif leaf == "mu":
                t.data[...] = np.sort(rng.uniform(0.0, 3.0, size=t.shape))
            elif leaf == "sigma":
                t.data[...] = 0.5 + np.abs(rng.normal(size=t.shape))
            else:
                scale = 1.0 / np.sqrt(max(t.shape[-1] if t.ndim else 1, 1))
                t.data[...] = rng.normal(scale=max(scale, 0.1), size=t.shape)
        return self


class _Dropout:
    """Mask factory for one forward pass; inactive when rng is None."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None):
        self.cfg = cfg
        self.rng = rng

    def _mask(self, shape, rate) -> Tensor | None:
        if self.rng is None or rate <= 0.0:
            return None
        keep = (self.rng.random(shape) >= rate).astype(np.float64)
        return Tensor(keep / (1.0 - rate))

    def inv(self, t: Tensor, rate: float) -> Tensor:
        m = self._mask(t.shape, rate)
        return t if m is None else T.mul(t, m)

    def equ(self, t: Tensor, rate: float) -> Tensor:
        # whole 3-vector channels drop together, preserving equivariance
        m = self._mask(t.shape[:-2] + (1, t.shape[-1]), rate)
        return t if m is None else T.mul(t, m)

    def probs(self, b: int, n: int) -> Tensor | None:
        return self._mask((b, self.cfg.heads, n, n), self.cfg.dropout_attention)

    def path(self, b: int, equ: bool) -> Tensor | None:
        shape = (b, 1, 1, 1) if equ else (b, 1, 1)
        return self._mask(shape, self.cfg.droppath)


def inv_ln(z: Tensor, p: LNParams) -> Tensor:
    """Per-row standardization over channels, then affine."""
    m = z.mean(axis=-1, keepdims=True)
    centered = z - m
    var = T.mul(centered, centered).mean(axis=-1, keepdims=True)
    ok = (var.data > INV_LN_VAR_FLOOR).astype(np.float64)
    floored = T.mul(var, Tensor(ok)) + Tensor((1.0 - ok) * INV_LN_VAR_FLOOR)
    return T.mul(centered, T.power(floored, -0.5)) * p.gamma + p.beta


def equ_ln(z_equ: Tensor, p: EquLNParams, eps: float = EQU_LN_EPS) -> Tensor:
    """Whiten each particle's 3 x d block with the inverse square root of its
    3x3 channel covariance, then scale channels."""
    mu = z_equ.mean(axis=-1, keepdims=True)
    centered = z_equ - mu
    cov = T.matmul(centered, centered.transpose(_swap_axes(centered.ndim))) * (1.0 / z_equ.shape[-1])
    u = T.inv_sqrt_sym3(cov, eps)
    return T.mul(T.matmul(u, centered), p.gamma)


def _swap_axes(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def inv_ffn(z: Tensor, p: FFNParams, drop: _Dropout | None = None) -> Tensor:
    hidden = T.gelu(T.matmul(z, p.w1))
    if drop is not None:
        hidden = drop.inv(hidden, drop.cfg.dropout_hidden)
    return T.matmul(hidden, p.w2)


def equ_ffn(z_equ: Tensor, z_inv: Tensor, p: EquFFNParams,
            center: bool = False, drop: _Dropout | None = None) -> Tensor:
    src = A.center_channels(z_equ) if center else z_equ
    up = T.matmul(src, p.w_up)
    gate = T.gelu(T.matmul(z_inv, p.w_gate))
    hidden = A.scalar_product(up, gate)
    if drop is not None:
        hidden = drop.equ(hidden, drop.cfg.dropout_hidden)
    return T.matmul(hidden, p.w_down)


def input_layer(model: Model, types: np.ndarray, positions: np.ndarray,
                velocities: np.ndarray | None = None,
                drop: _Dropout | None = None) -> StreamPair:
    """Type embeddings for the invariant stream; direction (x) basis-encoded
    magnitude of mean-centered positions (and raw velocities, in the second
    half of the channels) for the equivariant stream."""
    cfg = model.cfg
    types = np.asarray(types, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.float64)
    if np.any(types >= cfg.vocab) or np.any(types < 0):
        raise InputError(f"type id outside vocabulary of size {cfg.vocab}")
    if cfg.velocity_input and velocities is None:
        raise InputError("model configured for velocity input but none given")
    if not cfg.velocity_input and velocities is not None:
        raise InputError("model not configured for velocity input")

    b, n = types.shape
    onehot = Tensor(np.eye(cfg.vocab)[types.reshape(-1)])
    z_inv = T.matmul(onehot, model.embedding).reshape((b, n, cfg.width))

    centered = G.mean_center(positions)
    norms = np.linalg.norm(centered, axis=-1)
    dirs = Tensor(G.unit_directions(centered)[..., None])          # (b, n, 3, 1)
    g_pos = G.gaussian_basis(norms, types, model.pos_basis)
    z_pos = T.mul(dirs, g_pos.reshape((b, n, 1, g_pos.shape[-1])))

    if cfg.velocity_input:
        velocities = np.asarray(velocities, dtype=np.float64)
        vnorms = np.linalg.norm(velocities, axis=-1)
        vdirs = Tensor(G.unit_directions(velocities)[..., None])
        g_vel = G.gaussian_basis(vnorms, types, model.vel_basis)
        z_vel = T.mul(vdirs, g_vel.reshape((b, n, 1, g_vel.shape[-1])))
        z_equ = T.concat([z_pos, z_vel], axis=-1)
    else:
        z_equ = z_pos

    if drop is not None:
        z_inv = drop.inv(z_inv, cfg.dropout_embedding)
        z_equ = drop.equ(z_equ, cfg.dropout_embedding)
    return StreamPair(z_inv, z_equ)


def _residual(stream: Tensor, branch: Tensor, mask: Tensor | None) -> Tensor:
    if mask is not None:
        branch = T.mul(branch, mask)
    return stream + branch


def two_stream_block(streams: StreamPair, bias: Tensor | None, blk: BlockParams,
                     cfg: ModelConfig, drop: _Dropout | None = None) -> StreamPair:
    """The six residual updates: self-attention, cross-attention, and FFN in
    each stream, each pre-norm wrapped."""
    z_inv, z_equ = streams.z_inv, streams.z_equ
    b, n = z_inv.shape[0], z_inv.shape[1]
    e3 = cfg.e3
    dr = drop if drop is not None else _Dropout(cfg, None)

    def bias_for(flag: bool) -> Tensor | None:
        return bias if (flag and bias is not None) else None

    if cfg.use_inv_self:
        a = inv_ln(z_inv, blk.ln_i1) if cfg.use_inv_ln else z_inv
        out = A.inv_self_attn(a, blk.inv_self, bias_for(cfg.bias_in_inv_self),
                              prob_mask=dr.probs(b, n))
        z_inv = _residual(z_inv, dr.inv(out, cfg.dropout_hidden), dr.path(b, False))
    if cfg.use_equ_self:
        a = equ_ln(z_equ, blk.ln_e1) if cfg.use_equ_ln else z_equ
        out = A.equ_self_attn(a, blk.equ_self, bias_for(cfg.bias_in_equ_self),
                              center=e3, prob_mask=dr.probs(b, n))
        z_equ = _residual(z_equ, dr.equ(out, cfg.dropout_hidden), dr.path(b, True))

    if cfg.use_inv_cross or cfg.use_equ_cross:
        a_inv = inv_ln(z_inv, blk.ln_i2) if cfg.use_inv_ln else z_inv
        a_equ = equ_ln(z_equ, blk.ln_e2) if cfg.use_equ_ln else z_equ
        if cfg.use_inv_cross:
            out = A.inv_cross_attn(a_inv, a_equ, blk.inv_cross,
                                   bias_for(cfg.bias_in_inv_cross),
                                   center=e3, prob_mask=dr.probs(b, n))
            z_inv = _residual(z_inv, dr.inv(out, cfg.dropout_hidden), dr.path(b, False))
        if cfg.use_equ_cross:
            out = A.equ_cross_attn(a_equ, a_inv, blk.equ_cross,
                                   bias_for(cfg.bias_in_equ_cross),
                                   center=e3, prob_mask=dr.probs(b, n))
            z_equ = _residual(z_equ, dr.equ(out, cfg.dropout_hidden), dr.path(b, True))

    if cfg.use_inv_ffn or cfg.use_equ_ffn:
        a_inv = inv_ln(z_inv, blk.ln_i3) if cfg.use_inv_ln else z_inv
        if cfg.use_equ_ffn:
            a_equ = equ_ln(z_equ, blk.ln_e3) if cfg.use_equ_ln else z_equ
            out = equ_ffn(a_equ, a_inv, blk.equ_ffn, center=e3, drop=drop)
            z_equ = _residual(z_equ, out, dr.path(b, True))
        if cfg.use_inv_ffn:
            out = inv_ffn(a_inv, blk.inv_ffn, drop=drop)
            z_inv = _residual(z_inv, out, dr.path(b, False))

    return StreamPair(z_inv, z_equ)


def forward(model: Model, types: np.ndarray, positions: np.ndarray,
            velocities: np.ndarray | None = None,
            dropout_rng: np.random.Generator | None = None) -> StreamPair:
    """Input layer then the stacked blocks, with the pairwise-distance bias
    computed once and shared by every block."""
    cfg = model.cfg
    types = np.asarray(types, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.float64)
    drop = _Dropout(cfg, dropout_rng) if dropout_rng is not None else None

    streams = input_layer(model, types, positions, velocities, drop)
    bias = None
    if cfg.use_structural_bias:
        dist = G.pairwise_distances(positions)
        pairs = G.type_pair_ids(types, cfg.vocab)
        bias = G.structural_bias(dist, pairs, model.bias_basis)
    for blk in model.blocks:
        streams = two_stream_block(streams, bias, blk, cfg, drop)
    return streams


def invariant_head(z_inv: Tensor, head: HeadParams) -> Tensor:
    """Mean-pool particles, 2-layer GELU MLP to one scalar per sample."""
    pooled = T.stable_sum(z_inv, axis=-2) * (1.0 / z_inv.shape[-2])
    hidden = T.gelu(T.matmul(pooled, head.inv_w1))
    return T.matmul(hidden, head.inv_w2).reshape(z_inv.shape[:-2])


def equivariant_head(streams: StreamPair, p0: np.ndarray, head: HeadParams) -> Tensor:
    """Predicted positions: p0 plus a per-particle 3-vector read linearly
    from the equivariant channels."""
    delta = T.matmul(streams.z_equ, head.equ_w)
    delta = delta.reshape(delta.shape[:-1])
    return Tensor(np.asarray(p0, dtype=np.float64)) + delta


def predict_positions(model: Model, types, p0, v0,
                      dropout_rng: np.random.Generator | None = None) -> Tensor:
    streams = forward(model, types, p0, v0 if model.cfg.velocity_input else None,
                      dropout_rng=dropout_rng)
    return equivariant_head(streams, p0, model.head)


CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path: str) -> None:
    """JSON manifest line (config + per-parameter name/shape/byte offset)
    followed by one flat little-endian float64 blob."""
    params = model.params()
    entries = []
    offset = 0
    blobs = []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"version": CHECKPOINT_VERSION, "config": asdict(model.cfg),
                "params": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as fh:
        header = fh.readline()
        blob = fh.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest in {path}: {exc}") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    model = Model(ModelConfig(**manifest["config"]))
    params = model.params()
    for entry in manifest["params"]:
        name = entry["name"]
        if name not in params:
            raise CheckpointError(f"manifest entry {name!r} not a model parameter")
        shape = tuple(entry["shape"])
        target = params[name]
        if shape != target.shape:
            raise CheckpointError(
                f"manifest entry {name!r}: shape {shape} != expected {target.shape}")
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise CheckpointError(f"manifest entry {name!r}: blob too short")
        target.data[...] = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape)
    return model
