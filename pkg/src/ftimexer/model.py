"""Patch-token forecaster with exogenous variable tokens and a spectral branch.

Per layer the endogenous tokens go through temporal self-attention, exogenous
cross-attention, an amplitude-filtering frequency branch, time/frequency
fusion and a pre-norm feed-forward block. The head reads the flattened final
token matrix.
"""
import dataclasses
import hashlib
import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor

__all__ = [
    "ConfigError",
    "ModelConfig",
    "FTimeXer",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"FTXCKPT\x00"
CHECKPOINT_VERSION = 1

EXO_AGGREGATIONS = ("mean", "attention-pool")
FUSIONS = ("concat-mlp", "sigmoid-gate")
MASK_GRANULARITIES = ("entry", "variable", "timestep")
LOSS_KINDS = ("mse", "mae")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus the robustness-training knobs that travel with a model.

    None of the widths, depths or activations are pinned down by the method
    itself; the defaults here are ours.
    """

    n_endo: int = 1
    n_exo: int = 0
    lookback: int = 12
    patch_len: int = 4
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    mask_p: float = 0.3
    cons_weight: float = 0.1
    freq_branch_on: bool = True
    robust_training_on: bool = True
    # With robust training on but consistency off, the model trains on masked
    # exogenous input only (the mask-only ablation rows).
    consistency_on: bool = True
    mask_granularity: str = "entry"
    exo_agg: str = "mean"
    fusion: str = "concat-mlp"
    # Add the attention-path tokens back onto the concat-MLP output.
    fusion_residual: bool = True
    loss_kind: str = "mse"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_endo < 1:
            raise ConfigError("n_endo must be at least 1")
        if self.n_exo < 0:
            raise ConfigError("n_exo must be non-negative")
        if self.lookback < 1 or self.patch_len < 1:
            raise ConfigError("lookback and patch_len must be positive")
        if self.lookback % self.patch_len:
            raise ConfigError(f"lookback {self.lookback} is not divisible by patch_len {self.patch_len}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be at least 1")
        if not 0.0 <= self.mask_p <= 1.0:
            raise ConfigError(f"mask_p must lie in [0, 1], got {self.mask_p}")
        if self.cons_weight < 0:
            raise ConfigError(f"cons_weight must be non-negative, got {self.cons_weight}")
        if self.exo_agg not in EXO_AGGREGATIONS:
            raise ConfigError(f"exo_agg must be one of {EXO_AGGREGATIONS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}")
        if self.mask_granularity not in MASK_GRANULARITIES:
            raise ConfigError(f"mask_granularity must be one of {MASK_GRANULARITIES}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def n_patches(self) -> int:
        return self.lookback // self.patch_len

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_patches

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _param_shapes(cfg: ModelConfig):
    """Ordered (name, shape, kind) triples; kind is 'weight', 'bias' or 'zero'."""
    d, P, T = cfg.d_model, cfg.n_patches, cfg.lookback
    specs = [
        ("patch.w", (cfg.patch_len * cfg.n_endo, d), "weight"),
        ("patch.b", (d,), "bias"),
        ("global_token", (d,), "zero"),
    ]
    if cfg.n_exo:
        specs += [("exo.theta", (cfg.n_exo, d), "weight"), ("exo.b", (d,), "bias")]
        if cfg.exo_agg == "attention-pool":
            specs += [("exo.pool_w", (d,), "zero"), ("exo.pool_s", (T,), "zero")]
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        specs += [(p + f"self.{n}", (d, d), "weight") for n in ("wq", "wk", "wv", "wo")]
        if cfg.n_exo:
            specs += [(p + f"cross.{n}", (d, d), "weight") for n in ("wq", "wk", "wv", "wo")]
        if cfg.freq_branch_on:
            specs += [
                (p + "freq.w_pre", (d, d), "weight"),
                (p + "freq.b_pre", (d,), "bias"),
                (p + "freq.w_f", (P, P), "weight"),
                (p + "freq.b_f", (P,), "bias"),
                (p + "freq.w_post", (d, d), "weight"),
                (p + "freq.b_post", (d,), "bias"),
            ]
            if cfg.fusion == "concat-mlp":
                specs += [
                    (p + "fuse.w1", (2 * d, d), "weight"),
                    (p + "fuse.b1", (d,), "bias"),
                    (p + "fuse.w2", (d, d), "weight"),
                    (p + "fuse.b2", (d,), "bias"),
                ]
            else:
                specs += [(p + "fuse.wg", (2 * d, d), "weight"), (p + "fuse.bg", (d,), "bias")]
        specs += [
            (p + "ln.gain", (d,), "one"),
            (p + "ln.bias", (d,), "bias"),
            (p + "ffn.w1", (d, 4 * d), "weight"),
            (p + "ffn.b1", (4 * d,), "bias"),
            (p + "ffn.w2", (4 * d, d), "weight"),
            (p + "ffn.b2", (d,), "bias"),
        ]
    specs += [("head.w", (cfg.n_tokens * d, cfg.n_endo), "weight"), ("head.b", (cfg.n_endo,), "bias")]
    return specs


class FTimeXer:
    """Model parameters plus the forward pass.

    ``params`` maps names to leaf tensors. ``counters`` tallies forward passes
    and spectral transforms so tests can see which paths actually ran.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.params = OrderedDict()
        for name, shape, kind in _param_shapes(cfg):
            if kind == "weight":
                bound = math.sqrt(1.0 / shape[0])
                data = rng.uniform(-bound, bound, size=shape)
            elif kind == "one":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            self.params[name] = Tensor(data, requires_grad=True, name=name)
        self.counters = {"forward": 0, "dft": 0}
        self.last_attention = {}

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def n_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        if list(state) != list(self.params):
            raise ValueError("parameter names do not match this configuration")
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {np.shape(v)} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "FTimeXer":
        other = FTimeXer.__new__(FTimeXer)
        other.cfg, other.seed = self.cfg, self.seed
        other.params = OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.params.items()
        )
        other.counters = {"forward": 0, "dft": 0}
        other.last_attention = {}
        return other

    # ------------------------------------------------------------ embeddings

    def embed_endogenous(self, x_endo) -> Tensor:
        """(B, T, d_e) -> (B, 1 + P, d): global token followed by patch tokens."""
        cfg = self.cfg
        x = tn._wrap(x_endo)
        B = x.shape[0]
        flat = x.reshape(B, cfg.n_patches, cfg.patch_len * cfg.n_endo)
        patches = flat @ self["patch.w"] + self["patch.b"]
        glob = tn.expand(self["global_token"].reshape(1, 1, cfg.d_model), (B, 1, cfg.d_model))
        return tn.concat([glob, patches], axis=1)

    def embed_exogenous(self, x_exo) -> Tensor:
        """(B, T, d_x) -> (B, d_x, d): one variable token per exogenous column.

        Each scalar x[t, j] is projected by row j of theta plus the shared bias,
        then the T projected steps are pooled into one token.
        """
        cfg = self.cfg
        x = tn._wrap(x_exo)
        B, T, dx = x.shape
        d = cfg.d_model
        steps = tn.mul(
            tn.expand(x.reshape(B, T, dx, 1), (B, T, dx, d)),
            tn.expand(self["exo.theta"], (B, T, dx, d)),
        ) + self["exo.b"]
        if cfg.exo_agg == "mean":
            return tn.mean(steps, axis=1)
        # Scores: content term plus a learned per-step offset; softmax over time.
        content = (steps @ self["exo.pool_w"].reshape(d, 1)).reshape(B, T, dx)
        scores = content + tn.expand(self["exo.pool_s"].reshape(1, T, 1), (B, T, dx))
        weights = tn.softmax(scores, axis=1)
        pooled = tn.mul(steps, tn.expand(weights.reshape(B, T, dx, 1), (B, T, dx, d)))
        return tn.sum(pooled, axis=1)

    # ------------------------------------------------------------- attention

    def _attend(self, q_in, kv_in, prefix, tag):
        cfg = self.cfg
        B, N, d = q_in.shape
        M = kv_in.shape[1]
        h = cfg.n_heads
        dh = d // h
        q = tn.transpose((q_in @ self[prefix + "wq"]).reshape(B, N, h, dh), (0, 2, 1, 3))
        k = tn.transpose((kv_in @ self[prefix + "wk"]).reshape(B, M, h, dh), (0, 2, 3, 1))
        v = tn.transpose((kv_in @ self[prefix + "wv"]).reshape(B, M, h, dh), (0, 2, 1, 3))
        weights = tn.softmax(tn.scale(q @ k, 1.0 / math.sqrt(dh)), axis=-1)
        self.last_attention[tag] = weights.data
        out = tn.transpose(weights @ v, (0, 2, 1, 3)).reshape(B, N, d)
        return out @ self[prefix + "wo"]

    def temporal_self_attention(self, z, layer: int) -> Tensor:
        return z + self._attend(z, z, f"layers.{layer}.self.", f"self.{layer}")

    def cross_attention(self, z, exo_tokens, layer: int) -> Tensor:
        if exo_tokens is None or exo_tokens.shape[1] == 0:
            return z
        return z + self._attend(z, exo_tokens, f"layers.{layer}.cross.", f"cross.{layer}")

    # -------------------------------------------------------- frequency path

    def frequency_branch(self, z, layer: int) -> Tensor:
        """Filter the amplitude spectrum of the patch tokens along the token axis.

        The global token (row 0) is passed through untouched.
        """
        p = f"layers.{layer}.freq."
        patches = z[:, 1:, :]
        signal = patches @ self[p + "w_pre"] + self[p + "b_pre"]
        per_channel = tn.swapaxes(signal, 1, 2)  # (B, d, P)
        spectrum = tn.dft(per_channel)  # (B, d, 2, P)
        self.counters["dft"] += 1
        amp = tn.modulus(spectrum)
        filtered = tn.relu(amp @ self[p + "w_f"].T + self[p + "b_f"])
        carrier = tn.phasor(spectrum)
        shape = carrier.shape
        rebuilt_spec = tn.mul(tn.expand(filtered.reshape(shape[:-2] + (1, shape[-1])), shape), carrier)
        rebuilt = tn.swapaxes(tn.idft_real(rebuilt_spec), 1, 2)
        out = rebuilt @ self[p + "w_post"] + self[p + "b_post"]
        return tn.concat([z[:, 0:1, :], out], axis=1)

    def fuse(self, z_time, z_freq, layer: int) -> Tensor:
        if not self.cfg.freq_branch_on:
            return z_time
        p = f"layers.{layer}.fuse."
        both = tn.concat([z_time, z_freq], axis=-1)
        if self.cfg.fusion == "concat-mlp":
            hidden = tn.gelu(both @ self[p + "w1"] + self[p + "b1"])
            mixed = hidden @ self[p + "w2"] + self[p + "b2"]
            return z_time + mixed if self.cfg.fusion_residual else mixed
        gate = tn.sigmoid(both @ self[p + "wg"] + self[p + "bg"])
        return tn.mul(gate, z_time) + tn.mul(1.0 - gate, z_freq)

    def ffn_block(self, z, layer: int) -> Tensor:
        p = f"layers.{layer}."
        normed = tn.layernorm(z, self[p + "ln.gain"], self[p + "ln.bias"], self.cfg.ln_eps)
        hidden = tn.gelu(normed @ self[p + "ffn.w1"] + self[p + "ffn.b1"])
        return z + (hidden @ self[p + "ffn.w2"] + self[p + "ffn.b2"])

    # ---------------------------------------------------------------- forward

    def _check_inputs(self, x_endo, x_exo):
        cfg = self.cfg
        x_endo = np.asarray(x_endo.data if isinstance(x_endo, Tensor) else x_endo, dtype=np.float64)
        single = x_endo.ndim == 2
        if single:
            x_endo = x_endo[None]
        if x_endo.ndim != 3 or x_endo.shape[1:] != (cfg.lookback, cfg.n_endo):
            raise ValueError(
                f"x_endo has shape {x_endo.shape}, expected (batch, {cfg.lookback}, {cfg.n_endo})"
            )
        B = x_endo.shape[0]
        if x_exo is None:
            x_exo = np.zeros((B, cfg.lookback, 0))
        x_exo = np.asarray(x_exo.data if isinstance(x_exo, Tensor) else x_exo, dtype=np.float64)
        if single and x_exo.ndim == 2:
            x_exo = x_exo[None]
        if x_exo.shape != (B, cfg.lookback, cfg.n_exo):
            raise ValueError(
                f"x_exo has shape {x_exo.shape}, expected ({B}, {cfg.lookback}, {cfg.n_exo})"
            )
        return x_endo, x_exo, single

    def forward(self, x_endo, x_exo=None) -> Tensor:
        """Predict the next step. Batched input gives (B, d_e); a single window gives (d_e,)."""
        cfg = self.cfg
        x_endo, x_exo, single = self._check_inputs(x_endo, x_exo)
        self.counters["forward"] += 1
        B = x_endo.shape[0]
        z = self.embed_endogenous(x_endo)
        exo_tokens = self.embed_exogenous(x_exo) if cfg.n_exo else None
        for layer in range(cfg.n_layers):
            z = self.temporal_self_attention(z, layer)
            z = self.cross_attention(z, exo_tokens, layer)
            if cfg.freq_branch_on:
                z = self.fuse(z, self.frequency_branch(z, layer), layer)
            z = self.ffn_block(z, layer)
        out = z.reshape(B, cfg.n_tokens * cfg.d_model) @ self["head.w"] + self["head.b"]
        return out.reshape(cfg.n_endo) if single else out

    __call__ = forward

    def predict(self, x_endo, x_exo=None, batch_size: int = 512) -> np.ndarray:
        """Gradient-free batched inference returning a numpy array."""
        x_endo, x_exo, single = self._check_inputs(x_endo, x_exo)
        outs = []
        with tn.no_grad():
            for i in range(0, x_endo.shape[0], batch_size):
                outs.append(self.forward(x_endo[i:i + batch_size], x_exo[i:i + batch_size]).data)
        out = np.concatenate(outs, axis=0) if outs else np.zeros((0, self.cfg.n_endo))
        return out[0] if single else out


# ------------------------------------------------------------------ checkpoints


def checkpoint_bytes(model: FTimeXer, meta=None) -> bytes:
    """Serialise config, seed and parameters.

    Layout: magic, little-endian u32 header length, UTF-8 JSON header, then the
    parameters back to back as little-endian float64 in header order.
    """
    entries = []
    blobs = []
    offset = 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "<f8",
        "config": model.cfg.to_dict(),
        "seed": model.seed,
        "params": entries,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for b in blobs:
        buf.write(b)
    return buf.getvalue()


def save_checkpoint(path, model: FTimeXer, meta=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, meta))


def load_checkpoint(path):
    """Return ``(model, meta)`` from a file written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4
    header = json.loads(blob[pos:pos + n].decode("utf-8"))
    pos += n
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    model = FTimeXer(ModelConfig.from_dict(header["config"]), seed=header["seed"])
    state = OrderedDict()
    for e in header["params"]:
        start = pos + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype="<f8").reshape(e["shape"])
        state[e["name"]] = arr.astype(np.float64)
    model.load_state_dict(state)
    return model, header["meta"]
