"""Hybrid SSM / attention / MLP blocks and the full language model.

Arrangements (N is RMSnorm, r the residual stream):

    SAM    r + S(N r) + A(N r) + M(N r)
    SA_M   r' = r + S(N r) + A(N r);  r' + M(N' r')
    S_A_M  r' = r + S(N1 r);  r'' = r' + A(N2 r');  r'' + M(N3 r'')
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from . import numerics as nx
from .attention import AttnParams, AttnShape, gqa_attention, init_attn_params, positions_from_doc_ids
from .mup import ModelShapes, MuPMultiplierSet, init_std, scale_multipliers
from .numerics import Tensor
from .ssm import DtPolicy, SsmParams, SsmShape, mamba2_block_forward, init_ssm_params

log = logging.getLogger(__name__)

ARRANGEMENTS = ("SAM", "SA_M", "S_A_M")
# inner widths per unit of d_model at the reference model (4096 : 6144 : 4864 at d = 1280)
BASE_RATIOS = (Fraction(4096, 1280), Fraction(6144, 1280), Fraction(4864, 1280))


@dataclass(frozen=True)
class SsmConfig:
    d_head: int = 16
    d_state: int = 16
    n_groups: int = 1
    conv_k: int = 4
    chunk_size: int = 64


@dataclass(frozen=True)
class AttnConfig:
    d_head: int = 16
    n_kv_heads: int = 1
    rope_base: float = 1e4


@dataclass(frozen=True)
class HybridConfig:
    d_model: int = 64
    n_layers: int = 2
    vocab: int = 257
    alloc: tuple[int, int, int] = (2, 1, 5)        # eighths for (SSM, attention, MLP)
    bases: tuple[float, float, float] | None = None  # default: BASE_RATIOS * d_model
    arrangement: str = "SA_M"
    ssm: SsmConfig = field(default_factory=SsmConfig)
    attn: AttnConfig = field(default_factory=AttnConfig)
    precision: str = "verification"
    seed: int = 0
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.arrangement not in ARRANGEMENTS:
            raise ValueError(f"arrangement must be one of {ARRANGEMENTS}")
        if len(self.alloc) != 3 or sum(self.alloc) != 8 or min(self.alloc) < 1:
            raise ValueError(f"alloc must be three positive eighths summing to 8, got {self.alloc}")
        nx.dtype_for(self.precision)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alloc"] = list(self.alloc)
        d["bases"] = None if self.bases is None else list(self.bases)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "HybridConfig":
        d = dict(d)
        d["ssm"] = SsmConfig(**d.get("ssm", {}))
        d["attn"] = AttnConfig(**d.get("attn", {}))
        if "alloc" in d:
            d["alloc"] = tuple(d["alloc"])
        if d.get("bases") is not None:
            d["bases"] = tuple(d["bases"])
        return cls(**d)


def allocate_channels(config: HybridConfig) -> tuple[int, int, int]:
    """(d_ssm, d_attn, d_mlp): eighths of each base, rounded down to whole head multiples."""
    if config.bases is None:
        bases = [r * config.d_model for r in BASE_RATIOS]
    else:
        bases = [Fraction(b).limit_denominator(10 ** 6) for b in config.bases]
    units = (config.ssm.d_head * config.ssm.n_groups, config.attn.d_head * config.attn.n_kv_heads, 1)
    out = []
    for name, a, base, unit in zip(("ssm", "attn", "mlp"), config.alloc, bases, units):
        raw = Fraction(a, 8) * base
        dim = int(raw // unit) * unit
        if dim < unit or dim == 0:
            raise ValueError(f"{name} allocation {float(raw):.3f} is smaller than one head ({unit})")
        if raw != dim:
            log.debug("channel allocation: %s rounded %s -> %d (remainder %s)", name, float(raw), dim, float(raw - dim))
        out.append(dim)
    return tuple(out)


def model_shapes(config: HybridConfig) -> ModelShapes:
    d_ssm, d_attn, d_mlp = allocate_channels(config)
    return ModelShapes(d=config.d_model, d_mlp=d_mlp, d_head_ssm=config.ssm.d_head,
                       n_heads_ssm=d_ssm // config.ssm.d_head, d_state=config.ssm.d_state,
                       n_groups=config.ssm.n_groups, d_head_attn=config.attn.d_head,
                       n_heads_attn=d_attn // config.attn.d_head)


def norm_names(arrangement: str) -> list[str]:
    return {"SAM": ["norm_mixer"], "SA_M": ["norm_mixer", "norm_mlp"],
            "S_A_M": ["norm_ssm", "norm_attn", "norm_mlp"]}[arrangement]


# -- parameter bookkeeping -----------------------------------------------------------
SSM_FIELDS = ("W_x", "W_z", "W_B", "W_C", "W_dt", "conv_kernel", "conv_bias", "b_dt", "A_log", "D", "rms_scale", "W_out")
ATTN_FIELDS = ("W_Q", "W_K", "W_V", "W_attn")
MLP_FIELDS = ("W_up", "W_gate", "W_down")

# leaf name -> (kind, optimizer group)
_GROUP_OF = {
    "W_x": ("matrix", "W_in"), "W_z": ("matrix", "W_in"), "W_B": ("matrix", "W_in"),
    "W_C": ("matrix", "W_in"), "W_dt": ("matrix", "W_in"), "W_Q": ("matrix", "W_in"),
    "W_K": ("matrix", "W_in"), "W_V": ("matrix", "W_in"),
    "W_out": ("matrix", "W_out"), "W_attn": ("matrix", "W_out"),
    "W_up": ("matrix", "W_up"), "W_gate": ("matrix", "W_gate"), "W_down": ("matrix", "W_down"),
    "W_emb": ("matrix", "W_emb"), "W_unemb": ("matrix", "W_unemb"),
    "conv_kernel": ("vector", "W_conv1d"), "conv_bias": ("vector", "b_conv1d"),
    "b_dt": ("vector", "b_dt"), "A_log": ("vector", "A_log"), "D": ("vector", "D"),
    "rms_scale": ("vector", "N^SSM"), "norm_f": ("vector", "N^f"),
    "norm_mixer": ("vector", "N^Mixer"), "norm_ssm": ("vector", "N^Mixer"),
    "norm_attn": ("vector", "N^Mixer"), "norm_mlp": ("vector", "N^MLP"),
}

# forward multiplier -> leaf names it multiplies
ATTACHED_LEAVES = {
    "m_emb": ("W_emb",), "m_unemb": ("W_unemb",), "m_MLP": ("W_down",), "m_gate": ("W_gate",),
    "m_attn": ("W_attn",), "m_key": ("W_K",), "m_x": ("W_x",), "m_z": ("W_z",), "m_B": ("W_B",),
    "m_C": ("W_C",), "m_dt": ("W_dt",), "m_SSM": ("W_out",),
}


def leaf(name: str) -> str:
    return name.rsplit(".", 1)[-1]


def param_group(name: str) -> tuple[str, str]:
    return _GROUP_OF[leaf(name)]


def param_hypers(names, mults: MuPMultiplierSet) -> dict[str, tuple[float, float]]:
    """name -> (lr multiplier, wd multiplier); vector-like parameters get no weight decay."""
    out = {}
    for n in names:
        kind, g = param_group(n)
        out[n] = (mults.matrix_lr[g], mults.matrix_wd[g]) if kind == "matrix" else (mults.vector_lr[g], 0.0)
    return out


def attached_params(names) -> dict[str, list[str]]:
    out = {k: [] for k in ATTACHED_LEAVES}
    for n in names:
        for k, leaves in ATTACHED_LEAVES.items():
            if leaf(n) in leaves:
                out[k].append(n)
    return out


# -- model -------------------------------------------------------------------------------
class HybridModel:
    """Config plus a flat, ordered name -> Tensor parameter table."""

    def __init__(self, config: HybridConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.d_ssm, self.d_attn, self.d_mlp = allocate_channels(config)
        c = config
        self.ssm_shape = SsmShape(self.d_ssm // c.ssm.d_head, c.ssm.d_head, c.ssm.d_state,
                                  c.ssm.n_groups, c.ssm.conv_k, c.ssm.chunk_size)
        self.attn_shape = AttnShape(self.d_attn // c.attn.d_head, c.attn.n_kv_heads, c.attn.d_head, c.attn.rope_base)

    @property
    def shapes(self) -> ModelShapes:
        return model_shapes(self.config)

    def names(self) -> list[str]:
        return list(self.params)

    def ssm(self, i: int) -> SsmParams:
        p = self.params
        return SsmParams(**{f: p[f"layers.{i}.ssm.{f}"] for f in SSM_FIELDS}, shape=self.ssm_shape)

    def attn(self, i: int) -> AttnParams:
        p = self.params
        return AttnParams(**{f: p[f"layers.{i}.attn.{f}"] for f in ATTN_FIELDS}, shape=self.attn_shape)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]):
        for k, t in self.params.items():
            a = np.asarray(arrays[k])
            if a.shape != t.shape:
                raise nx.ShapeError(f"{k}: expected {t.shape}, got {a.shape}")
            t.data = a.astype(t.dtype, copy=True)

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


def init_model(config: HybridConfig, mults: MuPMultiplierSet | None = None,
               rng: np.random.Generator | None = None) -> tuple[HybridModel, MuPMultiplierSet]:
    """Build parameters; multipliers default to the reference set transferred to this model's shapes.

    Each projection W with forward multiplier m and fan-in n is drawn with sigma = g / (m sqrt n),
    which keeps m W x at O(g) for every width.
    """
    shapes = model_shapes(config)
    base = MuPMultiplierSet.table13() if mults is None else mults
    mults = scale_multipliers(base, shapes=shapes)
    m = mults.forward
    rng = np.random.default_rng(config.seed) if rng is None else rng
    dtype = nx.dtype_for(config.precision)
    d = config.d_model
    d_ssm, d_attn, d_mlp = allocate_channels(config)
    key_gain = 1.0 / np.sqrt(config.attn.d_head)
    ssm_std = {"W_x": init_std(m["m_x"], d), "W_z": init_std(m["m_z"], d), "W_B": init_std(m["m_B"], d),
               "W_C": init_std(m["m_C"], d), "W_dt": init_std(m["m_dt"], d), "W_out": init_std(m["m_SSM"], d_ssm)}
    attn_std = {"W_Q": init_std(1.0, d), "W_K": init_std(m["m_key"], d, key_gain),
                "W_V": init_std(1.0, d), "W_attn": init_std(m["m_attn"], d_attn)}
    leaf_t = lambda a: Tensor(a, requires_grad=True, dtype=dtype)

    params: dict[str, Tensor] = {"W_emb": leaf_t(rng.standard_normal((config.vocab, d)) / m["m_emb"])}
    model = HybridModel(config, {})
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        for n in norm_names(config.arrangement):
            params[pre + n] = leaf_t(np.ones(d))
        sp = init_ssm_params(rng, d, model.ssm_shape, ssm_std, dtype)
        for f in SSM_FIELDS:
            params[f"{pre}ssm.{f}"] = getattr(sp, f)
        ap = init_attn_params(rng, d, model.attn_shape, attn_std, dtype)
        for f in ATTN_FIELDS:
            params[f"{pre}attn.{f}"] = getattr(ap, f)
        params[pre + "mlp.W_up"] = leaf_t(rng.standard_normal((d_mlp, d)) * init_std(1.0, d))
        params[pre + "mlp.W_gate"] = leaf_t(rng.standard_normal((d_mlp, d)) * init_std(m["m_gate"], d))
        params[pre + "mlp.W_down"] = leaf_t(rng.standard_normal((d, d_mlp)) * init_std(m["m_MLP"], d_mlp))
    params["norm_f"] = leaf_t(np.ones(d))
    params["W_unemb"] = leaf_t(rng.standard_normal((config.vocab, d)) * init_std(m["m_unemb"], d))
    for k, t in params.items():
        t.name = k
    model.params = params
    return model, mults


def mlp_forward(r: Tensor, W_up: Tensor, W_gate: Tensor, W_down: Tensor, mults: Mapping[str, float]) -> Tensor:
    gate = nx.silu(nx.linear(r, W_gate) * mults["m_gate"])
    return nx.linear(gate * nx.linear(r, W_up), W_down) * mults["m_MLP"]


def block_forward(r: Tensor, model: HybridModel, i: int, mults: Mapping[str, float], *, resets=None,
                  doc_ids=None, positions=None, policy: DtPolicy = DtPolicy(), step: int = 0) -> Tensor:
    p = model.params
    pre = f"layers.{i}."
    eps = model.config.rms_eps
    norm = lambda x, n: nx.rmsnorm(x, p[pre + n], eps=eps)
    ssm = lambda x: mamba2_block_forward(x, model.ssm(i), mults, policy, resets, step, eps=eps)
    attn = lambda x: gqa_attention(x, model.attn(i), mults, doc_ids, positions)
    mlp = lambda x: mlp_forward(x, p[pre + "mlp.W_up"], p[pre + "mlp.W_gate"], p[pre + "mlp.W_down"], mults)
    arr = model.config.arrangement
    if arr == "SAM":
        n = norm(r, "norm_mixer")
        return r + ssm(n) + attn(n) + mlp(n)
    if arr == "SA_M":
        n = norm(r, "norm_mixer")
        r1 = r + ssm(n) + attn(n)
        return r1 + mlp(norm(r1, "norm_mlp"))
    r1 = r + ssm(norm(r, "norm_ssm"))
    r2 = r1 + attn(norm(r1, "norm_attn"))
    return r2 + mlp(norm(r2, "norm_mlp"))


def _doc_ids_from_resets(resets, T: int) -> np.ndarray:
    if resets is None:
        return np.zeros(T, dtype=np.int64)
    r = np.asarray(resets).astype(np.int64).copy()
    r[..., 0] = 0
    return np.cumsum(r, axis=-1)


def model_forward(model: HybridModel, tokens, mults: Mapping[str, float], *, resets=None, doc_ids=None,
                  positions=None, policy: DtPolicy = DtPolicy(), step: int = 0,
                  record: list | None = None) -> Tensor:
    """tokens [..., T] -> logits [..., T, vocab]. ``record`` collects each block's output array."""
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        raise TypeError("tokens must be integer ids")
    if np.any(tokens < 0) or np.any(tokens >= model.config.vocab):
        raise ValueError(f"token id outside vocabulary of size {model.config.vocab}")
    T = tokens.shape[-1]
    if doc_ids is None:
        doc_ids = _doc_ids_from_resets(resets, T)
    if positions is None:
        positions = positions_from_doc_ids(doc_ids)
    p = model.params
    r = nx.take_rows(p["W_emb"], tokens) * mults["m_emb"]
    for i in range(model.config.n_layers):
        r = block_forward(r, model, i, mults, resets=resets, doc_ids=doc_ids, positions=positions,
                          policy=policy, step=step)
        if record is not None:
            record.append(r.data)
    r = nx.rmsnorm(r, p["norm_f"], eps=model.config.rms_eps)
    return nx.linear(r, p["W_unemb"]) * mults["m_unemb"]
