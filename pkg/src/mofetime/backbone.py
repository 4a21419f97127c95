"""Decoder blocks of causal attention followed by a routed mixture of experts.

Each expert is either a frequency-time cell (``ftc=True``): a harmonic branch
``cos(x W_f + b_f) + sin(x W_f + b_f)`` concatenated with a swish feed-forward
branch and projected back to ``h``; or, for the ablation baseline, a plain
two-layer feed-forward sized to the same parameter count.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .embedding import EmbedParams, dilated_context_mix, init_embed, pointwise_embed
from .preprocess import RevInStats, instance_stats, revin_apply
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass(frozen=True)
class ModelConfig:
    h: int = 64
    layers: int = 2
    heads: int = 4
    experts: int = 8
    top_k: int = 2
    expert_width: int = 64
    revin: bool = True
    ftc: bool = True
    kernel_size: int = 3
    dilation: int = 2
    rope_base: float = 10000.0
    revin_eps: float = 1e-5

    def __post_init__(self):
        for name in ("h", "layers", "heads", "experts", "top_k", "expert_width",
                     "kernel_size", "dilation"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.h % self.heads:
            raise ConfigError("heads", f"h={self.h} is not divisible by heads={self.heads}")
        if (self.h // self.heads) % 2:
            raise ConfigError("heads", "rotary embedding needs an even head dimension")
        if self.top_k > self.experts:
            raise ConfigError("top_k", f"top_k={self.top_k} exceeds experts={self.experts}")
        if not self.rope_base > 0:
            raise ConfigError("rope_base", "must be positive")
        if not self.revin_eps > 0:
            raise ConfigError("revin_eps", "must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown model config field")
        return cls(**dict(d))

    def diff(self, other: "ModelConfig") -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name) != getattr(other, f.name)]

    @property
    def head_dim(self) -> int:
        return self.h // self.heads


def ftc_param_count(h: int, m: int) -> int:
    return (h * m + m) + (h * m + m) + (m * m + m) + (2 * m * h + h)


def ffn_width(h: int, m: int) -> int:
    """Hidden width of the feed-forward expert that matches an FTC expert's size."""
    return max(1, round((ftc_param_count(h, m) - h) / (2 * h + 1)))


# ---------------------------------------------------------------- parameter views

@dataclass
class AttnParams:
    norm_g: Tensor
    norm_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    rope_base: float | None = 10000.0


@dataclass
class RouterParams:
    gate: Tensor  # (h, N)
    top_k: int

    @property
    def experts(self) -> int:
        return self.gate.shape[1]


@dataclass
class FtcExpertParams:
    freq_w: Tensor     # (h, m)
    freq_b: Tensor     # (m,)
    time1_w: Tensor    # (h, m)
    time1_b: Tensor
    time2_w: Tensor    # (m, m)
    time2_b: Tensor
    combine_w: Tensor  # (2m, h)
    combine_b: Tensor  # (h,)


@dataclass
class FfnExpertParams:
    w1: Tensor  # (h, f)
    b1: Tensor
    w2: Tensor  # (f, h)
    b2: Tensor


@dataclass
class RoutingStats:
    dispatch_fraction: np.ndarray  # (N,), constant
    mean_prob: Tensor              # (N,), differentiable
    token_count: int

    @property
    def experts(self) -> int:
        return self.dispatch_fraction.size


@dataclass
class Routing:
    indices: np.ndarray  # (n, K) expert ids, highest probability first
    weights: Tensor      # (n, K), renormalized over the selection
    probs: Tensor        # (n, N), full softmax
    stats: RoutingStats


class ModelParams(Mapping[str, Tensor]):
    """All learnable tensors, keyed by canonical dotted names."""

    def __init__(self, cfg: ModelConfig, tensors: Mapping[str, Tensor]):
        self.cfg = cfg
        self._t = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def count(self) -> int:
        return sum(t.size for t in self._t.values())

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._t.items()}

    def embed(self) -> EmbedParams:
        g = self._t
        return EmbedParams(g["embed.proj_w"], g["embed.proj_v"], g["embed.gate_logit"],
                           g["embed.conv"], g["embed.out.w"], g["embed.out.b"],
                           dilation=self.cfg.dilation)

    def attn(self, layer: int) -> AttnParams:
        p = f"layers.{layer}.attn."
        g = self._t
        return AttnParams(g[p + "norm.g"], g[p + "norm.b"], g[p + "q"], g[p + "k"], g[p + "v"],
                          g[p + "o"], heads=self.cfg.heads, rope_base=self.cfg.rope_base)

    def router(self, layer: int) -> RouterParams:
        return RouterParams(self._t[f"layers.{layer}.moe.gate"], top_k=self.cfg.top_k)

    def moe_norm(self, layer: int) -> tuple[Tensor, Tensor]:
        p = f"layers.{layer}.moe.norm."
        return self._t[p + "g"], self._t[p + "b"]

    def experts(self, layer: int) -> list:
        out = []
        for i in range(self.cfg.experts):
            p = f"layers.{layer}.moe.experts.{i}."
            g = self._t
            if self.cfg.ftc:
                out.append(FtcExpertParams(
                    g[p + "freq.w"], g[p + "freq.b"], g[p + "time1.w"], g[p + "time1.b"],
                    g[p + "time2.w"], g[p + "time2.b"], g[p + "combine.w"], g[p + "combine.b"]))
            else:
                out.append(FfnExpertParams(g[p + "ffn1.w"], g[p + "ffn1.b"],
                                           g[p + "ffn2.w"], g[p + "ffn2.b"]))
        return out

    def revin(self) -> tuple[Tensor, Tensor]:
        return self._t["revin.scale"], self._t["revin.shift"]


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_arrays(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Draw initial values in a fixed order so a seed pins every parameter."""
    h, m = cfg.h, cfg.expert_width
    arrays: dict[str, np.ndarray] = {}
    if cfg.revin:
        arrays["revin.scale"] = np.ones(1)
        arrays["revin.shift"] = np.zeros(1)
    for k, v in init_embed(h, cfg.kernel_size, cfg.dilation, rng).items():
        arrays["embed." + k] = v
    for layer in range(cfg.layers):
        p = f"layers.{layer}."
        arrays[p + "attn.norm.g"] = np.ones(h)
        arrays[p + "attn.norm.b"] = np.zeros(h)
        for name in ("q", "k", "v", "o"):
            arrays[p + "attn." + name] = _uniform(rng, h, (h, h))
        arrays[p + "moe.norm.g"] = np.ones(h)
        arrays[p + "moe.norm.b"] = np.zeros(h)
        arrays[p + "moe.gate"] = _uniform(rng, h, (h, cfg.experts))
        for i in range(cfg.experts):
            e = f"{p}moe.experts.{i}."
            if cfg.ftc:
                arrays[e + "freq.w"] = _uniform(rng, h, (h, m))
                arrays[e + "freq.b"] = np.zeros(m)
                arrays[e + "time1.w"] = _uniform(rng, h, (h, m))
                arrays[e + "time1.b"] = np.zeros(m)
                arrays[e + "time2.w"] = _uniform(rng, m, (m, m))
                arrays[e + "time2.b"] = np.zeros(m)
                arrays[e + "combine.w"] = _uniform(rng, 2 * m, (2 * m, h))
                arrays[e + "combine.b"] = np.zeros(h)
            else:
                f = ffn_width(h, m)
                arrays[e + "ffn1.w"] = _uniform(rng, h, (h, f))
                arrays[e + "ffn1.b"] = np.zeros(f)
                arrays[e + "ffn2.w"] = _uniform(rng, f, (f, h))
                arrays[e + "ffn2.b"] = np.zeros(h)
    arrays["head.norm.g"] = np.ones(h)
    arrays["head.norm.b"] = np.zeros(h)
    arrays["head.w"] = _uniform(rng, h, (h, 1))
    arrays["head.b"] = np.zeros(1)
    return arrays


def params_from_arrays(cfg: ModelConfig, arrays: Mapping[str, np.ndarray]) -> ModelParams:
    return ModelParams(cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> ModelParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return params_from_arrays(cfg, init_arrays(cfg, rng))


# ---------------------------------------------------------------- attention

def _rope_tables(T_len: int, dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    inv = base ** (-np.arange(0, dim, 2) / dim)
    ang = np.arange(T_len)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=1)
    return np.cos(ang), np.sin(ang)


def _rotate(x: Tensor, cos_t: np.ndarray, sin_t: np.ndarray) -> Tensor:
    half = x.shape[-1] // 2
    rot = T.concat([T.neg(x[..., half:]), x[..., :half]], axis=-1)
    return T.add(T.mul(x, T.tensor(cos_t)), T.mul(rot, T.tensor(sin_t)))


def _scores_and_values(x: Tensor, p: AttnParams, rope: bool) -> tuple[Tensor, Tensor]:
    B, T_len, h = x.shape
    H = p.heads
    dh = h // H
    u = T.layer_norm(x, p.norm_g, p.norm_b)

    def heads(w):
        return T.transpose(T.reshape(T.matmul(u, w), (B, T_len, H, dh)), (0, 2, 1, 3))

    q, k, v = heads(p.wq), heads(p.wk), heads(p.wv)
    if rope and p.rope_base is not None:
        cos_t, sin_t = _rope_tables(T_len, dh, p.rope_base)
        q, k = _rotate(q, cos_t, sin_t), _rotate(k, cos_t, sin_t)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    mask = np.tril(np.ones((T_len, T_len), dtype=bool))
    return T.softmax(scores, mask=mask), v


def causal_attention(tokens: Tensor, p: AttnParams, rope: bool = True) -> Tensor:
    """Pre-norm causal multi-head self-attention with residual; (…, T, h) -> same."""
    squeeze = tokens.data.ndim == 2
    x = T.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
    B, T_len, h = x.shape
    att, v = _scores_and_values(x, p, rope)
    ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, T_len, h))
    out = T.add(x, T.matmul(ctx, p.wo))
    return T.reshape(out, tokens.shape) if squeeze else out


def attention_weights(tokens: Tensor, p: AttnParams, rope: bool = True) -> np.ndarray:
    """The (B, H, T, T) attention probabilities of :func:`causal_attention`."""
    x = tokens if tokens.data.ndim == 3 else T.reshape(tokens, (1,) + tokens.shape)
    with T.no_grad():
        return _scores_and_values(x, p, rope)[0].data


# ---------------------------------------------------------------- routing + experts

def route(tokens: Tensor, p: RouterParams) -> Routing:
    """Softmax over all experts, keep the top-K (ties -> lower id), renormalize."""
    flat = T.reshape(tokens, (-1, tokens.shape[-1])) if tokens.data.ndim != 2 else tokens
    n = flat.shape[0]
    N, K = p.experts, p.top_k
    probs = T.softmax(T.matmul(flat, p.gate))
    # stable sort on -p keeps the lower id first among equal probabilities
    idx = np.argsort(-probs.data, axis=1, kind="stable")[:, :K]
    rows = np.repeat(np.arange(n), K)
    picked = T.reshape(T.index(probs, (rows, idx.reshape(-1))), (n, K))
    total = T.broadcast_to(T.reshape(T.reduce_sum(picked, axis=1), (n, 1)), (n, K))
    weights = T.div(picked, total)
    counts = np.bincount(idx.reshape(-1), minlength=N).astype(np.float64)
    stats = RoutingStats(counts / (K * n), T.reduce_mean(probs, axis=0), n)
    return Routing(idx, weights, probs, stats)


def ftc_expert_forward(x: Tensor, e: FtcExpertParams) -> Tensor:
    """Frequency-time cell on rows of ``x`` (…, h)."""
    xf = T.add(T.matmul(x, e.freq_w), e.freq_b)
    freq = T.add(T.cos(xf), T.sin(xf))
    hidden = T.swish(T.add(T.matmul(x, e.time1_w), e.time1_b))
    tim = T.add(T.matmul(hidden, e.time2_w), e.time2_b)
    return T.add(T.matmul(T.concat([freq, tim], axis=-1), e.combine_w), e.combine_b)


def ftc_frequency_branch(x: Tensor, e: FtcExpertParams) -> Tensor:
    xf = T.add(T.matmul(x, e.freq_w), e.freq_b)
    return T.add(T.cos(xf), T.sin(xf))


def ffn_expert_forward(x: Tensor, e: FfnExpertParams) -> Tensor:
    hidden = T.swish(T.add(T.matmul(x, e.w1), e.b1))
    return T.add(T.matmul(hidden, e.w2), e.b2)


def expert_forward(x: Tensor, e) -> Tensor:
    if isinstance(e, FtcExpertParams):
        return ftc_expert_forward(x, e)
    return ffn_expert_forward(x, e)


def moe_layer(tokens: Tensor, router: RouterParams, experts: Sequence,
              norm: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, RoutingStats]:
    """``tokens + sum_{selected i} w_i * expert_i(u)`` with ``u = norm(tokens)`` (or tokens).

    Only the tokens routed to an expert are fed through it.
    """
    if len(experts) != router.experts:
        raise ValueError(f"{len(experts)} experts but the router scores {router.experts}")
    h = tokens.shape[-1]
    u = T.layer_norm(tokens, *norm) if norm is not None else tokens
    flat = T.reshape(u, (-1, h))
    n = flat.shape[0]
    r = route(flat, router)
    acc = T.tensor(np.zeros((n, h)))
    for i, e in enumerate(experts):
        rows, slots = np.nonzero(r.indices == i)
        if rows.size == 0:
            continue
        y = expert_forward(T.index(flat, rows), e)
        w = T.broadcast_to(T.reshape(T.index(r.weights, (rows, slots)), (rows.size, 1)), (rows.size, h))
        acc = T.index_add(acc, rows, T.mul(y, w))
    return T.add(tokens, T.reshape(acc, tokens.shape)), r.stats


# ---------------------------------------------------------------- full model

@dataclass
class ForwardResult:
    predictions: Tensor          # (B, T) or (T,), in the model's normalized space
    stats: list[RoutingStats]
    hidden: list[np.ndarray] | None
    mean: np.ndarray             # (B, 1) instance statistics of the raw context
    std: np.ndarray


def context_moments(x: np.ndarray, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.revin:
        mean, var = instance_stats(x)
        return mean, np.sqrt(var + cfg.revin_eps)
    return np.zeros(x.shape[:-1] + (1,)), np.ones(x.shape[:-1] + (1,))


def normalize_input(x: np.ndarray, mean: np.ndarray, std: np.ndarray,
                    cfg: ModelConfig, params: ModelParams) -> Tensor:
    if not cfg.revin:
        return T.tensor(x)
    return revin_apply((x - mean) / std, *params.revin())


def forward_normalized(xin: Tensor, cfg: ModelConfig, params: ModelParams,
                       capture: bool = False) -> tuple[Tensor, list[RoutingStats], list | None]:
    """Run the decoder on already-normalized rows (B, T); returns next-point predictions."""
    emb = params.embed()
    h_t = dilated_context_mix(pointwise_embed(xin, emb), emb)
    stats, hidden = [], ([] if capture else None)
    for layer in range(cfg.layers):
        h_t = causal_attention(h_t, params.attn(layer))
        h_t, st = moe_layer(h_t, params.router(layer), params.experts(layer),
                            norm=params.moe_norm(layer))
        stats.append(st)
        if capture:
            hidden.append(h_t.data.copy())
    normed = T.layer_norm(h_t, params["head.norm.g"], params["head.norm.b"])
    out = T.add(T.matmul(normed, params["head.w"]), params["head.b"])
    return T.reshape(out, xin.shape), stats, hidden


def model_forward(window_context, cfg: ModelConfig, params: ModelParams,
                  capture: bool = False) -> ForwardResult:
    """Predict, at every context position t, the normalized value at t + 1."""
    x = np.asarray(window_context, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"context must be (T,) or (B, T) with T >= 1, got {x.shape}")
    mean, std = context_moments(x, cfg)
    preds, stats, hidden = forward_normalized(normalize_input(x, mean, std, cfg, params),
                                              cfg, params, capture)
    if single:
        preds = T.reshape(preds, (x.shape[1],))
        if hidden is not None:
            hidden = [hd[0] for hd in hidden]
    return ForwardResult(preds, stats, hidden, mean, std)


def standardize_predictions(preds: Tensor, cfg: ModelConfig, params: ModelParams) -> Tensor:
    """Undo the learnable affine so predictions compare with ``(x - mean) / std`` targets."""
    if not cfg.revin:
        return preds
    scale, shift = params.revin()
    n = preds.shape[-1]
    return T.div(T.sub(preds, T.broadcast_to(shift, (n,))), T.broadcast_to(scale, (n,)))


def _affine(params: ModelParams, cfg: ModelConfig) -> tuple[float, float]:
    if not cfg.revin:
        return 1.0, 0.0
    scale, shift = params.revin()
    return float(scale.data[0]), float(shift.data[0])


def autoregressive_forecast_batch(contexts, horizon: int, cfg: ModelConfig, params: ModelParams,
                                  stats: Sequence[RevInStats] | None = None,
                                  return_normalized: bool = False):
    """Roll (B, T_x) contexts forward ``horizon`` steps; returns (B, horizon) in original units.

    Each step feeds the last ``T_x`` normalized points and appends the final
    prediction.  Denormalization uses the statistics of the original context
    (or ``stats`` when given).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    x = np.asarray(contexts, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("contexts must be (B, T_x)")
    T_x = x.shape[1]
    if stats is None or not cfg.revin:
        mean, std = context_moments(x, cfg)
    else:
        mean = np.array([[s.mean] for s in stats])
        std = np.array([[s.std(cfg.revin_eps)] for s in stats])
    with T.no_grad():
        buf = normalize_input(x, mean, std, cfg, params).data
        produced = []
        for _ in range(horizon):
            preds, _, _ = forward_normalized(T.tensor(buf[:, -T_x:]), cfg, params)
            nxt = preds.data[:, -1:]
            produced.append(nxt)
            buf = np.concatenate([buf[:, 1:], nxt], axis=1)
    norm = np.concatenate(produced, axis=1)
    scale, shift = _affine(params, cfg)
    out = std * (norm - shift) / scale + mean
    if return_normalized:
        return out, (norm - shift) / scale
    return out


def autoregressive_forecast(context, horizon: int, cfg: ModelConfig, params: ModelParams,
                            stats: RevInStats | None = None) -> np.ndarray:
    x = np.asarray(context, dtype=np.float64).reshape(1, -1)
    return autoregressive_forecast_batch(x, horizon, cfg, params,
                                         None if stats is None else [stats])[0]


def context_stats(context, cfg: ModelConfig) -> RevInStats:
    """The statistics :func:`autoregressive_forecast` derives from a context."""
    x = np.asarray(context, dtype=np.float64)
    if not cfg.revin:
        return RevInStats(0.0, 1.0)
    mean, var = instance_stats(x)
    return RevInStats(float(mean.reshape(-1)[0]), float(var.reshape(-1)[0]))


class MoFETime:
    """A configuration plus its parameters."""

    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int | np.random.Generator = 0) -> "MoFETime":
        return cls(cfg, init_params(cfg, seed))

    def forward(self, context, capture: bool = False) -> ForwardResult:
        return model_forward(context, self.cfg, self.params, capture=capture)

    def forecast(self, context, horizon: int, stats: RevInStats | None = None) -> np.ndarray:
        return autoregressive_forecast(context, horizon, self.cfg, self.params, stats)

    def forecast_batch(self, contexts, horizon: int, **kw) -> np.ndarray:
        return autoregressive_forecast_batch(contexts, horizon, self.cfg, self.params, **kw)

    def copy(self) -> "MoFETime":
        return MoFETime(self.cfg, params_from_arrays(self.cfg, self.params.state_arrays()))

    def __repr__(self) -> str:
        return f"MoFETime({self.cfg}, params={self.params.count()})"
