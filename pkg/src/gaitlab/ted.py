"""Temporal evidence distillation: learnable queries cross-attending over frames.

A stack of pre-norm decoder blocks (query self-attention, cross-attention
into the positional-encoded frame features, feed-forward) is applied to M
learnable motion queries; the output queries are mean-pooled into a single
global dynamic descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import MhaParams, Parameter, Tensor
from .errors import InvalidConfig, MissingForwardState, ShapeMismatch, TooManyFrames
from .util import rng_for


@dataclass(frozen=True)
class TedConfig:
    M: int = 32
    L: int = 3
    H: int = 4
    D: int = 64  # desk-scale default; production-scale would be 2048
    ffn_mult: int = 4
    query_self_attention: bool = True

    def __post_init__(self):
        for name in ("M", "L", "H", "D", "ffn_mult"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.D % self.H != 0:
            raise InvalidConfig(f"D={self.D} not divisible by H={self.H}")


@dataclass
class TedLayer:
    self_attn: MhaParams
    cross_attn: MhaParams
    ffn_w1: Parameter
    ffn_b1: Parameter
    ffn_w2: Parameter
    ffn_b2: Parameter
    ln1_g: Parameter
    ln1_b: Parameter
    ln2_g: Parameter
    ln2_b: Parameter
    ln3_g: Parameter
    ln3_b: Parameter

    def all(self) -> list[Parameter]:
        return (
            self.self_attn.all()
            + self.cross_attn.all()
            + [
                self.ffn_w1,
                self.ffn_b1,
                self.ffn_w2,
                self.ffn_b2,
                self.ln1_g,
                self.ln1_b,
                self.ln2_g,
                self.ln2_b,
                self.ln3_g,
                self.ln3_b,
            ]
        )


@dataclass
class TedParams:
    cfg: TedConfig
    T_max: int
    queries: Parameter
    pos_emb: Parameter
    layers: list[TedLayer] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        out = [self.queries, self.pos_emb]
        for layer in self.layers:
            out.extend(layer.all())
        return out

    def named(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}


def parameter_count(cfg: TedConfig, T_max: int) -> int:
    """Closed-form trainable parameter count for a TedParams instance.

    Per layer: two attention blocks (4 weight matrices, 3 biases each; the
    key projection is bias-free), one feed-forward pair, three layer norms.
    """
    d, mult = cfg.D, cfg.ffn_mult
    per_layer = 8 * d * d + 6 * d + 2 * mult * d * d + mult * d + d + 6 * d
    return cfg.M * d + T_max * d + cfg.L * per_layer


def _init_mha(rng, d: int, prefix: str) -> MhaParams:
    def w(name):
        return Parameter.create(f"{prefix}.{name}", ag.xavier_uniform(rng, d, d))

    def b(name):
        return Parameter.create(f"{prefix}.{name}", np.zeros(d))

    return MhaParams(
        wq=w("wq"), bq=b("bq"), wk=w("wk"),
        wv=w("wv"), bv=b("bv"), wo=w("wo"), bo=b("bo"),
    )


def init_ted(cfg: TedConfig, T_max: int, seed: int) -> TedParams:
    """Seeded deterministic initialization; same seed gives identical parameters."""
    if T_max < 1:
        raise InvalidConfig(f"T_max must be positive, got {T_max}")
    rng = rng_for("ted-init", seed)
    d, mult = cfg.D, cfg.ffn_mult
    params = TedParams(
        cfg=cfg,
        T_max=T_max,
        queries=Parameter.create("queries", ag.normal_init(rng, (cfg.M, d))),
        pos_emb=Parameter.create("pos_emb", ag.normal_init(rng, (T_max, d))),
    )
    for i in range(cfg.L):
        pre = f"layer{i}"
        params.layers.append(
            TedLayer(
                self_attn=_init_mha(rng, d, f"{pre}.self"),
                cross_attn=_init_mha(rng, d, f"{pre}.cross"),
                ffn_w1=Parameter.create(f"{pre}.ffn_w1", ag.xavier_uniform(rng, d, mult * d)),
                ffn_b1=Parameter.create(f"{pre}.ffn_b1", np.zeros(mult * d)),
                ffn_w2=Parameter.create(f"{pre}.ffn_w2", ag.xavier_uniform(rng, mult * d, d)),
                ffn_b2=Parameter.create(f"{pre}.ffn_b2", np.zeros(d)),
                ln1_g=Parameter.create(f"{pre}.ln1_g", np.ones(d)),
                ln1_b=Parameter.create(f"{pre}.ln1_b", np.zeros(d)),
                ln2_g=Parameter.create(f"{pre}.ln2_g", np.ones(d)),
                ln2_b=Parameter.create(f"{pre}.ln2_b", np.zeros(d)),
                ln3_g=Parameter.create(f"{pre}.ln3_g", np.ones(d)),
                ln3_b=Parameter.create(f"{pre}.ln3_b", np.zeros(d)),
            )
        )
    return params


@dataclass
class TedForward:
    f_temp: Tensor
    attention_maps: list[dict[str, list[np.ndarray]]]
    v_input: Tensor


def ted_forward(params: TedParams, V, want_input_grad: bool = False) -> TedForward:
    """Run the decoder over a T x D feature matrix.

    Memory is V plus the first T positional-embedding rows. Returns the
    pooled descriptor (a Tensor wired to the parameter tape) plus per-layer
    attention maps.
    """
    cfg = params.cfg
    v_data = V.data if isinstance(V, Tensor) else np.asarray(V, dtype=np.float64)
    if v_data.ndim != 2 or v_data.shape[1] != cfg.D:
        raise ShapeMismatch(f"V must be T x {cfg.D}, got {v_data.shape}")
    T = v_data.shape[0]
    if T > params.T_max:
        raise TooManyFrames(f"T={T} exceeds positional table T_max={params.T_max}")

    v_in = Tensor(v_data, requires_grad=want_input_grad)
    mem = ag.add(v_in, ag.slice_rows(params.pos_emb.tensor, 0, T))

    x = params.queries.tensor
    maps: list[dict[str, list[np.ndarray]]] = []
    for layer in params.layers:
        layer_maps: dict[str, list[np.ndarray]] = {}
        if cfg.query_self_attention:
            normed = ag.layer_norm(x, layer.ln1_g.tensor, layer.ln1_b.tensor)
            attn_out, self_maps = ag.multi_head_attention(normed, normed, normed, cfg.H, layer.self_attn)
            x = ag.add(x, attn_out)
            layer_maps["self"] = self_maps
        normed = ag.layer_norm(x, layer.ln2_g.tensor, layer.ln2_b.tensor)
        cross_out, cross_maps = ag.multi_head_attention(normed, mem, mem, cfg.H, layer.cross_attn)
        x = ag.add(x, cross_out)
        layer_maps["cross"] = cross_maps
        normed = ag.layer_norm(x, layer.ln3_g.tensor, layer.ln3_b.tensor)
        h = ag.gelu(ag.linear(normed, layer.ffn_w1.tensor, layer.ffn_b1.tensor))
        x = ag.add(x, ag.linear(h, layer.ffn_w2.tensor, layer.ffn_b2.tensor))
        maps.append(layer_maps)

    return TedForward(f_temp=ag.mean_pool_rows(x), attention_maps=maps, v_input=v_in)


def ted_backward(params: TedParams, fwd: TedForward, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of upstream . f_temp for every decoder parameter (and V).

    The forward must have been built against trainable parameters; the V
    gradient appears under key "V" when the forward requested it.
    """
    f = fwd.f_temp
    if not f.requires_grad or not f._prev:
        raise MissingForwardState("forward pass retained no tape to differentiate")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != f.data.shape:
        raise ShapeMismatch(f"upstream grad shape {upstream.shape} != f_temp shape {f.data.shape}")
    zero_grads(params)
    if fwd.v_input.requires_grad:
        fwd.v_input.zero_grad()
    loss = ag.sum_all(ag.mul(f, Tensor(upstream)))
    loss.backward()
    return collect_grads(params, fwd.v_input)


def collect_grads(params: TedParams, v_input: Tensor | None = None) -> dict[str, np.ndarray]:
    grads = {}
    for p in params.parameters():
        grads[p.name] = (
            p.tensor.grad.copy() if p.tensor.grad is not None else np.zeros_like(p.data)
        )
    if v_input is not None and v_input.requires_grad:
        grads["V"] = v_input.grad.copy() if v_input.grad is not None else np.zeros_like(v_input.data)
    return grads


def zero_grads(params: TedParams) -> None:
    for p in params.parameters():
        p.tensor.zero_grad()
