"""A small pre-norm decoder-only transformer with untied embedding and head.

Blocks are Llama-style: RMSNorm, causal multi-head attention with rotary
position encoding, and a SiLU-gated MLP.  Bagged inputs ``[B, l, s]`` are
embedded as the mean of their token embeddings; rotary positions index
latent positions ``0..l-1`` unless ``rope_positions == "data"``, in which
case latent position ``j`` uses data offset ``j * s``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor, no_grad

ABLATIONS = ("full", "input_only", "output_only", "none")
IO_PARAMS = ("embedding", "head")


@dataclass
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 384
    max_len: int = 256
    init_seed: int = 0
    init_scale: float = 1.0
    rope_base: float = 10000.0
    rope_positions: str = "latent"
    norm_eps: float = 1e-6

    def validate(self) -> list[str]:
        problems = []
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                problems.append(f"model.{name} must be positive")
        if self.n_heads > 0 and self.d_model % self.n_heads:
            problems.append("model.d_model must be divisible by model.n_heads")
        elif self.n_heads > 0 and (self.d_model // self.n_heads) % 2:
            problems.append("model head dimension must be even for rotary encoding")
        if self.rope_positions not in ("latent", "data"):
            problems.append("model.rope_positions must be 'latent' or 'data'")
        if self.init_scale <= 0:
            problems.append("model.init_scale must be positive")
        return problems

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Parameter names and shapes in creation order."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"embedding": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn_norm": (d,),
            p + "wq": (d, d),
            p + "wk": (d, d),
            p + "wv": (d, d),
            p + "wo": (d, d),
            p + "mlp_norm": (d,),
            p + "w_gate": (d, f),
            p + "w_up": (d, f),
            p + "w_down": (f, d),
        })
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, cfg.vocab_size)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def _draw(rng: np.random.Generator, name: str, shape: tuple, cfg: ModelConfig, dtype) -> np.ndarray:
    if len(shape) == 1:  # norm gains
        return np.ones(shape, dtype=dtype)
    std = cfg.init_scale / np.sqrt(cfg.d_model)
    return (rng.standard_normal(shape) * std).astype(dtype)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    precision: str = "single"

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def interior_digest(self) -> str:
        """SHA-256 over every parameter except embedding and head."""
        h = hashlib.sha256()
        for k, v in self.params.items():
            if k not in IO_PARAMS:
                h.update(k.encode())
                h.update(v.data.tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                                        for k, v in self.params.items()}, self.precision)


def init_state(cfg: ModelConfig, precision: str = "single") -> ModelState:
    problems = cfg.validate()
    if problems:
        raise ContractError("; ".join(problems))
    dtype = T.dtype_for(precision)
    rng = np.random.default_rng(cfg.init_seed)
    params = {name: Tensor(_draw(rng, name, shape, cfg, dtype), requires_grad=True, name=name)
              for name, shape in param_shapes(cfg).items()}
    return ModelState(cfg, params, precision)


def reinit_io(state: ModelState, seed: int) -> ModelState:
    """Redraw embedding and head from the init distribution; keep the interior."""
    cfg = state.config
    rng = np.random.default_rng(seed)
    dtype = T.dtype_for(state.precision)
    shapes = param_shapes(cfg)
    params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in state.params.items()}
    for name in IO_PARAMS:
        params[name] = Tensor(_draw(rng, name, shapes[name], cfg, dtype), requires_grad=True, name=name)
    return ModelState(cfg, params, state.precision)


def superpose_embed(state: ModelState, inputs) -> Tensor:
    """Embed ``[B, l, s]`` bags as the mean of their token embeddings.

    ``s == 1`` and 2-D inputs take the plain lookup path.
    """
    inputs = np.asarray(inputs)
    table = state["embedding"]
    if inputs.ndim == 2:
        return T.embedding(table, inputs)
    if inputs.ndim != 3:
        raise ContractError(f"expected [B, l] or [B, l, s] ids, got shape {inputs.shape}")
    if inputs.shape[-1] == 1:
        return T.embedding(table, inputs[..., 0])
    return T.embedding_bag_mean(table, inputs)


def rope_tables(cfg: ModelConfig, positions: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
    hd = cfg.head_dim
    inv = 1.0 / cfg.rope_base ** (np.arange(0, hd, 2, dtype=np.float64) / hd)
    ang = positions.astype(np.float64)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _attention(state: ModelState, x: Tensor, p: str, cos, sin, mask) -> Tensor:
    cfg = state.config
    b, l, d = x.shape
    h, hd = cfg.n_heads, cfg.head_dim

    def heads(w):
        return T.transpose(T.reshape(T.matmul(x, state[p + w]), (b, l, h, hd)), (0, 2, 1, 3))

    q = T.rope(heads("wq"), cos, sin)
    k = T.rope(heads("wk"), cos, sin)
    v = heads("wv")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    att = T.softmax(T.masked_fill(scores, mask, -1e30))
    out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, l, d))
    return T.matmul(out, state[p + "wo"])


def _mlp(state: ModelState, x: Tensor, p: str) -> Tensor:
    gate = T.silu(T.matmul(x, state[p + "w_gate"]))
    return T.matmul(T.mul(gate, T.matmul(x, state[p + "w_up"])), state[p + "w_down"])


def hidden_states(state: ModelState, h: Tensor, bag_size: int = 1) -> Tensor:
    cfg = state.config
    l = h.shape[1]
    if l > cfg.max_len:
        raise ContractError(f"sequence of {l} positions exceeds max_len {cfg.max_len}")
    pos = np.arange(l) * (bag_size if cfg.rope_positions == "data" else 1)
    cos, sin = rope_tables(cfg, pos, h.dtype)
    mask = np.triu(np.ones((l, l), dtype=bool), k=1)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = T.add(h, _attention(state, T.rmsnorm(h, state[p + "attn_norm"], cfg.norm_eps), p, cos, sin, mask))
        h = T.add(h, _mlp(state, T.rmsnorm(h, state[p + "mlp_norm"], cfg.norm_eps), p))
    return T.rmsnorm(h, state["final_norm"], cfg.norm_eps)


def forward(state: ModelState, inputs, ablation: str = "none") -> Tensor:
    """Logits ``[B, positions, V]``.

    ``full`` and ``input_only`` take bagged ``[B, l, s]`` ids; ``output_only``
    and ``none`` take flat ``[B, L]`` ids.  Which targets the logits are
    scored against is the loss's business, not the model's.
    """
    if ablation not in ABLATIONS:
        raise ContractError(f"unknown ablation mode {ablation!r}")
    inputs = np.asarray(inputs)
    want = 3 if ablation in ("full", "input_only") else 2
    if inputs.ndim != want:
        raise ContractError(f"ablation {ablation!r} expects {want}-D ids, got shape {inputs.shape}")
    h = superpose_embed(state, inputs)
    s = inputs.shape[-1] if inputs.ndim == 3 else 1
    return T.matmul(hidden_states(state, h, s), state["head"])


def generate(state: ModelState, prompt, n: int, temperature: float = 0.0,
             seed: Optional[int] = None) -> list[int]:
    """Sample ``n`` tokens after ``prompt``; temperature 0 is greedy."""
    toks = [int(t) for t in prompt]
    if not toks:
        raise ContractError("generate needs a non-empty prompt")
    if temperature < 0:
        raise ContractError("temperature must be >= 0")
    rng = np.random.default_rng(seed)
    window = state.config.max_len
    with no_grad():
        for _ in range(n):
            ctx = np.asarray([toks[-window:]], dtype=np.int64)
            z = forward(state, ctx, "none").data[0, -1].astype(np.float64)
            if temperature == 0:
                nxt = int(np.argmax(z))
            else:
                p = np.exp((z - z.max()) / temperature)
                nxt = int(rng.choice(len(p), p=p / p.sum()))
            toks.append(nxt)
    return toks[len(prompt):]


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
