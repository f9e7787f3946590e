"""Distribution-aware model: compact transformer backbone, a growing set of
per-domain transfer modules (the domain-style encoder), a unification head
producing adaptive mixing weights, and per-domain classifier heads.

All parameters live in small component classes that expose
``named_params()`` in a fixed order; the trainer and checkpoint code rely
on that order being deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ProtocolError, ShapeError
from .numerics import Tensor

INIT_STD = 0.02
LN_EPS = 1e-5


@dataclass
class BackboneConfig:
    height: int = 32
    width: int = 16
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 12
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError("patch_size must divide image height and width")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    @property
    def tokens(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = Tensor(rng.normal(0.0, INIT_STD, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def named_params(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class LayerNorm:
    def __init__(self, dim: int):
        self.g = Tensor(np.ones(dim), requires_grad=True)
        self.b = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / (var + LN_EPS).sqrt() * self.g + self.b

    def named_params(self, prefix):
        yield f"{prefix}.g", self.g
        yield f"{prefix}.b", self.b


class MultiHeadSelfAttention:
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h, dh = self.heads, self.head_dim

        def split(t):
            return t.reshape(b, n, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        att = nx.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)),
                         axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.wo(out)

    def named_params(self, prefix):
        for name, sub in (("wq", self.wq), ("wk", self.wk),
                          ("wv", self.wv), ("wo", self.wo)):
            yield from sub.named_params(f"{prefix}.{name}")


class FeedForward:
    def __init__(self, dim: int, mlp_ratio: float, rng: np.random.Generator):
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())

    def named_params(self, prefix):
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")


class EncoderBlock:
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.embed_dim)
        self.attn = MultiHeadSelfAttention(cfg.embed_dim, cfg.heads, rng)
        self.ln2 = LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.mlp_ratio, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x))

    def named_params(self, prefix):
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.ffn.named_params(f"{prefix}.ffn")


class Backbone:
    """Patch embedding + positional embedding + encoder stack."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch = Linear(cfg.patch_dim, cfg.embed_dim, rng)
        self.pos = Tensor(rng.normal(0.0, INIT_STD, (cfg.tokens, cfg.embed_dim)),
                          requires_grad=True)
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.depth)]

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """B x C x H x W -> B x N x (C * p * p), row-major patch grid."""
        cfg = self.cfg
        b, c, h, w = images.shape
        if (c, h, w) != (cfg.channels, cfg.height, cfg.width):
            raise ShapeError(
                f"images {images.shape[1:]} do not match config "
                f"({cfg.channels}, {cfg.height}, {cfg.width})")
        p = cfg.patch_size
        x = images.reshape(b, c, h // p, p, w // p, p)
        x = x.transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, cfg.tokens, cfg.patch_dim)

    def __call__(self, images: np.ndarray):
        x = self.patch(Tensor(self.patchify(images))) + self.pos
        for block in self.blocks:
            x = block(x)
        return x, x.mean(axis=1)

    def named_params(self, prefix="backbone"):
        yield from self.patch.named_params(f"{prefix}.patch")
        yield f"{prefix}.pos", self.pos
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"{prefix}.blocks.{i}")


class TransferModule:
    """One MHSA block, one FFN block, and a final D -> D linear map.

    Consumes backbone tokens, mean-pools after the FFN, and maps the
    pooled vector through the linear layer to the domain-specific
    representation.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.embed_dim)
        self.attn = MultiHeadSelfAttention(cfg.embed_dim, cfg.heads, rng)
        self.ln2 = LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.mlp_ratio, rng)
        self.out = Linear(cfg.embed_dim, cfg.embed_dim, rng)
        # near-identity output map so a fresh module starts out passing the
        # pooled representation through instead of scrambling it
        self.out.w.data = np.eye(cfg.embed_dim) + self.out.w.data
        self.frozen = False

    def __call__(self, tokens: Tensor) -> Tensor:
        x = tokens + self.attn(self.ln1(tokens))
        x = x + self.ffn(self.ln2(x))
        return self.out(x.mean(axis=1))

    def named_params(self, prefix):
        yield from self.ln1.named_params(f"{prefix}.ln1")
        yield from self.attn.named_params(f"{prefix}.attn")
        yield from self.ln2.named_params(f"{prefix}.ln2")
        yield from self.ffn.named_params(f"{prefix}.ffn")
        yield from self.out.named_params(f"{prefix}.out")

    def set_frozen(self, frozen: bool):
        self.frozen = frozen
        for _, p in self.named_params("tm"):
            p.requires_grad = not frozen

    def clone(self) -> "TransferModule":
        dup = TransferModule.__new__(TransferModule)
        for attr in ("ln1", "attn", "ln2", "ffn", "out"):
            setattr(dup, attr, _clone_component(getattr(self, attr)))
        dup.frozen = False
        return dup


def _clone_component(comp):
    dup = comp.__class__.__new__(comp.__class__)
    for slot, value in vars(comp).items():
        if isinstance(value, Tensor):
            setattr(dup, slot, Tensor(value.data.copy(), requires_grad=True))
        elif hasattr(value, "named_params"):
            setattr(dup, slot, _clone_component(value))
        else:
            setattr(dup, slot, value)
    return dup


class ClassifierHead:
    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.num_classes = num_classes
        self.linear = Linear(dim, num_classes, rng)

    def __call__(self, theta: Tensor) -> Tensor:
        return nx.softmax(self.linear(theta), axis=1)

    def named_params(self, prefix):
        yield from self.linear.named_params(f"{prefix}.linear")


@dataclass
class ForwardOutputs:
    tokens: Tensor
    pooled: Tensor
    thetas: list
    omega: Tensor | None
    theta: Tensor


class DkuaModel:
    """Backbone + domain-style encoder + unification head + classifiers.

    With ``use_dse=False`` the model degenerates to a plain backbone with
    per-domain classifiers (the naive fine-tune baseline): the unified
    representation is the pooled backbone output.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator,
                 use_dse: bool = True):
        self.cfg = cfg
        self.use_dse = use_dse
        self.backbone = Backbone(cfg, rng)
        self.tms: list[TransferModule] = []
        self.unify_w: Tensor | None = None
        self.unify_b: Tensor | None = None
        self.heads: list[ClassifierHead] = []
        self.domain_open = False

    @property
    def t(self) -> int:
        return len(self.heads)

    # ---------------------------------------------------------------- forward

    def forward(self, images: np.ndarray) -> ForwardOutputs:
        tokens, pooled = self.backbone(images)
        if not self.use_dse or not self.tms:
            return ForwardOutputs(tokens, pooled, [], None, pooled)
        thetas = [tm(tokens) for tm in self.tms]
        omega = self.unification_weights(pooled)
        theta = unify(thetas, omega)
        return ForwardOutputs(tokens, pooled, thetas, omega, theta)

    def unification_weights(self, pooled: Tensor) -> Tensor:
        if self.unify_w is None or self.unify_w.shape[1] != len(self.tms):
            raise ProtocolError("unification head width does not match "
                                "the number of transfer modules")
        return nx.softmax(pooled @ self.unify_w + self.unify_b, axis=1)

    def classify(self, domain_index: int, theta: Tensor) -> Tensor:
        return self.heads[domain_index](theta)

    # ------------------------------------------------------------------ growth

    def grow_domain(self, num_classes: int, rng: np.random.Generator):
        """Open capacity for the next domain.

        Freezes all existing transfer modules, appends a new one (copied
        from the previous module, or randomly initialized for the first
        domain), appends a classifier head, and widens the unification
        head by one zero-initialized column.
        """
        if self.domain_open:
            raise ProtocolError("grow_domain called while a domain is training")
        if self.use_dse:
            if self.tms:
                new_tm = self.tms[-1].clone()
            else:
                new_tm = TransferModule(self.cfg, rng)
            for tm in self.tms:
                tm.set_frozen(True)
            self.tms.append(new_tm)
            t = len(self.tms)
            d = self.cfg.embed_dim
            w = np.zeros((d, t))
            b = np.zeros(t)
            if self.unify_w is not None:
                w[:, : t - 1] = self.unify_w.data
                b[: t - 1] = self.unify_b.data
            self.unify_w = Tensor(w, requires_grad=True)
            self.unify_b = Tensor(b, requires_grad=True)
        self.heads.append(ClassifierHead(self.cfg.embed_dim, num_classes, rng))

    # -------------------------------------------------------------- parameters

    def named_params(self):
        yield from self.backbone.named_params("backbone")
        for i, tm in enumerate(self.tms):
            yield from tm.named_params(f"tm.{i}")
        if self.unify_w is not None:
            yield "unify.w", self.unify_w
            yield "unify.b", self.unify_b
        for i, head in enumerate(self.heads):
            yield from head.named_params(f"head.{i}")

    def frozen_names(self) -> set:
        names = set()
        for i, tm in enumerate(self.tms):
            if tm.frozen:
                names.update(n for n, _ in tm.named_params(f"tm.{i}"))
        return names

    def zero_grads(self):
        for _, p in self.named_params():
            p.grad = None


def unify(thetas: list, omega: Tensor) -> Tensor:
    """Unified representation: per-row convex combination of the thetas."""
    if omega.shape[1] != len(thetas):
        raise ShapeError(f"omega has {omega.shape[1]} columns for "
                         f"{len(thetas)} domain representations")
    theta = thetas[0] * omega[:, 0:1]
    for i in range(1, len(thetas)):
        theta = theta + thetas[i] * omega[:, i:i + 1]
    return theta
