"""Fine/coarse encoder, hierarchical decoder and multi-scale readout.

Scale 1 (and any scale below ``l_gt``) runs GIN layers on the masked graph.
Embeddings are pooled up the hierarchy by summing cluster members; from
``l_gt`` on, only visible super-nodes enter a single-head transformer layer,
with a random-walk positional encoding added first. The decoder fills masked
top-scale rows with a shared token, then alternates GNN decoding and
unpooling back to scale 1, adding each scale's visible encoder rows on the way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError, DimensionError
from .hierarchy import CoarseLevel, Hierarchy
from .masking import MaskPlan, empty_plan
from .tensor import Tensor


class Module:
    """Parameter container; parameters are found by walking attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, (list, tuple)):
                        for j, sub in enumerate(item):
                            yield from sub.named_parameters(f"{name}.{i}.{j}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _uniform(rng, shape, fan_in, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype, bias=True):
        self.weight = _uniform(rng, (d_in, d_out), d_in, dtype)
        self.bias = _uniform(rng, (d_out,), d_in, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add_bias(y, self.bias)


class PReLU(Module):
    def __init__(self, dtype, init=0.25):
        self.alpha = Tensor([init], requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return T.prelu(x, self.alpha)


class LayerNorm(Module):
    def __init__(self, d, dtype):
        self.gamma = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class GinLayer(Module):
    """``LN(PReLU(MLP(h_i + sum_j w_ij h_j)))`` with epsilon fixed at 0."""

    def __init__(self, d_in, d_hidden, d_out, rng, dtype):
        self.lin1 = Linear(d_in, d_hidden, rng, dtype)
        self.act1 = PReLU(dtype)
        self.lin2 = Linear(d_hidden, d_out, rng, dtype)
        self.act = PReLU(dtype)
        self.norm = LayerNorm(d_out, dtype)

    def __call__(self, adj: Tensor, h: Tensor) -> Tensor:
        agg = h + T.matmul(adj, h)
        return self.norm(self.act(self.lin2(self.act1(self.lin1(agg)))))


class GtLayer(Module):
    """Single-head self-attention block with residuals and a feed-forward sublayer."""

    def __init__(self, d, rng, dtype):
        self.w_q = _uniform(rng, (d, d), d, dtype)
        self.w_k = _uniform(rng, (d, d), d, dtype)
        self.w_v = _uniform(rng, (d, d), d, dtype)
        self.out = Linear(d, d, rng, dtype)
        self.norm = LayerNorm(d, dtype)
        self.ff1 = Linear(d, 2 * d, rng, dtype)
        self.ff_act = PReLU(dtype)
        self.ff2 = Linear(2 * d, d, rng, dtype)
        self._scale = 1.0 / math.sqrt(d)
        self._last_attention: np.ndarray | None = None

    def __call__(self, h: Tensor) -> Tensor:
        if h.shape[0] == 0:
            raise ContractError("attention needs at least one visible token")
        q = T.matmul(h, self.w_q)
        k = T.matmul(h, self.w_k)
        v = T.matmul(h, self.w_v)
        attn = T.softmax_rows(T.mul(T.matmul(q, T.transpose(k)), self._scale))
        self._last_attention = attn.values
        h1 = self.norm(h + self.out(T.matmul(attn, v)))
        return h1 + self.ff2(self.ff_act(self.ff1(h1)))


def rwpe(adjacency, k: int) -> np.ndarray:
    """Return-probability encoding: ``PE[i, s] = [(D^-1 A)^(s+1)]_ii`` for ``s < k``.

    Uses the weighted degree; isolated nodes get all-zero rows.
    """
    a = adjacency.toarray() if sp.issparse(adjacency) else np.asarray(adjacency, dtype=float)
    deg = a.sum(axis=1)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    walk = inv[:, None] * a
    out = np.empty((a.shape[0], k))
    power = walk
    for s in range(k):
        out[:, s] = np.diag(power)
        power = power @ walk
    return out


class RwpeEncoder(Module):
    def __init__(self, k, d, rng, dtype):
        self.k = k
        self.proj = Linear(k, d, rng, dtype)

    def __call__(self, pe: Tensor) -> Tensor:
        return self.proj(pe)


@dataclass
class EncoderOutput:
    full: list[Tensor]      # n^(l) x d per scale; GT scales hold zeros at masked rows
    visible: list[Tensor]   # visible-row embeddings per scale, in index order


class FiCoModel(Module):
    def __init__(self, d0: int, depth: int, config: ModelConfig | None = None, seed: int = 0, dtype=None):
        self.config = config or ModelConfig()
        cfg = self.config
        self.d0, self.depth = d0, depth
        self._dtype = np.dtype(dtype or T.get_dtype())
        dt = self._dtype
        rng = np.random.default_rng(seed)
        d = cfg.d
        self.embed = Linear(d0, d, rng, dt)
        self.encoders = []
        self.pe = []
        for s in range(1, depth + 1):
            if self.uses_attention(s):
                self.encoders.append([GtLayer(d, rng, dt) for _ in range(cfg.gt_layers)])
                self.pe.append(RwpeEncoder(cfg.rwpe_k, d, rng, dt))
            else:
                self.encoders.append([GinLayer(d, d, d, rng, dt) for _ in range(cfg.gin_layers)])
                self.pe.append(None)
        self.mask_token = Tensor(np.zeros((1, d)), requires_grad=True, dtype=dt)
        self.decoders = []
        for s in range(1, depth + 1):
            top_gt = s == depth and cfg.decoder_top == "gt"
            self.decoders.append(GtLayer(d, rng, dt) if top_gt else GinLayer(d, d, d, rng, dt))
        self.head = Linear(d, d0, rng, dt)

    @property
    def dtype(self):
        return self._dtype

    def uses_attention(self, scale: int) -> bool:
        return scale >= self.config.l_gt

    # -- cached per-level constants -------------------------------------------------

    def _adj(self, level: CoarseLevel) -> Tensor:
        cache = level.cache
        key = ("adj", self._dtype.str)
        if key not in cache:
            cache[key] = T.constant(level.adjacency.toarray(), dtype=self._dtype)
        return cache[key]

    def _pe(self, level: CoarseLevel) -> np.ndarray:
        cache = level.cache
        key = ("rwpe", self.config.rwpe_k)
        if key not in cache:
            cache[key] = rwpe(level.adjacency, self.config.rwpe_k)
        return cache[key]

    def _zeros(self, n) -> Tensor:
        return T.zeros((n, self.config.d), dtype=self._dtype)

    def _row_mask(self, keep: np.ndarray, width: int) -> Tensor:
        return T.constant(np.repeat(keep[:, None], width, axis=1), dtype=self._dtype)

    def _check(self, hierarchy: Hierarchy, plan: MaskPlan, x: np.ndarray):
        if hierarchy.depth > self.depth:
            raise DimensionError(f"hierarchy has {hierarchy.depth} scales, model was built for {self.depth}")
        if plan.depth != hierarchy.depth:
            raise DimensionError(f"mask plan has {plan.depth} scales, hierarchy {hierarchy.depth}")
        if x.shape != (hierarchy.levels[0].n, self.d0):
            raise DimensionError(f"features {x.shape} vs expected ({hierarchy.levels[0].n}, {self.d0})")

    # -- forward --------------------------------------------------------------------

    def encode(self, hierarchy: Hierarchy, plan: MaskPlan, x: np.ndarray) -> EncoderOutput:
        self._check(hierarchy, plan, x)
        keep1 = (plan.masks[0] == 0).astype(float)
        h = self.embed(T.constant(x * keep1[:, None], dtype=self._dtype))
        full, visible = [], []
        for i, level in enumerate(hierarchy.levels):
            if i > 0:
                prev = hierarchy.levels[i - 1].assignment
                h = T.scatter_add_rows(self._zeros(level.n), prev.cluster_of, full[-1])
            vis_idx = plan.visible(i)
            if self.uses_attention(i + 1):
                ht = T.gather_rows(h, vis_idx)
                pe = T.constant(self._pe(level)[vis_idx], dtype=self._dtype)
                ht = ht + self.pe[i](pe)
                for layer in self.encoders[i]:
                    ht = layer(ht)
                visible.append(ht)
                full.append(T.scatter_add_rows(self._zeros(level.n), vis_idx, ht))
            else:
                if i > 0:
                    h = T.mul(h, self._row_mask((plan.masks[i] == 0).astype(float), self.config.d))
                adj = self._adj(level)
                for layer in self.encoders[i]:
                    h = layer(adj, h)
                full.append(h)
                visible.append(T.gather_rows(h, vis_idx))
        return EncoderOutput(full, visible)

    def decode(self, hierarchy: Hierarchy, plan: MaskPlan, enc: EncoderOutput) -> Tensor:
        top = hierarchy.depth - 1
        level = hierarchy.levels[top]
        h = T.scatter_add_rows(self._zeros(level.n), plan.visible(top), enc.visible[top])
        hidden = plan.hidden(top)
        if len(hidden):
            tokens = T.gather_rows(self.mask_token, np.zeros(len(hidden), dtype=np.intp))
            h = T.scatter_add_rows(h, hidden, tokens)
        h = self._decode_level(top, level, h)
        for i in range(top - 1, -1, -1):
            level = hierarchy.levels[i]
            h = T.gather_rows(h, level.assignment.cluster_of)
            h = T.scatter_add_rows(h, plan.visible(i), enc.visible[i])
            if i == 0 and self.config.remask_decoder:
                h = T.mul(h, self._row_mask((plan.masks[0] == 0).astype(float), self.config.d))
            h = self._decode_level(i, level, h)
        return self.head(h)

    def _decode_level(self, i: int, level: CoarseLevel, h: Tensor) -> Tensor:
        layer = self.decoders[i]
        if isinstance(layer, GtLayer):
            if self.pe[i] is not None:
                h = h + self.pe[i](T.constant(self._pe(level), dtype=self._dtype))
            return layer(h)
        return layer(self._adj(level), h)

    def loss(self, x_hat: Tensor, x: np.ndarray, mask: np.ndarray) -> Tensor | None:
        """Scaled cosine error over masked scale-1 rows; ``None`` when nothing is masked."""
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            return None
        target = T.constant(x[idx], dtype=self._dtype)
        return T.sce_loss(T.gather_rows(x_hat, idx), target, self.config.gamma_sce)

    def forward_loss(self, hierarchy: Hierarchy, plan: MaskPlan, x: np.ndarray,
                     target: np.ndarray | None = None) -> Tensor | None:
        """Encode, decode and score; ``target`` defaults to ``x``."""
        enc = self.encode(hierarchy, plan, x)
        x_hat = self.decode(hierarchy, plan, enc)
        return self.loss(x_hat, x if target is None else target, plan.masks[0])

    def readout(self, hierarchy: Hierarchy, x: np.ndarray, mode: str = "aggregate") -> np.ndarray:
        """Graph embedding from an unmasked pass: per-scale mean node embeddings, concatenated.

        Hierarchies cut short by a one-node level repeat their coarsest mean so the
        width is always ``depth * d`` in aggregate mode.
        """
        enc = self.encode(hierarchy, empty_plan(hierarchy), x)
        means = [T.mean(h, axis=0) for h in enc.full]
        if mode == "first-scale":
            return means[0].values.reshape(-1).copy()
        if mode != "aggregate":
            raise ValueError(f"unknown readout mode {mode!r}")
        means += [means[-1]] * (self.depth - len(means))
        return T.concat(means, axis=1).values.reshape(-1).copy()

    def readout_width(self, mode: str = "aggregate") -> int:
        return self.config.d * (self.depth if mode == "aggregate" else 1)

    # -- parameter I/O -------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: saved shape {arr.shape} vs model {p.shape}")
            p.values[...] = arr
