"""Depth/width bookkeeping, width-scaling masks, prefill cost and a contraction oracle.

Width scaling replicates every token ``s`` times.  Copy ``(i, j)`` (token
``i``, copy ``j``, both 1-based) sits at flattened index ``(i-1)*s + j-1``.
Both variants let a copy see the earlier copies of its own token; for
earlier tokens NoShare sees every copy while KVShare sees only the last one.
Masks are strict: a copy never counts attention to itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bench import CostLedger, LatencyModel
from .errors import ConfigError, ContractViolation, EventLogError
from .model import LoopedLM, ModelConfig, stream_rng

VARIANTS = ("NoShare", "KVShare")
ARCHS = ("Depth", "WidthKVShare", "WidthNoShare")


# ------------------------------------------------------------- depth / width
@dataclass
class DepthWidthLedger:
    d: list
    w: list
    entries: list
    exits: list
    L0: int

    @property
    def steps(self) -> int:
        return len(self.d) - 1


def ledger_replay(events, L0: int, steps: int | None = None) -> DepthWidthLedger:
    """Replay ``(entries, exits)`` per serial step from width ``L0``.

    ``steps`` pads the log with empty events when it is longer than ``events``.
    """
    events = [tuple(int(x) for x in ev) for ev in events]
    if steps is not None:
        if steps < len(events):
            raise EventLogError(f"steps={steps} shorter than the {len(events)} recorded events")
        events += [(0, 0)] * (steps - len(events))
    if L0 < 0:
        raise EventLogError("initial width must be nonnegative")
    d, w = [0], [L0]
    for t, (n_in, n_out) in enumerate(events):
        if n_in < 0 or n_out < 0:
            raise EventLogError(f"negative entry/exit count at step {t}")
        nxt = w[-1] + n_in - n_out
        if nxt < 0:
            raise EventLogError(f"width would drop to {nxt} at step {t + 1}")
        d.append(d[-1] + 1)
        w.append(nxt)
    assert all(dt == t for t, dt in enumerate(d))
    return DepthWidthLedger(d, w, [e for e, _ in events], [x for _, x in events], L0)


def replay_cost_ledger(ledger: CostLedger) -> DepthWidthLedger:
    return ledger_replay(ledger.width_events, ledger.initial_width)


def compare_depth_width(ar: CostLedger, df: CostLedger, T: int | None = None) -> dict:
    """Depth and width of two instrumented runs after the same number of serial passes.

    ``T`` defaults to the shorter run.  Mean widths are taken over steps 1..T.
    """
    a, b = replay_cost_ledger(ar), replay_cost_ledger(df)
    if T is None:
        T = min(a.steps, b.steps)
    if not 1 <= T <= min(a.steps, b.steps):
        raise ConfigError(f"budget T={T} outside the recorded runs (1..{min(a.steps, b.steps)})")
    return {"T": T, "d_ar": a.d[T], "d_df": b.d[T],
            "w_ar": a.w[T], "w_df": b.w[T],
            "mean_w_ar": float(np.mean(a.w[1:T + 1])), "mean_w_df": float(np.mean(b.w[1:T + 1]))}


# --------------------------------------------------------------------- masks
@dataclass(frozen=True)
class WidthScalingMask:
    variant: str
    L: int
    s: int
    allowed: np.ndarray = field(repr=False)  # (L*s, L*s) bool, [query, key]

    @staticmethod
    def index(i: int, j: int, s: int) -> int:
        return (i - 1) * s + (j - 1)

    def attends(self, i: int, j: int) -> set[tuple[int, int]]:
        row = self.allowed[self.index(i, j, self.s)]
        return {(int(k) // self.s + 1, int(k) % self.s + 1) for k in np.flatnonzero(row)}

    def pair_count(self) -> int:
        return int(self.allowed.sum())

    def is_causal(self) -> bool:
        return not np.triu(self.allowed).any()


def build_mask(variant: str, L: int, s: int) -> WidthScalingMask:
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    if L < 1 or s < 1:
        raise ConfigError("L and s must be >= 1")
    tok = np.repeat(np.arange(L), s)
    copy = np.tile(np.arange(s), L)
    same_token = (tok[:, None] == tok[None, :]) & (copy[None, :] < copy[:, None])
    earlier = tok[None, :] < tok[:, None]
    if variant == "KVShare":
        earlier &= copy[None, :] == s - 1
    return WidthScalingMask(variant, L, s, same_token | earlier)


def mask_pair_count(variant: str, L: int, s: int) -> int:
    """Closed form of ``build_mask(variant, L, s).pair_count()``."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    own = L * s * (s - 1) // 2
    prev = L * (L - 1) // 2
    return own + (s * s if variant == "NoShare" else s) * prev


def depth_pair_count(L: int, s: int) -> int:
    """Attention pairs of ``s`` sequential causal passes over ``L`` tokens."""
    return s * L * (L - 1) // 2


@dataclass(frozen=True)
class ModelDims:
    """``f``: linear FLOPs per token per pass; ``pair_flops``: FLOPs per attention pair."""

    f: float
    pair_flops: float

    @classmethod
    def from_model(cls, model: LoopedLM) -> "ModelDims":
        return cls(float(model.flops_per_pass), 4.0 * model.config.hidden_dim)


def prefill_cost(arch: str, L: int, s: int, dims: ModelDims) -> dict:
    if arch not in ARCHS:
        raise ConfigError(f"arch must be one of {ARCHS}")
    if L < 1 or s < 1:
        raise ConfigError("L and s must be >= 1")
    linear = s * L * dims.f
    if arch == "Depth":
        pairs = depth_pair_count(L, s)
    else:
        pairs = mask_pair_count("KVShare" if arch == "WidthKVShare" else "NoShare", L, s)
    attention = pairs * dims.pair_flops
    return {"arch": arch, "L": L, "s": s, "linear": linear, "attention": attention,
            "pairs": pairs, "total": linear + attention}


def _masked_attention(x, wq, wk, wv, mask):
    q, k, v = x @ wq, x @ wk, x @ wv
    scores = (q @ k.T) / math.sqrt(x.shape[1])
    scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    return x + (p / p.sum(axis=1, keepdims=True)) @ v


def replicated_forward(variant: str | None, L: int, s: int, layers: int = 2, h: int = 8,
                       seed: int = 0) -> tuple[np.ndarray, DepthWidthLedger]:
    """Run ``layers`` masked attention layers and return last-copy outputs and the width ledger.

    ``variant=None`` is the unreplicated causal pass.  Every layer is one
    serial pass over all rows; each row also attends to itself.
    """
    rng = stream_rng(seed, 0)
    x = np.repeat(rng.standard_normal((L, h)), 1 if variant is None else s, axis=0)
    if variant is None:
        mask = np.tril(np.ones((L, L), dtype=bool))
        copies = 1
    else:
        mask = build_mask(variant, L, s).allowed | np.eye(L * s, dtype=bool)
        copies = s
    weights = [[rng.standard_normal((h, h)) / math.sqrt(h) for _ in range(3)] for _ in range(layers)]
    for wq, wk, wv in weights:
        x = _masked_attention(x, wq, wk, wv, mask)
    ledger = ledger_replay([(0, 0)] * layers, x.shape[0])
    return x[copies - 1::copies], ledger


# --------------------------------------------------------------- parallelism
@dataclass(frozen=True)
class ParallelismProfile:
    depth_parallelism: float
    width_parallelism: float
    ratio: float
    saturated: bool


def parallelism_profile(L: int, s: int, profile: LatencyModel) -> ParallelismProfile:
    """Piecewise model: below ``L_star`` width scaling gets ``s**2`` times the parallelism.

    ``L_star`` is the profile's saturation width; at or beyond it both
    schemes saturate the device and the ratio is 1.
    """
    if L < 1 or s < 1:
        raise ConfigError("L and s must be >= 1")
    L_star = profile.saturation_width
    depth = float(min(L, L_star))
    if L < L_star:
        return ParallelismProfile(depth, depth * s * s, float(s * s), False)
    return ParallelismProfile(depth, depth, 1.0, True)


def prob_length_at_least(lengths, L_star: int, weights=None) -> float:
    """Empirical ``Pr[L >= L_star]`` from a length sample or a histogram (``weights`` = counts)."""
    lengths = np.asarray(lengths, dtype=np.float64)
    if lengths.size == 0:
        raise ConfigError("empty length distribution")
    w = np.ones_like(lengths) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != lengths.shape or (w < 0).any() or w.sum() == 0:
        raise ConfigError("weights must be nonnegative, match lengths and not all be zero")
    return float(w[lengths >= L_star].sum() / w.sum())


# ------------------------------------------------------------ contraction oracle
class ContractionOracle(LoopedLM):
    """Linear recurrent block ``z <- lam * A z + B e`` with spectral norm of ``A`` equal to 1.

    The prelude is ``e_i = E[x_i] + 0.5 E[x_{i-1}]`` and the coda ``U z``.
    Rows do not attend to each other; the latent is still written to the cache
    so the frozen-prefix contract is enforced exactly as for the toy model.
    """

    def __init__(self, h: int = 16, lam: float = 0.5, seed: int = 0, vocab_size: int = 16,
                 max_seq_len: int = 512):
        if not 0.0 <= lam < 1.0:
            raise ConfigError(f"lambda must lie in [0, 1), got {lam}")
        self.config = ModelConfig(vocab_size=vocab_size, hidden_dim=h, num_heads=1, prelude_layers=1,
                                  recurrent_layers=1, coda_layers=1, init_sigma=1.0,
                                  max_seq_len=max_seq_len, seed=seed)
        self.lam = float(lam)
        rng = stream_rng(seed, 0)
        a = rng.standard_normal((h, h))
        self.A = a / np.linalg.norm(a, 2)
        self.B = rng.standard_normal((h, h)) / math.sqrt(h)
        self.E = rng.standard_normal((vocab_size, h))
        self.U = rng.standard_normal((vocab_size, h))
        self.flops_per_pass = 4 * h * h
        self.kv_layers, self.kv_heads, self.kv_head_dim = 1, 1, h

    def encode(self, tokens, encoder=None) -> np.ndarray:
        x = np.asarray(self.check_tokens(tokens))
        e = self.E[x].copy()
        e[1:] += 0.5 * self.E[x[:-1]]
        return e

    def recur_step(self, z, e, cache, start=None):
        k = z.shape[0]
        if e.shape[0] < k:
            raise ContractViolation(f"{k} latent rows but only {e.shape[0]} conditioning rows")
        out = self.lam * z @ self.A.T + e[-k:] @ self.B.T
        p0 = cache.frozen_len if start is None else start
        cache.write_rows(0, np.arange(p0, p0 + k), out[:, None, :], out[:, None, :])
        return out

    def coda(self, z):
        return z @ self.U.T

    def fixed_point(self, e: np.ndarray) -> np.ndarray:
        """Rows of ``(I - lam A)^-1 B e`` by a direct linear solve."""
        h = self.config.hidden_dim
        M = np.eye(h) - self.lam * self.A
        return np.linalg.solve(M, (np.atleast_2d(e) @ self.B.T).T).T

    def fixed_point_generate(self, prompt, N: int, stop_token: int | None = None) -> list[int]:
        """Greedy tokens obtained by decoding each position at its exact fixed point."""
        tokens = self.check_tokens(prompt)
        out = []
        for _ in range(N):
            if len(tokens) >= self.config.max_seq_len:
                break
            z = self.fixed_point(self.encode(tokens[-2:])[-1])
            tok = int(np.argmax(self.coda(z)[0]))
            tokens.append(tok)
            out.append(tok)
            if tok == stop_token:
                break
        return out


def make_contraction_oracle(h: int, lam: float, seed: int, **kwargs) -> ContractionOracle:
    return ContractionOracle(h, lam, seed, **kwargs)
