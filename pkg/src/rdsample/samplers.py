"""Generation strategies for recurrent-depth models.

All samplers share a prefill of the prompt context (every prompt token but
the last) and then advance from the latent of the last prompt position.
Latent row ``j`` of a wavefront sits at position ``len(y_frozen) - 1 + j``;
decoding it drafts the token at the following position.  Initial states,
noise and stochastic samples are drawn from generators keyed by position, so
two samplers doing the same computation for a position see the same draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .bench import CostLedger, Trace
from .errors import ConfigError, ContractViolation
from .kvcache import SharedKVCache
from .model import FILL_STREAM, NOISE_STREAM, SAMPLE_STREAM, LoopedLM, sample_tokens, stream_rng

SAMPLERS = ("static", "adaptive", "speculative", "df-simple", "df-adaptive")
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class SamplerConfig:
    r: int = 32
    r_inner: int = 4
    T: int = 10_000
    max_new_tokens: int = 64
    alpha: float = 1.0
    beta_max: float = 0.0
    eta: float = 0.1
    epsilon: float = 0.03
    wavefront_max: int = 128
    headway: int = 1
    headway_fill: str = "random_token"
    pad_token: int = 0
    continuous_compute: bool = False
    temperature: float = 0.0
    top_p: float = 1.0
    seed: int = 0
    stop_token: int | None = None
    depth_slots: int = 1
    draft_len: int = 4
    draft_r: int = 4

    def __post_init__(self):
        problems = []
        for name in ("r", "r_inner", "T", "wavefront_max", "headway", "depth_slots",
                     "draft_len", "draft_r"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.max_new_tokens < 0:
            problems.append("max_new_tokens must be >= 0")
        if self.r_inner > self.r:
            problems.append("r_inner must not exceed r")
        if not 0.0 <= self.eta <= 1.0:
            problems.append("eta must lie in [0, 1]")
        if not 0.0 <= self.beta_max <= 1.0:
            problems.append("beta_max must lie in [0, 1]")
        if not self.epsilon > 0:
            problems.append("epsilon must be positive")
        if self.alpha < 0:
            problems.append("alpha must be nonnegative")
        if self.wavefront_max < self.headway:
            problems.append("wavefront_max must be >= headway")
        if self.headway_fill not in ("random_token", "pad_token"):
            problems.append("headway_fill must be random_token or pad_token")
        if self.temperature < 0:
            problems.append("temperature must be nonnegative")
        if not 0.0 < self.top_p <= 1.0:
            problems.append("top_p must lie in (0, 1]")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def steps_per_position(self) -> int:
        return math.ceil(self.r / self.r_inner)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class GenerationResult:
    prompt: list
    tokens: list
    ledger: CostLedger
    trace: Trace | None = None
    truncated: bool = False
    reason: str = "done"
    cache: SharedKVCache | None = None
    latents: np.ndarray | None = None  # diffusion samplers: latent of each row when it froze

    @property
    def sequence(self) -> list:
        return self.prompt + self.tokens


@dataclass
class GenerationState:
    y_frozen: list
    y_current: list
    z: np.ndarray
    z_prev: np.ndarray
    e_prev: np.ndarray | None
    counters: np.ndarray  # sampler steps each row has spent in the wavefront
    t: int = 0

    @property
    def first_position(self) -> int:
        return len(self.y_frozen) - 1

    @property
    def rows(self) -> int:
        return self.z.shape[0]


@dataclass
class ConvergenceReport:
    deltas: np.ndarray
    k_star: int


# --------------------------------------------------------------- small pieces
def beta_schedule(t: float, r: float, beta_max: float) -> float:
    """Noise weight after ``t`` of ``r`` recurrences at a position; ramps linearly to zero."""
    return float(np.clip(beta_max * (1.0 - t / r), 0.0, 1.0))


def blend_noise(z: np.ndarray, beta, noise: np.ndarray) -> np.ndarray:
    if z.shape != noise.shape:
        raise ContractViolation(f"noise shape {noise.shape} != latent shape {z.shape}")
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim == 1:
        beta = beta[:, None]
    return (1.0 - beta) * z + beta * noise


def momentum_embed(e_prev: np.ndarray | None, e_new: np.ndarray, eta: float) -> np.ndarray:
    """Blend conditioning with the previous step's; rows without history take ``e_new``."""
    if e_prev is None or eta == 0.0:
        return e_new.copy()
    out = e_new.copy()
    n = min(len(e_prev), len(e_new))
    # written as a correction so unchanged rows come back bit-identical
    out[:n] = e_new[:n] + eta * (e_prev[:n] - e_new[:n])
    return out


def k_star(deltas, epsilon: float) -> int:
    """Length of the longest prefix whose deltas are all below ``epsilon``."""
    return _prefix_len(np.asarray(deltas) < epsilon)


def _prefix_len(mask) -> int:
    mask = np.asarray(mask, dtype=bool)
    return int(mask.size if mask.all() else np.argmin(mask))


def compute_deltas(z: np.ndarray, z_prev: np.ndarray, epsilon: float = 0.03) -> ConvergenceReport:
    """Relative latent change per row and the freezable prefix length."""
    if z.shape != z_prev.shape:
        raise ContractViolation(f"shape mismatch {z.shape} vs {z_prev.shape}")
    diff = np.linalg.norm(z - z_prev, axis=-1)
    norm = np.linalg.norm(z, axis=-1)
    safe = norm >= DEGENERATE_NORM
    deltas = np.where(safe, diff / np.where(safe, norm, 1.0), diff)
    return ConvergenceReport(deltas, k_star(deltas, epsilon))


def continuous_init(model: LoopedLM, state: GenerationState, position: int, config: SamplerConfig):
    """New latent copied from the current last row; random init when the wavefront is empty."""
    if state.rows:
        return state.z[-1:].copy()
    return model.init_positions([position], config.alpha, config.seed)


def advance_headway(model: LoopedLM, state: GenerationState, config: SamplerConfig,
                    rng: np.random.Generator, limit: int | None = None) -> int:
    """Append up to ``headway`` fresh latents, respecting the wavefront cap.

    The first new row reads the newest draft (or last frozen token); further
    rows read filler tokens that the next decode will overwrite.
    Returns the number of rows appended.
    """
    room = config.wavefront_max - state.rows
    n = min(config.headway, room)
    if limit is not None:
        n = min(n, limit)
    n = min(n, model.config.max_seq_len - 1 - (state.first_position + state.rows))
    if n <= 0:
        return 0
    for i in range(n):
        pos = state.first_position + state.rows
        if i > 0:
            fill = (config.pad_token if config.headway_fill == "pad_token"
                    else int(rng.integers(model.config.vocab_size)))
            state.y_current.append(fill)
        if config.continuous_compute:
            new = continuous_init(model, state, pos, config)
        else:
            new = model.init_positions([pos], config.alpha, config.seed)
        state.z = np.concatenate([state.z, new], axis=0)
        state.counters = np.append(state.counters, 0)
    return n


# ---------------------------------------------------------------- the stream
class _Stream:
    """Cache, prelude memo and ledger for one generation; prefills the prompt context."""

    def __init__(self, model: LoopedLM, prompt, prefill_r: int, config: SamplerConfig):
        self.model = model
        self.config = config
        self.prompt = model.check_tokens(prompt)
        self.cache = model.new_cache(config.depth_slots)
        self.encoder = model.new_encoder()
        self.ledger = CostLedger(model.flops_per_pass)
        context = self.prompt[:-1]
        if context:
            model.prefill(context, prefill_r, self.cache, alpha=config.alpha, seed=config.seed,
                          encoder=self.encoder)
            n = len(context)
            self.ledger.initial_width = n
            self.ledger.count_flops("prelude", n, "prefill")
            for _ in range(prefill_r):
                self.ledger.count_flops("recurrent", n, "prefill")
            self.ledger.add_width_event(entries=1, exits=n)
        else:
            self.ledger.initial_width = 1

    def conditioning(self, tokens, rows: int, start: int | None = None) -> np.ndarray:
        p0 = self.cache.frozen_len if start is None else start
        e = self.model.encode(tokens[:p0 + rows], self.encoder)
        self.ledger.count_flops("prelude", rows)
        return e[p0:p0 + rows]

    def recur(self, z, e, start: int | None = None):
        self.ledger.count_flops("recurrent", z.shape[0])
        return self.model.recur_step(z, e, self.cache, start)

    def decode(self, z, draws, greedy: bool = False) -> np.ndarray:
        """Sample one token per row; ``draws`` numbers the samples taken at each position."""
        self.ledger.count_flops("coda", z.shape[0])
        logits = self.model.coda(z)
        cfg = self.config
        if greedy or cfg.temperature == 0.0:
            return sample_tokens(logits)
        p0 = self.cache.frozen_len
        return np.array([
            sample_tokens(row[None], cfg.temperature, cfg.top_p,
                          stream_rng(cfg.seed, SAMPLE_STREAM, p0 + 1 + j, int(d)))[0]
            for j, (row, d) in enumerate(zip(logits, draws))])

    def init(self, position: int) -> np.ndarray:
        return self.model.init_positions([position], self.config.alpha, self.config.seed)


def _config(config: SamplerConfig | None, **overrides) -> SamplerConfig:
    base = config or SamplerConfig()
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(base, **overrides) if overrides else base


def _result(stream, tokens, trace=None, reason="done", latents=None):
    stream.ledger.tokens_emitted = len(tokens)
    return GenerationResult(stream.prompt, tokens, stream.ledger, trace,
                            truncated=reason not in ("done", "stop_token"), reason=reason,
                            cache=stream.cache, latents=latents)


def _empty(model, prompt, reason="done"):
    return GenerationResult(model.check_tokens(prompt), [], CostLedger(model.flops_per_pass),
                            reason=reason)


# -------------------------------------------------------- autoregressive family
def generate_static_ar(model: LoopedLM, prompt, N: int, r: int, config: SamplerConfig | None = None,
                       *, record_trace: bool = False, **overrides) -> GenerationResult:
    """One token at a time: fresh state, ``r`` recurrences, coda, sample, commit."""
    cfg = _config(config, max_new_tokens=N, r=r, r_inner=min(r, (config or SamplerConfig()).r_inner),
                  **overrides)
    if N == 0:
        return _empty(model, prompt)
    s = _Stream(model, prompt, r, cfg)
    tokens = list(s.prompt)
    out: list[int] = []
    reason = "done"
    while len(out) < N:
        if len(tokens) >= model.config.max_seq_len:
            reason = "context_overflow"
            break
        pos = s.cache.frozen_len
        e = s.conditioning(tokens, 1)
        z = s.init(pos)
        for _ in range(r):
            z = s.recur(z, e)
        tok = int(s.decode(z, [0])[0])
        tokens.append(tok)
        out.append(tok)
        s.cache.commit(pos + 1)
        s.ledger.sampler_steps += 1
        done = tok == cfg.stop_token
        more = len(out) < N and not done
        s.ledger.add_width_event(entries=int(more), exits=1)
        if done:
            reason = "stop_token"
            break
    return _result(s, out, reason=reason)


def generate_adaptive_ar(model: LoopedLM, prompt, N: int, epsilon: float, r_max: int,
                         config: SamplerConfig | None = None, *, check_every: int = 1,
                         record_trace: bool = False, **overrides) -> GenerationResult:
    """Token by token, exiting the recurrence once the relative latent change drops below ``epsilon``.

    The change is measured every ``check_every`` recurrences against the state
    at the previous check; ``r_max`` recurrences always end the position.
    """
    cfg = _config(config, max_new_tokens=N, r=r_max, epsilon=epsilon,
                  r_inner=min(check_every, r_max), **overrides)
    if N == 0:
        return _empty(model, prompt)
    s = _Stream(model, prompt, r_max, cfg)
    tokens = list(s.prompt)
    out: list[int] = []
    reason = "done"
    while len(out) < N:
        if len(tokens) >= model.config.max_seq_len:
            reason = "context_overflow"
            break
        pos = s.cache.frozen_len
        e = s.conditioning(tokens, 1)
        z = s.init(pos)
        z_prev = z
        for k in range(1, r_max + 1):
            z = s.recur(z, e)
            if k == r_max:
                break
            if k % check_every == 0:
                if compute_deltas(z, z_prev, epsilon).k_star == 1:
                    break
                z_prev = z
        tok = int(s.decode(z, [0])[0])
        tokens.append(tok)
        out.append(tok)
        s.cache.commit(pos + 1)
        s.ledger.sampler_steps += 1
        done = tok == cfg.stop_token
        s.ledger.add_width_event(entries=int(len(out) < N and not done), exits=1)
        if done:
            reason = "stop_token"
            break
    return _result(s, out, reason=reason)


def generate_self_speculative(model: LoopedLM, prompt, N: int, draft_len: int = 4, draft_r: int = 4,
                              verify_r: int = 32, config: SamplerConfig | None = None,
                              *, record_trace: bool = False, **overrides) -> GenerationResult:
    """Draft ``draft_len`` tokens with ``draft_r`` recurrences each, then verify greedily.

    Verification recomputes each drafted position with ``verify_r``
    recurrences in order, accepting drafts while they agree and emitting the
    verifier's token at the first disagreement (or as a bonus token when
    every draft is accepted).  Because the cache keeps only the newest
    recurrence per position, verifying positions one after another is what
    keeps the output identical to static AR at ``verify_r``.
    """
    cfg = _config(config, max_new_tokens=N, r=verify_r, draft_len=draft_len, draft_r=draft_r,
                  r_inner=min(draft_r, verify_r), **overrides)
    if N == 0:
        return _empty(model, prompt)
    s = _Stream(model, prompt, verify_r, cfg)
    tokens = list(s.prompt)
    out: list[int] = []
    reason = "done"
    max_len = model.config.max_seq_len
    while len(out) < N and reason == "done":
        base = s.cache.frozen_len  # position of the last accepted token
        budget = min(draft_len, N - len(out) - 1, max_len - 1 - len(tokens))
        drafts: list[int] = []
        for i in range(max(budget, 0)):
            pos = base + i
            e = s.conditioning(tokens + drafts, 1, start=pos)
            z = s.init(pos)
            for _ in range(draft_r):
                z = s.recur(z, e, start=pos)
            drafts.append(int(s.decode(z, [0], greedy=True)[0]))
            s.ledger.add_width_event(entries=1, exits=1)
        for i in range(len(drafts) + 1):
            if len(tokens) >= max_len:
                reason = "context_overflow"
                break
            pos = s.cache.frozen_len
            e = s.conditioning(tokens, 1)
            z = s.init(pos)
            for _ in range(verify_r):
                z = s.recur(z, e)
            tok = int(s.decode(z, [0])[0])
            tokens.append(tok)
            out.append(tok)
            s.cache.commit(pos + 1)
            s.ledger.sampler_steps += 1
            done = tok == cfg.stop_token
            s.ledger.add_width_event(entries=int(len(out) < N and not done), exits=1)
            if done:
                reason = "stop_token"
                break
            if len(out) >= N or i == len(drafts) or tok != drafts[i]:
                break
    return _result(s, out, reason=reason)


# -------------------------------------------------------------- diffusion family
def generate_diffusion_simple(model: LoopedLM, prompt, config: SamplerConfig | None = None,
                              *, record_trace: bool = True, **overrides) -> GenerationResult:
    """Diffusion-forcing sampler with a fixed exit: a row freezes after ``ceil(r / r_inner)`` steps."""
    return _diffusion(model, _config(config, **overrides), prompt, adaptive=False,
                      record_trace=record_trace)


def generate_diffusion_adaptive(model: LoopedLM, prompt, config: SamplerConfig | None = None,
                                *, record_trace: bool = True, **overrides) -> GenerationResult:
    """Diffusion-forcing sampler that freezes the longest converged prefix of the wavefront.

    A row counts as converged when its relative latent change falls below
    ``epsilon`` or when it has used its full budget of ``r`` recurrences.
    New rows are only appended while the wavefront holds fewer than
    ``wavefront_max`` rows.
    """
    return _diffusion(model, _config(config, **overrides), prompt, adaptive=True,
                      record_trace=record_trace)


def _diffusion(model: LoopedLM, cfg: SamplerConfig, prompt, *, adaptive: bool,
               record_trace: bool) -> GenerationResult:
    N = cfg.max_new_tokens
    if N == 0:
        return _empty(model, prompt)
    s = _Stream(model, prompt, cfg.r, cfg)
    L = len(s.prompt)
    cap = cfg.steps_per_position
    fill_rng = stream_rng(cfg.seed, FILL_STREAM)
    trace = Trace(metadata={"sampler": "df-adaptive" if adaptive else "df-simple",
                            "wavefront_max": cfg.wavefront_max, "prompt_len": L,
                            "config": cfg.as_dict()}) if record_trace else None
    z0 = s.init(L - 1)
    state = GenerationState(list(s.prompt), list(s.prompt), z0, z0.copy(), None,
                            np.zeros(1, dtype=np.int64))
    final_counts: dict[int, int] = {}
    frozen_latents = []
    reason = "T_exhausted"
    for t in range(1, cfg.T + 1):
        state.t = t
        k = state.rows
        p0 = state.first_position
        e = momentum_embed(state.e_prev, s.conditioning(state.y_current, k), cfg.eta)
        state.e_prev = e
        z = state.z
        if cfg.beta_max > 0:
            betas = np.array([beta_schedule(c * cfg.r_inner, cfg.r, cfg.beta_max)
                              for c in state.counters])
            noise = np.vstack([
                model.init_state(1, cfg.alpha, stream_rng(cfg.seed, NOISE_STREAM, p0 + j, int(c)))
                for j, c in enumerate(state.counters)])
            z = blend_noise(z, betas, noise)
        for _ in range(cfg.r_inner):
            z = s.recur(z, e)
        drafts = [int(x) for x in s.decode(z, state.counters)]
        state.counters = state.counters + 1
        state.z = z
        state.y_current = state.y_frozen + drafts
        report = compute_deltas(z, state.z_prev, cfg.epsilon)
        if adaptive:
            freezable = (report.deltas < cfg.epsilon) | (state.counters >= cap)
        else:
            freezable = state.counters >= cap
        n_freeze = _prefix_len(freezable)
        newly = drafts[:n_freeze]
        done_reason = None
        if cfg.stop_token is not None and cfg.stop_token in newly:
            newly = newly[:newly.index(cfg.stop_token) + 1]
            done_reason = "stop_token"
        generated = len(state.y_frozen) - L + len(newly)
        if generated >= N:
            newly = newly[:len(newly) - (generated - N)]
            done_reason = done_reason or "done"
        n_freeze = len(newly)
        s.ledger.sampler_steps += 1
        if n_freeze == 0 and k >= cfg.wavefront_max:
            s.ledger.stall_steps += 1
        for j in range(n_freeze):
            final_counts[p0 + 1 + j] = int(state.counters[j])
        frozen_latents.append(state.z[:n_freeze].copy())
        state.y_frozen = state.y_frozen + newly
        if n_freeze:
            s.cache.commit(p0 + n_freeze)
            state.z = state.z[n_freeze:]
            state.e_prev = state.e_prev[n_freeze:]
            state.counters = state.counters[n_freeze:]
        if trace is not None:
            _record(trace, t, state, L, report.deltas, n_freeze, final_counts)
        if done_reason:
            s.ledger.add_width_event(entries=0, exits=n_freeze)
            reason = done_reason
            break
        remaining = N - (len(state.y_frozen) - L) - state.rows
        added = advance_headway(model, state, cfg, fill_rng, limit=remaining)
        s.ledger.add_width_event(entries=added, exits=n_freeze)
        if state.rows == 0:
            reason = "context_overflow"
            break
        state.z_prev = state.z.copy()
    return _result(s, state.y_frozen[L:], trace, reason, np.vstack(frozen_latents))


def _record(trace: Trace, t, state: GenerationState, L, deltas, n_freeze, final_counts):
    F = len(state.y_frozen)
    # deltas index rows of the wavefront before freezing; row j drafts position p0 + 1 + j
    p0 = F - n_freeze - 1
    for pos in range(L, len(state.y_current)):
        j = pos - p0 - 1
        delta = deltas[j] if 0 <= j < len(deltas) else None
        if pos < F:
            count = final_counts.get(pos, 0)
        else:
            count = int(state.counters[pos - F])
        trace.record(t, pos, state.y_current[pos], delta, pos < F, count)


# ------------------------------------------------------------------ dispatcher
def run_sampler(model: LoopedLM, prompt, sampler: str, config: SamplerConfig,
                *, record_trace: bool = True) -> GenerationResult:
    cfg = config
    if sampler == "static":
        return generate_static_ar(model, prompt, cfg.max_new_tokens, cfg.r, cfg)
    if sampler == "adaptive":
        return generate_adaptive_ar(model, prompt, cfg.max_new_tokens, cfg.epsilon, cfg.r, cfg,
                                    check_every=cfg.r_inner)
    if sampler == "speculative":
        return generate_self_speculative(model, prompt, cfg.max_new_tokens, cfg.draft_len,
                                         cfg.draft_r, cfg.r, cfg)
    if sampler == "df-simple":
        return generate_diffusion_simple(model, prompt, cfg, record_trace=record_trace)
    if sampler == "df-adaptive":
        return generate_diffusion_adaptive(model, prompt, cfg, record_trace=record_trace)
    raise ConfigError(f"unknown sampler {sampler!r}; choose from {', '.join(SAMPLERS)}")
