"""A miniature recurrent-depth transformer.

Three stages:

* prelude -- token embedding plus causal transformer layers, producing the
  conditioning ``e`` for every position;
* recurrent core -- an adapter that mixes ``[state, e]`` back down to the
  hidden size, followed by transformer layers and a final norm.  The core is
  applied repeatedly and reads/writes a :class:`SharedKVCache`;
* coda -- position-wise MLP layers, a norm and the unembedding.

Everything runs in float64 numpy.  Weights are drawn once from the config
seed and rounded to float32 so that checkpoints round-trip exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation, InputError
from .kvcache import SharedKVCache

# stream ids for counter-based random draws, see ``stream_rng``
INIT_STREAM = 0
NOISE_STREAM = 1
FILL_STREAM = 2
SAMPLE_STREAM = 3

CHECKPOINT_MAGIC = "RDSAMPLE-CHECKPOINT v1"


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator keyed by (seed, stream, position, ...).

    Keying draws by position instead of consuming one shared stream is what
    lets different samplers see identical initial states for the same token.
    """
    return np.random.default_rng([seed % 2**64, *key])


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    hidden_dim: int = 64
    num_heads: int = 2
    prelude_layers: int = 1
    recurrent_layers: int = 2
    coda_layers: int = 1
    init_sigma: float = 1.0
    max_seq_len: int = 1024
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "hidden_dim", "num_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("prelude_layers", "recurrent_layers", "coda_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if (self.hidden_dim // self.num_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.init_sigma < 0:
            raise ConfigError("init_sigma must be nonnegative")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def sample_tokens(logits: np.ndarray, temperature: float = 0.0, top_p: float = 1.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """One token per row.  ``temperature == 0`` is greedy with lowest-id tie-break."""
    if not 0.0 < top_p <= 1.0:
        raise ConfigError(f"top_p must be in (0, 1], got {top_p}")
    if temperature < 0:
        raise ConfigError("temperature must be nonnegative")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not np.all(np.isfinite(logits)):
        raise ContractViolation("non-finite logits")
    if temperature == 0.0:
        return np.argmax(logits, axis=-1)  # first maximum == lowest id
    if rng is None:
        raise ConfigError("stochastic sampling needs an rng")
    scaled = logits / temperature
    scaled -= scaled.max(axis=-1, keepdims=True)
    probs = np.exp(scaled)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.empty(len(probs), dtype=np.int64)
    for i, row in enumerate(probs):
        order = np.argsort(-row, kind="stable")
        sorted_p = row[order]
        if top_p < 1.0:
            # keep the smallest prefix whose mass reaches top_p
            keep = int(np.searchsorted(np.cumsum(sorted_p), top_p) + 1)
            sorted_p = sorted_p[:keep]
            order = order[:keep]
        cdf = np.cumsum(sorted_p)
        u = rng.random() * cdf[-1]
        out[i] = order[min(int(np.searchsorted(cdf, u, side="right")), len(order) - 1)]
    return out


def _rms_norm(x, weight, eps=1e-6):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * weight


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


def _rope(x, positions):
    # x: (n, heads, head_dim)
    half = x.shape[-1] // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs
    cos, sin = np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _causal_attention(q, keys, values, first_pos):
    """q: (k, H, d) at positions first_pos..; keys/values: (first_pos + k, H, d)."""
    nq, heads, d = q.shape
    n = keys.shape[0]
    scores = q.transpose(1, 0, 2) @ keys.transpose(1, 2, 0) / np.sqrt(d)
    mask = np.arange(n)[None, :] > (first_pos + np.arange(nq))[:, None]
    scores[:, mask] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = probs @ values.transpose(1, 0, 2)
    return out.transpose(1, 0, 2).reshape(nq, heads * d)


class PreludeCache:
    """Per-stream memo of prelude keys/values and outputs, keyed by token prefix."""

    def __init__(self, cfg: ModelConfig):
        self.tokens: list[int] = []
        shape = (cfg.prelude_layers, cfg.max_seq_len, cfg.num_heads, cfg.head_dim)
        self.k = np.zeros(shape)
        self.v = np.zeros(shape)
        self.e = np.zeros((cfg.max_seq_len, cfg.hidden_dim))
        self.rows_computed = 0  # bookkeeping for tests


class LoopedLM:
    """Shared model contract consumed by every sampler.

    Subclasses implement ``encode``, ``recur_step`` and ``coda`` and set
    ``config`` and ``flops_per_pass``.
    """

    config: ModelConfig
    flops_per_pass: int
    kv_layers: int
    kv_heads: int
    kv_head_dim: int

    def new_cache(self, depth_slots: int = 1) -> SharedKVCache:
        return SharedKVCache(self.kv_layers, self.config.max_seq_len, self.kv_heads,
                             self.kv_head_dim, depth_slots=depth_slots)

    def new_encoder(self):
        return PreludeCache(self.config)

    def check_tokens(self, tokens) -> list[int]:
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise InputError("empty token sequence")
        bad = [t for t in tokens if not 0 <= t < self.config.vocab_size]
        if bad:
            raise InputError(f"token id(s) out of range: {bad[:5]}")
        if len(tokens) > self.config.max_seq_len:
            raise InputError(f"sequence of {len(tokens)} tokens exceeds max_seq_len="
                             f"{self.config.max_seq_len}")
        return tokens

    def prelude(self, tokens) -> np.ndarray:
        return self.encode(tokens, None)

    def init_state(self, n: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ContractViolation("init_state needs n >= 1")
        return rng.standard_normal((n, self.config.hidden_dim)) * (alpha * self.config.init_sigma)

    def init_positions(self, positions, alpha: float, seed: int) -> np.ndarray:
        return np.vstack([self.init_state(1, alpha, stream_rng(seed, INIT_STREAM, int(p)))
                          for p in positions])

    def prefill(self, prompt, r: int, cache: SharedKVCache, *, alpha: float = 1.0, seed: int = 0,
                encoder: PreludeCache | None = None):
        """Prelude once, then ``r`` recurrences over all prompt positions at once.

        Every prompt position ends up committed in ``cache``.
        """
        tokens = self.check_tokens(prompt)
        if cache.frozen_len != 0:
            raise ContractViolation("prefill expects an empty cache")
        if r < 1:
            raise ConfigError("r must be >= 1")
        e = self.encode(tokens, encoder)
        z = self.init_positions(range(len(tokens)), alpha, seed)
        for _ in range(r):
            z = self.recur_step(z, e, cache)
        cache.commit(len(tokens))
        return e, z

    def encode(self, tokens, encoder):  # pragma: no cover - interface
        raise NotImplementedError

    def recur_step(self, z, e, cache, start=None):  # pragma: no cover - interface
        raise NotImplementedError

    def coda(self, z):  # pragma: no cover - interface
        raise NotImplementedError


class ToyModel(LoopedLM):
    """Randomly initialised recurrent-depth transformer.

    ``state_gain`` scales how strongly the incoming state feeds the adapter;
    values below one keep the core close to a contraction so that latent
    iterates settle within a few dozen recurrences.
    """

    state_gain = 0.35
    mlp_ratio = 4

    def __init__(self, config: ModelConfig | None = None, weights: dict | None = None):
        self.config = config or ModelConfig()
        cfg = self.config
        self.kv_layers = cfg.recurrent_layers
        self.kv_heads = cfg.num_heads
        self.kv_head_dim = cfg.head_dim
        self.weights = weights if weights is not None else self._init_weights()
        h = cfg.hidden_dim
        # linear-layer FLOPs of one core pass for one position (attention ignored)
        self.flops_per_pass = 2 * (2 * h * h) + cfg.recurrent_layers * 2 * (
            4 * h * h + 2 * self.mlp_ratio * h * h)

    # --------------------------------------------------------------- weights
    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        cfg = self.config
        h, v, m = cfg.hidden_dim, cfg.vocab_size, self.mlp_ratio * cfg.hidden_dim
        shapes = {"embed": (v, h), "prelude_norm": (h,), "adapter": (2 * h, h),
                  "core_norm": (h,), "coda_norm": (h,), "unembed": (h, v)}
        for group, n in (("prelude", cfg.prelude_layers), ("core", cfg.recurrent_layers)):
            for i in range(n):
                shapes.update({f"{group}.{i}.ln1": (h,), f"{group}.{i}.wqkv": (h, 3 * h),
                               f"{group}.{i}.wo": (h, h), f"{group}.{i}.ln2": (h,),
                               f"{group}.{i}.w1": (h, m), f"{group}.{i}.w2": (m, h)})
        for i in range(cfg.coda_layers):
            shapes.update({f"coda.{i}.ln": (h,), f"coda.{i}.w1": (h, m), f"coda.{i}.w2": (m, h)})
        return shapes

    def _init_weights(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(self.config.seed % 2**64)
        h = self.config.hidden_dim
        out = {}
        for name, shape in self.weight_shapes().items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("norm") or leaf in ("ln", "ln1", "ln2"):
                w = np.ones(shape)
            elif leaf == "embed":
                w = rng.standard_normal(shape)
            elif leaf == "adapter":
                w = rng.standard_normal(shape) / np.sqrt(h)
                w[:h] *= self.state_gain
            elif leaf in ("wo", "w2"):
                w = rng.standard_normal(shape) / np.sqrt(shape[0]) * 0.5
            else:
                w = rng.standard_normal(shape) / np.sqrt(shape[0])
            out[name] = w.astype(np.float32).astype(np.float64)
        return out

    # ---------------------------------------------------------------- layers
    def _layer(self, x, prefix, positions, kv_store):
        w = self.weights
        cfg = self.config
        n = x.shape[0]
        qkv = _rms_norm(x, w[f"{prefix}.ln1"]) @ w[f"{prefix}.wqkv"]
        q, k, v = (a.reshape(n, cfg.num_heads, cfg.head_dim) for a in np.split(qkv, 3, axis=-1))
        q, k = _rope(q, positions), _rope(k, positions)
        keys, values = kv_store(k, v)
        x = x + _causal_attention(q, keys, values, int(positions[0])) @ w[f"{prefix}.wo"]
        x = x + _gelu(_rms_norm(x, w[f"{prefix}.ln2"]) @ w[f"{prefix}.w1"]) @ w[f"{prefix}.w2"]
        return x

    def encode(self, tokens, encoder: PreludeCache | None = None) -> np.ndarray:
        """Prelude conditioning for every token; with ``encoder`` only changed rows are recomputed."""
        tokens = self.check_tokens(tokens)
        cfg = self.config
        if encoder is None:
            encoder = PreludeCache(cfg)
        start = 0
        limit = min(len(tokens), len(encoder.tokens))
        while start < limit and tokens[start] == encoder.tokens[start]:
            start += 1
        n = len(tokens)
        if start < n:
            positions = np.arange(start, n)
            x = self.weights["embed"][tokens[start:]]
            for i in range(cfg.prelude_layers):
                def store(k, v, i=i):
                    encoder.k[i, start:n] = k
                    encoder.v[i, start:n] = v
                    return encoder.k[i, :n], encoder.v[i, :n]
                x = self._layer(x, f"prelude.{i}", positions, store)
            encoder.e[start:n] = _rms_norm(x, self.weights["prelude_norm"])
            encoder.rows_computed += n - start
        encoder.tokens = list(tokens)
        return encoder.e[:n].copy()

    def recur_step(self, z: np.ndarray, e: np.ndarray, cache: SharedKVCache,
                   start: int | None = None) -> np.ndarray:
        """One pass of the recurrent core over the wavefront rows ``z``.

        Row ``j`` sits at position ``start + j`` (default ``cache.frozen_len``)
        and is conditioned on the matching trailing row of ``e``.
        """
        z = np.atleast_2d(z)
        k = z.shape[0]
        if e.shape[0] < k or z.shape[1] != self.config.hidden_dim or e.shape[1] != z.shape[1]:
            raise ContractViolation(f"misaligned shapes z={z.shape} e={e.shape}")
        p0 = cache.frozen_len if start is None else start
        if p0 + k > cache.max_len:
            raise ContractViolation("wavefront runs past the cache")
        positions = np.arange(p0, p0 + k)
        x = np.concatenate([z, e[-k:]], axis=-1) @ self.weights["adapter"]
        for i in range(self.config.recurrent_layers):
            def store(kk, vv, i=i):
                cache.write_rows(i, positions, kk, vv)
                return cache.keys_values(i, p0 + k)
            x = self._layer(x, f"core.{i}", positions, store)
        return _rms_norm(x, self.weights["core_norm"])

    def coda(self, z: np.ndarray) -> np.ndarray:
        w = self.weights
        x = np.atleast_2d(z)
        if x.shape[0] == 0:
            raise ContractViolation("coda needs at least one latent row")
        for i in range(self.config.coda_layers):
            x = x + _gelu(_rms_norm(x, w[f"coda.{i}.ln"]) @ w[f"coda.{i}.w1"]) @ w[f"coda.{i}.w2"]
        return _rms_norm(x, w["coda_norm"]) @ w["unembed"]


# ------------------------------------------------------------------ checkpoints
def save_checkpoint(model: ToyModel, path: str | Path) -> None:
    """Header of ``key=value`` lines, then float32 little-endian weights in sorted-name order."""
    lines = [CHECKPOINT_MAGIC]
    lines += [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}"
              for k, v in asdict(model.config).items()]
    lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for name in sorted(model.weights):
            fh.write(model.weights[name].astype("<f4").tobytes())


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> ToyModel:
    raw = Path(path).read_bytes()
    marker = b"\nend_header\n"
    cut = raw.find(marker)
    if cut < 0:
        raise InputError(f"{path}: missing checkpoint header")
    header = raw[:cut].decode("ascii").split("\n")
    if header[0] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: bad magic {header[0]!r}")
    types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for line in header[1:]:
        key, _, val = line.partition("=")
        if key not in types:
            raise InputError(f"{path}: unknown header field {key!r}")
        values[key] = float(val) if key == "init_sigma" else int(val)
    config = ModelConfig(**values)
    if expected is not None and expected != config:
        raise ConfigError(f"{path}: checkpoint config {config} does not match {expected}")
    shell = ToyModel.__new__(ToyModel)
    shell.config = config
    shapes = ToyModel.weight_shapes(shell)
    body = raw[cut + len(marker):]
    need = sum(int(np.prod(s)) for s in shapes.values()) * 4
    if len(body) != need:
        raise InputError(f"{path}: expected {need} weight bytes, found {len(body)}")
    weights, offset = {}, 0
    for name in sorted(shapes):
        count = int(np.prod(shapes[name]))
        chunk = np.frombuffer(body, dtype="<f4", count=count, offset=offset)
        weights[name] = chunk.astype(np.float64).reshape(shapes[name])
        offset += count * 4
    return ToyModel(config, weights)

