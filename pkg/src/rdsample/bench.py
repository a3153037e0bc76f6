"""Cost accounting, latency simulation, traces and sampler comparison reports."""

from __future__ import annotations

import csv
import json
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolation

BLOCKS = ("prelude", "recurrent", "coda")
# prelude + coda are charged one recurrent pass between them per token
BLOCK_WEIGHT = {"prelude": 0.5, "recurrent": 1.0, "coda": 0.5}


@dataclass
class CostLedger:
    """FLOPs, forward passes and depth/width events of one generation stream.

    ``f`` is the linear-layer FLOP count of one recurrent pass for one
    position.  Prelude and coda are charged ``f/2`` each per row.
    """

    f: float
    flops: dict = field(default_factory=lambda: {p: dict.fromkeys(BLOCKS, 0.0)
                                                 for p in ("prefill", "decode")})
    passes: Counter = field(default_factory=Counter)  # (phase, block, rows) -> count
    tokens_emitted: int = 0
    sampler_steps: int = 0
    stall_steps: int = 0
    # depth/width log: one (entries, exits) record per recurrent pass
    initial_width: int = 0
    width_events: list = field(default_factory=list)

    def count_flops(self, block: str, rows: int, phase: str = "decode") -> None:
        if rows < 1:
            raise ContractViolation("a block pass covers at least one row")
        self.flops[phase][block] += BLOCK_WEIGHT[block] * self.f * rows
        self.passes[(phase, block, rows)] += 1
        if block == "recurrent":
            self.width_events.append([0, 0])

    def add_width_event(self, entries: int, exits: int) -> None:
        """Attach token entries/exits to the most recent recurrent pass."""
        self.width_events[-1][0] += entries
        self.width_events[-1][1] += exits

    @property
    def flops_by_block(self) -> dict:
        return {b: sum(self.flops[p][b] for p in self.flops) for b in BLOCKS}

    @property
    def flops_total(self) -> float:
        return sum(self.flops_by_block.values())

    @property
    def decode_flops(self) -> float:
        return sum(self.flops["decode"].values())

    @property
    def forward_pass_count(self) -> int:
        return sum(self.passes.values())

    def mean_wavefront(self) -> float:
        rows = [(r, c) for (phase, block, r), c in self.passes.items()
                if phase == "decode" and block == "recurrent"]
        total = sum(c for _, c in rows)
        return sum(r * c for r, c in rows) / total if total else 0.0

    def merge(self, other: "CostLedger") -> "CostLedger":
        """Combine totals of independent streams (width logs are per-stream and dropped)."""
        if self.f != other.f:
            raise ContractViolation("cannot merge ledgers with different f")
        out = CostLedger(self.f)
        for p in out.flops:
            for b in BLOCKS:
                out.flops[p][b] = self.flops[p][b] + other.flops[p][b]
        out.passes = self.passes + other.passes
        out.tokens_emitted = self.tokens_emitted + other.tokens_emitted
        out.sampler_steps = self.sampler_steps + other.sampler_steps
        out.stall_steps = self.stall_steps + other.stall_steps
        return out

    def to_dict(self) -> dict:
        return {"f": self.f, "flops_total": self.flops_total, "flops_by_block": self.flops_by_block,
                "flops_decode": self.decode_flops, "forward_pass_count": self.forward_pass_count,
                "tokens_emitted": self.tokens_emitted, "sampler_steps": self.sampler_steps,
                "stall_steps": self.stall_steps, "mean_wavefront": self.mean_wavefront(),
                "initial_width": self.initial_width, "width_events": self.width_events}


@dataclass(frozen=True)
class LatencyModel:
    """Memory-bound forward-pass timing.

    A pass over ``W`` rows costs ``fixed_overhead`` per wave of up to
    ``saturation_width`` rows plus ``per_token`` per row.
    """

    fixed_overhead: float = 1000.0
    per_token: float = 1.0
    saturation_width: int = 128

    def __post_init__(self):
        if self.fixed_overhead < 0 or self.per_token < 0 or self.saturation_width < 1:
            raise ConfigError("latency model needs nonnegative costs and saturation_width >= 1")

    def time(self, rows: int) -> float:
        return self.fixed_overhead * math.ceil(rows / self.saturation_width) + self.per_token * rows

    @classmethod
    def from_file(cls, path: str | Path) -> "LatencyModel":
        vals = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}: expected key=value, got {raw!r}")
            vals[key.strip()] = val.strip()
        try:
            return cls(float(vals.get("fixed_overhead_us", 1000.0)),
                       float(vals.get("per_token_us", 1.0)),
                       int(vals.get("saturation_width", 128)))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def simulate_time(ledger: CostLedger, latency: LatencyModel) -> tuple[float, float]:
    """Simulated runtime of every recorded pass and the resulting tokens per time unit."""
    total = sum(BLOCK_WEIGHT[block] * latency.time(rows) * count
                for (_, block, rows), count in ledger.passes.items())
    rate = ledger.tokens_emitted / total if total > 0 else 0.0
    return total, rate


# ----------------------------------------------------------------------- traces
TRACE_COLUMNS = ("step", "position", "token_id", "delta", "frozen", "steps_at_position")


@dataclass
class Trace:
    """Grid of sampler steps by absolute position, one row per visible cell."""

    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def record(self, step, position, token_id, delta, frozen, steps_at_position):
        self.rows.append((int(step), int(position), int(token_id),
                          float("nan") if delta is None else float(delta),
                          bool(frozen), int(steps_at_position)))

    def check_frozen_immutable(self) -> bool:
        frozen_tok = {}
        for step, pos, tok, _, frozen, _ in sorted(self.rows):
            if pos in frozen_tok and frozen_tok[pos] != tok:
                return False
            if frozen:
                frozen_tok[pos] = tok
        return True

    def per_step(self) -> list[tuple[int, int, int]]:
        """(step, frozen cells, active cells) per recorded step."""
        acc: dict[int, list[int]] = {}
        for step, _, _, _, frozen, _ in self.rows:
            slot = acc.setdefault(step, [0, 0])
            slot[0 if frozen else 1] += 1
        return [(s, f, a) for s, (f, a) in sorted(acc.items())]

    def stall_episodes(self, wavefront_max: int | None = None) -> list[tuple[int, int]]:
        """Maximal runs of steps with a full wavefront and no freezing, followed by progress.

        Returns ``(first_step, length)`` per episode.
        """
        if wavefront_max is None:
            wavefront_max = int(self.metadata.get("wavefront_max", 0))
        steps = self.per_step()
        episodes, start, prev_frozen = [], None, None
        for step, frozen, active in steps:
            progressed = prev_frozen is not None and frozen > prev_frozen
            stalled = prev_frozen is not None and not progressed and active >= wavefront_max
            if stalled and start is None:
                start = step
            elif progressed and start is not None:
                episodes.append((start, step - start))
                start = None
            elif not stalled and start is not None:
                start = None
            prev_frozen = frozen
        return episodes

    def grid(self) -> np.ndarray:
        """Token-id matrix (steps x positions), -1 where no cell was recorded."""
        if not self.rows:
            return np.zeros((0, 0), dtype=np.int64)
        steps = sorted({r[0] for r in self.rows})
        positions = sorted({r[1] for r in self.rows})
        si = {s: i for i, s in enumerate(steps)}
        pi = {p: i for i, p in enumerate(positions)}
        out = np.full((len(steps), len(positions)), -1, dtype=np.int64)
        for step, pos, tok, *_ in self.rows:
            out[si[step], pi[pos]] = tok
        return out


def export_trace(trace: Trace, path: str | Path) -> Path:
    path = Path(path)
    if not trace.check_frozen_immutable():
        raise ContractViolation("trace rewrites a frozen cell")
    try:
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(trace.metadata, sort_keys=True) + "\n")
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for step, pos, tok, delta, frozen, count in trace.rows:
                w.writerow([step, pos, tok, repr(delta), int(frozen), count])
    except OSError as exc:
        raise OSError(f"could not write trace to {path}: {exc}") from exc
    return path


def import_trace(path: str | Path) -> Trace:
    with open(path, newline="") as fh:
        first = fh.readline()
        metadata = json.loads(first[2:]) if first.startswith("# ") else {}
        if not first.startswith("# "):
            fh.seek(0)
        reader = csv.DictReader(fh)
        trace = Trace(metadata=metadata)
        for row in reader:
            trace.rows.append((int(row["step"]), int(row["position"]), int(row["token_id"]),
                               float(row["delta"]), bool(int(row["frozen"])),
                               int(row["steps_at_position"])))
    return trace


def export_heatmap(trace: Trace, path: str | Path) -> Path:
    """Raster of token ids (rows: sampler steps, columns: positions)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = trace.grid().astype(float)
    grid[grid < 0] = np.nan
    fig, ax = plt.subplots(figsize=(8, 6))
    ax.imshow(grid, aspect="auto", interpolation="nearest", cmap="viridis")
    ax.set_xlabel("position")
    ax.set_ylabel("sampler step")
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return Path(path)


# ---------------------------------------------------------------- comparisons
@dataclass(frozen=True)
class RunSpec:
    name: str
    sampler: str
    config: object  # SamplerConfig


def compare_samplers(model, prompts, runs, latency: LatencyModel | None = None) -> dict:
    """Run every sampler on every prompt and summarise against static AR under greedy.

    ``match_rate`` is the fraction of prompts whose output equals the static
    AR output at the same total recurrence ``r``.
    """
    from .samplers import generate_static_ar, run_sampler

    if not prompts:
        raise ConfigError("compare_samplers needs at least one prompt")
    latency = latency or LatencyModel()
    references: dict = {}
    report = []
    for run in runs:
        cfg = run.config
        ref_key = (cfg.r, cfg.max_new_tokens, cfg.seed, cfg.alpha)
        if ref_key not in references:
            references[ref_key] = [
                generate_static_ar(model, p, cfg.max_new_tokens, cfg.r, alpha=cfg.alpha,
                                   seed=cfg.seed, record_trace=False).tokens
                for p in prompts]
        rates, flops, tokens, waves, steps, stalls, matches = [], 0.0, 0, [], 0, 0, 0
        for prompt, ref in zip(prompts, references[ref_key]):
            res = run_sampler(model, prompt, run.sampler, cfg, record_trace=False)
            rates.append(simulate_time(res.ledger, latency)[1])
            flops += res.ledger.decode_flops
            tokens += res.ledger.tokens_emitted
            waves.append(res.ledger.mean_wavefront())
            steps += res.ledger.sampler_steps
            stalls += res.ledger.stall_steps
            matches += res.tokens == ref
        report.append({
            "name": run.name,
            "sampler": run.sampler,
            "tokens_per_sec_sim": statistics.median(rates),
            "flops_per_token": flops / tokens if tokens else 0.0,
            "match_rate": matches / len(prompts),
            "mean_wavefront": float(np.mean(waves)),
            "stall_fraction": stalls / steps if steps else 0.0,
        })
    return {"latency_model": vars(latency), "num_prompts": len(prompts), "samplers": report}


def pareto_front(rows: list[dict], x="tokens_per_sec_sim", y="match_rate") -> list[dict]:
    """Rows not dominated in (throughput, match rate), sorted by throughput."""
    front = []
    for a in rows:
        dominated = any(b[x] >= a[x] and b[y] >= a[y] and (b[x] > a[x] or b[y] > a[y])
                        for b in rows)
        if not dominated:
            front.append(a)
    return sorted(front, key=lambda r: r[x])
