"""Acceptance criteria, one test each.

Every test appends a PASS/FAIL line to ``RESULTS``; the lines are printed
as they happen and again in the pytest terminal summary.  Run directly with
``python tests/test_acceptance.py`` or through pytest.
"""

import math
import statistics

import numpy as np
import pytest

from conftest import random_prompts
from rdsample.bench import LatencyModel, RunSpec, compare_samplers, simulate_time
from rdsample.samplers import (SamplerConfig, generate_adaptive_ar, generate_diffusion_adaptive,
                               generate_diffusion_simple, generate_self_speculative,
                               generate_static_ar)
from rdsample.theory import (ARCHS, ModelDims, build_mask, compare_depth_width, ledger_replay,
                             make_contraction_oracle, mask_pair_count, prefill_cost,
                             replay_cost_ledger)

RESULTS: list[str] = []
MEMORY_BOUND = LatencyModel(1000, 1, 128)


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_ar_equivalence(toy):
    prompts = random_prompts(100, toy.config.vocab_size, seed=100)
    r, N = 16, 12
    bad = 0
    for p in prompts:
        ar = generate_static_ar(toy, p, N, r)
        df = generate_diffusion_simple(toy, p, r=r, r_inner=r, beta_max=0.0, eta=0.0,
                                       max_new_tokens=N, record_trace=False)
        bad += df.tokens != ar.tokens
    report("AR-equivalence", bad == 0, f"{len(prompts) - bad}/{len(prompts)} prompts identical")


def test_adaptive_equivalence(toy):
    prompts = random_prompts(100, toy.config.vocab_size, seed=200)
    r, ri, N = 32, 4, 10
    counts = {}
    for eps in (0.01, 0.03, 0.1):
        same = 0
        for p in prompts:
            ar = generate_adaptive_ar(toy, p, N, eps, r, check_every=ri)
            df = generate_diffusion_adaptive(toy, p, r=r, r_inner=ri, epsilon=eps, wavefront_max=1,
                                             headway=1, max_new_tokens=N, record_trace=False)
            same += df.tokens == ar.tokens
        counts[eps] = same
    ok = all(v == len(prompts) for v in counts.values())
    report("Adaptive-equivalence", ok,
           ", ".join(f"eps={e}: {v}/{len(prompts)}" for e, v in counts.items()))


def test_speculative_losslessness(toy):
    prompts = random_prompts(100, toy.config.vocab_size, seed=300)
    same = 0
    for p in prompts:
        ref = generate_static_ar(toy, p, 12, 16)
        spec = generate_self_speculative(toy, p, 12, draft_len=4, draft_r=4, verify_r=16)
        same += spec.tokens == ref.tokens
    report("Speculative losslessness", same == len(prompts), f"{same}/{len(prompts)} prompts identical")


def test_contraction_convergence():
    oracle = make_contraction_oracle(16, 0.5, 0)
    prompts = random_prompts(50, oracle.config.vocab_size, seed=400)
    N, same, worst = 16, 0, 0.0
    for p in prompts:
        df = generate_diffusion_adaptive(oracle, p, r=64, r_inner=4, epsilon=1e-4,
                                         max_new_tokens=N, record_trace=False)
        same += df.tokens == oracle.fixed_point_generate(p, N)
        # iterate every generated position to its limit and compare with the linear solve
        e = oracle.encode(df.sequence)[len(p) - 1:len(df.sequence) - 1]
        z = oracle.init_positions(range(len(e)), 1.0, 0)
        cache = oracle.new_cache()
        for _ in range(64):
            z = oracle.recur_step(z, e, cache)
        zs = oracle.fixed_point(e)
        worst = max(worst, float(np.max(np.linalg.norm(z - zs, axis=1) / np.linalg.norm(zs, axis=1))))
    ok = same == len(prompts) and worst < 1e-6
    report("Contraction convergence", ok,
           f"{same}/{len(prompts)} prompts match fixed-point decoding; max rel. error {worst:.2e}")


def test_flop_closed_forms(toy):
    f, N, r, ri = toy.flops_per_pass, 200, 32, 4
    ar = generate_static_ar(toy, [1, 2, 3, 4], N, r)
    df = generate_diffusion_simple(toy, [1, 2, 3, 4], r=r, r_inner=ri, max_new_tokens=N,
                                   record_trace=False)
    ar_ratio = ar.ledger.decode_flops / ((r + 1) * f * N)
    df_ratio = df.ledger.decode_flops / ((r + r / ri) * f * N)
    ok = ar.ledger.decode_flops == (r + 1) * f * N and abs(df_ratio - 1) <= 0.05
    report("FLOP closed forms", ok, f"static AR / (r+1)fN = {ar_ratio!r}; df-simple / (r+r/r')fN = {df_ratio:.4f}")


def test_simulated_speedup(toy):
    prompts = random_prompts(5, toy.config.vocab_size, seed=500)
    ar_rates, df_rates = [], []
    for p in prompts:
        ar = generate_static_ar(toy, p, 64, 32)
        df = generate_diffusion_adaptive(toy, p, r=32, r_inner=4, wavefront_max=128,
                                         max_new_tokens=64, record_trace=False)
        ar_rates.append(simulate_time(ar.ledger, MEMORY_BOUND)[1])
        df_rates.append(simulate_time(df.ledger, MEMORY_BOUND)[1])
    ratio = statistics.median(df_rates) / statistics.median(ar_rates)
    report("Simulated speedup", 3.5 <= ratio <= 8, f"median tokens/sec ratio {ratio:.2f} (target [3.5, 8])")


def test_memory_bound(toy):
    prompt, N = [1, 2, 3, 4, 5], 8
    shared, full = {}, {}
    for r in (4, 8, 32, 64):
        shared[r] = generate_static_ar(toy, prompt, N, r).cache.nbytes()
        full[r] = generate_static_ar(toy, prompt, N, r, depth_slots=r).cache.nbytes()
    base = shared[4]
    ok = len(set(shared.values())) == 1 and all(full[r] == r * base for r in full)
    report("Memory bound", ok, f"depth_slots=1 bytes {sorted(set(shared.values()))}; "
           f"depth_slots=r bytes/r {sorted({full[r] // r for r in full})}")


def test_theory_checks(small_toy):
    problems = []
    for L in range(1, 9):
        for s in range(1, 9):
            for v in ("NoShare", "KVShare"):
                m = build_mask(v, L, s)
                if not m.is_causal() or m.pair_count() != mask_pair_count(v, L, s):
                    problems.append(f"mask {v} L={L} s={s}")
            if L >= 2 and s >= 2 and not mask_pair_count("KVShare", L, s) < mask_pair_count("NoShare", L, s):
                problems.append(f"pair order L={L} s={s}")
    dims = ModelDims.from_model(small_toy)
    for L in (8, 16, 32, 64, 128, 256, 512):
        for s in (2, 4, 8):
            c = {a: prefill_cost(a, L, s, dims)["total"] for a in ARCHS}
            if not c["Depth"] <= c["WidthKVShare"] < c["WidthNoShare"]:
                problems.append(f"cost order L={L} s={s}")
    ar = generate_static_ar(small_toy, [1, 2, 3], 24, 32)
    df = generate_diffusion_simple(small_toy, [1, 2, 3], r=32, r_inner=4, max_new_tokens=24,
                                   record_trace=False)
    for led in (replay_cost_ledger(ar.ledger), replay_cost_ledger(df.ledger), ledger_replay([], 3, 5)):
        if led.d != list(range(len(led.d))):
            problems.append("d_t != t")
    cmp = compare_depth_width(ar.ledger, df.ledger, T=100)
    if not (cmp["d_ar"] == cmp["d_df"] and cmp["w_df"] > cmp["w_ar"]):
        problems.append(f"depth/width {cmp}")
    report("Theory checks", not problems,
           "; ".join(problems) if problems else
           f"masks/costs ok; at T={cmp['T']}: d={cmp['d_df']}, w_DF={cmp['w_df']} > w_AR={cmp['w_ar']}")


def _nondecreasing(xs):
    return all(b >= a - 1e-12 * abs(a) for a, b in zip(xs, xs[1:]))


def test_sweep_monotonicities():
    oracle = make_contraction_oracle(16, 0.5, 0)
    prompts = random_prompts(30, oracle.config.vocab_size, seed=600)

    def sweep(sampler, **grid):
        (key, values), = grid.items()
        runs = [RunSpec(f"{key}={v}", sampler, SamplerConfig(r=32, max_new_tokens=32, **{key: v}))
                for v in values]
        return compare_samplers(oracle, prompts, runs, MEMORY_BOUND)["samplers"]

    rp = sweep("df-simple", r_inner=[1, 2, 4, 8, 16, 32])
    match = [row["match_rate"] for row in rp]
    eps = [row["tokens_per_sec_sim"] for row in sweep("df-adaptive", epsilon=[0.01, 0.03, 0.1, 0.3])]
    width = [row["tokens_per_sec_sim"] for row in sweep("df-adaptive", wavefront_max=[1, 8, 64, 128])]
    ok = _nondecreasing(match) and match[-1] == 1.0 and _nondecreasing(eps) and _nondecreasing(width)
    report("Sweep monotonicities", ok,
           f"match vs r' {[round(m, 3) for m in match]}; tok/s vs eps "
           f"{[f'{x:.3e}' for x in eps]}; tok/s vs W {[f'{x:.3e}' for x in width]}")


def test_trace_invariants():
    oracle = make_contraction_oracle(16, 0.8, 1)
    res = generate_diffusion_adaptive(oracle, [1, 2, 3], r=64, r_inner=1, epsilon=1e-6,
                                      wavefront_max=4, max_new_tokens=20)
    episodes = res.trace.stall_episodes()
    ok = res.trace.check_frozen_immutable() and len(episodes) >= 1
    report("Trace invariants", ok, f"frozen cells immutable; {len(episodes)} stall episodes, "
           f"first at step {episodes[0][0] if episodes else None}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
