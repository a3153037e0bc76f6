"""Command-line front end: ``rdsample {generate,sweep,theory,init-model}``."""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .bench import (LatencyModel, RunSpec, compare_samplers, export_heatmap, export_trace,
                    pareto_front, simulate_time)
from .errors import ConfigError, InputError
from .model import ModelConfig, ToyModel, load_checkpoint, save_checkpoint, stream_rng
from .samplers import SAMPLERS, SamplerConfig, generate_static_ar, run_sampler

PROFILE_ENV = "RDSAMPLE_PROFILE"
PROMPT_KEYS = ("prompt", "prompt_file", "random_prompt")

# flag dest -> SamplerConfig field
SAMPLER_FLAGS = {
    "r": "r", "r_inner": "r_inner", "steps": "T", "epsilon": "epsilon", "beta_max": "beta_max",
    "eta": "eta", "alpha": "alpha", "wavefront": "wavefront_max", "headway": "headway",
    "headway_fill": "headway_fill", "continuous_compute": "continuous_compute",
    "temperature": "temperature", "top_p": "top_p", "max_new_tokens": "max_new_tokens",
    "seed": "seed", "stop_token": "stop_token", "depth_slots": "depth_slots",
    "draft_len": "draft_len", "draft_r": "draft_r",
}


# ------------------------------------------------------------------ parsing
def _sampler_flags(p: argparse.ArgumentParser) -> None:
    d = SamplerConfig()
    g = p.add_argument_group("sampler")
    g.add_argument("--r", type=int, default=d.r, help="total recurrences per position")
    g.add_argument("--r-inner", type=int, default=d.r_inner, help="recurrences per sampler step")
    g.add_argument("--steps", type=int, default=d.T, help="maximum sampler steps")
    g.add_argument("--epsilon", type=float, default=d.epsilon, help="exit threshold")
    g.add_argument("--beta-max", type=float, default=d.beta_max, help="initial noise weight")
    g.add_argument("--eta", type=float, default=d.eta, help="conditioning momentum")
    g.add_argument("--alpha", type=float, default=d.alpha, help="state init scale")
    g.add_argument("--wavefront", type=int, default=d.wavefront_max, help="maximum wavefront rows")
    g.add_argument("--headway", type=int, default=d.headway, help="rows appended per step")
    g.add_argument("--headway-fill", choices=("random_token", "pad_token"), default=d.headway_fill)
    g.add_argument("--continuous-compute", action=argparse.BooleanOptionalAction,
                   default=d.continuous_compute, help="init new rows from the last latent")
    g.add_argument("--temperature", type=float, default=d.temperature)
    g.add_argument("--top-p", type=float, default=d.top_p)
    g.add_argument("--max-new-tokens", type=int, default=d.max_new_tokens)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--stop-token", type=int, default=None)
    g.add_argument("--depth-slots", type=int, default=d.depth_slots, help="KV slots per position")
    g.add_argument("--draft-len", type=int, default=d.draft_len)
    g.add_argument("--draft-r", type=int, default=d.draft_r)


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--model", choices=("toy", "oracle"), default="toy",
                   help="seeded toy transformer or the linear contraction oracle")
    g.add_argument("--checkpoint", type=Path, help="toy model checkpoint written by init-model")
    g.add_argument("--model-seed", type=int, default=0)
    g.add_argument("--hidden-dim", type=int, default=None)
    g.add_argument("--vocab-size", type=int, default=None)
    g.add_argument("--oracle-lambda", type=float, default=0.5)
    g.add_argument("--profile", type=Path, default=None,
                   help=f"latency profile file (default: ${PROFILE_ENV} if set)")


def _prompt_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--prompt", help="comma or space separated token ids")
    g.add_argument("--prompt-file", type=Path, help="one prompt of token ids per line")
    g.add_argument("--random-prompt", type=int, metavar="LEN", help="random prompt of LEN tokens")
    p.add_argument("--prompt-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdsample", description=__doc__)
    parser.add_argument("--config", type=Path, help="key=value file mirroring flags; flags win")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="run one sampler on one or more prompts")
    gen.add_argument("--sampler", choices=SAMPLERS, default="df-adaptive")
    _sampler_flags(gen)
    _model_flags(gen)
    _prompt_flags(gen)
    gen.add_argument("--vocab-map", type=Path, help="id<TAB>string file for readable output")
    gen.add_argument("--out", type=Path, help="JSON with tokens and ledger")
    gen.add_argument("--trace-out", type=Path, help="trace CSV (diffusion samplers)")
    gen.add_argument("--heatmap-out", type=Path, help="trace heatmap image")
    gen.add_argument("--report-out", type=Path, help="ledger and simulated timing JSON")
    gen.add_argument("--snapshot-out", type=Path, help="config snapshot to replay the run")

    sw = sub.add_parser("sweep", help="compare samplers over a hyperparameter grid")
    sw.add_argument("--sampler", action="append", choices=SAMPLERS,
                    help="sampler(s) to sweep (repeatable, default df-adaptive)")
    sw.add_argument("--grid", action="append", default=[], metavar="FIELD=V1,V2,...",
                    help="sampler flag and values (repeatable)")
    _sampler_flags(sw)
    _model_flags(sw)
    _prompt_flags(sw, required=False)
    sw.add_argument("--num-prompts", type=int, default=20, help="random prompts when none given")
    sw.add_argument("--prompt-len", type=int, default=4)
    sw.add_argument("--report-out", type=Path)

    th = sub.add_parser("theory", help="cost, mask and depth/width tables")
    th.add_argument("--lengths", default="8,32,128,512")
    th.add_argument("--scales", default="1,2,4,8")
    th.add_argument("--budget", type=int, default=None, help="serial passes T for the ledger table")
    _model_flags(th)
    th.add_argument("--report-out", type=Path)

    im = sub.add_parser("init-model", help="write a seeded toy model checkpoint")
    for f in fields(ModelConfig):
        im.add_argument("--" + f.name.replace("_", "-"), type=type(getattr(ModelConfig(), f.name)),
                        default=getattr(ModelConfig(), f.name))
    im.add_argument("--out", type=Path, required=True)
    im.add_argument("--vocab-out", type=Path, help="also write a demo vocabulary map")
    return parser


def read_config_file(path: Path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _config_argv(values: dict[str, str], command: str, argv: list[str],
                 parser: argparse.ArgumentParser) -> list[str]:
    """Turn config-file entries into flags placed before the command-line ones."""
    sub = parser._subparsers._group_actions[0].choices[command]  # noqa: SLF001
    known = {a.dest: a for a in sub._actions}  # noqa: SLF001
    cli_prompt = any(a.split("=")[0] in ("--prompt", "--prompt-file", "--random-prompt") for a in argv)
    out = []
    for key, val in values.items():
        if key == "command" or (cli_prompt and key in PROMPT_KEYS):
            continue
        if key not in known:
            raise ConfigError(f"config key {key!r} is not a {command} flag")
        flag = "--" + key.replace("_", "-")
        action = known[key]
        if isinstance(action, argparse.BooleanOptionalAction):
            truthy = val.lower() in ("1", "true", "yes", "on")
            out.append(flag if truthy else "--no-" + key.replace("_", "-"))
        elif isinstance(action, argparse._AppendAction):  # noqa: SLF001
            for item in val.split(";"):
                out += [flag, item]
        elif val.lower() != "none":
            out += [flag, val]
    return out


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    pre.add_argument("command", nargs="?")
    known, _ = pre.parse_known_args(argv)
    if known.config is None or known.command not in COMMANDS:
        return parser.parse_args(argv)
    i = argv.index(known.command)
    extra = _config_argv(read_config_file(known.config), known.command, argv[i + 1:], parser)
    return parser.parse_args(argv[:i + 1] + extra + argv[i + 1:])


# ------------------------------------------------------------------ helpers
def sampler_config(args) -> SamplerConfig:
    return SamplerConfig(**{field: getattr(args, dest) for dest, field in SAMPLER_FLAGS.items()})


def latency_model(args) -> LatencyModel:
    path = args.profile or os.environ.get(PROFILE_ENV)
    return LatencyModel.from_file(path) if path else LatencyModel()


def load_model(args):
    if args.model == "oracle":
        from .theory import make_contraction_oracle
        return make_contraction_oracle(args.hidden_dim or 16, args.oracle_lambda, args.model_seed,
                                       vocab_size=args.vocab_size or 16)
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)
    overrides = {k: v for k, v in (("hidden_dim", args.hidden_dim), ("vocab_size", args.vocab_size))
                 if v is not None}
    return ToyModel(ModelConfig(seed=args.model_seed, **overrides))


def _parse_ids(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise InputError(f"prompt must be integer token ids, got {text!r}") from None


def load_prompts(args, vocab_size: int, count: int = 1, length: int = 4) -> list[list[int]]:
    if args.prompt is not None:
        prompts = [_parse_ids(args.prompt)]
    elif args.prompt_file is not None:
        prompts = [_parse_ids(line) for line in args.prompt_file.read_text().splitlines()
                   if line.strip()]
    else:
        n = args.random_prompt if args.random_prompt is not None else length
        if n < 1:
            raise InputError("random prompt length must be >= 1")
        rng = stream_rng(args.prompt_seed, 0)
        k = 1 if args.random_prompt is not None else count
        prompts = [[int(t) for t in rng.integers(vocab_size, size=n)] for _ in range(k)]
    if not prompts or any(not p for p in prompts):
        raise InputError("empty prompt")
    return prompts


def read_vocab_map(path: Path) -> dict[int, str]:
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            idx, _, word = line.partition("\t")
            out[int(idx)] = word
    return out


def write_demo_vocab(path: Path, vocab_size: int) -> Path:
    """Syllable names so traces read as pseudo-words."""
    onsets, vowels = "bdfgklmnprstvz", "aeiou"
    sylls = [o + v for o in onsets for v in vowels]
    lines = []
    for i in range(vocab_size):
        word = sylls[i % len(sylls)] + (sylls[(i // len(sylls)) % len(sylls)] if i >= len(sylls) else "")
        lines.append(f"{i}\t{word}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def snapshot_lines(args, prompt: list[int]) -> list[str]:
    """key=value lines that replay this generate run through ``--config``."""
    lines = ["# rdsample generate snapshot", f"sampler={args.sampler}"]
    for dest in SAMPLER_FLAGS:
        lines.append(f"{dest}={getattr(args, dest)}")
    for key in ("model", "model_seed", "hidden_dim", "vocab_size", "oracle_lambda", "checkpoint",
                "profile"):
        lines.append(f"{key}={getattr(args, key)}")
    lines.append("prompt=" + ",".join(map(str, prompt)))
    return lines


# ----------------------------------------------------------------- commands
def cmd_generate(args) -> int:
    cfg = sampler_config(args)
    latency = latency_model(args)
    model = load_model(args)
    prompts = load_prompts(args, model.config.vocab_size)
    vocab = read_vocab_map(args.vocab_map) if args.vocab_map else None
    results = []
    for n, prompt in enumerate(prompts):
        res = run_sampler(model, prompt, args.sampler, cfg, record_trace=args.trace_out is not None
                          or args.heatmap_out is not None)
        total, rate = simulate_time(res.ledger, latency)
        words = " ".join(vocab.get(t, str(t)) for t in res.tokens) if vocab else None
        print(" ".join(map(str, res.tokens)) if words is None else words)
        if res.truncated:
            print(f"warning: generation stopped early ({res.reason})", file=sys.stderr)
        suffix = "" if len(prompts) == 1 else f".{n}"
        if res.trace is not None and args.trace_out:
            export_trace(res.trace, _suffixed(args.trace_out, suffix))
        if res.trace is not None and args.heatmap_out:
            export_heatmap(res.trace, _suffixed(args.heatmap_out, suffix))
        results.append({"prompt": prompt, "tokens": res.tokens, "reason": res.reason,
                        "simulated_time": total, "tokens_per_sec_sim": rate,
                        "ledger": res.ledger.to_dict()})
    if args.out:
        _write_json(args.out, {"sampler": args.sampler, "config": cfg.as_dict(),
                               "results": [{k: r[k] for k in ("prompt", "tokens", "reason")}
                                           for r in results]})
    if args.report_out:
        _write_json(args.report_out, {"sampler": args.sampler, "latency_model": asdict(latency),
                                      "results": results})
    if args.snapshot_out:
        if len(prompts) != 1:
            raise InputError("--snapshot-out needs a single prompt")
        args.snapshot_out.write_text("\n".join(snapshot_lines(args, prompts[0])) + "\n")
    return 0


def _suffixed(path: Path, suffix: str) -> Path:
    return path if not suffix else path.with_name(path.stem + suffix + path.suffix)


def parse_grid(items: list[str]) -> dict[str, list]:
    grid = {}
    types = {f.name: type(getattr(SamplerConfig(), f.name)) for f in fields(SamplerConfig)}
    for item in items:
        key, sep, vals = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not vals.strip():
            raise ConfigError(f"grid entry {item!r} must look like field=v1,v2")
        field = SAMPLER_FLAGS.get(key, key)
        if field not in types:
            raise ConfigError(f"unknown grid field {key!r}")
        cast = types[field]
        if cast is bool:
            cast = lambda v: v.lower() in ("1", "true", "yes", "on")  # noqa: E731
        elif field == "stop_token":
            cast = int
        grid[field] = [cast(v) for v in vals.split(",")]
    return grid


def cmd_sweep(args) -> int:
    base = sampler_config(args)
    grid = parse_grid(args.grid)
    samplers = args.sampler or ["df-adaptive"]
    latency = latency_model(args)
    runs = []
    keys = sorted(grid)
    for sampler in samplers:
        for combo in itertools.product(*(grid[k] for k in keys)):
            point = dict(zip(keys, combo))
            name = sampler + "".join(f" {k}={v}" for k, v in point.items())
            try:
                cfg = replace(base, **point)
            except ConfigError as exc:
                print(f"warning: skipping {name}: {exc}", file=sys.stderr)
                continue
            runs.append(RunSpec(name, sampler, cfg))
    if not runs:
        raise ConfigError("no valid grid points")
    model = load_model(args)
    prompts = load_prompts(args, model.config.vocab_size, args.num_prompts, args.prompt_len)
    report = compare_samplers(model, prompts, runs, latency)
    front = pareto_front(report["samplers"])
    report["pareto_front"] = [r["name"] for r in front]
    print(f"{'name':<40} {'tok/s(sim)':>12} {'flops/tok':>12} {'match':>6} {'wave':>6} {'stall':>6}")
    for row in report["samplers"]:
        mark = "*" if row["name"] in report["pareto_front"] else " "
        print(f"{mark}{row['name']:<39} {row['tokens_per_sec_sim']:>12.6g} "
              f"{row['flops_per_token']:>12.4g} {row['match_rate']:>6.3f} "
              f"{row['mean_wavefront']:>6.2f} {row['stall_fraction']:>6.3f}")
    if args.report_out:
        _write_json(args.report_out, report)
    return 0


def theory_tables(args) -> dict:
    from .samplers import generate_diffusion_simple
    from .theory import (ARCHS, VARIANTS, ModelDims, compare_depth_width, mask_pair_count,
                         parallelism_profile, prefill_cost)

    lengths = [int(x) for x in args.lengths.split(",")]
    scales = [int(x) for x in args.scales.split(",")]
    model = load_model(args)
    dims = ModelDims.from_model(model)
    latency = latency_model(args)
    cost_rows, mask_rows, par_rows = [], [], []
    for L in lengths:
        for s in scales:
            costs = {a: prefill_cost(a, L, s, dims)["total"] for a in ARCHS}
            ordered = (costs["Depth"] <= costs["WidthKVShare"] < costs["WidthNoShare"]
                       if s > 1 and L > 1 else costs["Depth"] <= costs["WidthKVShare"] <= costs["WidthNoShare"])
            cost_rows.append({"L": L, "s": s, **costs, "ordered": ordered})
            mask_rows.append({"L": L, "s": s, **{v: mask_pair_count(v, L, s) for v in VARIANTS}})
            par_rows.append({"L": L, "s": s, **asdict(parallelism_profile(L, s, latency))})
    prompt = [1, 2, 3, 4]
    r, r_inner = 32, 4
    ar = generate_static_ar(model, prompt, 16, r)
    df = generate_diffusion_simple(model, prompt, r=r, r_inner=r_inner, max_new_tokens=16,
                                   record_trace=False)
    # default budget sits mid-run, away from the prefill and the final drain
    budget = args.budget or min(len(ar.ledger.width_events), len(df.ledger.width_events)) // 2
    return {"prefill_cost": cost_rows, "mask_pairs": mask_rows, "parallelism": par_rows,
            "depth_width": compare_depth_width(ar.ledger, df.ledger, budget),
            "L_star": latency.saturation_width}


def cmd_theory(args) -> int:
    tables = theory_tables(args)
    print(f"{'L':>5} {'s':>3} {'Depth':>14} {'KVShare':>14} {'NoShare':>14}  ordered")
    for row in tables["prefill_cost"]:
        print(f"{row['L']:>5} {row['s']:>3} {row['Depth']:>14.6g} {row['WidthKVShare']:>14.6g} "
              f"{row['WidthNoShare']:>14.6g}  {row['ordered']}")
    print(f"\nmask pairs (L, s, KVShare, NoShare); parallelism ratio with L*={tables['L_star']}")
    for m, p in zip(tables["mask_pairs"], tables["parallelism"]):
        print(f"{m['L']:>5} {m['s']:>3} {m['KVShare']:>10} {m['NoShare']:>10}  ratio={p['ratio']:g}")
    dw = tables["depth_width"]
    print(f"\ndepth/width after T={dw['T']} serial passes: d_AR={dw['d_ar']} d_DF={dw['d_df']} "
          f"w_AR={dw['w_ar']} w_DF={dw['w_df']} (mean {dw['mean_w_ar']:.2f} vs {dw['mean_w_df']:.2f})")
    if args.report_out:
        _write_json(args.report_out, tables)
    return 0


def cmd_init_model(args) -> int:
    cfg = ModelConfig(**{f.name: getattr(args, f.name) for f in fields(ModelConfig)})
    save_checkpoint(ToyModel(cfg), args.out)
    if args.vocab_out:
        write_demo_vocab(args.vocab_out, cfg.vocab_size)
    print(f"wrote {args.out}")
    return 0


COMMANDS = {"generate": cmd_generate, "sweep": cmd_sweep, "theory": cmd_theory,
            "init-model": cmd_init_model}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"rdsample: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"rdsample: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
