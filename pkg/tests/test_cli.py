import json

import pytest

from rdsample.cli import build_parser, main, parse_args, parse_grid, sampler_config
from rdsample.errors import ConfigError
from rdsample.samplers import SamplerConfig

SMALL = ["--hidden-dim", "16", "--vocab-size", "32", "--max-new-tokens", "8"]


def _tokens(capsys):
    return capsys.readouterr().out.strip().splitlines()[-1]


def test_defaults_match_sampler_config():
    args = parse_args(["generate", "--prompt", "1"])
    assert sampler_config(args) == SamplerConfig()
    assert args.sampler == "df-adaptive"


def test_df_simple_full_inner_equals_static(capsys):
    base = ["generate", "--prompt", "1,2,3", "--r", "8", *SMALL]
    assert main(base + ["--sampler", "static"]) == 0
    a = _tokens(capsys)
    assert main(base + ["--sampler", "df-simple", "--r-inner", "8", "--eta", "0"]) == 0
    assert _tokens(capsys) == a


def test_missing_prompt_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["generate"])
    assert exc.value.code == 2


def test_invalid_flags_rejected_before_model_load(capsys, monkeypatch):
    import rdsample.cli as cli

    def boom(args):
        raise AssertionError("model loaded")

    monkeypatch.setattr(cli, "load_model", boom)
    assert main(["generate", "--prompt", "1", "--headway", "9", "--wavefront", "4"]) == 2
    assert "wavefront_max" in capsys.readouterr().err


def test_bad_prompt_token(capsys):
    assert main(["generate", "--prompt", "1,x", *SMALL]) == 2
    assert main(["generate", "--prompt", "999", *SMALL]) == 2


def test_outputs_and_snapshot_replay(tmp_path, capsys):
    out = tmp_path / "o"
    args = ["generate", "--random-prompt", "5", "--prompt-seed", "3", *SMALL,
            "--temperature", "0.7", "--beta-max", "0.2",
            "--trace-out", str(out) + ".csv", "--report-out", str(out) + ".json",
            "--out", str(out) + ".tokens.json", "--snapshot-out", str(out) + ".cfg"]
    assert main(args) == 0
    first = _tokens(capsys)
    rep = json.loads((tmp_path / "o.json").read_text())
    assert rep["results"][0]["ledger"]["tokens_emitted"] == 8
    assert (tmp_path / "o.csv").read_text().startswith("# ")
    assert main(["--config", str(out) + ".cfg", "generate"]) == 0
    assert _tokens(capsys) == first
    # flags override the file
    assert main(["--config", str(out) + ".cfg", "generate", "--max-new-tokens", "3"]) == 0
    assert _tokens(capsys).split() == first.split()[:3]


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus=1\n")
    assert main(["--config", str(cfg), "generate", "--prompt", "1"]) == 2


def test_profile_env(tmp_path, monkeypatch, capsys):
    prof = tmp_path / "p.profile"
    prof.write_text("fixed_overhead_us=10\nper_token_us=10\nsaturation_width=4\n")
    monkeypatch.setenv("RDSAMPLE_PROFILE", str(prof))
    rep = tmp_path / "r.json"
    assert main(["generate", "--prompt", "1", *SMALL, "--report-out", str(rep)]) == 0
    assert json.loads(rep.read_text())["latency_model"]["saturation_width"] == 4


def test_parse_grid():
    grid = parse_grid(["r_inner=1,2", "epsilon=0.1", "continuous-compute=true,false"])
    assert grid == {"r_inner": [1, 2], "epsilon": [0.1], "continuous_compute": [True, False]}
    assert parse_grid(["wavefront=1,8"]) == {"wavefront_max": [1, 8]}
    with pytest.raises(ConfigError):
        parse_grid(["nope=1"])


def test_sweep(tmp_path, capsys):
    rep = tmp_path / "s.json"
    code = main(["sweep", "--model", "oracle", "--grid", "r_inner=1,4", "--grid", "headway=1,500",
                 "--num-prompts", "3", "--max-new-tokens", "6", "--report-out", str(rep)])
    assert code == 0
    err = capsys.readouterr().err
    assert "skipping" in err
    data = json.loads(rep.read_text())
    assert len(data["samplers"]) == 2
    assert data["pareto_front"]


def test_theory(tmp_path, capsys):
    rep = tmp_path / "t.json"
    assert main(["theory", "--lengths", "8,64", "--scales", "1,2", "--hidden-dim", "16",
                 "--report-out", str(rep)]) == 0
    data = json.loads(rep.read_text())
    assert all(row["ordered"] for row in data["prefill_cost"])
    s1 = [r for r in data["prefill_cost"] if r["s"] == 1]
    assert all(r["Depth"] == r["WidthKVShare"] == r["WidthNoShare"] for r in s1)
    dw = data["depth_width"]
    assert dw["d_ar"] == dw["d_df"] and dw["w_df"] > dw["w_ar"]


def test_init_model_and_vocab(tmp_path, capsys):
    ck, voc = tmp_path / "m.ckpt", tmp_path / "v.tsv"
    assert main(["init-model", "--out", str(ck), "--vocab-size", "32", "--hidden-dim", "16",
                 "--vocab-out", str(voc)]) == 0
    assert main(["generate", "--checkpoint", str(ck), "--prompt", "1 2", "--max-new-tokens", "4",
                 "--vocab-map", str(voc)]) == 0
    words = _tokens(capsys).split()
    assert len(words) == 4 and all(w.isalpha() for w in words)


def test_parser_lists_all_flags():
    text = build_parser()._subparsers._group_actions[0].choices["generate"].format_help()
    for flag in ("--sampler", "--r", "--r-inner", "--epsilon", "--beta-max", "--eta", "--alpha",
                 "--wavefront", "--headway", "--headway-fill", "--continuous-compute",
                 "--temperature", "--top-p", "--max-new-tokens", "--seed", "--profile",
                 "--trace-out", "--report-out"):
        assert flag in text
