import json
import math
import re
import subprocess
import sys

import numpy as np
import pytest

from codemerge import cli
from codemerge.codebook import Codebook, codebook_save
from codemerge.fingerprint import Fingerprint
from codemerge.tensor_store import Checkpoint, checkpoint_load, checkpoint_save

SMALL_SIM = ["--n-steps", "12", "--shift-schedule", "6:mean_shift:0.8"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)


@pytest.fixture
def features_file(tmp_path):
    p = tmp_path / "features.cmck"
    checkpoint_save(Checkpoint.from_arrays(4, {"features": np.random.default_rng(0).normal(size=(8, 32))}), p)
    return p


def make_codebook(tmp_path, n, d_prime=4):
    rng = np.random.default_rng(n)
    cb = Codebook(d_prime)
    for s in range(n):
        cb.append(Fingerprint(s, rng.normal(size=d_prime)),
                  Checkpoint.from_arrays(s, {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}))
    path = tmp_path / f"cb{n}.cmix"
    codebook_save(cb, path)
    return path, cb


# -- fingerprint ---------------------------------------------------------------------


def test_fingerprint_writes_file_and_prints_norm(capsys, tmp_path, features_file):
    out_path = tmp_path / "fp.cmck"
    code, out, _ = run(capsys, "fingerprint", "--features", features_file, "--d-prime", 8, "--seed", 5, "--out", out_path)
    assert code == 0
    fp = checkpoint_load(out_path)
    values = fp["fingerprint"].data.astype(np.float64)
    assert values.shape == (8,) and fp.step == 4
    assert json.loads(out)["norm"] == pytest.approx(np.linalg.norm(values), rel=1e-12)


def test_fingerprint_missing_file_exits_2(capsys, tmp_path):
    code, out, err = run(capsys, "fingerprint", "--features", tmp_path / "nope", "--d-prime", 4, "--out", tmp_path / "o")
    assert code == 2 and out == "" and "error" in err


def test_fingerprint_malformed_file_exits_2(capsys, tmp_path):
    bad = tmp_path / "bad.cmck"
    bad.write_bytes(b"CMCK\x01\x00")
    assert run(capsys, "fingerprint", "--features", bad, "--d-prime", 4, "--out", tmp_path / "o")[0] == 2


def test_fingerprint_without_features_tensor_exits_2(capsys, tmp_path):
    p = tmp_path / "other.cmck"
    checkpoint_save(Checkpoint.from_arrays(0, {"x": np.ones(4)}), p)
    assert run(capsys, "fingerprint", "--features", p, "--d-prime", 2, "--out", tmp_path / "o")[0] == 2


def test_fingerprint_d_prime_above_d_exits_3(capsys, tmp_path, features_file):
    code, _, err = run(capsys, "fingerprint", "--features", features_file, "--d-prime", 64, "--out", tmp_path / "o")
    assert code == 3 and "d_prime" in err


def test_seed_env_overrides_flag(capsys, tmp_path, features_file, monkeypatch):
    a, b, c = (tmp_path / n for n in ("a", "b", "c"))
    run(capsys, "fingerprint", "--features", features_file, "--d-prime", 8, "--seed", 9, "--out", a)
    monkeypatch.setenv(cli.SEED_ENV, "9")
    run(capsys, "fingerprint", "--features", features_file, "--d-prime", 8, "--seed", 1, "--out", b)
    monkeypatch.setenv(cli.SEED_ENV, "2")
    run(capsys, "fingerprint", "--features", features_file, "--d-prime", 8, "--seed", 9, "--out", c)
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    assert run(capsys, "fingerprint", "--features", features_file, "--d-prime", 8, "--out", c)[0] == 3


# -- merge ---------------------------------------------------------------------------


def test_merge_single_entry_returns_it(capsys, tmp_path):
    path, cb = make_codebook(tmp_path, 1)
    out_path = tmp_path / "m.cmck"
    code, out, _ = run(capsys, "merge", "--codebook", path, "--k", 3, "--lambda", 0.5, "--method", "codemerge", "--out", out_path)
    assert code == 0
    line = json.loads(out)
    assert line["weights"] == [1.0] and line["steps"] == [0]
    assert checkpoint_load(out_path) == cb[0].resolve()


@pytest.mark.parametrize("method", ["codemerge", "average", "mos"])
def test_merge_five_entries_weights_sum_to_one(capsys, tmp_path, method):
    path, _ = make_codebook(tmp_path, 5)
    code, out, _ = run(capsys, "merge", "--codebook", path, "--k", 5, "--lambda", 1.0, "--method", method, "--out", tmp_path / "m")
    assert code == 0
    line = json.loads(out)
    assert len(line["weights"]) == 5
    assert abs(line["weight_sum"] - 1.0) <= 1e-9
    assert abs(math.fsum(line["weights"]) - 1.0) <= 1e-9


def test_merge_codemerge_reports_descending_scores(capsys, tmp_path):
    path, _ = make_codebook(tmp_path, 6)
    _, out, _ = run(capsys, "merge", "--codebook", path, "--k", 3, "--out", tmp_path / "m")
    line = json.loads(out)
    assert line["raw_scores"] == sorted(line["raw_scores"], reverse=True) and len(line["steps"]) == 3


def test_merge_ema_requires_beta(capsys, tmp_path):
    path, _ = make_codebook(tmp_path, 3)
    code, _, err = run(capsys, "merge", "--codebook", path, "--k", 2, "--method", "ema", "--out", tmp_path / "m")
    assert code == 3 and "--beta" in err
    code, out, _ = run(capsys, "merge", "--codebook", path, "--method", "ema", "--beta", 0.9, "--out", tmp_path / "m")
    assert code == 0
    np.testing.assert_allclose(json.loads(out)["weights"], [0.81, 0.09, 0.1])


def test_merge_missing_checkpoint_exits_4(capsys, tmp_path):
    path, _ = make_codebook(tmp_path, 3)
    (tmp_path / "cb3_ckpts" / "step_00000001.cmck").unlink()
    code, _, err = run(capsys, "merge", "--codebook", path, "--k", 3, "--out", tmp_path / "m")
    assert code == 4 and "missing" in err


def test_merge_corrupt_index_exits_2(capsys, tmp_path):
    path, _ = make_codebook(tmp_path, 3)
    path.write_bytes(path.read_bytes()[:-3])
    assert run(capsys, "merge", "--codebook", path, "--out", tmp_path / "m")[0] == 2


@pytest.mark.parametrize("extra", [["--k", "0"], ["--lambda", "-1"], ["--method", "magic"], ["--k", "two"]])
def test_merge_bad_parameters_exit_3(capsys, tmp_path, extra):
    path, _ = make_codebook(tmp_path, 3)
    assert run(capsys, "merge", "--codebook", path, "--out", tmp_path / "m", *extra)[0] == 3


# -- simulate / oracles -----------------------------------------------------------------


def test_simulate_repeat_gives_identical_files(capsys, tmp_path):
    outs = []
    for name in ("a", "b"):
        trace, cbp = tmp_path / f"{name}.jsonl", tmp_path / name / "cb.cmix"
        cbp.parent.mkdir()
        code, out, _ = run(capsys, "simulate", "--method", "codemerge", "--trace-out", trace,
                           "--codebook-out", cbp, *SMALL_SIM)
        assert code == 0
        outs.append((trace.read_bytes(), cbp.read_bytes(), out,
                     sorted(p.read_bytes() for p in (cbp.parent / "cb_ckpts").iterdir())))
    assert outs[0] == outs[1]


def test_simulate_config_file_and_flag_override(capsys, tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("# toy run\nmethod = ema\nn_steps = 8\nshift-schedule = 4:mean_shift:0.5\nbeta = 0.9\n")
    code, out, _ = run(capsys, "simulate", "--config", cfg, "--trace-out", tmp_path / "t.jsonl")
    assert code == 0
    line = json.loads(out)
    assert line["method"] == "ema" and line["steps"] == 8
    code, out, _ = run(capsys, "simulate", "--config", cfg, "--trace-out", tmp_path / "t.jsonl", "--n-steps", 6)
    assert json.loads(out)["steps"] == 6


def test_config_file_can_supply_required_options(capsys, tmp_path, features_file):
    cfg = tmp_path / "fp.cfg"
    cfg.write_text(f"features = {features_file}\nd_prime = 4\nout = {tmp_path / 'fp.cmck'}\n")
    assert run(capsys, "fingerprint", "--config", cfg)[0] == 0
    assert (tmp_path / "fp.cmck").exists()


@pytest.mark.parametrize("text", ["bogus = 1\n", "no equals sign\n", "n_steps = many\n", "method = teleport\n"])
def test_bad_config_file_exits_3(capsys, tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    assert run(capsys, "simulate", "--config", cfg, "--trace-out", tmp_path / "t")[0] == 3


def test_missing_config_file_exits_2(capsys, tmp_path):
    assert run(capsys, "simulate", "--config", tmp_path / "none.cfg", "--trace-out", tmp_path / "t")[0] == 2


def test_simulate_invalid_schedule_exits_3(capsys, tmp_path):
    code = run(capsys, "simulate", "--trace-out", tmp_path / "t", "--n-steps", 5, "--shift-schedule", "9:mean_shift:1")[0]
    assert code == 3


def test_hessian_check_passes(capsys):
    code, out, _ = run(capsys, "hessian-check", "--seed", 17, "--trials", 25)
    line = json.loads(out)
    assert code == 0 and line["max_rel_err"] <= 1e-8


def test_hessian_check_tolerance_failure_exits_5(capsys):
    assert run(capsys, "hessian-check", "--trials", 3, "--tol", 0)[0] in (0, 5)
    assert run(capsys, "hessian-check", "--trials", 3, "--tol", -1)[0] == 5


def test_correlate_prints_summary(capsys):
    code, out, _ = run(capsys, "correlate", "--min-pearson", -1, "--min-kendall", -1)
    assert code == 0
    assert re.fullmatch(r"pearson=-?\d+\.\d+ kendall=-?\d+\.\d+ pairs=\d+\n", out)


def test_correlate_below_floor_exits_5(capsys):
    assert run(capsys, "correlate", "--min-pearson", 1.01)[0] == 5


def test_correlate_on_saved_codebook(capsys, tmp_path):
    path, _ = make_codebook(tmp_path, 5)
    code, out, _ = run(capsys, "correlate", "--codebook", path, "--min-pearson", -1, "--min-kendall", -1)
    assert code == 0 and out.endswith("pairs=10\n")


def test_correlate_too_small_codebook_exits_3(capsys, tmp_path):
    path, _ = make_codebook(tmp_path, 2)
    assert run(capsys, "correlate", "--codebook", path)[0] == 3


def test_lmc_check_modes(capsys):
    code, out, _ = run(capsys, "lmc-check", "--mode", "quadratic", "--trials", 10)
    assert code == 0 and json.loads(out)["barrier"] <= 1e-9
    code, out, _ = run(capsys, "lmc-check", "--mode", "sgd", *SMALL_SIM)
    line = json.loads(out)
    assert code == 0 and math.isfinite(line["barrier"]) and len(line["curve"]) == 11
    assert run(capsys, "lmc-check", "--mode", "quadratic", "--trials", 5, "--max-barrier", -1)[0] == 5


SUBCOMMANDS = ["fingerprint", "merge", "simulate", "lmc-check", "correlate", "hessian-check"]


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_help_documents_defaults(command):
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[command]
    text = sub.format_help()
    for action in sub._actions:
        if action.dest == "help" or action.required:
            continue
        assert action.help, f"{command} {action.option_strings} has no help"
        if action.default is not None and not isinstance(action.default, bool):
            assert "default" in action.help or "%(default)" in action.help or "(default:" in text
    with pytest.raises(SystemExit) as info:
        cli.main([command, "--help"])
    assert info.value.code == 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "codemerge", "hessian-check", "--trials", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "max_rel_err" in proc.stdout
