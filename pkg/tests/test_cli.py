import csv
import json
import logging

import numpy as np
import pytest

from tomo.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, RunConfig, main, read_config_file
from tomo.core import SIDECAR_SUFFIX, generate_shepp_logan, read_image


@pytest.fixture
def dirs(tmp_path):
    return ["--cache-dir", str(tmp_path / "cache"), "--out", str(tmp_path / "out")]


def test_phantom_writes_pgm_and_sidecar(tmp_path, dirs):
    assert main(["phantom", "--n", "32", *dirs]) == EXIT_OK
    pgm = tmp_path / "out" / "phantom_n32.pgm"
    first = pgm.read_bytes()
    assert first.startswith(b"P5") and (tmp_path / "out" / ("phantom_n32.pgm" + SIDECAR_SUFFIX)).exists()
    np.testing.assert_array_equal(read_image(pgm), generate_shepp_logan(32))
    assert main(["phantom", "--n", "32", *dirs]) == EXIT_OK
    assert pgm.read_bytes() == first


def test_invalid_configs_exit_2(tmp_path, dirs):
    assert main(["phantom", "--n", "3", *dirs]) == EXIT_CONFIG
    assert main(["reconstruct", "--n", "32", "--r", "0", *dirs]) == EXIT_CONFIG
    assert main(["reconstruct", "--backend", "magic", *dirs]) == EXIT_CONFIG
    assert main(["bench", "table9", *dirs]) == EXIT_CONFIG
    bad = tmp_path / "bad.cfg"
    bad.write_text("n = 32\nwhatever = 1\n")
    assert main(["phantom", "--config", str(bad), *dirs]) == EXIT_CONFIG
    assert main(["phantom", "--config", str(tmp_path / "missing.cfg"), *dirs]) == EXIT_CONFIG


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nn = 32\nlambda = 2.5  # trailing\ncg-steps=3\nbackend=surrogate\n")
    values = read_config_file(cfg)
    assert values == {"n": 32, "lam": 2.5, "cg_steps": 3, "backend": "surrogate"}
    assert RunConfig(**values).validate().lam == 2.5
    a = RunConfig(n=32, out="a", cache_dir="x").digest()
    assert a == RunConfig(n=32, out="b", cache_dir="y").digest() != RunConfig(n=64).digest()


def test_precompute_cache_hit_corruption_and_keying(tmp_path, dirs, caplog):
    caplog.set_level(logging.INFO)
    args = ["precompute", "--n", "16", "--backend", "surrogate", "--r", "2", *dirs]
    assert main(args) == EXIT_OK
    files = sorted((tmp_path / "cache").glob("*.spm"))
    assert len(files) == 2
    caplog.clear()
    assert main(args) == EXIT_OK
    assert caplog.text.count("cached") == 2
    btb = next(f for f in files if f.name.startswith("btb"))
    btb.write_bytes(b"garbage" + btb.read_bytes()[7:])
    caplog.clear()
    assert main(args) == EXIT_OK
    assert "rebuilding" in caplog.text and "bad magic" in caplog.text
    # a d=2 run must not be served the d=1 operator, even under the d=1 file name
    d2 = tmp_path / "cache" / "btb_n16_digits6_d2.spm"
    d2.write_bytes(btb.read_bytes())
    caplog.clear()
    assert main(["precompute", "--n", "16", "--d", "2", *dirs]) == EXIT_OK
    assert "rebuilding" in caplog.text and "n_angles" in caplog.text


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["phantom", "--n", "16", "--out", str(blocker / "sub")]) == EXIT_IO


def test_reconstruct_outputs_and_tolerance_stop(tmp_path, dirs):
    assert main(["reconstruct", "--n", "32", "--iters", "300", "--tol", "1e-2", *dirs]) == EXIT_OK
    out = tmp_path / "out"
    lines = (out / "summary.jsonl").read_text().splitlines()
    row = json.loads(lines[-1])
    assert row["stopping_reason"] == "tolerance" and row["iterations"] < 300
    assert 0 < row["final_rel_l1"] < 1 and len(row["config_hash"]) == 12
    traces = list(out.glob("recon_fused_n32_*_trace.csv"))
    with open(traces[0], newline="") as fh:
        assert len(list(csv.reader(fh))) == row["iterations"] + 1
    assert read_image(next(out.glob("recon_fused_n32_*.pgm"))).shape == (32, 32)


def test_surrogate_reconstruction_is_worse(tmp_path, dirs):
    for backend in ("fused", "surrogate"):
        assert main(["reconstruct", "--n", "64", "--iters", "60", "--backend", backend, *dirs]) == EXIT_OK
    rows = [json.loads(s) for s in (tmp_path / "out" / "summary.jsonl").read_text().splitlines()]
    fused, surrogate = rows
    assert surrogate["final_rel_l1"] > fused["final_rel_l1"]


def test_bench_threshold_table_is_monotone(tmp_path, dirs):
    code = main(["bench", "tables345", "--iters", "40", "--tol", "1e-4", *dirs])
    with open(tmp_path / "out" / "tables345.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 2 * 4
    assert {r["backend"] for r in rows} == {"fused", "surrogate"}
    for start in range(0, len(rows), 4):
        block = rows[start:start + 4]
        assert len({r["config_hash"] for r in block}) == 1
        if block[0]["status"] != "ok":
            continue
        its = [int(r["iterations"]) for r in block if r["iterations"]]
        secs = [float(r["seconds"]) for r in block if r["seconds"]]
        assert its == sorted(its) and secs == sorted(secs)
    statuses = {r["status"] for r in rows}
    assert code == (EXIT_OK if statuses == {"ok"} else 3)
