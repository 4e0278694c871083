import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pdeformer import cli
from pdeformer.checkpoint import (CheckpointError, checkpoint_bytes, load_checkpoint,
                                  parse_checkpoint, quantization_bound, save_checkpoint)
from pdeformer.config import (OUT_ENV, SCHEMA, ConfigError, parse_config, parse_config_text,
                              schema_table)
from pdeformer.experiments import clear_cache, derive_seed
from pdeformer.mathcore import NumericalError
from pdeformer.writers import (format_field, heatmap_bytes, read_csv, read_pgm, write_csv,
                               write_matrix_csv, write_pgm)

TINY = ["--transformer.layers", "2", "--transformer.d_model", "8", "--transformer.heads", "2",
        "--data.n", "24", "--data.eval_n", "8", "--data.classes", "3", "--optimizer.steps", "6",
        "--optimizer.batch", "8", "--optimizer.epochs", "2", "--perturbation.trials", "2",
        "--data.seq_len", "8"]


# -------------------------------------------------------------------- config


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("", encoding="utf-8")
    cfg = parse_config(path, "flow")
    assert all(cfg[k] == spec.default for k, spec in SCHEMA.items())


def test_cli_flag_overrides_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("pde.dt = 0.5  # comment\ntransformer.layers = 2\npde.diffusion = 0.1, 0.2\n",
                    encoding="utf-8")
    cfg = parse_config(path, "flow", [("pde.dt", "0.01")])
    assert cfg["pde.dt"] == 0.01
    assert cfg["pde.diffusion"] == (0.1, 0.2)
    assert parse_config(path, "flow")["pde.dt"] == 0.5


@pytest.mark.parametrize("text, key", [
    ("pde.dt = -1", "pde.dt"),
    ("pde.dt = nan", "pde.dt"),
    ("pde.steps = 2.5", "pde.steps"),
    ("pde.bogus = 1", "pde.bogus"),
    ("optimizer.name = rmsprop", "optimizer.name"),
    ("transformer.heads = 3", "transformer.heads"),
    ("pde.alpha = 0.1, 0.2, 0.3", "pde.alpha"),
    ("perturbation.antithetic = maybe", "perturbation.antithetic"),
    ("data.source = mnist", "data.images"),
    ("just words", "expected"),
])
def test_bad_config_names_the_key(text, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config_text(text, "flow")


def test_bool_keys():
    assert parse_config_text("perturbation.antithetic = off", "flow")["perturbation.antithetic"] is False
    assert parse_config_text("perturbation.antithetic = YES", "flow")["perturbation.antithetic"] is True


def test_dump_round_trips_and_digest_is_stable():
    cfg = parse_config_text("pde.alpha = 0.1\nrun.seed = 7\nperturbation.antithetic = 0\n", "ib")
    again = parse_config_text(cfg.dump(), "ib")
    assert again.values == cfg.values
    assert again.digest() == cfg.digest()
    assert parse_config_text("", "ib").digest() != cfg.digest()


def test_output_dir_precedence(tmp_path):
    cfg = parse_config_text("", "flow")
    with pytest.raises(ConfigError, match="run.out"):
        cfg.output_dir({})
    assert str(cfg.output_dir({OUT_ENV: "/x"})) == "/x"
    cfg2 = parse_config_text(f"run.out = {tmp_path}", "flow")
    assert cfg2.output_dir({OUT_ENV: "/x"}) == tmp_path


def test_schema_table_lists_every_key():
    table = schema_table()
    assert all(f"`{k}`" in table for k in SCHEMA)


def test_derive_seed_is_stable():
    assert derive_seed(0, "data") == derive_seed(0, "data")
    assert derive_seed(0, "data") != derive_seed(0, "init")
    assert 0 <= derive_seed(123, "x") < 2 ** 64


# ---------------------------------------------------------------- checkpoint


def _params():
    rng = np.random.default_rng(0)
    return {"layer1.WQ": rng.standard_normal((4, 4)), "embed.b": rng.standard_normal(3),
            "scalar": np.array(2.5), "ünïcode": rng.standard_normal((2, 1, 2))}


def test_checkpoint_round_trip(tmp_path):
    params = _params()
    save_checkpoint(params, tmp_path / "p.pdef")
    back = load_checkpoint(tmp_path / "p.pdef")
    assert list(back) == list(params)
    bound = quantization_bound(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert np.abs(back[k] - params[k]).max() <= bound
    assert np.array_equal(back["layer1.WQ"], params["layer1.WQ"].astype(np.float32))


def test_checkpoint_layout_is_little_endian():
    blob = checkpoint_bytes({"ab": np.array([[1.0, 2.0]])})
    assert blob[:4] == b"PDEF"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert struct.unpack_from("<I", blob, 12) == (2,)
    assert blob[16:18] == b"ab"
    assert struct.unpack_from("<IQQI", blob, 18) == (2, 1, 2, 1)
    assert struct.unpack_from("<2f", blob, 42) == (1.0, 2.0)
    assert len(blob) == 50


def test_flipped_magic_is_rejected():
    blob = bytearray(checkpoint_bytes(_params()))
    blob[0] ^= 0x01
    with pytest.raises(CheckpointError, match="byte 0"):
        parse_checkpoint(bytes(blob))


def test_every_truncation_is_rejected():
    blob = checkpoint_bytes(_params())
    for n in range(len(blob)):
        with pytest.raises(CheckpointError):
            parse_checkpoint(blob[:n])
    with pytest.raises(CheckpointError, match="trailing"):
        parse_checkpoint(blob + b"\0")


def test_hostile_lengths_are_rejected_before_allocation():
    head = b"PDEF" + struct.pack("<II", 1, 1)
    with pytest.raises(CheckpointError, match="name"):
        parse_checkpoint(head + struct.pack("<I", 2 ** 32 - 1) + b"x" * 12)
    body = struct.pack("<I", 1) + b"w" + struct.pack("<I", 2) + struct.pack("<QQ", 2 ** 40, 2 ** 40)
    with pytest.raises(CheckpointError, match="needs"):
        parse_checkpoint(head + body + struct.pack("<I", 1) + b"\0" * 8)
    with pytest.raises(CheckpointError, match="count"):
        parse_checkpoint(b"PDEF" + struct.pack("<II", 1, 2 ** 31))
    with pytest.raises(CheckpointError, match="dtype"):
        parse_checkpoint(head + struct.pack("<I", 1) + b"w" + struct.pack("<II", 0, 7) + b"\0" * 4)
    with pytest.raises(CheckpointError, match="version"):
        parse_checkpoint(b"PDEF" + struct.pack("<II", 9, 0))


@given(st.binary(max_size=64))
def test_random_bytes_never_crash_the_loader(tail):
    try:
        parse_checkpoint(b"PDEF" + struct.pack("<I", 1) + tail)
    except CheckpointError:
        pass


def test_non_finite_float32_is_refused():
    with pytest.raises(ValueError):
        checkpoint_bytes({"big": np.array([1e39])})


# ------------------------------------------------------------------- writers


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_csv_floats_round_trip_exactly(x):
    assert float(format_field(x)) == x


def test_csv_layout(tmp_path):
    write_csv(tmp_path / "a.csv", ["x", "y", "flag"], [[1, 0.1, True], [2, 1e-300, False]])
    assert (tmp_path / "a.csv").read_text() == "x,y,flag\n1,0.10000000000000001,1\n2,%.17g,0\n" % 1e-300
    header, rows = read_csv(tmp_path / "a.csv")
    assert header == ["x", "y", "flag"] and float(rows[1][1]) == 1e-300
    with pytest.raises(ValueError):
        write_csv(tmp_path / "b.csv", ["x"], [["a,b"]])
    with pytest.raises(ValueError):
        write_csv(tmp_path / "b.csv", ["x", "y"], [[1]])
    write_matrix_csv(tmp_path / "m.csv", np.eye(2), "d")
    assert read_csv(tmp_path / "m.csv")[0] == ["row", "d0", "d1"]


def test_pgm_has_matrix_dimensions(tmp_path):
    m = np.arange(12.0).reshape(3, 4)
    write_pgm(tmp_path / "h.pgm", m)
    img = read_pgm(tmp_path / "h.pgm")
    assert img.shape == (3, 4)
    assert img.min() == 0 and img.max() == 255
    assert heatmap_bytes(m).startswith(b"P5\n4 3\n255\n")
    assert not read_pgm_bytes(heatmap_bytes(np.ones((2, 2)))).any()


def read_pgm_bytes(blob):
    return np.frombuffer(blob.split(b"\n", 3)[3], dtype=np.uint8)


# ----------------------------------------------------------------------- cli


@pytest.fixture(autouse=True)
def _fresh_cache():
    clear_cache()
    yield
    clear_cache()


@pytest.mark.parametrize("experiment", ["flow", "attention", "ib", "gradients", "perturbation"])
def test_every_experiment_runs_and_writes_a_manifest(tmp_path, experiment):
    out = tmp_path / experiment
    code = cli.main([experiment, "--run.out", str(out), *TINY])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["exit_code"] == 0
    assert manifest["seed"] == 0 and manifest["git_describe"]
    assert manifest["wall_time_s"] >= 0
    listed = {a["path"] for a in manifest["artifacts"]}
    assert "config.resolved" in listed
    assert all(not a["partial"] for a in manifest["artifacts"])
    for path in out.rglob("*.csv"):
        header, rows = read_csv(path)
        assert header[0] and all(len(r) == len(header) for r in rows)


def test_flow_artifacts(tmp_path):
    out = tmp_path / "flow"
    assert cli.main(["flow", "--run.out", str(out), *TINY]) == 0
    img = read_pgm(out / "activations" / "pde_layer01.pgm")
    header, rows = read_csv(out / "activations" / "pde_layer01.csv")
    assert img.shape == (len(rows), len(header) - 1) == (28, 8)
    _, cross = read_csv(out / "crossmodel_correlation.csv")
    assert float(cross[0][1]) == 1.0 and float(cross[0][2]) == 1.0
    assert (out / "checkpoints" / "pde.pdef").exists()


def test_same_seed_gives_byte_identical_csvs(tmp_path):
    for name in ("a", "b"):
        clear_cache()
        assert cli.main(["perturbation", "--run.out", str(tmp_path / name), *TINY]) == 0
    a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    assert a
    for rel in a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_manifest_reruns_to_identical_outputs(tmp_path):
    first = tmp_path / "first"
    assert cli.main(["gradients", "--run.out", str(first), *TINY]) == 0
    clear_cache()
    again = tmp_path / "again"
    assert cli.main(["gradients", "--config", str(first / "config.resolved"), "--run.out", str(again)]) == 0
    for p in first.rglob("*.csv"):
        assert p.read_bytes() == (again / p.relative_to(first)).read_bytes()


def test_env_var_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["attention", *TINY]) == 0
    assert (tmp_path / "env" / "manifest.json").exists()


def test_exit_codes(tmp_path, monkeypatch):
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert cli.main(["flow", "--pde.dt", "-1", "--run.out", str(tmp_path)]) == 2
    assert cli.main(["flow", "--no.such", "1", "--run.out", str(tmp_path)]) == 2
    assert cli.main(["flow"]) == 2
    assert cli.main(["flow", "--config", str(tmp_path / "missing.cfg"), "--run.out", str(tmp_path)]) == 4
    code = cli.main(["flow", "--run.out", str(tmp_path / "m"), "--data.source", "mnist",
                     "--data.images", str(tmp_path / "nope"), "--data.labels", str(tmp_path / "nope")])
    assert code == 4
    manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert manifest["status"] == "failed" and manifest["partial"]
    assert cli.exit_code_for(NumericalError("exp", 3)) == 3
    assert cli.exit_code_for(ConfigError("x")) == 2
    assert cli.exit_code_for(OSError("x")) == 4


def test_numeric_abort_exits_3_with_partial_manifest(tmp_path):
    out = tmp_path / "boom"
    code = cli.main(["gradients", "--run.out", str(out), *TINY, "--optimizer.lr", "1e300"])
    assert code == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["error"]["type"] in ("NumericalError", "PDEDivergence")
    assert manifest["exit_code"] == 3


def test_override_syntax_variants(tmp_path):
    assert cli.main(["attention", f"--run.out={tmp_path}", *TINY, "--run.seed=3"]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 3
    assert cli.main(["attention", "stray"]) == 2
