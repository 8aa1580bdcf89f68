import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odebayes import cli, io
from odebayes.errors import ConfigError, DataFormatError
from odebayes.ode import ForcingSchedule
from odebayes.scenarios import prostate_hierarchy, simulate_toy

FAST_SAMPLER = """
[sampler]
n_chains = 2
n_warmup = 150
n_draws = 100
seed = 5
"""


def write_config(path, body):
    path.write_text(body)
    return path


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_text_round_trips(x):
    assert float(io.fmt(x)) == x


def test_dataset_csv_round_trip(tmp_path):
    ds = simulate_toy(seed=2)
    p = io.write_dataset_csv(ds, tmp_path / "d.csv")
    back = io.read_dataset_csv(p)
    assert back.group_ids() == ds.group_ids()
    for a, b in zip(ds.groups, back.groups):
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.observations, b.observations)


def test_treatment_csv_round_trip(tmp_path):
    ds, _ = prostate_hierarchy(0, n_patients=2)
    sched = {g.group_id: g.forcing for g in ds.groups}
    p = io.write_treatment_csv(sched, tmp_path / "t.csv")
    back = io.read_treatment_csv(p)
    for gid, f in sched.items():
        assert io.intervals_of(back[gid]) == io.intervals_of(f)
    assert io.intervals_of(ForcingSchedule.from_intervals([(0.0, 6.0)])) == [(0.0, 6.0)]


def test_malformed_csv_names_file_and_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("group,time,channel,value\nw1,0,y1,1.0\nw1,4,y1,abc\n")
    with pytest.raises(DataFormatError) as err:
        io.read_dataset_csv(p)
    assert "bad.csv:3" in str(err.value)
    p.write_text("grp,time,channel,value\n")
    with pytest.raises(DataFormatError):
        io.read_dataset_csv(p)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        io.RunConfig.from_dict({"simulate": {"times": {"start": 0, "stop": 48, "count": 0}}})
    with pytest.raises(ConfigError):
        io.RunConfig.from_dict({"modle": {}})
    with pytest.raises(ConfigError):
        io.RunConfig.from_dict({"sampler": {"n_chains": 0}})
    with pytest.raises(ConfigError):
        io.RunConfig.load(write_config(tmp_path / "c.toml", "[model\n"))


def test_override_precedence():
    cfg = io.RunConfig.from_dict({"sampler": {"seed": 1}, "output": {"dir": "a"}})
    env = {io.ENV_SEED: "2", io.ENV_OUT: "b"}
    assert cfg.with_overrides(env={}).seed == 1
    e = cfg.with_overrides(env=env)
    assert (e.seed, e.out) == (2, "b")
    c = cfg.with_overrides(seed=3, out="c", env=env)
    assert (c.seed, c.out) == (3, "c")
    assert cfg.hash() == cfg.with_overrides(out="elsewhere", env={}).hash()
    with pytest.raises(ConfigError):
        cfg.with_overrides(env={io.ENV_SEED: "x"})


def test_simulate_is_byte_identical(tmp_path):
    cfg = io.RunConfig.from_dict({"model": {"kind": "toy"}, "sampler": {"seed": 4}})
    a = cli.cmd_simulate(cfg.with_overrides(out=tmp_path / "a", env={}))
    b = cli.cmd_simulate(cfg.with_overrides(out=tmp_path / "b", env={}))
    text = a[0].read_text()
    assert text == b[0].read_text()
    assert len(text.strip().splitlines()) == 1 + 156
    assert io.verify_manifest(tmp_path / "a")


def test_simulate_zero_count_grid_is_config_error(tmp_path):
    cfg = write_config(tmp_path / "c.toml", '[simulate]\ntimes = {start = 0, stop = 48, count = 0}\n')
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o" / "data.csv").exists()


def test_manifest_detects_tampering(tmp_path):
    cfg = io.RunConfig.from_dict({}).with_overrides(out=tmp_path, env={})
    files = cli.cmd_simulate(cfg)
    assert io.verify_manifest(tmp_path)
    data = bytearray(files[0].read_bytes())
    data[40] ^= 1
    files[0].write_bytes(bytes(data))
    assert not io.verify_manifest(tmp_path)


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    cfg = write_config(root / "run.toml", '[model]\nkind = "toy"\n[data]\npath = "data.csv"\n' + FAST_SAMPLER)
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(root)]) == 0
    assert cli.main(["fit", "--config", str(cfg), "--out", str(root / "fit")]) == 0
    return root, cfg


def test_fit_outputs(toy_run):
    root, _ = toy_run
    run = root / "fit"
    for name in ("draws.csv", "summary.txt", "summary.csv", "loglik.csv", "obs_labels.csv", "manifest.json"):
        assert (run / name).exists()
    names, draws, chain_ids, stats = io.read_draws_csv(run / "draws.csv")
    assert names == ["p[1]", "p[2]", "p[3]", "y0[1]", "y0[2]", "sigma"]
    assert draws.shape == (200, 6) and set(chain_ids) == {0, 1}
    assert "lp" in stats and "is_divergent" in stats
    assert io.read_loglik_csv(run / "loglik.csv").shape == (200, 156)
    assert io.verify_manifest(run)
    assert len(list(run.glob("draws_*.npy"))) == 1


def test_fit_is_reproducible(toy_run, tmp_path):
    root, cfg = toy_run
    assert cli.main(["fit", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "draws.csv").read_bytes() == (root / "fit" / "draws.csv").read_bytes()


def test_predict_bands(toy_run):
    root, cfg = toy_run
    run = root / "fit"
    assert cli.main(["predict", "--config", str(cfg), "--out", str(run)]) == 0
    lines = (run / "predict_bands.csv").read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header[:3] == ["group", "channel", "time"]
    assert len(lines) == 1 + 2 * 101
    rows = np.array([[float(v) for v in ln.split(",")[2:]] for ln in lines[1:]])
    mean_q, pred_q = rows[:, 1:6], rows[:, 6:11]
    assert np.all(np.diff(mean_q, axis=1) >= 0) and np.all(np.diff(pred_q, axis=1) >= 0)
    assert np.all(mean_q[:, 4] - mean_q[:, 0] <= pred_q[:, 4] - pred_q[:, 0] + 1e-12)
    assert np.load(run / "predict_y_pred.npy").shape == (1, 200, 2, 101)
    man = json.loads((run / "manifest.json").read_text())
    assert "draws.csv" in man["artifacts"] and "predict_bands.csv" in man["artifacts"]
    assert io.verify_manifest(run)


def test_loo_same_run_twice(toy_run, capsys):
    root, _ = toy_run
    run = root / "fit"
    assert cli.main(["loo", str(run), str(run)]) == 0
    text = (run / "loo" / "loo.txt").read_text()
    assert "elpd_diff = 0.0, se_diff = 0.0" in text
    assert "k > 0.7:" in text
    assert io.verify_manifest(run)


def test_no_pooling_names_are_suffixed(tmp_path):
    ds = simulate_toy(seed=1, n_wells=2)
    io.write_dataset_csv(ds, tmp_path / "data.csv")
    cfg = write_config(tmp_path / "c.toml", '[model]\nkind = "toy"\npooling = "none"\n[data]\npath = "data.csv"\n'
                       '[sampler]\nn_chains = 1\nn_warmup = 20\nn_draws = 10\nmax_tree_depth = 4\n')
    assert cli.main(["fit", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    names = io.read_draws_csv(tmp_path / "o" / "draws.csv")[0]
    assert "p[1][w1]" in names and "sigma[w2]" in names


def test_missing_data_is_reported(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.toml", '[data]\npath = "nope.csv"\n')
    assert cli.main(["fit", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err
