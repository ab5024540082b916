import json

import numpy as np
import pytest

from crnbev.cli import main, pgm_bytes
from crnbev.pipeline import ModelConfig
from crnbev.tensor import read_crnt

SMALL = ModelConfig(channels=16, heads=4, layers=2, depth_bins=64, bev_size=32, bev_cell=3.2, n_k=64)


@pytest.fixture(scope="module")
def scene_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert main(["gen-scene", "--seed", "42", "--boxes", "8", "--out", str(d / "scene.json")]) == 0
    return d / "scene.json"


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.json"
    p.write_text(json.dumps(SMALL.to_dict()))
    return p


def test_gen_scene_is_byte_identical(tmp_path, scene_file):
    assert main(["gen-scene", "--seed", "42", "--boxes", "8", "--out", str(tmp_path / "scene.json")]) == 0
    for f in scene_file.parent.iterdir():
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()


def test_gen_scene_empty(tmp_path):
    assert main(["gen-scene", "--boxes", "0", "--out", str(tmp_path / "e.json")]) == 0
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["boxes"] == [] and not read_crnt(tmp_path / "e.gt.crnt").any()


def test_gen_scene_rejects_bad_dropout(tmp_path, capsys):
    assert main(["gen-scene", "--dropout", "1.5", "--out", str(tmp_path / "x.json")]) == 1
    assert "dropout" in capsys.readouterr().err


def test_default_run_shape(tmp_path, scene_file):
    out = tmp_path / "out"
    assert main(["run", "--scene", str(scene_file), "--out-dir", str(out)]) == 0
    bev = read_crnt(out / "bev.crnt")
    assert bev.shape == (64, 128, 128) and np.all(np.isfinite(bev))
    man = json.loads((out / "manifest.json").read_text())
    cfg = ModelConfig.from_dict(man["config"])
    assert man["config_hash"] == cfg.hash() == ModelConfig().hash()
    assert man["output_shape"] == [64, 128, 128] and man["weights"] == {"seed": 0}
    assert set(man["stage_timings_ms"]) == {"camera", "radar", "rvt", "pooling", "mfa"}
    assert (out / "bev.pgm").read_bytes() == pgm_bytes(bev)


def test_all_modalities_dropped_is_refused(tmp_path, scene_file, capsys):
    code = main(["run", "--scene", str(scene_file), "--out-dir", str(tmp_path),
                 "--drop-radar", "--drop-cameras", "0,1,2,3,4,5"])
    assert code == 1 and "no input modality" in capsys.readouterr().err
    assert not (tmp_path / "bev.crnt").exists()


def test_io_and_argument_errors(tmp_path, scene_file, small_config):
    assert main(["run", "--scene", str(tmp_path / "missing.json")]) == 2
    assert main(["run", "--scene", str(scene_file), "--config", str(tmp_path / "nope.json")]) == 2
    assert main(["run"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["run", "--scene", str(scene_file), "--drop-cameras", "a,b"]) == 1
    assert main(["run", "--scene", str(scene_file), "--config", str(small_config), "--drop-cameras", "9",
                 "--out-dir", str(tmp_path)]) == 1
    assert main(["run", "--scene", str(scene_file), "--threads", "0"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**SMALL.to_dict(), "c_in": 3}))
    assert main(["run", "--scene", str(scene_file), "--config", str(bad), "--out-dir", str(tmp_path)]) == 1


def test_bench_rejects_one_repeat(tmp_path):
    assert main(["bench", "--repeats", "1", "--out-dir", str(tmp_path)]) == 1


def test_bench_small_sweep(tmp_path):
    assert main(["bench", "--grids", "8,16", "--modes", "dense,sparse", "--nk", "32", "--repeats", "5",
                 "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "bench.json").read_text())
    assert len(report["rows"]) == 4
    assert len((tmp_path / "bench.csv").read_text().splitlines()) == 5


def test_bench_pipeline(tmp_path, scene_file, small_config):
    assert main(["bench", "--pipeline", str(scene_file), "--config", str(small_config), "--repeats", "5",
                 "--out-dir", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "bench.json").read_text())["rows"]
    assert [r["name"] for r in rows][-1] == "pipeline"


@pytest.mark.parametrize("base", [[], ["--sparse"]])
def test_verify_sparse(tmp_path, scene_file, small_config, base):
    out = tmp_path / "o"
    assert main(["run", "--scene", str(scene_file), "--config", str(small_config), "--verify-sparse",
                 "--out-dir", str(out), *base]) == 0
    v = json.loads((out / "manifest.json").read_text())["verify_sparse"]
    assert v["passed"] and v["max_abs_diff"] <= 1e-6 and v["selected_cells"] == 64


def test_crn_seed_overrides(tmp_path, scene_file, small_config, monkeypatch):
    def run(name, *extra):
        assert main(["run", "--scene", str(scene_file), "--config", str(small_config),
                     "--out-dir", str(tmp_path / name), *extra]) == 0
        return (tmp_path / name / "bev.crnt").read_bytes()

    seed7 = run("a", "--seed", "7")
    monkeypatch.setenv("CRN_SEED", "7")
    assert run("b") == seed7
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["weights"] == {"seed": 7}
    monkeypatch.setenv("CRN_SEED", "seven")
    assert main(["run", "--scene", str(scene_file), "--config", str(small_config),
                 "--out-dir", str(tmp_path / "c")]) == 1


def test_init_weights_then_run(tmp_path, scene_file, small_config):
    w = tmp_path / "w"
    assert main(["init-weights", "--config", str(small_config), "--seed", "3", "--out", str(w)]) == 0
    assert main(["run", "--scene", str(scene_file), "--config", str(small_config), "--weights", str(w),
                 "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["run", "--scene", str(scene_file), "--config", str(small_config), "--seed", "3",
                 "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "bev.crnt").read_bytes() == (tmp_path / "b" / "bev.crnt").read_bytes()
    # weights written for one config do not load under another
    assert main(["run", "--scene", str(scene_file), "--weights", str(w), "--out-dir", str(tmp_path / "c")]) == 1


def test_mode_flags_change_output(tmp_path, scene_file, small_config):
    outs = {}
    for name, extra in {"base": [], "depth": ["--mode", "depth-only"], "sig": ["--depth", "sigmoid"],
                        "drop": ["--drop-cameras", "0,1"]}.items():
        assert main(["run", "--scene", str(scene_file), "--config", str(small_config),
                     "--out-dir", str(tmp_path / name), *extra]) == 0
        outs[name] = (tmp_path / name / "bev.crnt").read_bytes()
    assert len(set(outs.values())) == 4
    man = json.loads((tmp_path / "drop" / "manifest.json").read_text())
    assert man["dropped_cameras"] == [0, 1] and man["config"]["vt_mode"] == "radar_assisted"


def test_pgm_format():
    bev = np.zeros((2, 3, 4), np.float32)
    bev[1, 2, 3] = 5
    data = pgm_bytes(bev)
    header = b"P5\n4 3\n255\n"
    assert data.startswith(header) and len(data) == len(header) + 12
    assert data[-1] == 255 and set(data[len(header):-1]) == {0}
    assert pgm_bytes(np.ones((1, 2, 2), np.float32)).endswith(bytes(4))
