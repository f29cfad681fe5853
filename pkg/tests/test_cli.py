import hashlib
import json

import numpy as np
import pytest

from videolayers.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, run
from videolayers.compositing import reconstruct
from videolayers.solver import Decomposition, SolverConfig, init_parameters, problem_from_dataset, realize
from videolayers.videodata import load_sequence, read_rgb

SCENE = {
    "width": 40,
    "height": 28,
    "frames": 5,
    "camera_velocity": [1, 0],
    "sprites": [{"size": [4, 4], "start": [10, 10], "velocity": [2, 1], "shadow": {"offset": [3, 5], "axes": [5, 2]}}],
}


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "scene.json"
    spec.write_text(json.dumps(SCENE))
    assert run(["synth", str(spec), "-o", str(root / "scene")]) == EXIT_OK
    return root / "scene"


@pytest.fixture(scope="module")
def decomposed(scene_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    assert run(["decompose", str(scene_dir / "manifest.json"), "-o", str(out), "--epochs", "5", "--threads", "1"]) == EXIT_OK
    return out


def _digest(folder):
    h = hashlib.sha256()
    for p in sorted(folder.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(folder).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_decompose_outputs(decomposed):
    names = {p.name for p in decomposed.iterdir()}
    assert {"decomposition.npz", "checkpoint.vlck", "history.json", "config.json", "canvas.png"} <= names
    assert len(json.loads((decomposed / "history.json").read_text())) == 5


def test_outputs_independent_of_threads(scene_dir, decomposed, tmp_path):
    out = tmp_path / "t4"
    assert run(["decompose", str(scene_dir / "manifest.json"), "-o", str(out), "--epochs", "5", "--threads", "4"]) == EXIT_OK
    assert _digest(out) == _digest(decomposed)


def test_zero_epochs_is_initial_forward_pass(scene_dir, tmp_path):
    assert run(["decompose", str(scene_dir / "manifest.json"), "-o", str(tmp_path), "--epochs", "0"]) == EXIT_OK
    ds = load_sequence(scene_dir / "manifest.json")
    cfg = SolverConfig(epochs=0)
    prob = problem_from_dataset(ds, cfg)
    expect = realize(init_parameters(prob), prob, transfer_detail=True)
    got = Decomposition.load(tmp_path / "decomposition.npz")
    assert np.array_equal(got.stack.alpha, expect.stack.alpha)
    assert np.array_equal(got.canvas, expect.canvas)


def test_evaluate_prints_scores(scene_dir, decomposed, capsys):
    assert run(["evaluate", "--pred", str(decomposed), "--gt", str(scene_dir)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert set(report["mean"]) == {"J", "F", "JF", "clutter"}
    assert 0.0 <= report["mean"]["J"] <= 1.0


def test_evaluate_ground_truth_against_itself(scene_dir, capsys):
    assert run(["evaluate", "--pred", str(scene_dir), "--gt", str(scene_dir)]) == EXIT_OK
    mean = json.loads(capsys.readouterr().out)["mean"]
    assert mean["J"] == 1.0 and mean["F"] == 1.0 and mean["clutter"] == 0.0


def test_evaluate_size_mismatch(scene_dir, tmp_path):
    np.savez(tmp_path / "bad.npz", alpha=np.zeros((1, 5, 10, 10)))
    assert run(["evaluate", "--pred", str(tmp_path / "bad.npz"), "--gt", str(scene_dir)]) == EXIT_DATA


def test_render_without_layers_is_reconstruction(decomposed, tmp_path):
    assert run(["render", str(decomposed), "-o", str(tmp_path)]) == EXIT_OK
    d = Decomposition.load(decomposed / "decomposition.npz")
    expect = reconstruct(d.stack, 2)
    assert np.max(np.abs(read_rgb(tmp_path / "frame_2.png") - expect)) <= 1 / 255


@pytest.mark.parametrize("kind", ["colorpop", "strobe"])
def test_effects_run(decomposed, tmp_path, kind):
    assert run(["effect", kind, str(decomposed), "-o", str(tmp_path), "--interval", "2"]) == EXIT_OK
    assert any(tmp_path.glob("*.png"))


def test_bgswap_requires_canvas(decomposed, tmp_path):
    assert run(["effect", "bgswap", str(decomposed), "-o", str(tmp_path)]) == EXIT_USAGE


def test_effect_bad_layer(decomposed, tmp_path):
    assert run(["effect", "colorpop", str(decomposed), "-o", str(tmp_path), "--layer", "3"]) == EXIT_DATA


def test_usage_errors():
    assert run(["frobnicate"]) == EXIT_USAGE
    assert run(["decompose"]) == EXIT_USAGE
    assert run(["decompose", "m.json", "-o", "x", "--resize", "big"]) == EXIT_USAGE


def test_missing_manifest(tmp_path):
    assert run(["decompose", str(tmp_path / "nope.json"), "-o", str(tmp_path / "o")]) == EXIT_DATA
