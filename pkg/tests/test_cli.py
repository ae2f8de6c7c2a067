import json

import numpy as np
import pytest

from uavsynth.checkpoint import load_checkpoint
from uavsynth.cli import build_parser, main
from uavsynth.config import RunConfig, Schedule
from uavsynth.dataset_io import export_detection, load_scene, read_detection
from uavsynth.pose_sampler import load_requests
from uavsynth.scene_synth import CameraPath, toy_dyn_1

SMALL = RunConfig(mode="extended", D=4, resolution_xy=8, scale_multipliers=(1,), hidden=8,
                  schedule=Schedule(iterations=5, batch_size=64, lr=1e-2, n_samples=8,
                                    eval_samples=8))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = toy_dyn_1()
    spec.camera = CameraPath(**{**spec.camera.__dict__, "frames": 6, "width": 24, "height": 20})
    (root / "spec.json").write_text(json.dumps(spec.to_dict()))
    (root / "cfg.json").write_text(json.dumps(SMALL.to_dict()))
    assert main(["gen-scene", "--spec", str(root / "spec.json"), "--out", str(root / "scene")]) == 0
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_help_lists_every_subcommand(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    out = capsys.readouterr().out
    for cmd in ("gen-scene", "perturb-poses", "mask-scene", "train", "render", "sample-poses",
                "annotate", "augment", "eval-psnr", "merge"):
        assert cmd in out


def test_gen_scene_writes_loadable_dataset(work):
    ds = load_scene(work / "scene")
    assert ds.frame_count == 6 and ds.image_size == (20, 24)
    assert (work / "scene" / "run.json").is_file()


@pytest.mark.parametrize("n", [1, 5])
def test_sample_poses_dynamic_yields_3n(work, n):
    out = work / f"req{n}.json"
    assert run("sample-poses", "--scene", work / "scene", "--dynamic", n, "--out", out) == 0
    reqs = load_requests(out)
    assert len(reqs) == 3 * n
    assert [r.tag for r in reqs[:3]] == ["dyn_t", "dyn_t_minus", "dyn_t_plus"]


def test_train_zero_iterations_keeps_initialisation(work):
    ck = work / "zero.ckpt"
    assert run("train", "--scene", work / "scene", "--config", work / "cfg.json",
               "--iterations", 0, "--out", ck) == 0
    st = load_checkpoint(ck)
    assert st.step == 0
    assert all(not m.any() for m in st.m.values())


def test_train_is_reproducible(work):
    logs = []
    for name in ("a.ckpt", "b.ckpt"):
        assert run("train", "--scene", work / "scene", "--config", work / "cfg.json",
                   "--out", work / name) == 0
        logs.append((work / (name + ".log.jsonl")).read_text())
    assert logs[0] == logs[1] and len(logs[0].splitlines()) == 5
    assert (work / "a.ckpt").read_bytes() == (work / "b.ckpt").read_bytes()


def test_augment_and_merge_counts(work, capsys):
    ck = work / "aug.ckpt"
    assert run("train", "--scene", work / "scene", "--config", work / "cfg.json", "--out", ck) == 0
    req = work / "req_aug.json"
    assert run("sample-poses", "--scene", work / "scene", "--dynamic", 2, "--out", req) == 0
    assert run("augment", "--scene", work / "scene", "--ckpt-im", ck, "--requests", req,
               "--out", work / "syn") == 0
    syn = read_detection(work / "syn")
    assert len(syn) == 6 and syn.count("synthetic") == 6
    # the real side is the six ground-truth frames, equal in size to the synthetic set
    assert run("merge", "--real", work / "scene", "--synthetic", work / "syn",
               "--out", work / "merged") == 0
    merged = read_detection(work / "merged")
    assert merged.count("real") == 6 and merged.count("synthetic") == 6 and len(merged) == 12
    assert not (work / "merged.real").exists()


def test_eval_psnr_writes_table(work):
    ck = work / "zero.ckpt"
    if not ck.exists():
        run("train", "--scene", work / "scene", "--config", work / "cfg.json",
            "--iterations", 0, "--out", ck)
    out = work / "psnr.json"
    assert run("eval-psnr", "--ckpt", ck, "--scene", work / "scene", "--out", out) == 0
    table = json.loads(out.read_text())
    assert table


class TestErrors:
    def test_missing_scene(self, tmp_path, capsys):
        assert run("train", "--scene", tmp_path / "nope", "--out", tmp_path / "x.ckpt") == 1
        assert "error" in capsys.readouterr().err
        assert not (tmp_path / "x.ckpt").exists()

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as e:
            main(["train", "--bogus"])
        assert e.value.code != 0

    def test_invalid_config_leaves_no_output(self, work, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"mode": "extended", "D": -3}))
        out = tmp_path / "o.ckpt"
        assert run("train", "--scene", work / "scene", "--config", bad, "--out", out) == 1
        assert not out.exists()

    def test_bad_threads(self, work, tmp_path):
        assert run("--threads", 0, "sample-poses", "--scene", work / "scene", "--dynamic", 1,
                   "--out", tmp_path / "r.json") == 2

    def test_merge_incompatible_classes(self, work, tmp_path):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        export_detection([("a", img, [(7, 0, 0, 2, 2)])], tmp_path / "s", "synthetic")
        assert run("merge", "--real", work / "scene", "--synthetic", tmp_path / "s",
                   "--out", tmp_path / "m") == 1
        assert not (tmp_path / "m").exists()
