import math
import os

import numpy as np
import pytest

from poetloc import cli
from poetloc import geometry as G
from poetloc import maprender as M
from poetloc import pipeline as PL
from poetloc.tensor import make_rng

SMALL_SCENE_ARGS = [
    "--extent", "1.0", "--ground-spacing", "0.03", "--object-spacing", "0.02",
    "--boxes", "2", "--poles", "1",
    "--fx", "60", "--fy", "60", "--cx", "31.5", "--cy", "31.5",
    "--width", "64", "--height", "64",
]


def gen_scene(out, seed=7, frames=3):
    code = cli.main(
        ["gen-scene", "--out", str(out), "--seed", str(seed), "--frames", str(frames)]
        + SMALL_SCENE_ARGS
    )
    assert code == 0
    return str(out)


def train_ckpt(scene, out, steps=0, seed=1, extra=()):
    code = cli.main(
        ["train", "--scene", scene, "--out", str(out), "--steps", str(steps),
         "--seed", str(seed), "--trans-range", "0.2", "--rot-range", "5"]
        + list(extra)
    )
    return code


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    return gen_scene(tmp_path_factory.mktemp("scene"), seed=7, frames=3)


@pytest.fixture(scope="module")
def identity_ckpt(tmp_path_factory, scene_dir):
    """Checkpoint whose final head always answers with the identity pose."""
    _, k, _ = cli.load_scene_dir(scene_dir)
    model = PL.LocalizationModel.initialize(k, make_rng(2))
    last = "poet.head%d" % (len([n for n in model.params if n.endswith(".fc1.b")
                                 and n.startswith("poet.head")]) - 1)
    model.params[last + ".fc1.w"].data[:] = 0.0
    model.params[last + ".fc1.b"].data[:] = np.array(
        [0, 0, 0, 1, 0, 0, 0], dtype=np.float32
    )
    path = str(tmp_path_factory.mktemp("ckpt") / "identity.ckpt")
    model.save(path)
    return path


class TestGenScene:
    def test_writes_expected_files(self, scene_dir):
        names = sorted(os.listdir(scene_dir))
        assert cli.MAP_FILE in names
        assert cli.POSES_FILE in names
        assert cli.INTRINSICS_FILE in names
        assert [n for n in names if n.startswith("frame_")] == [
            "frame_0000.ppm", "frame_0001.ppm", "frame_0002.ppm",
        ]

    def test_pose_table_quaternions_unit_norm(self, scene_dir):
        poses = cli._parse_poses(os.path.join(scene_dir, cli.POSES_FILE))
        assert len(poses) == 3
        for _, pose in poses:
            assert abs(np.linalg.norm(pose.q) - 1.0) < 1e-9

    def test_same_seed_gives_identical_bytes(self, scene_dir, tmp_path):
        other = gen_scene(tmp_path / "again", seed=7, frames=3)
        for name in (cli.MAP_FILE, cli.POSES_FILE, "frame_0002.ppm"):
            with open(os.path.join(scene_dir, name), "rb") as fa:
                a = fa.read()
            with open(os.path.join(other, name), "rb") as fb:
                b = fb.read()
            assert a == b, name

    def test_unwritable_path_exits_two(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code = cli.main(["gen-scene", "--out", str(blocker / "sub")] + SMALL_SCENE_ARGS)
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_scene_round_trip(self, scene_dir):
        pmap, k, frames = cli.load_scene_dir(scene_dir)
        assert k.width == 64 and k.height == 64
        assert len(frames) == 3
        assert frames[0].image.shape == (64, 64, 3)
        assert len(pmap) > 500


class TestTrain:
    def test_zero_steps_checkpoint_equals_initialization(self, scene_dir, tmp_path):
        out = str(tmp_path / "stage.ckpt")
        assert train_ckpt(scene_dir, out, steps=0, seed=5) == 0
        loaded = PL.LocalizationModel.load(out)
        pmap, k, frames = cli.load_scene_dir(scene_dir)
        probe_depth = M.render_depth(pmap, frames[0].pose, k)
        fresh = PL.LocalizationModel.initialize(
            k, make_rng(5), probe_image=frames[0].image, probe_depth=probe_depth
        )
        assert sorted(loaded.params) == sorted(fresh.params)
        for name, p in fresh.params.items():
            assert np.array_equal(loaded.params[name].data, p.data), name
        with open(out + ".loss.csv") as f:
            assert f.read() == "step,loss\n"

    def test_missing_scene_exits_two(self, tmp_path, capsys):
        code = train_ckpt(str(tmp_path / "nope"), tmp_path / "x.ckpt")
        assert code == 2
        capsys.readouterr()

    def test_stage_presets(self):
        parser = cli.build_parser()
        args = parser.parse_args(["train", "--scene", "s", "--out", "o"])
        r = cli._stage_range(args)
        assert (r.max_translation, r.max_rotation) == (2.0, 10.0)
        args = parser.parse_args(["train", "--scene", "s", "--out", "o", "--stage", "3"])
        r = cli._stage_range(args)
        assert (r.max_translation, r.max_rotation) == (0.6, 2.0)
        args = parser.parse_args(
            ["train", "--scene", "s", "--out", "o", "--stage", "3", "--trans-range", "0.1"]
        )
        r = cli._stage_range(args)
        assert (r.max_translation, r.max_rotation) == (0.1, 2.0)

    def test_divergence_exits_three(self, scene_dir, tmp_path, capsys):
        out = str(tmp_path / "diverged.ckpt")
        with np.errstate(all="ignore"):
            code = train_ckpt(scene_dir, out, steps=4, extra=["--lr", "1e30"])
        assert code == 3
        assert not os.path.exists(out)
        capsys.readouterr()


class TestLocalize:
    def test_identity_checkpoint_keeps_initial_pose(self, scene_dir, identity_ckpt, tmp_path):
        out = str(tmp_path / "results.csv")
        code = cli.main([
            "localize", "--scene", scene_dir, "--checkpoints", identity_ckpt,
            "--out", out, "--seed", "3",
            "--perturb-trans", "0.1", "--perturb-rot", "3",
            "--range", "0.1:3",
        ])
        assert code == 0
        with open(out) as f:
            lines = f.read().strip().splitlines()
        assert len(lines) == 4  # header + one row per frame
        header = lines[0].split(",")
        i_t0 = header.index("trans_cm_0")
        i_t1 = header.index("trans_cm_1")
        for line in lines[1:]:
            cells = line.split(",")
            assert abs(float(cells[i_t0]) - float(cells[i_t1])) < 1e-6

    def test_overlays_two_per_frame(self, scene_dir, identity_ckpt, tmp_path):
        overlays = str(tmp_path / "overlays")
        code = cli.main([
            "localize", "--scene", scene_dir, "--checkpoints", identity_ckpt,
            "--out", str(tmp_path / "r.csv"), "--frames", "2",
            "--range", "0.1:3", "--overlay-dir", overlays,
        ])
        assert code == 0
        names = sorted(os.listdir(overlays))
        assert names == [
            "overlay_0000_final.ppm", "overlay_0000_initial.ppm",
            "overlay_0001_final.ppm", "overlay_0001_initial.ppm",
        ]

    def test_image_size_mismatch_exits_two(self, scene_dir, tmp_path, capsys):
        big_k = G.CameraIntrinsics(110.0, 110.0, 95.5, 63.5, 192, 128)
        model = PL.LocalizationModel.initialize(big_k, make_rng(4))
        ckpt = str(tmp_path / "big.ckpt")
        model.save(ckpt)
        code = cli.main([
            "localize", "--scene", scene_dir, "--checkpoints", ckpt,
            "--out", str(tmp_path / "r.csv"),
        ])
        assert code == 2
        assert "192x128" in capsys.readouterr().err

    def test_range_count_mismatch_exits_two(self, scene_dir, identity_ckpt, tmp_path, capsys):
        code = cli.main([
            "localize", "--scene", scene_dir, "--checkpoints", identity_ckpt,
            "--out", str(tmp_path / "r.csv"),
            "--range", "0.2:5", "--range", "0.1:2",
        ])
        assert code == 2
        capsys.readouterr()

    def test_jobs_flag_matches_serial_output(self, scene_dir, identity_ckpt, tmp_path):
        serial = str(tmp_path / "serial.csv")
        threaded = str(tmp_path / "threaded.csv")
        base = [
            "localize", "--scene", scene_dir, "--checkpoints", identity_ckpt,
            "--range", "0.1:3", "--seed", "9",
        ]
        assert cli.main(base + ["--out", serial]) == 0
        assert cli.main(base + ["--out", threaded, "--jobs", "2"]) == 0
        with open(serial) as fa, open(threaded) as fb:
            assert fa.read() == fb.read()


class TestEval:
    def write_results(self, path, errs):
        results = []
        for i, (t, r) in enumerate(errs):
            poses = [G.Pose7D.identity()] * len(t)
            results.append((i, PL.LocalizationResult(poses, list(t), list(r))))
        cli._write_text(str(path), cli.results_to_csv(results))
        return str(path)

    def test_single_run_has_zero_std(self, tmp_path, capsys):
        res = self.write_results(
            tmp_path / "r.csv", [([30.0, 10.0], [5.0, 1.0])]
        )
        out = str(tmp_path / "metrics.csv")
        assert cli.main(["eval", res, "--out", out]) == 0
        capsys.readouterr()
        with open(out) as f:
            lines = f.read().strip().splitlines()
        assert lines[0] == ",".join(PL.METRICS_COLUMNS)
        last = lines[-1].split(",")
        assert float(last[1]) == 10.0
        assert float(last[5]) == 0.0
        assert last[-1] == "1"

    def test_std_over_three_runs(self, tmp_path, capsys):
        paths = [
            self.write_results(tmp_path / ("run%d.csv" % i), [([v], [v / 10])])
            for i, v in enumerate((2.0, 4.0, 9.0))
        ]
        out = str(tmp_path / "metrics.csv")
        assert cli.main(["eval", *paths, "--runs", "3", "--out", out]) == 0
        capsys.readouterr()
        with open(out) as f:
            row = f.read().strip().splitlines()[1].split(",")
        assert abs(float(row[5]) - math.sqrt(13.0)) < 1e-6
        assert row[-1] == "3"

    def test_runs_count_mismatch_exits_two(self, tmp_path, capsys):
        res = self.write_results(tmp_path / "r.csv", [([1.0], [0.1])])
        assert cli.main(["eval", res, "--runs", "2"]) == 2
        capsys.readouterr()

    def test_inconsistent_files_exit_two(self, tmp_path, capsys):
        a = self.write_results(tmp_path / "a.csv", [([1.0, 2.0], [0.1, 0.2])])
        b = self.write_results(tmp_path / "b.csv", [([1.0], [0.1])])
        assert cli.main(["eval", a, b, "--out", str(tmp_path / "m.csv")]) == 2
        capsys.readouterr()

    def test_results_round_trip(self, tmp_path):
        path = self.write_results(
            tmp_path / "rt.csv", [([12.5, 3.25], [1.5, 0.25]), ([8.0, 2.0], [2.0, 0.5])]
        )
        run = cli.parse_results_csv(path)
        assert len(run) == 2
        assert run[0].translation_errors_cm == [12.5, 3.25]
        assert run[1].rotation_errors_deg == [2.0, 0.5]


class TestConfigFile:
    def test_config_supplies_defaults_flags_win(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed=9\ntrans-range=0.5  # stage width\n\nsteps=7\n")
        parser = cli.build_parser()
        argv = ["train", "--scene", "s", "--out", "o", "--steps", "3",
                "--config", str(cfg)]
        args = parser.parse_args(argv)
        cli.apply_config(args, argv)
        assert args.seed == 9
        assert args.trans_range == 0.5
        assert args.steps == 3  # explicit flag beats the file

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("warp-speed=9\n")
        parser = cli.build_parser()
        argv = ["train", "--scene", "s", "--out", "o", "--config", str(cfg)]
        args = parser.parse_args(argv)
        with pytest.raises(cli.CommandError):
            cli.apply_config(args, argv)

    def test_malformed_line_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("just some words\n")
        with pytest.raises(cli.CommandError):
            cli.read_config(str(cfg))


class TestOverlay:
    def test_depth_points_recolored(self):
        rgb = np.full((4, 4, 3), 0.5)
        depth = np.zeros((4, 4))
        depth[0, 0] = 1.0
        depth[3, 3] = 5.0
        out = cli.overlay_image(rgb, depth)
        assert np.allclose(out[1, 1], 0.5)  # untouched where no depth
        assert out[0, 0, 0] > out[0, 0, 2]  # near point leans red
        assert out[3, 3, 2] > out[3, 3, 0]  # far point leans blue

    def test_range_pair_parsing(self):
        assert cli._range_pair("0.6:2") == (0.6, 2.0)
        with pytest.raises(Exception):
            cli._range_pair("0.6")
