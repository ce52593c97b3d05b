import json
import time
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from esbn import cli, container, harness
from esbn.config import config_from_dict, smoke_config
from esbn.metrics import localization_error
from esbn.network import load_checkpoint
from esbn.simulator import GaussianSourceConfig, read_batch, synthesize_batch
from esbn.source_space import import_leadfield


def tiny_dict(out, **over):
    d = {
        "seed": 7,
        "output_dir": str(out),
        "source_space": {"radius_mm": 20.0, "spacing_mm": 10.0},
        "sensors": {"count": 16},
        "simulation": {"train": {"n_frames": 120}, "test": {"n_frames": 60},
                       "unlabeled": {"n_frames": 60}},
        "esbn": {"hidden": 16, "features": 16, "n_basis": 16, "epochs": 2, "batch_size": 32,
                 "finetune_epochs": 1, "finetune_batch_size": 32},
        "sweeps": {"n_frames": 30, "snr_list": [5, 10, 20]},
        "solvers": {"eloreta_max_iter": 50},
    }
    for k, v in over.items():
        d[k] = {**d.get(k, {}), **v} if isinstance(v, dict) else v
    return d


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = config_from_dict(tiny_dict(out))
    sim = harness.cmd_simulate(cfg)
    train = harness.cmd_train(cfg)
    return cfg, out, sim, train


def all_files(root):
    return sorted(p for p in Path(root).rglob("*") if p.is_file())


class TestSimulate:
    def test_files_readable(self, run_dir):
        cfg, out, sim, _ = run_dir
        setup = harness.build_setup(cfg)
        for split, n in (("train", 120), ("test", 60), ("unlabeled", 60)):
            b = read_batch(out / "data" / f"{split}.esiw")
            assert b.n_frames == n and b.j_true.shape[1] == setup.space.n_sources
        lf = import_leadfield(out / "data" / "leadfield.esiw")
        assert lf.gain_free.shape == (16, 3 * setup.space.n_sources)

    def test_imported_leadfield_reproduces_setup(self, run_dir):
        cfg, out, _, _ = run_dir
        d = tiny_dict(out, sensors={"count": 16, "leadfield_path": str(out / "data" / "leadfield.esiw")})
        imported = harness.build_setup(config_from_dict(d))
        native = harness.build_setup(cfg)
        np.testing.assert_array_equal(imported.lf.gain_fixed, native.lf.gain_fixed)
        np.testing.assert_array_equal(imported.space.orientations, native.space.orientations)

    def test_sidecar_records_snr(self, run_dir):
        _, out, sim, _ = run_dir
        meta = json.loads((out / "data" / "train.meta.json").read_text())
        assert meta["target_snr_db"] == 5.0
        assert meta["max_snr_error_db"] <= 0.1
        assert {"config_hash", "seed", "tool_version"} <= set(meta)

    def test_reproducible(self, run_dir, tmp_path):
        cfg, out, _, _ = run_dir
        other = cfg.replace(output_dir=str(tmp_path))
        harness.cmd_simulate(other)
        for name in ("train.esiw", "test.esiw", "train.meta.json", "leadfield.esiw"):
            assert (tmp_path / "data" / name).read_bytes() == (out / "data" / name).read_bytes()


class TestTrain:
    def test_trace_csv_matches(self, run_dir):
        _, out, _, train = run_dir
        assert harness.read_trace_csv(out / "model" / "loss_trace.csv") == train["loss_trace"]
        _, meta = load_checkpoint(out / "model" / "esbn.esiw")
        assert meta["loss_trace"] == train["loss_trace"]
        assert len(train["loss_trace"]) == 2

    def test_finetune_outputs(self, run_dir):
        _, out, _, train = run_dir
        assert (out / "model" / "esbn_finetuned.esiw").exists()
        assert len(train["finetune_trace"]) == 1

    def test_resume_reproduces(self, run_dir, tmp_path):
        cfg, out, _, train = run_dir
        import shutil
        shutil.copytree(out / "data", tmp_path / "data")
        one = config_from_dict(tiny_dict(tmp_path, esbn={**tiny_dict(tmp_path)["esbn"], "epochs": 1}))
        harness.cmd_train(one.replace(esbn=one.esbn.__class__(**{**one.esbn.__dict__, "finetune": False})))
        resumed = harness.cmd_train(cfg.replace(output_dir=str(tmp_path)), resume=True)
        assert resumed["loss_trace"] == train["loss_trace"]
        assert ((tmp_path / "model" / "esbn.esiw").read_bytes()
                == (out / "model" / "esbn.esiw").read_bytes())


class TestEval:
    def test_table_shape(self, run_dir):
        cfg, out, _, _ = run_dir
        res = harness.cmd_eval(cfg)
        lines = [l for l in Path(res["csv"]).read_text().splitlines() if not l.startswith("#")]
        assert lines[0] == "method,LE,SD,AUC,n"
        names = [l.split(",")[0] for l in lines[1:]]
        assert names == ["ESBN Supervised", "ESBN Unsupervised", "MNE", "dSPM", "sLORETA", "eLORETA"]
        for l in lines[1:]:
            assert all("(" in cell for cell in l.split(",")[1:4])

    def test_rerun_identical(self, run_dir):
        cfg, out, _, _ = run_dir
        a = Path(harness.cmd_eval(cfg)["csv"]).read_bytes()
        b = Path(harness.cmd_eval(cfg)["csv"]).read_bytes()
        assert a == b

    def test_numerical_only_needs_no_checkpoint(self, run_dir, tmp_path):
        import shutil
        cfg, out, _, _ = run_dir
        shutil.copytree(out / "data", tmp_path / "data")
        res = harness.cmd_eval(cfg.replace(output_dir=str(tmp_path)), methods=["MNE", "sLORETA"])
        assert list(res["report"].rows) == ["MNE", "sLORETA"]

    def test_missing_checkpoint(self, run_dir, tmp_path):
        import shutil
        from esbn.errors import DataError
        cfg, out, _, _ = run_dir
        shutil.copytree(out / "data", tmp_path / "data")
        with pytest.raises(DataError, match="checkpoint"):
            harness.cmd_eval(cfg.replace(output_dir=str(tmp_path)))


class TestSweep:
    def test_depth_partition(self, run_dir):
        cfg, out, _, _ = run_dir
        res = harness.cmd_sweep(cfg, "depth")
        assert sum(res["bin_sizes"].values()) == 60
        assert list(res["bin_sizes"]) == ["deep (tercile 1)", "middle (tercile 2)", "shallow (tercile 3)"]
        setup = harness.build_setup(cfg)
        test = harness.load_split(cfg, "test", setup)
        _, parts = harness.depth_bins(setup.lf, test, 3)
        joined = np.sort(np.concatenate(parts))
        np.testing.assert_array_equal(joined, np.arange(60))

    def test_snr_axis_and_svg(self, run_dir):
        cfg, out, _, _ = run_dir
        res = harness.cmd_sweep(cfg, "snr")
        assert list(res["tables"]) == ["snr=5", "snr=10", "snr=20"]
        for metric in ("LE", "AUC"):
            root = ET.parse(out / "sweep" / f"snr_{metric}.svg").getroot()
            text = " ".join(t.text or "" for t in root.iter() if t.tag.endswith("text"))
            for method in harness.default_methods(cfg):
                assert method in text
        data = json.loads((out / "sweep" / "snr.json").read_text())
        assert data["provenance"]["seed"] == 7

    @pytest.mark.parametrize("axis", ["snr", "loose"])
    def test_points_share_sources(self, run_dir, monkeypatch, axis):
        cfg, _, _, _ = run_dir
        batches = []

        def capture(*args, **kwargs):
            batches.append(synthesize_batch(*args, **kwargs))
            return batches[-1]

        monkeypatch.setattr(harness, "synthesize_batch", capture)
        res = harness.cmd_sweep(cfg, axis, methods=["MNE"])
        assert len(batches) == len(res["tables"]) >= 2
        for b in batches[1:]:
            np.testing.assert_array_equal(b.j_true, batches[0].j_true)
            assert not np.array_equal(b.phi, batches[0].phi)

    def test_empty_axis(self, run_dir):
        from esbn.errors import ConfigurationError
        cfg, _, _, _ = run_dir
        bad = config_from_dict(tiny_dict(cfg.output_dir, sweeps={"loose_list": []}))
        with pytest.raises(ConfigurationError):
            harness.cmd_sweep(bad, "loose")


class TestLocalize:
    def test_sloreta_round_trip(self, run_dir, tmp_path):
        cfg, out, _, _ = run_dir
        setup = harness.build_setup(cfg)
        gcfg = GaussianSourceConfig(n_centers_range=(1, 1), loose=0.0,
                                    snr_channel_db=np.inf, snr_source_db=np.inf, seed=3)
        b = synthesize_batch(gcfg, setup.space, setup.lf, 20)
        frames = tmp_path / "frames.esiw"
        container.write_matrix(frames, b.phi)
        cfg2 = cfg.replace(output_dir=str(tmp_path / "o"))
        cfg2 = cfg2.replace(solvers=cfg2.solvers.__class__(
            **{**cfg2.solvers.__dict__, "lambda2": 1e-6 * float(np.trace(setup.lf.gain_fixed @ setup.lf.gain_fixed.T)) / 16}))
        res = harness.cmd_localize(cfg2, out / "data" / "leadfield.esiw", frames, method="sLORETA")
        _, est, meta = container.read_matrix(res["path"])
        assert est.shape == (20, setup.space.n_sources)
        assert meta["method"] == "sLORETA"
        le = [localization_error(c, e, setup.space) for c, e in zip(b.centers, est)]
        assert max(le) <= cfg.source_space.spacing_mm

    def test_checkpoint_localize(self, run_dir):
        cfg, out, _, _ = run_dir
        res = harness.cmd_localize(cfg, out / "data" / "leadfield.esiw", out / "data" / "test.esiw",
                                   checkpoint=out / "model" / "esbn.esiw", out_name="esbn.esiw")
        assert res["shape"][0] == 60

    def test_mismatched_channels(self, run_dir, tmp_path):
        from esbn.errors import DimensionError
        cfg, out, _, _ = run_dir
        container.write_matrix(tmp_path / "f.esiw", np.zeros((2, 15)))
        with pytest.raises(DimensionError, match=r"M=16.*M=15"):
            harness.cmd_localize(cfg, out / "data" / "leadfield.esiw", tmp_path / "f.esiw", method="MNE")


class TestCli:
    def test_exit_codes(self, tmp_path, capsys, run_dir):
        _, out, _, _ = run_dir
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps(tiny_dict(tmp_path / "o", simulation={"train": {"loose": 1.5}})))
        assert cli.main(["simulate", "--config", str(cfg_path), "--quiet"]) == 2
        assert "simulation.train.loose" in capsys.readouterr().err
        assert cli.main(["bogus"]) == 2
        good = tmp_path / "good.json"
        good.write_text(json.dumps(tiny_dict(tmp_path / "empty")))
        assert cli.main(["eval", "--config", str(good), "--quiet"]) == 3
        (tmp_path / "lf.esiw").write_bytes(b"ESIW\x01\x00\x01\x05")
        assert cli.main(["--config", str(good), "localize", "--leadfield", str(tmp_path / "lf.esiw"),
                         "--frames", str(out / "data" / "test.esiw"), "--method", "MNE", "--quiet"]) == 3

    def test_numeric_exit_code(self, tmp_path, monkeypatch):
        from esbn.errors import TrainingDivergedError

        def boom(cfg, resume=False):
            raise TrainingDivergedError("loss became nan")

        monkeypatch.setattr(harness, "cmd_train", boom)
        good = tmp_path / "good.json"
        good.write_text(json.dumps(tiny_dict(tmp_path / "o")))
        assert cli.main(["train", "--config", str(good), "--quiet"]) == 4

    def test_global_flags_either_side(self):
        p = cli.build_parser()
        a = p.parse_args(["--seed", "5", "--out", "x", "sweep", "snr"])
        b = p.parse_args(["sweep", "snr", "--seed", "5", "--out", "x"])
        assert (a.seed, a.out, a.axis) == (b.seed, b.out, b.axis) == (5, "x", "snr")
        cfg = cli.resolve_config(b)
        assert cfg.seed == 5 and cfg.output_dir == "x"

    def test_threads_fallback(self):
        p = cli.build_parser()
        assert cli.resolve_threads(p.parse_args(["simulate"]), {"ESIW_THREADS": "3"}) == 3
        assert cli.resolve_threads(p.parse_args(["simulate", "--threads", "2"]), {"ESIW_THREADS": "3"}) == 2
        assert cli.resolve_threads(p.parse_args(["simulate"]), {}) == 1
        from esbn.errors import ConfigurationError
        with pytest.raises(ConfigurationError):
            cli.resolve_threads(p.parse_args(["simulate"]), {"ESIW_THREADS": "zero"})

    def test_smoke_profile_under_a_minute(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg_path = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"
        start = time.perf_counter()
        assert cli.main(["--config", str(cfg_path), "--out", "smoke", "--quiet", "simulate"]) == 0
        assert cli.main(["--config", str(cfg_path), "--out", "smoke", "--quiet", "train"]) == 0
        assert time.perf_counter() - start < 60
        assert cli.main(["--config", str(cfg_path), "--out", "smoke", "--quiet", "eval"]) == 0
        # nothing written outside the output directory
        assert [p.name for p in tmp_path.iterdir()] == ["smoke"]
        assert smoke_config().simulation.train.n_frames == 500
