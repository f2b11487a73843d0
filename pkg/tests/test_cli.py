"""End-to-end command-line checks on temp directories."""

import json

import numpy as np
import pytest

from clickseg.cli import dispatch
from clickseg.config import Config


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = Config.load(None, ["zoom.threshold=0.6", "train.batch_size=2"])
        assert cfg["zoom.threshold"] == 0.6
        assert cfg["train.batch_size"] == 2

    def test_file_sections(self, tmp_path):
        path = tmp_path / "conf.ini"
        path.write_text("[zoom]\nthreshold = 0.7\ntarget_h = 64\n\n[eval]\ntau = 0.9\n")
        cfg = Config.load(path)
        assert cfg["zoom.threshold"] == 0.7
        assert cfg["zoom.target_h"] == 64
        assert cfg.eval().tau == 0.9

    def test_cli_override_beats_file(self, tmp_path):
        path = tmp_path / "conf.ini"
        path.write_text("[zoom]\nthreshold = 0.7\n")
        cfg = Config.load(path, ["zoom.threshold=0.2"])
        assert cfg["zoom.threshold"] == 0.2

    def test_unknown_key_rejected(self):
        with pytest.raises(KeyError):
            Config.load(None, ["zoom.bogus=1"])

    def test_typed_views(self):
        cfg = Config.load(None, ["zoom.target_h=48", "zoom.target_w=72"])
        cc = cfg.cascade()
        assert (cc.target_h, cc.target_w) == (48, 72)
        assert cfg.train(seed=3).seed == 3
        assert cfg.scene().height == 96


class TestDispatch:
    def test_gen_data_writes_manifest(self, tmp_path):
        out = tmp_path / "ds"
        assert dispatch(["gen-data", "--n-train", "3", "--n-eval", "2",
                         "--out", str(out), "--seed", "1"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["entries"]) == 5

    def test_train_eval_round_trip(self, tmp_path):
        out = tmp_path / "run"
        rc = dispatch([
            "train", "--ablation", "baseline", "--n-scenes", "4",
            "--seed", "0", "--out", str(out),
            "--set", "train.epochs_coarse=1", "--set", "train.batch_size=4",
            "--set", "train.max_sim_clicks=2",
            "--set", "data.height=64", "--set", "data.width=96",
        ])
        assert rc == 0
        assert (out / "model.ckpt").exists()
        assert (out / "model.ckpt.json").exists()
        assert (out / "train_log.jsonl").read_text().strip()

        rc = dispatch([
            "eval", "--checkpoint", str(out / "model.ckpt"),
            "--n-scenes", "2", "--out", str(out), "--seed", "0",
            "--set", "eval.max_clicks=2",
            "--set", "data.height=64", "--set", "data.width=96",
        ])
        assert rc == 0
        summary = json.loads((out / "summary.json").read_text())
        assert np.isfinite(summary["noc"])
        assert (out / "records.csv").exists()
        assert (out / "miou_curve.tsv").exists()

    def test_eval_missing_checkpoint_is_domain_error(self, tmp_path):
        rc = dispatch(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                       "--out", str(tmp_path)])
        assert rc == 1

    def test_usage_error_exits_two(self):
        with pytest.raises(SystemExit) as excinfo:
            dispatch(["train", "--no-such-flag"])
        assert excinfo.value.code == 2

    def test_unknown_command_exits_two(self):
        with pytest.raises(SystemExit) as excinfo:
            dispatch(["frobnicate"])
        assert excinfo.value.code == 2

    def test_gradcheck_command(self, capsys):
        rc = dispatch(["gradcheck", "--ops", "add,relu,conv2d",
                       "--instances", "2"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.count(" ok") == 3

    def test_ablate_emits_components_table(self, tmp_path):
        out = tmp_path / "ab"
        rc = dispatch([
            "ablate", "--grid", "components", "--n-train", "3", "--n-eval", "1",
            "--n-seeds", "1", "--out", str(out), "--seed", "0",
            "--set", "train.epochs_coarse=1", "--set", "train.epochs_fine=1",
            "--set", "train.batch_size=4", "--set", "train.max_sim_clicks=2",
            "--set", "eval.max_clicks=2",
            "--set", "data.height=64", "--set", "data.width=96",
        ])
        assert rc == 0
        table = (out / "ablation_components.csv").read_text()
        for variant in ("baseline", "fpm", "iaf", "full"):
            assert variant in table

    def test_bench_graph_small(self, tmp_path):
        out = tmp_path / "bench"
        rc = dispatch([
            "bench-graph", "--out", str(out), "--seed", "0",
            "--set", "bench.sizes=128,256", "--set", "bench.runs=2",
            "--set", "bench.dense_limit=256", "--set", "bench.c=8",
        ])
        assert rc == 0
        assert (out / "bench_graph.csv").exists()
        payload = json.loads((out / "bench_graph.json").read_text())
        assert len(payload["points"]) == 2

    def test_bench_spc_with_fresh_model(self, tmp_path):
        out = tmp_path / "spc"
        rc = dispatch([
            "bench-spc", "--n-scenes", "1", "--out", str(out), "--seed", "0",
            "--set", "eval.max_clicks=1",
            "--set", "data.height=64", "--set", "data.width=96",
        ])
        assert rc == 0
        stats = json.loads((out / "spc.json").read_text())
        assert stats["median_s"] > 0

    def test_seed_fixes_all_outputs(self, tmp_path):
        args = ["gen-data", "--n-train", "2", "--n-eval", "1", "--seed", "9"]
        dispatch(args + ["--out", str(tmp_path / "a")])
        dispatch(args + ["--out", str(tmp_path / "b")])
        a = (tmp_path / "a" / "manifest.json").read_bytes()
        b = (tmp_path / "b" / "manifest.json").read_bytes()
        assert a == b
