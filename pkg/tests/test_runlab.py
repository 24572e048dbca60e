import json

import pytest

from skiplab.fusion import FusionConfig
from skiplab.glyphs import DatasetSpec
from skiplab.probe import ProbeConfig
from skiplab.runlab import cli
from skiplab.runlab.emit import read_jsonl, svg_data
from skiplab.runlab.runner import (OUT_ENV, ConfigError, ExperimentSpec, MetricRecord,
                                   MetricStream, grid_cells, run_ablation_grid, run_grad_dynamics,
                                   run_lr_sweep, run_probe, run_theory, run_training)


def tiny(tmp_path, **kw):
    base = dict(fusion=FusionConfig(total_blocks=2, stride=1, hidden_dim=8),
                dataset=DatasetSpec(count=16), steps=6, batch_size=4, window=3, ma_horizon=3,
                consecutive=1, out_dir=str(tmp_path / "runs"))
    base.update(kw)
    return ExperimentSpec(**base)


class TestSpec:
    def test_json_roundtrip(self, tmp_path):
        spec = tiny(tmp_path, seeds=(1, 2), probe=ProbeConfig(steps=3))
        again = ExperimentSpec.from_json(spec.to_json())
        assert again == spec and again.to_json() == spec.to_json()

    def test_errors(self):
        with pytest.raises(ConfigError, match="unknown"):
            ExperimentSpec.from_dict({"nope": 1})
        with pytest.raises(ConfigError):
            ExperimentSpec(lr=0.0)
        with pytest.raises(ConfigError):
            ExperimentSpec(seeds=())
        with pytest.raises(ConfigError, match="FusionConfig"):
            ExperimentSpec(fusion={"stride": 1, "detach_count": 9})
        with pytest.raises(ConfigError, match="JSON"):
            ExperimentSpec.from_json("{")

    def test_out_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUT_ENV, str(tmp_path))
        assert ExperimentSpec(out_dir="x").out_path("a") == tmp_path / "x" / "a"
        monkeypatch.delenv(OUT_ENV)
        assert str(ExperimentSpec(out_dir="x").out_path("a")) == "x/a"


def test_metric_stream_steps_increase():
    s = MetricStream()
    s.append(MetricRecord("t", "a", 0, {}))
    s.append(MetricRecord("t", "b", 0, {}))
    with pytest.raises(ValueError):
        s.append(MetricRecord("t", "a", 0, {}))


class TestTraining:
    def test_zero_steps(self, tmp_path):
        assert run_training(tiny(tmp_path, steps=0)) == []
        assert (tmp_path / "runs" / "train" / "metrics.jsonl").read_text() == ""

    def test_deterministic_bytes(self, tmp_path):
        a = tiny(tmp_path / "a", seeds=(0, 1))
        b = tiny(tmp_path / "b", seeds=(0, 1))
        run_training(a)
        run_training(b)
        pa, pb = a.out_path("train", "metrics.jsonl"), b.out_path("train", "metrics.jsonl")
        assert pa.read_bytes() == pb.read_bytes()
        assert len(read_jsonl(pa)) == 12
        meta = json.loads(a.out_path("train", "metrics.meta.json").read_text())
        assert "started" in meta and "started" not in pa.read_text()

    def test_step0_loss_same_for_any_D(self, tmp_path):
        r0 = run_training(tiny(tmp_path), write=False)
        spec = tiny(tmp_path)
        r2 = run_training(spec.replace(fusion=spec.fusion.replace(detach_count=2)), write=False)
        assert r0[0]["loss"] == r2[0]["loss"]
        assert r0[-1]["loss"] != r2[-1]["loss"]

    def test_patch_cell_mismatch(self, tmp_path):
        with pytest.raises(ConfigError, match="cell"):
            run_training(tiny(tmp_path, dataset=DatasetSpec(count=8, cell=4)))


class TestDynamics:
    def test_outputs(self, tmp_path):
        spec = tiny(tmp_path, suite="dynamics")
        res = run_grad_dynamics(spec)[0]
        assert len(res["records"]) == 6 and len(res["ratio"]) == 6
        assert res["records"][1]["delta"] is None and res["records"][2]["delta"] is not None
        out = spec.out_path("dynamics")
        doc = (out / "dynamics-S1-D0-seed0.svg").read_text()
        assert doc.count('class="panel"') == 4
        assert len(svg_data(doc)["panels"]) == 4
        assert read_jsonl(out / "summary.jsonl")[0]["early_assumptions"]["c_hat"] is not None

    def test_zero_skip_scale(self, tmp_path):
        spec = tiny(tmp_path, suite="dynamics",
                    fusion=FusionConfig(total_blocks=2, stride=1, hidden_dim=8, skip_scale=0.0))
        res = run_grad_dynamics(spec, write=False)[0]
        for r in res["records"]:
            assert r["norm_skip"] <= 1e-20 * max(r["norm_full"], 1.0)
            assert r["delta"] is None or r["delta"] < 1e-6

    def test_needs_taps(self, tmp_path):
        with pytest.raises(ConfigError):
            run_grad_dynamics(tiny(tmp_path, fusion=FusionConfig(total_blocks=2, stride=3,
                                                                 hidden_dim=8)))


class TestGrid:
    def test_cells(self):
        valid, skipped = grid_cells(4, [1, 2, 5], [0, 3])
        assert valid == [(1, 0), (1, 3), (2, 0)]
        assert {(r["S"], r["D"]) for r in skipped} == {(2, 3), (5, 0), (5, 3)}

    def test_baseline_only(self, tmp_path):
        spec = tiny(tmp_path, suite="ablate", steps=3)
        rep = run_ablation_grid(spec, [2], [0])
        assert len(rep["cells"]) == 1 and rep["cells"][0]["delta_vs_baseline"] == 0.0
        assert "eval_loss" in rep["nofusion"]
        assert (spec.out_path("ablate") / "grid.svg").exists()

    def test_no_valid_cells(self, tmp_path):
        with pytest.raises(ConfigError):
            run_ablation_grid(tiny(tmp_path), [5], [0])


class TestSweepProbeTheory:
    def test_single_lr_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            run_lr_sweep(tiny(tmp_path), [1e-3])

    def test_lr_sweep_csv(self, tmp_path):
        spec = tiny(tmp_path, suite="lrsweep", seeds=(0,))
        rows = run_lr_sweep(spec, [1e-3, 3e-3])
        lines = spec.out_path("lrsweep", "lr_sweep.csv").read_text().splitlines()
        assert len(lines) == len(rows) + 1 == 3
        for row, line in zip(rows, lines[1:]):
            assert (row["t_trans"] is None) == (line.split(",")[2] == "/")

    def test_probe_suite(self, tmp_path):
        spec = tiny(tmp_path, suite="probe", dataset=DatasetSpec(count=8),
                    probe=ProbeConfig(steps=3, batch_size=4))
        rep = run_probe(spec, adapters=["identity", 1], n_export=2)
        assert [len(a["rows"]) for a in rep["ablation"]] == [4]
        assert [r["adapter"] for r in rep["sensitivity"][0]["rows"]] == ["identity", "rank1"]
        out = spec.out_path("probe")
        assert len(read_jsonl(out / "probe_losses.jsonl")) == 6 * 3
        assert len(list((out / "recon").glob("*.pgm"))) == 4

    def test_theory_records(self, tmp_path):
        recs = run_theory(tiny(tmp_path, suite="theory"), n_models=2, n_quadratics=3)
        for r in recs:
            assert {"check", "params", "target", "estimate", "stderr", "pass"} <= set(r)


class TestCli:
    def test_train_and_plot(self, tmp_path, capsys):
        out = tmp_path / "o"
        rc = cli.main(["dynamics", "--out", str(out), "--steps", "5", "--blocks", "2",
                       "--hidden-dim", "8", "--set", "dataset.count=8", "--set", "window=2",
                       "--set", "batch_size=4"])
        assert rc == 0
        jsonl = out / "dynamics" / "dynamics-S1-D0-seed0.jsonl"
        assert cli.main(["plot", str(jsonl), "--svg", str(tmp_path / "p.svg"),
                         "--horizon", "2"]) == 0
        assert (tmp_path / "p.svg").exists()

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"steps": 2, "batch_size": 4, "dataset": {"count": 8},
                                   "fusion": {"total_blocks": 2, "hidden_dim": 8}}))
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        assert len(read_jsonl(tmp_path / "o" / "train" / "metrics.jsonl")) == 2

    @pytest.mark.parametrize("argv", [
        ["lrsweep", "--lrs", "1e-3"],
        ["train", "--set", "nope=1"],
        ["train", "--config", "/nonexistent.json"],
        ["train", "--detach", "9"],
        ["bogus"],
    ])
    def test_config_errors(self, argv, tmp_path):
        assert cli.main(argv + ["--out", str(tmp_path)] if argv != ["bogus"] else argv) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, tmp_path):
        rc = cli.main(["train", "--out", str(tmp_path), "--steps", "3", "--blocks", "2",
                       "--hidden-dim", "8", "--skip-scale", "1e308",
                       "--set", "dataset.count=8", "--set", "batch_size=4"])
        assert rc == 3
        recs = read_jsonl(tmp_path / "train" / "metrics.jsonl")
        assert "message" in recs[-1]

    def test_io_error(self, tmp_path):
        blocker = tmp_path / "f"
        blocker.write_text("")
        rc = cli.main(["train", "--out", str(blocker / "x"), "--steps", "1", "--blocks", "2",
                       "--hidden-dim", "8", "--set", "dataset.count=4", "--set", "batch_size=4"])
        assert rc == 4
