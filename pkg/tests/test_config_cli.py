import json

import pytest

from maxmargin import cli
from maxmargin.config import parse_config
from maxmargin.errors import ConfigError
from maxmargin.losses import LossKind
from maxmargin.training import Method

MINIMAL = """
seed: 3
dataset:
  kind: blobs
  n: 24
  centers: [[0.0, 0.0], [2.0, 0.0]]
  sigma: 0.2
architecture:
  hidden: [8]
training:
  epochs: 2
  batch_size: 8
models:
  - name: std
    method: std
evaluation:
  eps_grid: [0.1, 0.2]
  restarts: 2
  steps: 10
"""

TWO_MODEL = """
seed: 5
dataset:
  kind: blobs
  n: 30
  centers: [[0.0, 0.0], [2.5, 0.0]]
  sigma: 0.2
architecture:
  hidden: [8]
training:
  norm: l2
  epochs: 3
  batch_size: 10
  optimizer: {kind: adam, lr: 0.005}
  attack: {steps: 5}
models:
  - name: mma
    method: mma
    d_max: 0.8
  - name: std
    method: std
evaluation:
  eps_grid: [0.1, 0.3]
  restarts: 2
  steps: 10
"""


class TestParseConfig:
    def test_minimal_fills_defaults(self):
        cfg = parse_config(MINIMAL)
        assert cfg.seed == 3
        assert cfg.models[0].train.method is Method.STD
        assert cfg.models[0].train.attack.steps == 10
        assert cfg.evaluation.suite.specs[0].loss is LossKind.CE
        assert cfg.evaluation.suite.total_restarts == 2

    def test_eps_grid_must_increase(self):
        bad = MINIMAL.replace("[0.1, 0.2]", "[8, 4]")
        with pytest.raises(ConfigError) as exc:
            parse_config(bad)
        assert "eps_grid" in str(exc.value)

    def test_mma_without_dmax_names_key_path(self):
        bad = MINIMAL.replace("method: std", "method: mma")
        with pytest.raises(ConfigError) as exc:
            parse_config(bad)
        assert "models[0]" in str(exc.value)

    def test_unknown_key_rejected_with_path(self):
        bad = MINIMAL + "\nnot_a_key: 1\n"
        with pytest.raises(ConfigError) as exc:
            parse_config(bad)
        assert "not_a_key" in str(exc.value)

    def test_nested_unknown_key(self):
        bad = MINIMAL.replace("sigma: 0.2", "sigma: 0.2\n  blob_count: 3")
        with pytest.raises(ConfigError) as exc:
            parse_config(bad)
        assert "dataset.blob_count" in str(exc.value)

    def test_odd_restarts_rejected(self):
        bad = MINIMAL.replace("restarts: 2", "restarts: 3")
        with pytest.raises(ConfigError):
            parse_config(bad)

    def test_explicit_suite(self):
        text = MINIMAL + """
        """.strip()
        cfg = parse_config(MINIMAL.replace(
            "restarts: 2\n  steps: 10",
            "suite:\n    - {loss: cw, steps: 20, restarts: 3}",
        ))
        assert cfg.evaluation.suite.specs[0].loss is LossKind.CW
        assert cfg.evaluation.suite.total_restarts == 3


def _write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestCli:
    def test_evaluate_writes_reports_and_figures(self, tmp_path):
        cfg = _write(tmp_path, TWO_MODEL)
        out = tmp_path / "run1"
        rc = cli.main(["evaluate", "--config", str(cfg), "--out", str(out)])
        assert rc == 0
        assert (out / "eval_report.csv").exists()
        assert (out / "eval_report.json").exists()
        assert (out / "robust_accuracy.png").stat().st_size > 0
        assert (out / "attack_transcript.csv").exists()
        assert (out / "models" / "mma" / "checkpoint.bin").exists()
        assert (out / "models" / "mma" / "margin_trace.csv").exists()
        assert (out / "models" / "mma" / "margin_trace.png").stat().st_size > 0
        doc = json.loads((out / "eval_report.json").read_text())
        assert {d["model"] for d in doc} == {"mma", "std"}
        for d in doc:
            for comb, wb in zip(d["combined"], d["whitebox"]):
                assert comb <= wb + 1e-9

    def test_rerun_with_same_seed_is_byte_identical(self, tmp_path):
        cfg = _write(tmp_path, TWO_MODEL)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out_a)]) == 0
        assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out_b)]) == 0
        for rel in ("eval_report.csv", "attack_transcript.csv",
                    "models/mma/metrics.csv", "models/mma/epsilon_store.csv"):
            assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes(), rel

    def test_completed_run_refuses_overwrite(self, tmp_path, capsys):
        cfg = _write(tmp_path, MINIMAL)
        out = tmp_path / "run"
        assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out)]) == 0
        rc = cli.main(["evaluate", "--config", str(cfg), "--out", str(out)])
        assert rc != 0
        assert "completed" in capsys.readouterr().err

    def test_train_then_evaluate_loads_checkpoints(self, tmp_path):
        cfg = _write(tmp_path, MINIMAL)
        out = tmp_path / "run"
        assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        ckpt = out / "models" / "std" / "checkpoint.bin"
        stamp = ckpt.read_bytes()
        assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out)]) == 0
        assert ckpt.read_bytes() == stamp  # loaded, not retrained

    def test_margins_subcommand(self, tmp_path):
        cfg = _write(tmp_path, MINIMAL)
        out = tmp_path / "run"
        assert cli.main(["margins", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "models" / "std" / "margins.csv").exists()
        assert (out / "models" / "std" / "margins.png").stat().st_size > 0

    def test_outputs_stay_under_out_dir(self, tmp_path, monkeypatch):
        cfg = _write(tmp_path, MINIMAL)
        out = tmp_path / "nested" / "run"
        monkeypatch.chdir(tmp_path)
        assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out)]) == 0
        produced = {p for p in tmp_path.rglob("*") if p.is_file()}
        outside = [p for p in produced
                   if not (out in p.parents or p == cfg)]
        assert outside == []

    def test_theory_check_runs_six_checks(self, tmp_path, capsys):
        cfg = _write(tmp_path, MINIMAL + "\ntheory:\n  instances: 3\n  grid_n: 64\n  logit_samples: 50\n")
        rc = cli.main(["theory-check", "--config", str(cfg), "--seed", "1"])
        outlines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("[")]
        assert len(outlines) == 6
        assert rc in (0, 1)

    def test_seed_override_changes_run(self, tmp_path):
        cfg = _write(tmp_path, MINIMAL)
        a, b = tmp_path / "s1", tmp_path / "s2"
        assert cli.main(["evaluate", "--config", str(cfg), "--out", str(a), "--seed", "1"]) == 0
        assert cli.main(["evaluate", "--config", str(cfg), "--out", str(b), "--seed", "2"]) == 0
        assert (a / "models" / "std" / "checkpoint.bin").read_bytes() != \
               (b / "models" / "std" / "checkpoint.bin").read_bytes()

    def test_bad_config_reports_error(self, tmp_path, capsys):
        cfg = _write(tmp_path, MINIMAL + "\nbogus: true\n")
        rc = cli.main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "bogus" in capsys.readouterr().err

    def test_theory_check_seed_reproducible(self, tmp_path, capsys):
        cfg = _write(tmp_path, MINIMAL + "\ntheory:\n  instances: 2\n  grid_n: 32\n  logit_samples: 20\n")
        cli.main(["theory-check", "--config", str(cfg), "--seed", "4"])
        first = capsys.readouterr().out
        cli.main(["theory-check", "--config", str(cfg), "--seed", "4"])
        assert capsys.readouterr().out == first

    def test_data_dir_resolves_dataset_paths(self, tmp_path):
        import numpy as np

        from maxmargin import data as data_mod

        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(30, 4, 4)).astype(np.uint8)
        labels = (np.arange(30) % 2).astype(np.uint8)
        ddir = tmp_path / "cache"
        ddir.mkdir()
        data_mod.write_idx_images(ddir / "im.idx", images)
        data_mod.write_idx_labels(ddir / "lb.idx", labels)
        text = MINIMAL.replace(
            "kind: blobs\n  n: 24\n  centers: [[0.0, 0.0], [2.0, 0.0]]\n  sigma: 0.2",
            "kind: mnist_idx\n  images: im.idx\n  labels: lb.idx",
        ).replace("eps_grid: [0.1, 0.2]", "eps_grid: [0.05]")
        cfg = _write(tmp_path, text)
        out = tmp_path / "run"
        rc = cli.main(["train", "--config", str(cfg), "--out", str(out),
                       "--data-dir", str(ddir)])
        assert rc == 0
        assert (out / "models" / "std" / "checkpoint.bin").exists()
