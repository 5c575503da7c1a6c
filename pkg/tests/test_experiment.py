"""End-to-end orchestration: reductions, determinism, sweeps, CLI plumbing."""

import json
from dataclasses import replace

import numpy as np
import pytest

from fedovl.cli import main
from fedovl.data import (
    SyntheticConfig,
    generate_synthetic,
    make_split,
    split_unseen_eval,
    stream_order,
)
from fedovl.experiment import (
    DataFiles,
    ExperimentConfig,
    SplitConfig,
    StageError,
    infer_from_checkpoint,
    report_to_json,
    run_ablation_study,
    run_experiment,
    run_repeat,
    run_sweep,
    train_checkpoint,
)
from fedovl.metrics import METRIC_NAMES
from fedovl.training import TrainConfig


def small_config(**overrides):
    base = dict(
        synthetic=SyntheticConfig(dim=16, num_classes=12, shots_per_class=15),
        split=SplitConfig(num_clients=4, num_unseen=4, train_shots=5, val_shots=2),
        repeats=2,
        seed=7,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestReductionChain:
    def test_frozen_identity_run_equals_plain_zero_shot(self):
        # Identity-saturated gate + zero learning rate + both ablation flags
        # collapse the whole pipeline onto cosine-to-prompt classification.
        cfg = small_config(
            adapter_init="identity",
            train=TrainConfig(learning_rate=0.0, weight_decay=0.0),
            no_adaptive_aggregation=True,
            no_prototyping=True,
            repeats=1,
        )
        repeat = run_repeat(cfg, 0)

        # Independent evaluation on the same embeddings.
        seed = cfg.seed
        dataset, prompts = generate_synthetic(replace(cfg.synthetic, seed=seed))
        split = make_split(dataset.class_names, 4, 4, 5, 2, 0.2, seed)
        _, test_records = split_unseen_eval(dataset, split, seed)
        stream = stream_order(test_records, seed, salt=0)
        classes = sorted(split.unseen_classes)
        mat = np.stack([prompts[c] for c in classes])
        mat = mat / np.linalg.norm(mat, axis=1, keepdims=True)
        correct = sum(
            int(classes[np.argmax(mat @ (z / np.linalg.norm(z)))] == label)
            for z, label in stream
        )
        assert repeat["metrics"]["accuracy"] == pytest.approx(correct / len(stream), abs=0)

    def test_noiseless_data_is_solved_exactly(self):
        cfg = small_config(
            synthetic=SyntheticConfig(
                dim=16, num_classes=12, shots_per_class=15, image_noise=0.0, text_noise=0.0
            ),
            repeats=1,
        )
        for flags in [
            {},
            {"no_prototyping": True},
            {"no_adaptive_aggregation": True},
            {"no_prototyping": True, "no_adaptive_aggregation": True},
        ]:
            report = run_experiment(replace(cfg, **flags))
            assert report["summary"]["accuracy"]["mean"] == 1.0


class TestReportShape:
    def test_repeats_and_summary(self):
        report = run_experiment(small_config())
        assert report["kind"] == "run"
        assert len(report["repeats"]) == 2
        for name in METRIC_NAMES:
            assert set(report["summary"][name]) == {"mean", "std"}
        for r in report["repeats"]:
            assert set(r["aggregation"]["weights"]) == {"0", "1", "2", "3"}
            assert abs(sum(r["aggregation"]["weights"].values()) - 1.0) < 1e-12
            assert r["prototypes"]["samples_seen"] == r["num_test_samples"]

    def test_report_is_reproducible_bytewise(self):
        cfg = small_config()
        a = report_to_json(run_experiment(cfg))
        b = report_to_json(run_experiment(cfg))
        assert a == b

    def test_report_embeds_resolved_config(self):
        report = run_experiment(small_config())
        # Re-running the embedded config reproduces the report bytewise.
        cfg2 = ExperimentConfig.from_dict(report["config"])
        assert report_to_json(run_experiment(cfg2)) == report_to_json(report)
        assert report["config"]["train"]["learning_rate"] == 1e-5
        assert report["config"]["inference"]["tau"] == 0.01

    def test_config_dict_round_trip(self):
        cfg = small_config(alpha=0.4, no_prototyping=True)
        again = ExperimentConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_config_field_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"learning_rate": 1e-3})


class TestAblationCoherence:
    def test_inference_flags_leave_training_untouched(self):
        cfg = small_config(repeats=1)
        full = run_experiment(cfg)
        no_mp = run_experiment(replace(cfg, no_prototyping=True))
        no_aa = run_experiment(replace(cfg, no_adaptive_aggregation=True))
        base_traces = full["repeats"][0]["loss_traces"]
        assert no_mp["repeats"][0]["loss_traces"] == base_traces
        assert no_aa["repeats"][0]["loss_traces"] == base_traces
        # Prototyping ablation flips only the inference stage.
        assert no_mp["repeats"][0]["prototypes"] is None
        assert no_aa["repeats"][0]["aggregation"]["mode"] == "uniform"

    def test_ablation_study_bundle(self):
        report = run_ablation_study(small_config(repeats=1))
        assert set(report["variants"]) == {"full", "no_adaptive_aggregation", "no_prototyping"}


class TestSweeps:
    def test_shots_sweep_produces_one_report_per_value(self):
        report = run_sweep(small_config(repeats=1), "shots", [2, 4, 8])
        assert [p["value"] for p in report["points"]] == [2, 4, 8]
        for p in report["points"]:
            assert p["report"]["config"]["split"]["train_shots"] == p["value"]

    def test_clients_sweep_redistributes_same_seen_classes(self):
        report = run_sweep(small_config(repeats=1), "clients", [2, 4])
        test_class_sets = [
            p["report"]["repeats"][0]["test_classes"] for p in report["points"]
        ]
        assert test_class_sets[0] == test_class_sets[1]

    def test_unknown_axis_rejected(self):
        with pytest.raises(ValueError):
            run_sweep(small_config(), "temperature", [1])

    def test_alpha_search_runs_coarse_then_fine(self):
        report = run_sweep(small_config(repeats=1), "alpha")
        phases = {p["phase"] for p in report["points"]}
        assert phases == {"coarse", "fine"}
        coarse_values = [p["value"] for p in report["points"] if p["phase"] == "coarse"]
        assert coarse_values[0] == 0.0 and coarse_values[-1] == 2.0
        assert len(coarse_values) == 21
        best = report["best"]["value"]
        fine_values = [p["value"] for p in report["points"] if p["phase"] == "fine"]
        assert all(abs(v - round(v, 2)) < 1e-12 for v in fine_values)
        assert any(abs(v - best) <= 0.1 for v in fine_values)

    def test_epsilon_sweep_uses_explicit_values(self):
        report = run_sweep(small_config(repeats=1), "epsilon_fraction", [0.1, 0.3])
        fracs = [
            p["report"]["config"]["inference"]["epsilon_fraction"] for p in report["points"]
        ]
        assert fracs == [0.1, 0.3]


class TestStageErrors:
    def test_split_failure_is_tagged(self):
        cfg = small_config(split=SplitConfig(num_clients=10, num_unseen=4))
        with pytest.raises(StageError) as err:
            run_experiment(cfg)
        assert err.value.stage == "split"

    def test_data_failure_is_tagged(self, tmp_path):
        cfg = small_config(
            synthetic=None,
            files=DataFiles(images=str(tmp_path / "missing.fmeb"), prompts=str(tmp_path / "p.fmeb")),
        )
        with pytest.raises(StageError) as err:
            run_experiment(cfg)
        assert err.value.stage == "data"


class TestCheckpointWorkflow:
    def test_train_then_infer_matches_run(self):
        cfg = small_config(repeats=1)
        checkpoint = train_checkpoint(cfg)
        report = infer_from_checkpoint(checkpoint)
        direct = run_experiment(cfg)
        assert report["repeats"][0]["metrics"] == direct["repeats"][0]["metrics"]
        assert report["repeats"][0]["aggregation"] == direct["repeats"][0]["aggregation"]

    def test_infer_overrides_flip_ablations(self):
        cfg = small_config(repeats=1)
        checkpoint = train_checkpoint(cfg)
        uniform = infer_from_checkpoint(checkpoint, {"no_adaptive_aggregation": True})
        assert uniform["repeats"][0]["aggregation"]["mode"] == "uniform"

    def test_bad_checkpoint_rejected(self):
        with pytest.raises(ValueError):
            infer_from_checkpoint({"format": "something-else"})


class TestFileBackedRuns:
    def test_run_from_fmeb_files(self, tmp_path):
        from fedovl.data import prompts_as_dataset
        from fedovl.fmeb import write_fmeb

        dataset, prompts = generate_synthetic(
            SyntheticConfig(dim=16, num_classes=12, shots_per_class=15, seed=3)
        )
        write_fmeb(dataset, tmp_path / "img.fmeb")
        write_fmeb(prompts_as_dataset(prompts, 16), tmp_path / "txt.fmeb")
        cfg = small_config(
            synthetic=None,
            files=DataFiles(images=str(tmp_path / "img.fmeb"), prompts=str(tmp_path / "txt.fmeb")),
            repeats=2,
        )
        report = run_experiment(cfg)
        assert len(report["repeats"]) == 2
        assert 0.0 <= report["summary"]["accuracy"]["mean"] <= 1.0


class TestCli:
    def test_gen_run_report_pipeline(self, tmp_path, capsys):
        images = tmp_path / "img.fmeb"
        prompts = tmp_path / "txt.fmeb"
        assert main([
            "gen", "--dim", "16", "--classes", "12", "--shots", "15", "--seed", "3",
            "--out-images", str(images), "--out-prompts", str(prompts),
        ]) == 0
        config = {
            "files": {"images": str(images), "prompts": str(prompts)},
            "split": {"num_clients": 4, "num_unseen": 4, "train_shots": 5, "val_shots": 2},
            "repeats": 1,
            "seed": 1,
        }
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        out_path = tmp_path / "report.json"
        assert main(["run", "--config", str(cfg_path), "--out", str(out_path)]) == 0
        report = json.loads(out_path.read_text())
        assert report["kind"] == "run"

        fig_dir = tmp_path / "figs"
        assert main(["report", "--report", str(out_path), "--out-dir", str(fig_dir)]) == 0
        assert (fig_dir / "metrics.csv").exists()
        assert (fig_dir / "metrics.png").exists()

    def test_run_to_stdout_with_flags(self, tmp_path, capsys):
        config = {
            "synthetic": {"dim": 16, "num_classes": 12, "shots_per_class": 15},
            "split": {"num_clients": 4, "num_unseen": 4, "train_shots": 5, "val_shots": 2},
        }
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(config))
        code = main([
            "run", "--config", str(cfg_path), "--repeats", "1", "--seed", "2",
            "--no-prototyping", "--no-adaptive-agg", "--out", "-",
        ])
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["config"]["no_prototyping"] is True
        assert report["config"]["no_adaptive_aggregation"] is True
        assert report["config"]["seed"] == 2

    def test_train_and_infer_commands(self, tmp_path):
        config = {
            "synthetic": {"dim": 16, "num_classes": 12, "shots_per_class": 15},
            "split": {"num_clients": 4, "num_unseen": 4, "train_shots": 5, "val_shots": 2},
            "repeats": 1,
        }
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(config))
        ckpt = tmp_path / "ckpt.json"
        assert main(["train", "--config", str(cfg_path), "--out", str(ckpt)]) == 0
        out = tmp_path / "report.json"
        assert main(["infer", "--checkpoint", str(ckpt), "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["kind"] == "run"
        assert len(report["repeats"]) == 1

    def test_sweep_command(self, tmp_path):
        config = {
            "synthetic": {"dim": 16, "num_classes": 12, "shots_per_class": 15},
            "split": {"num_clients": 4, "num_unseen": 4, "train_shots": 5, "val_shots": 2},
            "repeats": 1,
        }
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(config))
        out = tmp_path / "sweep.json"
        assert main([
            "sweep", "--config", str(cfg_path), "--axis", "shots", "--values", "2,4",
            "--out", str(out),
        ]) == 0
        report = json.loads(out.read_text())
        assert [p["value"] for p in report["points"]] == [2, 4]
        fig_dir = tmp_path / "figs"
        assert main(["report", "--report", str(out), "--out-dir", str(fig_dir)]) == 0
        assert (fig_dir / "sweep.png").exists()
        assert (fig_dir / "metrics.csv").exists()

    def test_ablate_command_and_figures(self, tmp_path):
        config = {
            "synthetic": {"dim": 16, "num_classes": 12, "shots_per_class": 15},
            "split": {"num_clients": 4, "num_unseen": 4, "train_shots": 5, "val_shots": 2},
            "repeats": 1,
        }
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(config))
        out = tmp_path / "ablate.json"
        assert main(["ablate", "--config", str(cfg_path), "--out", str(out)]) == 0
        fig_dir = tmp_path / "figs"
        assert main(["report", "--report", str(out), "--out-dir", str(fig_dir)]) == 0
        assert (fig_dir / "ablation.png").exists()

    def test_failure_exit_codes(self, tmp_path):
        missing = tmp_path / "nope.json"
        assert main(["run", "--config", str(missing), "--out", "-"]) != 0
        bad_cfg = tmp_path / "bad.json"
        bad_cfg.write_text(json.dumps({"split": {"num_clients": 50, "num_unseen": 4}}))
        assert main(["run", "--config", str(bad_cfg), "--out", "-"]) == 2
