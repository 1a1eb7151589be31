import json
import subprocess
import sys

import numpy as np
import pytest

from slotrecon import cli
from slotrecon.data import load_dataset
from slotrecon.errors import NumericalError
from slotrecon.evaluation import discovery_metrics, localization_metrics
from slotrecon.metrics import MetricsReport, SlotPrediction, semantic_segmentation_eval
from slotrecon.training import TrainConfig, TrainState, load_checkpoint, load_training_data, parameter_bytes

from test_data import tree_hash

TINY = ["--batch-size", "4", "--slots", "3", "--slot-dim", "8", "--mlp-hidden", "16", "--print-every", "0"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_synth_small(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", tmp_path / "d", "--seed", 0, "--n", 10)
    assert code == 0
    assert json.loads(out)["n_samples"] == 10
    assert len(load_dataset(tmp_path / "d")) == 10


def test_synth_requires_out(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth"])
    assert exc.value.code == 2


def test_synth_reproducible(tmp_path, capsys):
    for name in "ab":
        run(capsys, "synth", "--out", tmp_path / name, "--n", 4, "--seed", 5)
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_synth_invalid_config(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--out", tmp_path / "d", "--objects", 4, 2)
    assert code == 2 and "object count" in err


def test_config_file_precedence(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"synth": {"n_samples": 3, "seed": 1, "noise_std": 0.0}}))
    code, out, _ = run(capsys, "synth", "--out", tmp_path / "d", "--config", tmp_path / "c.json", "--seed", 9)
    summary = json.loads(out)
    assert code == 0 and summary["n_samples"] == 3 and summary["seed"] == 9 and summary["noise_std"] == 0.0


def test_train_zero_steps_is_init(tiny_dataset, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--data", tiny_dataset, "--out", tmp_path / "ck", "--steps", 0, *TINY)
    assert code == 0
    state = load_checkpoint(tmp_path / "ck")
    assert state.step == 0
    fresh = TrainState.create(state.cfg, state.spec)
    assert parameter_bytes(state.model) == parameter_bytes(fresh.model)


def test_train_prints_default_peak_lr(tiny_dataset, tmp_path, capsys):
    _, out, _ = run(capsys, "train", "--data", tiny_dataset, "--out", tmp_path / "ck", "--steps", 0)
    header = json.loads(out.splitlines()[0])
    assert header["peak_lr"] == 0.0004
    assert '"peak_lr": 0.0004' in out


def test_resumed_log_is_continuous(tiny_dataset, tmp_path, capsys):
    run(capsys, "train", "--data", tiny_dataset, "--out", tmp_path / "a", "--steps", 3, *TINY)
    run(capsys, "train", "--data", tiny_dataset, "--out", tmp_path / "a", "--resume", tmp_path / "a", "--steps", 6,
        "--print-every", 0)
    run(capsys, "train", "--data", tiny_dataset, "--out", tmp_path / "b", "--steps", 6, *TINY, "--figures", tmp_path / "f")
    resumed = (tmp_path / "a" / "train_log.jsonl").read_text()
    straight = (tmp_path / "b" / "train_log.jsonl").read_text()
    assert [json.loads(line)["step"] for line in resumed.splitlines()] == list(range(1, 7))
    assert resumed == straight
    assert (tmp_path / "f" / "loss.png").stat().st_size > 0


def test_train_dataset_mismatch_fails_before_training(tiny_dataset, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", tiny_dataset, "--out", tmp_path / "ck", "--decoder", "transformer",
                       "--tf-heads", 5, *TINY)
    assert code == 2 and "heads" in err
    assert not (tmp_path / "ck" / "params.bin").exists()


def test_train_missing_dataset(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", tmp_path / "nope", "--out", tmp_path / "ck")
    assert code == 3 and "manifest" in err


def test_numerical_failure_exit_code(tiny_dataset, tmp_path, capsys, monkeypatch):
    def explode(*args, **kwargs):
        raise NumericalError("non-finite loss nan at step 0")

    monkeypatch.setattr("slotrecon.training.train", explode)
    code, _, err = run(capsys, "train", "--data", tiny_dataset, "--out", tmp_path / "ck", *TINY)
    assert code == 4 and "non-finite" in err


@pytest.fixture(scope="module")
def checkpoint(tiny_dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("ck")
    assert cli.main(["train", "--data", str(tiny_dataset), "--out", str(path), "--steps", "2", *TINY]) == 0
    return path


@pytest.mark.parametrize("task,keys", [("discovery", {"FG-ARI", "mBO_i", "mBO_c"}),
                                       ("localization", {"CorLoc", "DetRate"}),
                                       ("segmentation", {"mIoU", "pAcc"})])
def test_eval_tasks(tiny_dataset, checkpoint, tmp_path, capsys, task, keys):
    code, _, _ = run(capsys, "eval", "--checkpoint", checkpoint, "--data", tiny_dataset, "--task", task,
                     "--out", tmp_path / "r.json", "--restarts", 2, "--repeats", 2)
    assert code == 0
    report = MetricsReport.load(tmp_path / "r.json")
    assert set(report.metrics) == keys
    assert report.settings["checkpoint"] == str(checkpoint) and report.settings["mask_source"] == "mlp-alpha"
    if task == "localization":
        assert report.settings["threshold"] == 0.5


def test_eval_reports_are_reproducible(tiny_dataset, checkpoint, tmp_path, capsys):
    for name in "ab":
        run(capsys, "eval", "--checkpoint", checkpoint, "--data", tiny_dataset, "--out", tmp_path / f"{name}.json")
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_eval_figures(tiny_dataset, checkpoint, tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--checkpoint", checkpoint, "--data", tiny_dataset, "--figures", tmp_path / "fig")
    assert code == 0
    assert (tmp_path / "fig" / "discovery_masks.png").exists()
    assert len(list((tmp_path / "fig").glob("*_overlay.png"))) == 6


def test_eval_incompatible_mask_source(tiny_dataset, checkpoint, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", checkpoint, "--data", tiny_dataset,
                       "--mask-source", "decoder-attention")
    assert code == 2 and "mlp-alpha" in err


def test_eval_missing_checkpoint(tiny_dataset, tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--checkpoint", tmp_path, "--data", tiny_dataset)
    assert code == 3


def test_baseline_blocks(tiny_dataset, tmp_path, capsys):
    outs = []
    for name in "ab":
        code, out, _ = run(capsys, "baseline-blocks", "--data", tiny_dataset, "--masks", 11, "--out", tmp_path / f"{name}.json")
        assert code == 0
        outs.append((tmp_path / f"{name}.json").read_text())
    report = json.loads(outs[0])
    assert report["settings"]["columns"] == 3 and report["settings"]["tag"] == "baseline"
    assert outs[0] == outs[1]


def test_baseline_segmentation_and_figures(tiny_dataset, tmp_path, capsys):
    code, out, _ = run(capsys, "baseline-blocks", "--data", tiny_dataset, "--masks", 4, "--task", "segmentation",
                       "--restarts", 2, "--repeats", 1, "--figures", tmp_path / "fig")
    assert code == 0 and set(json.loads(out)) == {"task", "mIoU", "pAcc"}
    assert (tmp_path / "fig" / "blocks4_masks.png").exists()


def test_plot_commands(tiny_dataset, checkpoint, tmp_path, capsys):
    assert run(capsys, "plot", "--log", checkpoint / "train_log.jsonl", "--out", tmp_path / "loss.png")[0] == 0
    run(capsys, "baseline-blocks", "--data", tiny_dataset, "--masks", 6, "--out", tmp_path / "b.json")
    run(capsys, "eval", "--checkpoint", checkpoint, "--data", tiny_dataset, "--out", tmp_path / "m.json")
    code, _, _ = run(capsys, "plot", "--reports", f"blocks={tmp_path / 'b.json'}", f"model={tmp_path / 'm.json'}",
                     "--out", tmp_path / "cmp.png")
    assert code == 0 and (tmp_path / "cmp.png").stat().st_size > 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "slotrecon", "synth", "--out", str(tmp_path / "d"), "--n", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "slotrecon", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2


# pipeline-level checks on ground-truth fixtures


def test_discovery_on_ground_truth(tiny_dataset):
    samples = list(load_dataset(tiny_dataset, "eval"))
    metrics, _, excluded = discovery_metrics([s.instances for s in samples], samples)
    assert metrics == {"FG-ARI": 1.0, "mBO_i": 1.0, "mBO_c": 1.0}
    assert excluded == {"no_foreground": 0}


def test_localization_on_ground_truth(tiny_dataset):
    samples = list(load_dataset(tiny_dataset, "eval"))
    metrics, _, _ = localization_metrics([s.instances for s in samples], samples)
    assert metrics == {"CorLoc": 1.0, "DetRate": 1.0}


def test_segmentation_on_perfect_slots(tiny_dataset):
    ds = load_dataset(tiny_dataset)
    n_classes = len(ds.manifest.classes)
    protos = np.eye(n_classes)
    preds, maps = [], []
    for s in ds:
        cmap = s.class_map()
        ids = np.unique(cmap)
        preds.append(SlotPrediction(cmap, protos[ids], ids))
        maps.append(cmap)
    report = semantic_segmentation_eval(preds, maps, n_classes, n_classes, restarts=5)
    assert report.metrics["mIoU"] == 1.0 and report.metrics["pAcc"] == 1.0


def test_stored_features_drive_pooling(tiny_dataset):
    cfg = TrainConfig(grid_code_scale=0.5)
    _, arrays = load_training_data(cfg, load_dataset(tiny_dataset, "eval"))
    assert not np.array_equal(arrays.features, arrays.stored)
    np.testing.assert_array_equal(arrays.features, arrays.targets)
