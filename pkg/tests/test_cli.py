import json

import numpy as np
import pytest

from reco_kd.cli import main
from reco_kd.config import (
    CONFIG_SCHEMA,
    apply_overrides,
    load_config,
    validate_config,
)
from reco_kd.errors import ConfigError


def synth_data_args(cases=3):
    return [
        "--override", f"data.num_cases={cases}",
        "--override", "data.shape=[8,8,8]",
        "--override", 'data.class_specs=[{"target_fraction": 0.1}]',
    ]


def quick_train_args(epochs=1):
    return [
        "--override", f"train.epochs={epochs}",
        "--override", "train.lr0=0.02",
        "--override", "train.momentum=0.9",
        "--override", "train.batch_size=2",
    ]


def teacher_plan_args():
    return [
        "--override", "plan.channels=[4,8]",
        "--override", "plan.c_min=2",
        "--override", "plan.num_classes=2",
    ]


def run_teacher(out, seed=3):
    code = main(
        ["train-teacher", "--out", str(out), "--seed", str(seed)]
        + synth_data_args()
        + teacher_plan_args()
        + quick_train_args()
    )
    assert code == 0
    return out / "teacher"


def test_config_validation_unknown_keys_and_types():
    with pytest.raises(ConfigError) as err:
        validate_config({"nope": {}})
    assert err.value.path == "nope"
    with pytest.raises(ConfigError) as err:
        validate_config({"train": {"lr0": "fast"}})
    assert err.value.path == "train.lr0"
    with pytest.raises(ConfigError) as err:
        validate_config({"train": {"epochs": True}})  # bool is not an integer here
    assert err.value.path == "train.epochs"
    with pytest.raises(ConfigError) as err:
        validate_config({"data": {"dir": "x", "num_cases": 3}})
    assert err.value.path == "data"
    with pytest.raises(ConfigError) as err:
        validate_config({"distill": {"stages": [0, "a"]}})
    assert err.value.path == "distill.stages"
    assert validate_config({"train": {"lr0": 0.1}}) == {"train": {"lr0": 0.1}}


def test_schema_lists_every_section_and_rejects_extras():
    props = CONFIG_SCHEMA["properties"]
    for section in ("data", "plan", "student", "train", "distill", "ablate"):
        assert props[section]["additionalProperties"] is False
    assert props["teacher_checkpoint"]["type"] == "string"
    assert "lr0" in props["train"]["properties"]
    assert CONFIG_SCHEMA["additionalProperties"] is False


def test_overrides_parse_json_then_fall_back_to_strings():
    out = apply_overrides({}, ["train.lr0=0.5", "data.dir=some/path", "distill.msca=false"])
    assert out == {
        "train": {"lr0": 0.5},
        "data": {"dir": "some/path"},
        "distill": {"msca": False},
    }
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["train.bogus=1"])


def test_gen_writes_dataset_and_reruns_identically(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        code = main(["gen", "--out", str(out), "--seed", "5"] + synth_data_args())
        assert code == 0
    index = json.loads((a / "index.json").read_text())
    assert len(index["cases"]) == 3 and index["num_classes"] == 2
    for entry in index["cases"]:
        for key in ("image", "labels"):
            assert (a / entry[key]).read_bytes() == (b / entry[key]).read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["seed"] == 5
    assert manifest["version"]


def test_gen_rejects_negative_fraction_naming_the_field(tmp_path, capsys):
    code = main(
        ["gen", "--out", str(tmp_path / "x"),
         "--override", 'data.class_specs=[{"target_fraction": -0.1}]']
    )
    assert code == 1
    assert "target_fraction" in capsys.readouterr().err


def test_stats_reports_profile_of_generated_data(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen", "--out", str(data), "--seed", "5"] + synth_data_args()) == 0
    out = tmp_path / "stats"
    code = main(["stats", "--out", str(out), "--override", f"data.dir={data}"])
    assert code == 0
    csv = (out / "stats.csv").read_text()
    assert csv.splitlines()[0] == "class_id,voxels,fraction"
    blob = json.loads((out / "stats.json").read_text())
    assert blob["num_classes"] == 2
    assert blob["background_fraction"] == pytest.approx(0.9, abs=0.05)
    printed = capsys.readouterr().out
    assert f"background {blob['background_fraction']:.4f}" in printed


def test_train_teacher_writes_checkpoint_metrics_and_report(tmp_path):
    out = tmp_path / "t"
    run_teacher(out)
    for name in ("manifest.json", "metrics.csv", "teacher.json", "teacher.bin",
                 "report.csv", "report.json", "timing.json"):
        assert (out / name).exists()
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["mdice"] <= 1.0 or report["mdice"] == "nan"
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "step,lr,loss_task,loss_ms_sard,loss_ms_ca,loss_total"
    assert len(metrics) == 2  # 1 epoch x 1 step (2 train cases, batch 2)


def test_manifest_rerun_reproduces_artifacts_bitwise(tmp_path):
    first = tmp_path / "t1"
    run_teacher(first)
    second = tmp_path / "t2"
    code = main(["train-teacher", "--config", str(first / "manifest.json"), "--out", str(second)])
    assert code == 0
    for name in ("teacher.bin", "teacher.json", "metrics.csv", "report.csv", "report.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_distill_toggles_off_matches_plain_training_of_student_widths(tmp_path):
    teacher = run_teacher(tmp_path / "t")
    out = tmp_path / "s"
    code = main(
        ["distill", "--out", str(out), "--seed", "3",
         "--override", f"teacher_checkpoint={teacher}",
         "--override", "student.width_factor=1",
         "--override", "student.c_min=4",
         "--override", "distill.stages=[0,1]",
         "--override", "distill.sard_fg=false",
         "--override", "distill.sard_bg=false",
         "--override", "distill.mask_align=false",
         "--override", "distill.msca=false"]
        + synth_data_args() + quick_train_args()
    )
    assert code == 0
    # plain training at the student's effective widths: (4,8) shrunk once -> (4,4)
    plain = tmp_path / "p"
    code = main(
        ["train-teacher", "--out", str(plain), "--seed", "3",
         "--override", "plan.channels=[4,4]",
         "--override", "plan.num_classes=2"]
        + synth_data_args() + quick_train_args()
    )
    assert code == 0
    assert (out / "metrics.csv").read_bytes() == (plain / "metrics.csv").read_bytes()
    assert (out / "student_infer.bin").read_bytes() == (plain / "teacher.bin").read_bytes()


def test_distill_full_stack_writes_both_checkpoints(tmp_path):
    teacher = run_teacher(tmp_path / "t")
    out = tmp_path / "s"
    code = main(
        ["distill", "--out", str(out), "--seed", "3",
         "--override", f"teacher_checkpoint={teacher}",
         "--override", "student.width_factor=1",
         "--override", "distill.stages=[0,1]",
         "--override", "distill.ca_stages=[1]"]
        + synth_data_args() + quick_train_args()
    )
    assert code == 0
    train_manifest = json.loads((out / "student_train.json").read_text())
    assert any(p["name"].startswith("gc1.") for p in train_manifest["extra_params"])
    infer_manifest = json.loads((out / "student_infer.json").read_text())
    assert infer_manifest["mode"] == "infer" and infer_manifest["extra_params"] == []


def test_distill_requires_teacher_checkpoint(tmp_path, capsys):
    code = main(["distill", "--out", str(tmp_path / "x")] + synth_data_args())
    assert code == 1
    assert "teacher_checkpoint" in capsys.readouterr().err


def test_eval_scores_checkpoint_on_dataset(tmp_path, capsys):
    teacher = run_teacher(tmp_path / "t")
    out = tmp_path / "e"
    code = main(
        ["eval", "--out", str(out), "--override", f"checkpoint={teacher}"]
        + synth_data_args()
    )
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["cases"]) == 3
    for value in report["dice_mean"]:
        assert value == "nan" or 0.0 <= value <= 1.0
    assert "mDice" in capsys.readouterr().out


def test_ablate_writes_component_table(tmp_path):
    teacher = run_teacher(tmp_path / "t")
    out = tmp_path / "a"
    code = main(
        ["ablate", "--out", str(out), "--seed", "3",
         "--override", f"teacher_checkpoint={teacher}",
         "--override", "student.width_factor=1",
         "--override", "distill.stages=[0,1]",
         "--override", "distill.ca_stages=[1]"]
        + synth_data_args() + quick_train_args()
    )
    assert code == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "config,mdice,dice_0,dice_1,delta_vs_no_kd,seconds"
    assert len(lines) == 5  # default component matrix
    first_delta = float(lines[1].split(",")[-2])
    assert first_delta == 0.0  # all-off row equals the no-distillation baseline
    assert all(line.endswith(",0.000") for line in lines[1:])  # wall clock lives in timing.json
    assert json.loads((out / "timing.json").read_text())


def test_gradcheck_passes_and_reports_worst_offender(tmp_path, capsys):
    out = tmp_path / "g"
    code = main(["gradcheck", "--out", str(out), "--seed", "0"])
    assert code == 0
    text = capsys.readouterr().out
    assert "PASS" in text and "rel err" in text
    blob = json.loads((out / "gradcheck.json").read_text())
    assert blob["passed"] is True
    assert blob["checked"] >= 100
    assert blob["worst"]["name"]


def test_divergent_run_exits_two(tmp_path, capsys):
    code = main(
        ["train-teacher", "--out", str(tmp_path / "d"), "--seed", "3",
         "--override", "train.lr0=1e300", "--override", "train.momentum=0.99",
         "--override", "train.epochs=4"]
        + synth_data_args() + teacher_plan_args()
    )
    assert code == 2
    assert "diverged" in capsys.readouterr().err


def test_unknown_override_key_exits_one(tmp_path, capsys):
    code = main(["gen", "--out", str(tmp_path / "x"), "--override", "nosuch.key=1"])
    assert code == 1
    assert "unknown key" in capsys.readouterr().err


def test_seed_flag_overrides_config_file(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"train": {"seed": 1}, "data": {"num_cases": 1, "shape": [8, 8, 8]}}))
    out = tmp_path / "g"
    assert main(["gen", "--config", str(config), "--out", str(out), "--seed", "9"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 9
    assert manifest["config"]["data"]["seed"] == 9


def test_load_config_rejects_bad_json(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
