"""Command-line surface: reproducible runs bound to JSON configs.

Every command resolves its config (file, then --override patches, then
--seed), writes a run manifest before doing any work, and leaves all outputs
under one run directory. Reruns from a manifest reproduce checkpoints and
reports byte for byte; wall-clock measurements go to a separate timing file
that is excluded from that guarantee.

Exit codes: 0 success, 1 validation error, 2 runtime or divergence error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    apply_overrides,
    build_distill_config,
    build_plan,
    build_student_plan,
    build_train_config,
    load_config,
)
from .errors import ConfigError, DivergenceError
from .gradcheck import run_gradient_check
from .metrics import EvalReport, evaluate
from .models import export_infer, load_checkpoint, save_checkpoint
from .nifti import read_nifti1, write_nifti1
from .rng import derive_seed
from .training import (
    config_hash,
    distill_student,
    run_ablation,
    split_dataset,
    train_network,
    train_teacher,
)
from .volumes import (
    LabelVolume,
    class_stats,
    generate_phantom,
    merge_stats,
    stats_to_csv,
    stats_to_json,
)

_GEN_DEFAULTS = {
    "num_cases": 4,
    "shape": [16, 16, 16],
    "class_specs": [{"target_fraction": 0.05}],
    "noise_sigma": 0.05,
    "modalities": 1,
    "seed": 0,
}


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _resolve_config(args) -> dict:
    config = load_config(args.config) if args.config else {}
    config = apply_overrides(config, args.override)
    if args.seed is not None:
        config.setdefault("train", {})["seed"] = args.seed
        if "dir" not in config.get("data", {}):  # dir-based data has no synthesis seed
            config.setdefault("data", {})["seed"] = args.seed
    return config


def _seed_of(config: dict) -> int:
    return int(config.get("train", {}).get("seed", 0))


def _run_dir(args, command: str, seed: int) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path("runs") / f"{command}-{stamp}-seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out_dir: Path, command: str, args, config: dict, input_hashes: dict) -> None:
    manifest = {
        "command": command,
        "config_path": args.config,
        "config": config,
        "seed": _seed_of(config),
        "out_dir": str(out_dir),
        "version": __version__,
        "threads": os.environ.get("RECO_KD_THREADS"),
        "input_hashes": input_hashes,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _synth_section(config: dict) -> dict:
    section = dict(_GEN_DEFAULTS)
    section.update(config.get("data", {}))
    return section


def _load_dataset(config: dict) -> tuple:
    """(cases, input_hashes) from data.dir files or in-memory synthesis."""
    data = config.get("data", {})
    if "dir" in data:
        root = Path(data["dir"])
        index_path = root / "index.json"
        if not index_path.exists():
            raise ConfigError(f"no index.json under {root}", path="data.dir")
        with open(index_path) as fh:
            index = json.load(fh)
        hashes = {"index.json": _sha256(index_path)}
        cases = []
        for entry in index["cases"]:
            image = read_nifti1(root / entry["image"])
            labels = read_nifti1(root / entry["labels"])
            if not isinstance(labels, LabelVolume):
                raise ConfigError(f"{entry['labels']} is not a label volume", path="data.dir")
            labels = LabelVolume(
                labels.data, num_classes=index["num_classes"], spacing=labels.spacing
            )
            cases.append((image, labels))
            hashes[entry["image"]] = _sha256(root / entry["image"])
            hashes[entry["labels"]] = _sha256(root / entry["labels"])
        return cases, hashes
    section = _synth_section(config)
    cases = [
        generate_phantom(
            derive_seed(section["seed"], f"case{i:03d}"),
            tuple(section["shape"]),
            section["class_specs"],
            noise_sigma=section["noise_sigma"],
            modalities=section["modalities"],
        )
        for i in range(section["num_cases"])
    ]
    blob = json.dumps(section, sort_keys=True).encode()
    return cases, {"data(synthetic)": hashlib.sha256(blob).hexdigest()}


def _write_report(out_dir: Path, state, cases) -> EvalReport:
    """report.csv/json with zeroed timings (deterministic); wall clock aside."""
    report = evaluate(state, cases, with_hd95=True)
    with open(out_dir / "timing.json", "w") as fh:
        json.dump(
            {"per_case_seconds": [float(s) for s in report.seconds],
             "mean_seconds": float(report.seconds.mean())},
            fh, indent=1, sort_keys=True,
        )
        fh.write("\n")
    fixed = EvalReport(report.case_ids, report.dice, report.hd95,
                       np.zeros_like(report.seconds))
    (out_dir / "report.csv").write_text(fixed.to_csv())
    with open(out_dir / "report.json", "w") as fh:
        json.dump(fixed.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return report


def _require(config: dict, key: str) -> str:
    value = config.get(key)
    if not value:
        raise ConfigError(f"command needs the {key} key", path=key)
    return value


def cmd_gen(args) -> int:
    config = _resolve_config(args)
    if "dir" in config.get("data", {}):
        raise ConfigError("gen writes a new dataset; remove data.dir", path="data.dir")
    section = _synth_section(config)
    out_dir = _run_dir(args, "gen", section["seed"])
    _write_manifest(out_dir, "gen", args, config, {})
    entries = []
    for i in range(section["num_cases"]):
        image, labels = generate_phantom(
            derive_seed(section["seed"], f"case{i:03d}"),
            tuple(section["shape"]),
            section["class_specs"],
            noise_sigma=section["noise_sigma"],
            modalities=section["modalities"],
        )
        name = f"case{i:03d}"
        write_nifti1(out_dir / f"{name}_image.nii", image)
        write_nifti1(out_dir / f"{name}_labels.nii", labels)
        entries.append(
            {"case": name, "image": f"{name}_image.nii", "labels": f"{name}_labels.nii"}
        )
    index = {
        "cases": entries,
        "num_classes": len(section["class_specs"]) + 1,
        "shape": list(section["shape"]),
        "modalities": section["modalities"],
        "seed": section["seed"],
    }
    with open(out_dir / "index.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(entries)} cases to {out_dir}")
    return 0


def cmd_stats(args) -> int:
    config = _resolve_config(args)
    cases, hashes = _load_dataset(config)
    out_dir = _run_dir(args, "stats", _seed_of(config))
    _write_manifest(out_dir, "stats", args, config, hashes)
    merged = merge_stats([class_stats(labels) for _, labels in cases])
    (out_dir / "stats.csv").write_text(stats_to_csv(merged))
    with open(out_dir / "stats.json", "w") as fh:
        json.dump(stats_to_json(merged), fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(
        f"{len(cases)} cases, {merged.num_classes} classes, "
        f"background {merged.background_fraction:.4f}, "
        f"imbalance ratio {merged.imbalance_ratio:.4g}"
    )
    return 0


def cmd_train_teacher(args) -> int:
    config = _resolve_config(args)
    cases, hashes = _load_dataset(config)
    plan = build_plan(config)
    train_config = build_train_config(config)
    out_dir = _run_dir(args, "train-teacher", train_config.seed)
    _write_manifest(out_dir, "train-teacher", args, config, hashes)
    result = train_teacher(cases, plan, train_config, out_dir=out_dir)
    save_checkpoint(out_dir / "teacher", result.state, step=len(result.history))
    _, val_idx = split_dataset(len(cases), train_config.seed)
    report = _write_report(out_dir, result.state, [cases[i] for i in val_idx])
    print(
        f"teacher: {len(result.history)} steps, best epoch {result.best_epoch}, "
        f"val mDice {report.mdice:.4f}, artifacts in {out_dir}"
    )
    return 0


def cmd_distill(args) -> int:
    config = _resolve_config(args)
    teacher_base = _require(config, "teacher_checkpoint")
    teacher, _, _ = load_checkpoint(teacher_base)
    cases, hashes = _load_dataset(config)
    hashes["teacher_checkpoint.json"] = _sha256(str(teacher_base) + ".json")
    hashes["teacher_checkpoint.bin"] = _sha256(str(teacher_base) + ".bin")
    student_plan = build_student_plan(config, teacher.plan)
    distill_config = build_distill_config(config.get("distill", {}))
    train_config = build_train_config(config)
    out_dir = _run_dir(args, "distill", train_config.seed)
    _write_manifest(out_dir, "distill", args, config, hashes)
    result = distill_student(
        cases, teacher, student_plan, distill_config, train_config, out_dir=out_dir
    )
    save_checkpoint(
        out_dir / "student_train",
        result.final_state,
        step=len(result.history),
        extras=result.extras,
    )
    save_checkpoint(out_dir / "student_infer", export_infer(result.state))
    _, val_idx = split_dataset(len(cases), train_config.seed)
    report = _write_report(out_dir, result.state, [cases[i] for i in val_idx])
    print(
        f"student: {len(result.history)} steps, best epoch {result.best_epoch}, "
        f"val mDice {report.mdice:.4f}, artifacts in {out_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    base = _require(config, "checkpoint")
    state, _, _ = load_checkpoint(base)
    cases, hashes = _load_dataset(config)
    hashes["checkpoint.json"] = _sha256(str(base) + ".json")
    hashes["checkpoint.bin"] = _sha256(str(base) + ".bin")
    out_dir = _run_dir(args, "eval", _seed_of(config))
    _write_manifest(out_dir, "eval", args, config, hashes)
    report = _write_report(out_dir, state, cases)
    print(f"mDice {report.mdice:.4f} over {len(cases)} cases, report in {out_dir}")
    return 0


_COMPONENT_MATRIX = [
    {"sard_fg": False, "sard_bg": False, "mask_align": False, "msca": False},
    {"mask_align": False, "msca": False},
    {"msca": False},
    {},
]


def cmd_ablate(args) -> int:
    config = _resolve_config(args)
    teacher_base = _require(config, "teacher_checkpoint")
    teacher, _, _ = load_checkpoint(teacher_base)
    cases, hashes = _load_dataset(config)
    hashes["teacher_checkpoint.json"] = _sha256(str(teacher_base) + ".json")
    hashes["teacher_checkpoint.bin"] = _sha256(str(teacher_base) + ".bin")
    student_plan = build_student_plan(config, teacher.plan)
    train_config = build_train_config(config)
    base_section = config.get("distill", {})
    patches = config.get("ablate", {}).get("matrix", _COMPONENT_MATRIX)
    matrix = [build_distill_config({**base_section, **patch}) for patch in patches]
    out_dir = _run_dir(args, "ablate", train_config.seed)
    _write_manifest(out_dir, "ablate", args, config, hashes)
    csv, rows = run_ablation(cases, teacher, student_plan, matrix, train_config)
    lines = csv.splitlines()
    fixed = [lines[0]]
    for line in lines[1:]:
        fixed.append(",".join(line.split(",")[:-1] + ["0.000"]))
    (out_dir / "ablation.csv").write_text("\n".join(fixed) + "\n")
    with open(out_dir / "timing.json", "w") as fh:
        json.dump(
            {row["config"]: row["seconds"] for row in rows}, fh, indent=1, sort_keys=True
        )
        fh.write("\n")
    for row in rows:
        print(
            f"{row['config']}: mDice {row['mdice']:.4f} "
            f"({row['delta_vs_no_kd']:+.4f} vs no distillation)"
        )
    print(f"ablation table in {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    config = _resolve_config(args)
    seed = _seed_of(config)
    out_dir = _run_dir(args, "gradcheck", seed)
    _write_manifest(out_dir, "gradcheck", args, config, {})
    report = run_gradient_check(seed=seed)
    with open(out_dir / "gradcheck.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    worst = report["worst"]
    verdict = "PASS" if report["passed"] else "FAIL"
    print(
        f"gradcheck: {report['checked']} coordinates, worst {worst['name']}{list(worst['index'])} "
        f"rel err {worst['rel_err']:.3g} (tolerance {report['tolerance']:g}): {verdict}"
    )
    return 0 if report["passed"] else 2


_COMMANDS = {
    "gen": cmd_gen,
    "stats": cmd_stats,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reco-kd",
        description="Region- and context-aware distillation for 3-d segmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "write a synthetic phantom dataset (NIfTI-1 pairs plus index.json)",
        "stats": "report per-class voxel counts and imbalance for a dataset",
        "train-teacher": "train the full-width network on the task loss",
        "distill": "train a narrow student against a frozen teacher checkpoint",
        "eval": "score a checkpoint (Dice, HD95) on a dataset",
        "ablate": "train one student per distillation-toggle combination",
        "gradcheck": "verify analytic gradients against finite differences",
    }
    for name, text in helps.items():
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", help="JSON config file (or a prior run's manifest.json)")
        cmd.add_argument("--seed", type=int, help="override train.seed and data.seed")
        cmd.add_argument("--out", help="run directory (default: runs/<command>-<stamp>-seed<seed>)")
        cmd.add_argument(
            "--override",
            action="append",
            metavar="KEY=VALUE",
            help="dotted-path config override, repeatable (e.g. train.lr0=0.005)",
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
