"""Command-line entry point: dataset generation, theory checks, training,
evaluation, and the verify-edit loop, driven by a TOML config file.

Every run lands in a directory named by the hash of the resolved config plus
the seed, so identical invocations overwrite their own outputs and nothing
else. Exit codes are stable: 0 success, 1 config/IO problem, 2 a theory check
failed tolerance, 3 regime/dataset mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Sequence

import tomli

from .gradlab import SWEEP_CSV_HEADER, GatedEstimatorConfig, run_sweep, verify_exact_gating
from .loop import LoopStatus, MockEditor, OracleVerifier, PolicyVerifier, break_scene, run_loop
from .policy import ToyPolicy
from .scenes import (
    DEFAULT_CATEGORIES,
    DEFAULT_COLORS,
    DatasetManifest,
    PerturbationKind,
    build_dataset,
    check_consistency,
    decouple,
    derive_prompt,
    generate_scene,
    load_jsonl,
    make_unsatisfiable,
    parse_prompt,
    save_jsonl,
    scene_rng,
)
from .trainer import (
    Regime,
    RegimeDatasetMismatch,
    TrainerConfig,
    evaluate,
    metrics_to_csv,
    metrics_to_jsonl,
    train,
)
from .types import MetaKind

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_THEORY = 2
EXIT_REGIME = 3

META_NAMES = {
    "iou": MetaKind.IOU_CONTINUOUS,
    "iou-gated": MetaKind.IOU_GATED,
    "point": MetaKind.POINT_GATED,
}


class ConfigError(ValueError):
    pass


def _require_keys(section: Mapping[str, Any], allowed: set[str], name: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str
    dataset: dict[str, Any]
    theory: dict[str, Any]
    trainer: dict[str, Any]
    loop: dict[str, Any]

    def resolved(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "dataset": self.dataset,
            "theory": self.theory,
            "trainer": self.trainer,
            "loop": self.loop,
        }

    def run_dir(self) -> Path:
        canonical = json.dumps(self.resolved(), sort_keys=True).encode()
        digest = hashlib.sha256(canonical).hexdigest()[:12]
        return Path(self.out_dir) / f"{digest}-{self.seed}"


_TOP_KEYS = {"seed", "out_dir", "dataset", "theory", "trainer", "loop"}
_DATASET_KEYS = {
    "n_samples",
    "true_false_ratio",
    "grid",
    "categories",
    "colors",
    "perturbation_mix",
    "decouple",
}
_THEORY_KEYS = {"p_values", "dims", "n_samples", "settings", "corrupt_gate"}
_TRAINER_KEYS = {
    "regime",
    "group_size",
    "learning_rate",
    "steps",
    "batch_size",
    "clip_low",
    "clip_high",
    "drop_zero_variance_groups",
    "meta",
    "threshold",
    "temperature",
    "init",
    "init_scale",
    "grounding_weight",
    "eval_samples",
}
_LOOP_KEYS = {
    "max_steps",
    "fidelity",
    "n_solvable",
    "n_unsatisfiable",
    "max_violations",
    "verifier",
}


def load_config(path: str | Path, overrides: argparse.Namespace | None = None) -> RunConfig:
    try:
        with open(path, "rb") as handle:
            raw = tomli.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    _require_keys(raw, _TOP_KEYS, "top level")
    for name, allowed in (
        ("dataset", _DATASET_KEYS),
        ("theory", _THEORY_KEYS),
        ("trainer", _TRAINER_KEYS),
        ("loop", _LOOP_KEYS),
    ):
        _require_keys(raw.get(name, {}), allowed, name)
    config = RunConfig(
        seed=int(raw.get("seed", 0)),
        out_dir=str(raw.get("out_dir", "runs")),
        dataset=dict(raw.get("dataset", {})),
        theory=dict(raw.get("theory", {})),
        trainer=dict(raw.get("trainer", {})),
        loop=dict(raw.get("loop", {})),
    )
    if overrides is not None:
        config = _apply_overrides(config, overrides)
    return config


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates: dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["out_dir"] = args.out
    dataset = dict(config.dataset)
    trainer = dict(config.trainer)
    loop = dict(config.loop)
    if getattr(args, "decouple", False):
        dataset["decouple"] = True
    if getattr(args, "regime", None) is not None:
        trainer["regime"] = args.regime
    if getattr(args, "meta", None) is not None:
        trainer["meta"] = args.meta
    if getattr(args, "max_steps", None) is not None:
        loop["max_steps"] = args.max_steps
    if getattr(args, "fidelity", None) is not None:
        loop["fidelity"] = args.fidelity
    return RunConfig(
        seed=updates.get("seed", config.seed),
        out_dir=updates.get("out_dir", config.out_dir),
        dataset=dataset,
        theory=config.theory,
        trainer=trainer,
        loop=loop,
    )


def _manifest_from(config: RunConfig, seed_offset: int = 0, n_override: int | None = None) -> DatasetManifest:
    section = config.dataset
    ratio_raw = section.get("true_false_ratio", [1, 1])
    if not (isinstance(ratio_raw, Sequence) and len(ratio_raw) == 2):
        raise ConfigError("true_false_ratio must be a [numerator, denominator] pair")
    mix_raw = section.get("perturbation_mix")
    if mix_raw is None:
        mix = {kind: 0.25 for kind in PerturbationKind}
    else:
        try:
            mix = {PerturbationKind[key.upper()]: float(value) for key, value in mix_raw.items()}
        except KeyError as exc:
            raise ConfigError(f"unknown perturbation kind {exc}") from exc
    try:
        return DatasetManifest(
            seed=config.seed + seed_offset,
            n_samples=n_override if n_override is not None else int(section.get("n_samples", 64)),
            true_false_ratio=Fraction(int(ratio_raw[0]), int(ratio_raw[1])),
            grid=int(section.get("grid", 1000)),
            categories=tuple(section.get("categories", DEFAULT_CATEGORIES)),
            colors=tuple(section.get("colors", DEFAULT_COLORS)),
            perturbation_mix=mix,
        )
    except ValueError as exc:
        raise ConfigError(f"invalid dataset section: {exc}") from exc


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_config_echo(config: RunConfig, run_dir: Path) -> None:
    _atomic_write(run_dir / "config.json", json.dumps(config.resolved(), sort_keys=True, indent=2) + "\n")


# --- subcommands ---------------------------------------------------------------


def cmd_gen(config: RunConfig) -> int:
    manifest = _manifest_from(config)
    samples = build_dataset(manifest)
    if config.dataset.get("decouple", False):
        samples = decouple(samples)
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    save_jsonl(samples, run_dir / "dataset.jsonl")
    echo = {
        "seed": manifest.seed,
        "n_samples": manifest.n_samples,
        "true_false_ratio": [
            manifest.true_false_ratio.numerator,
            manifest.true_false_ratio.denominator,
        ],
        "grid": manifest.grid,
        "categories": list(manifest.categories),
        "colors": list(manifest.colors),
        "perturbation_mix": {k.value: v for k, v in manifest.perturbation_mix.items()},
        "decoupled": bool(config.dataset.get("decouple", False)),
        "records": len(samples),
    }
    _atomic_write(run_dir / "manifest.json", json.dumps(echo, sort_keys=True, indent=2) + "\n")
    _write_config_echo(config, run_dir)
    print(f"wrote {len(samples)} records to {run_dir / 'dataset.jsonl'}")
    return EXIT_OK


def _theory_configs(config: RunConfig) -> list[GatedEstimatorConfig]:
    section = config.theory
    p_values = section.get("p_values", [0.1, 0.5, 0.9])
    dims = section.get("dims", [1, 8])
    n_samples = int(section.get("n_samples", 1_000_000))
    settings = section.get("settings", [{"mean": 2.0, "var": 1.0}, {"mean": 0.75, "var": 2.25}])
    configs = []
    for p in p_values:
        for dim in dims:
            for setting in settings:
                mean = float(setting.get("mean", 1.0))
                var = float(setting.get("var", 1.0))
                configs.append(
                    GatedEstimatorConfig(
                        p_acc=float(p),
                        dec_mean=(mean,) * int(dim),
                        dec_cov_diag=(var,) * int(dim),
                        n_samples=n_samples,
                        seed=config.seed,
                    )
                )
    return configs


def cmd_theory(config: RunConfig, threads: int = 1) -> int:
    configs = _theory_configs(config)
    corrupt = bool(config.theory.get("corrupt_gate", False))
    if threads > 1 and configs:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(
                pool.map(lambda c: run_sweep([c], corrupt_gate=corrupt), configs)
            )
        rows = [row for batch, _ in outcomes for row in batch]
        failures = [failure for _, batch_failures in outcomes for failure in batch_failures]
    else:
        rows, failures = run_sweep(configs, corrupt_gate=corrupt)
    failures.extend(verify_exact_gating(seed=config.seed))

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SWEEP_CSV_HEADER)
    for row in rows:
        writer.writerow(row.csv_fields())
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(run_dir / "sweep.csv", buffer.getvalue())
    _write_config_echo(config, run_dir)

    for failure in failures:
        print(f"FAIL {failure}", file=sys.stderr)
    print(f"theory sweep: {len(rows)} configs, {len(failures)} failures -> {run_dir / 'sweep.csv'}")
    return EXIT_THEORY if failures else EXIT_OK


def _trainer_config(config: RunConfig) -> TrainerConfig:
    section = config.trainer
    regime_name = str(section.get("regime", "baseline")).lower()
    try:
        regime = Regime(regime_name)
    except ValueError as exc:
        raise ConfigError(f"unknown regime {regime_name!r}") from exc
    meta_name = str(section.get("meta", "iou-gated")).lower()
    if meta_name not in META_NAMES:
        raise ConfigError(f"unknown meta kind {meta_name!r} (choose from {sorted(META_NAMES)})")
    try:
        return TrainerConfig(
            regime=regime,
            group_size=int(section.get("group_size", 8)),
            learning_rate=float(section.get("learning_rate", 0.1)),
            steps=int(section.get("steps", 100)),
            batch_size=int(section.get("batch_size", 8)),
            clip_low=float(section.get("clip_low", 0.8)),
            clip_high=float(section.get("clip_high", 1.28)),
            drop_zero_variance_groups=bool(section.get("drop_zero_variance_groups", True)),
            seed=config.seed,
            meta_kind=META_NAMES[meta_name],
            threshold=float(section.get("threshold", 0.6)),
            temperature=float(section.get("temperature", 1.0)),
            init=str(section.get("init", "zero")),
            init_scale=float(section.get("init_scale", 2.0)),
            grounding_weight=float(section.get("grounding_weight", 1.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid trainer section: {exc}") from exc


def cmd_train(config: RunConfig) -> int:
    trainer_config = _trainer_config(config)
    dataset = build_dataset(_manifest_from(config))
    # An explicit decouple flag wins; otherwise follow the regime. Training
    # itself rejects a stream structure that contradicts the regime.
    decouple_flag = config.dataset.get("decouple")
    if decouple_flag is None:
        decouple_flag = trainer_config.regime is Regime.DECOUPLED
    if decouple_flag:
        dataset = decouple(dataset)
    eval_samples = int(config.trainer.get("eval_samples", 48))
    eval_set = build_dataset(_manifest_from(config, seed_offset=1, n_override=eval_samples))
    policy, metrics = train(trainer_config, dataset, eval_set)
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(run_dir / "metrics.csv", metrics_to_csv(metrics, trainer_config.regime, config.seed))
    _atomic_write(run_dir / "metrics.jsonl", metrics_to_jsonl(metrics))
    policy.save(run_dir / "policy.json", seed=config.seed)
    _write_config_echo(config, run_dir)
    final = metrics[-1]
    print(
        f"trained {trainer_config.regime.value} for {trainer_config.steps} steps: "
        f"accuracy={final.judgment_accuracy:.3f} hit_rate={final.grounding_hit_rate:.3f} "
        f"-> {run_dir / 'metrics.csv'}"
    )
    return EXIT_OK


def cmd_eval(checkpoint: str, dataset_path: str, out: str | None) -> int:
    policy = ToyPolicy.load(checkpoint)
    dataset = load_jsonl(dataset_path)
    report = evaluate(policy, dataset)
    payload = {
        "judgment_accuracy": report.judgment_accuracy,
        "grounding_hit_rate": report.grounding_hit_rate,
        "mean_iou": report.mean_iou,
        "checkpoint": str(checkpoint),
        "dataset": str(dataset_path),
        "samples": len(dataset),
    }
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if out is not None:
        _atomic_write(Path(out) / "eval.json", text)
    print(text, end="")
    return EXIT_OK


def _loop_fixtures(config: RunConfig):
    """Solvable (scene, prompt, k) triples plus unsatisfiable (scene, prompt) pairs."""
    section = config.loop
    n_solvable = int(section.get("n_solvable", 100))
    n_unsatisfiable = int(section.get("n_unsatisfiable", 20))
    max_violations = int(section.get("max_violations", 3))
    manifest = _manifest_from(config, seed_offset=2)
    solvable = []
    unsatisfiable = []
    index = 0
    while len(solvable) < n_solvable or len(unsatisfiable) < n_unsatisfiable:
        index += 1
        scene = generate_scene(scene_rng(manifest.seed, index), manifest)
        if len(unsatisfiable) < n_unsatisfiable and len(scene.objects) >= 2:
            unsatisfiable.append(make_unsatisfiable(scene))
            continue
        if len(scene.objects) < 4:
            continue
        prompt = derive_prompt(scene)
        edits = 1 + (len(solvable) % 2)
        broken = break_scene(scene, scene_rng(manifest.seed, 100_000 + index), edits, manifest.colors)
        k = len(check_consistency(broken, parse_prompt(prompt)))
        if 1 <= k <= max_violations:
            solvable.append((broken, prompt, k))
    return solvable, unsatisfiable


def cmd_tts(config: RunConfig) -> int:
    section = config.loop
    max_steps = int(section.get("max_steps", 10))
    fidelity = float(section.get("fidelity", 1.0))
    verifier_name = str(section.get("verifier", "oracle"))
    if verifier_name == "oracle":
        verifier = OracleVerifier()
    else:
        verifier = PolicyVerifier(ToyPolicy.load(verifier_name))
    solvable, unsatisfiable = _loop_fixtures(config)
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)

    lines: list[str] = []
    summary = {"solvable": [], "unsatisfiable": []}
    for fixture_id, (scene, prompt, k) in enumerate(solvable):
        editor = MockEditor(fidelity=fidelity, seed=config.seed + fixture_id)
        snapshots = []
        state = run_loop(scene, prompt, verifier, editor, max_steps=max_steps, observer=snapshots.append)
        lines.extend(
            json.dumps({"fixture": fixture_id, "kind": "solvable", **snap.to_payload()}, separators=(",", ":"))
            for snap in snapshots
        )
        summary["solvable"].append(
            {
                "fixture": fixture_id,
                "violations": k,
                "status": state.status.value,
                "verify_calls": state.step + (1 if state.status is LoopStatus.ACCEPTED else 0),
                "within_budget": state.status is LoopStatus.ACCEPTED and state.step <= k,
            }
        )
    for fixture_id, (scene, prompt) in enumerate(unsatisfiable):
        editor = MockEditor(fidelity=fidelity, seed=10_000 + config.seed + fixture_id)
        snapshots = []
        state = run_loop(scene, prompt, verifier, editor, max_steps=max_steps, observer=snapshots.append)
        lines.extend(
            json.dumps(
                {"fixture": fixture_id, "kind": "unsatisfiable", **snap.to_payload()}, separators=(",", ":")
            )
            for snap in snapshots
        )
        summary["unsatisfiable"].append(
            {"fixture": fixture_id, "status": state.status.value, "step": state.step}
        )
    _atomic_write(run_dir / "trajectories.jsonl", "".join(line + "\n" for line in lines))
    accepted = sum(1 for row in summary["solvable"] if row["status"] == "Accepted")
    exhausted = sum(1 for row in summary["unsatisfiable"] if row["status"] == "Exhausted")
    summary["accepted_solvable"] = accepted
    summary["exhausted_unsatisfiable"] = exhausted
    _atomic_write(run_dir / "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _write_config_echo(config, run_dir)
    print(
        f"tts: {accepted}/{len(summary['solvable'])} solvable accepted, "
        f"{exhausted}/{len(summary['unsatisfiable'])} unsatisfiable exhausted "
        f"-> {run_dir / 'summary.json'}"
    )
    return EXIT_OK


# --- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="verilab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="TOML config file")
        p.add_argument("--out", help="output base directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="override every section seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads where supported")

    gen = sub.add_parser("gen", help="generate a labeled dataset")
    common(gen)
    gen.add_argument("--decouple", action="store_true", help="append grounding-stream copies")

    theory = sub.add_parser("theory", help="run the variance/SNR verification sweep")
    common(theory)

    train_p = sub.add_parser("train", help="train the toy verifier policy")
    common(train_p)
    train_p.add_argument("--regime", choices=[r.value for r in Regime])
    train_p.add_argument("--meta", choices=sorted(META_NAMES))

    eval_p = sub.add_parser("eval", help="evaluate a checkpoint on a JSONL dataset")
    eval_p.add_argument("checkpoint")
    eval_p.add_argument("dataset")
    eval_p.add_argument("--out", help="directory for eval.json")

    tts = sub.add_parser("tts", help="run the verify-edit loop over fixtures")
    common(tts)
    tts.add_argument("--max-steps", type=int, dest="max_steps")
    tts.add_argument("--fidelity", type=float)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.dataset, args.out)
        config = load_config(args.config, overrides=args)
        if args.command == "gen":
            return cmd_gen(config)
        if args.command == "theory":
            return cmd_theory(config, threads=args.threads)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "tts":
            return cmd_tts(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except RegimeDatasetMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REGIME
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
