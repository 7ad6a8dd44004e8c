import json
from pathlib import Path

from verilab.cli import main
from verilab.policy import ToyPolicy
from verilab.scenes import DatasetManifest, build_dataset, save_jsonl


def write_config(tmp_path: Path, body: str) -> str:
    path = tmp_path / "config.toml"
    path.write_text(body, encoding="utf-8")
    return str(path)


def base_config(tmp_path: Path, extra: str = "") -> str:
    return write_config(
        tmp_path,
        f"""
seed = 7
out_dir = "{tmp_path / 'runs'}"

[dataset]
n_samples = 8
{extra}
""",
    )


def only_run_dir(base: Path) -> Path:
    runs = [p for p in base.iterdir() if p.is_dir()]
    assert len(runs) == 1
    return runs[0]


# --- gen -------------------------------------------------------------------


def test_gen_writes_declared_counts(tmp_path):
    config = base_config(tmp_path)
    assert main(["gen", "--config", config]) == 0
    run_dir = only_run_dir(tmp_path / "runs")
    lines = (run_dir / "dataset.jsonl").read_text().splitlines()
    assert len(lines) == 8
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["records"] == 8


def test_gen_decouple_eight_becomes_twelve(tmp_path):
    config = base_config(tmp_path)
    assert main(["gen", "--config", config, "--decouple"]) == 0
    run_dir = only_run_dir(tmp_path / "runs")
    lines = (run_dir / "dataset.jsonl").read_text().splitlines()
    assert len(lines) == 12


def test_gen_malformed_config_exit_1_no_partial_output(tmp_path):
    config = write_config(tmp_path, "seed = [this is not toml")
    out = tmp_path / "runs"
    assert main(["gen", "--config", config, "--out", str(out)]) == 1
    assert not out.exists()


def test_gen_unknown_key_rejected(tmp_path):
    config = write_config(
        tmp_path,
        f"""
seed = 7
out_dir = "{tmp_path / 'runs'}"

[dataset]
n_samples = 8
typo_key = 3
""",
    )
    assert main(["gen", "--config", config]) == 1
    assert not (tmp_path / "runs").exists()


def test_gen_idempotent_and_seed_changes_run_dir(tmp_path):
    config = base_config(tmp_path)
    assert main(["gen", "--config", config]) == 0
    first = only_run_dir(tmp_path / "runs")
    stamp = (first / "dataset.jsonl").read_bytes()
    assert main(["gen", "--config", config]) == 0
    assert (first / "dataset.jsonl").read_bytes() == stamp
    assert main(["gen", "--config", config, "--seed", "8"]) == 0
    assert len(list((tmp_path / "runs").iterdir())) == 2


# --- theory -----------------------------------------------------------------


def theory_config(tmp_path: Path, corrupt: bool = False) -> str:
    return write_config(
        tmp_path,
        f"""
seed = 3
out_dir = "{tmp_path / 'runs'}"

[theory]
p_values = [0.1, 0.5, 0.9]
dims = [1]
n_samples = 120000
corrupt_gate = {str(corrupt).lower()}

[[theory.settings]]
mean = 2.0
var = 1.0
""",
    )


def test_theory_default_sweep_passes(tmp_path):
    assert main(["theory", "--config", theory_config(tmp_path)]) == 0
    run_dir = only_run_dir(tmp_path / "runs")
    rows = (run_dir / "sweep.csv").read_text().splitlines()
    assert rows[0] == "p,predicted_var,empirical_var,snr_lhs,snr_rhs,relative_error"
    assert len(rows) == 4


def test_theory_corrupted_gate_exits_2(tmp_path):
    assert main(["theory", "--config", theory_config(tmp_path, corrupt=True)]) == 2


def test_theory_empty_sweep_exit_0_empty_csv(tmp_path):
    config = write_config(
        tmp_path,
        f"""
seed = 3
out_dir = "{tmp_path / 'runs'}"

[theory]
p_values = []
""",
    )
    assert main(["theory", "--config", config]) == 0
    run_dir = only_run_dir(tmp_path / "runs")
    assert (run_dir / "sweep.csv").read_text().splitlines() == [
        "p,predicted_var,empirical_var,snr_lhs,snr_rhs,relative_error"
    ]


def test_theory_threads_match_single_thread(tmp_path):
    config = theory_config(tmp_path)
    assert main(["theory", "--config", config]) == 0
    single = (only_run_dir(tmp_path / "runs") / "sweep.csv").read_bytes()
    assert main(["theory", "--config", config, "--threads", "4"]) == 0
    threaded = (only_run_dir(tmp_path / "runs") / "sweep.csv").read_bytes()
    assert single == threaded


# --- train / eval --------------------------------------------------------------


def trainer_config(tmp_path: Path, regime: str = "baseline") -> str:
    return write_config(
        tmp_path,
        f"""
seed = 5
out_dir = "{tmp_path / 'runs'}"

[dataset]
n_samples = 16

[trainer]
regime = "{regime}"
steps = 4
group_size = 4
batch_size = 4
eval_samples = 12
""",
    )


def test_train_deterministic_metrics(tmp_path):
    config = trainer_config(tmp_path, regime="joint")
    assert main(["train", "--config", config]) == 0
    run_dir = only_run_dir(tmp_path / "runs")
    first = (run_dir / "metrics.csv").read_bytes()
    assert main(["train", "--config", config]) == 0
    assert (run_dir / "metrics.csv").read_bytes() == first
    assert (run_dir / "policy.json").exists()


def test_train_regime_flag_overrides_config(tmp_path):
    config = trainer_config(tmp_path, regime="baseline")
    assert main(["train", "--config", config, "--regime", "decoupled"]) == 0
    run_dir = only_run_dir(tmp_path / "runs")
    header_row = (run_dir / "metrics.csv").read_text().splitlines()[1]
    assert ",decoupled," in header_row


def test_train_regime_dataset_mismatch_exit_3(tmp_path):
    config = write_config(
        tmp_path,
        f"""
seed = 5
out_dir = "{tmp_path / 'runs'}"

[dataset]
n_samples = 16
decouple = true

[trainer]
regime = "joint"
steps = 2
group_size = 4
batch_size = 4
""",
    )
    assert main(["train", "--config", config]) == 3
    config_false = write_config(
        tmp_path,
        f"""
seed = 5
out_dir = "{tmp_path / 'runs'}"

[dataset]
n_samples = 16
decouple = false

[trainer]
regime = "decoupled"
steps = 2
group_size = 4
batch_size = 4
""",
    )
    assert main(["train", "--config", config_false]) == 3


def test_eval_oracle_checkpoint_perfect(tmp_path):
    checkpoint = tmp_path / "oracle.json"
    ToyPolicy.oracle(scale=200.0).save(checkpoint, seed=0)
    dataset_path = tmp_path / "eval.jsonl"
    save_jsonl(build_dataset(DatasetManifest(seed=41, n_samples=20)), dataset_path)
    out = tmp_path / "eval-out"
    assert main(["eval", str(checkpoint), str(dataset_path), "--out", str(out)]) == 0
    report = json.loads((out / "eval.json").read_text())
    assert report["judgment_accuracy"] == 1.0
    assert report["grounding_hit_rate"] == 1.0


def test_eval_missing_checkpoint_exit_1(tmp_path):
    dataset_path = tmp_path / "eval.jsonl"
    save_jsonl(build_dataset(DatasetManifest(seed=41, n_samples=4)), dataset_path)
    assert main(["eval", str(tmp_path / "missing.json"), str(dataset_path)]) == 1


# --- tts -------------------------------------------------------------------------


def tts_config(tmp_path: Path, n_solvable: int = 6, n_unsat: int = 2) -> str:
    return write_config(
        tmp_path,
        f"""
seed = 11
out_dir = "{tmp_path / 'runs'}"

[loop]
n_solvable = {n_solvable}
n_unsatisfiable = {n_unsat}
max_steps = 10
fidelity = 1.0
""",
    )


def test_tts_oracle_accepts_all_solvable(tmp_path):
    assert main(["tts", "--config", tts_config(tmp_path)]) == 0
    run_dir = only_run_dir(tmp_path / "runs")
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["accepted_solvable"] == 6
    assert summary["exhausted_unsatisfiable"] == 2
    assert all(row["within_budget"] for row in summary["solvable"])
    assert all(row["step"] == 10 for row in summary["unsatisfiable"])
    trajectories = (run_dir / "trajectories.jsonl").read_text().splitlines()
    assert all(json.loads(line)["status"] for line in trajectories)


def test_tts_policy_checkpoint_verifier(tmp_path):
    checkpoint = tmp_path / "oracle.json"
    ToyPolicy.oracle(scale=200.0).save(checkpoint, seed=0)
    config = write_config(
        tmp_path,
        f"""
seed = 11
out_dir = "{tmp_path / 'runs'}"

[loop]
n_solvable = 4
n_unsatisfiable = 1
verifier = "{checkpoint}"
""",
    )
    assert main(["tts", "--config", config]) == 0
    run_dir = only_run_dir(tmp_path / "runs")
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["accepted_solvable"] == 4
