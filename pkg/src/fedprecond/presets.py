"""Ready-made experiment configurations shared by the scripts and the test suite."""
from __future__ import annotations

from .config import ExperimentConfig, config_from_dict
from .engine import Simulation

STEP_GRID = (1e-3, 1e-2, 1e-1, 0.5)
GAP_TARGET = 1e-3
SERVER_SIDE = ("fedadagrad", "fedadam", "prefedopt")
NO_DECAY = {"local_decay_factor": 1.0, "server_decay_factor": 1.0}

# Per-algorithm step sizes picked from STEP_GRID by scripts/tune_quadratic.py.
# PreFed additionally keeps its first moment across rounds and uses a larger
# adaptivity floor; with a per-round reset it stalls above the target.
TUNED_TESTBED = {
    "fedavg": {"local_opt": {"kind": "sgd", "eta_l": 1e-2}},
    "fedadagrad": {"local_opt": {"eta_l": 1e-2}, "server_opt": {"eta_g": 0.5}},
    "fedadam": {"local_opt": {"eta_l": 1e-2}, "server_opt": {"eta_g": 0.1}},
    "prefed": {"local_opt": {"eta_l": 1e-3, "tau": 0.1, "first_moment_sync": "carry"}},
    "prefedopt": {"local_opt": {"eta_l": 1e-3}, "server_opt": {"eta_g": 0.5}},
}


def testbed_config(algorithm: str, rounds: int = 2000, seed: int = 0, local_opt: dict | None = None,
                   server_opt: dict | None = None, **over) -> ExperimentConfig:
    """Noise-free heterogeneous quadratic testbed: 8 clients, d=10, full participation, K=5."""
    raw = {
        "algorithm": algorithm,
        "data": {"source": "quadratic", "d": 10, "mu": 0.1, "L_q": 1.0, "hetero": 1.0, "noise_std": 0.0},
        "num_clients": 8,
        "sample_fraction": 1.0,
        "rounds": rounds,
        "local_steps": 5,
        "seed": seed,
        "lr_schedule": NO_DECAY,
    }
    if local_opt:
        raw["local_opt"] = local_opt
    if server_opt:
        raw["server_opt"] = server_opt
    raw.update(over)
    return config_from_dict(raw)


def tuned_testbed_config(algorithm: str, rounds: int = 2000, seed: int = 0, **over) -> ExperimentConfig:
    return testbed_config(algorithm, rounds, seed, **TUNED_TESTBED[algorithm], **over)


def first_hit(cfg: ExperimentConfig, target: float = GAP_TARGET, threads: int = 1) -> tuple[int | None, float]:
    """Round at which the optimality gap first drops to ``target`` (None if never), and the last gap seen."""
    gap = float("inf")
    for rec in Simulation(cfg, threads=threads).run():
        gap = rec.val_loss
        if gap <= target:
            return rec.round, gap
    return None, gap


def desk_config(algorithm: str, seed: int = 0, rounds: int = 300, spread: float = 1.0, **over) -> ExperimentConfig:
    """Logistic regression on 4-class blobs (d=20, n=4000) split into 16 single-label
    shards, 20% participation, 10 local steps; protocol-default step sizes."""
    raw = {
        "algorithm": algorithm,
        "model": {"kind": "logreg", "input_dim": 20, "num_classes": 4},
        "data": {"source": "blobs", "n": 4000, "spread": spread,
                 "partition": {"kind": "shards", "shards_per_client": 1}},
        "num_clients": 16,
        "sample_fraction": 0.2,
        "local_steps": 10,
        "rounds": rounds,
        "seed": seed,
        "eval_every": rounds,
    }
    raw.update(over)
    return config_from_dict(raw)
