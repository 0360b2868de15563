"""Round orchestration: sampling, local training, aggregation, accounting, metrics."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import models
from .config import ExperimentConfig, validate
from .dataplane import (
    Dataset,
    Partition,
    QuadClientSet,
    gen_blobs,
    gen_quadratics,
    load_dataset,
    next_batch,
    partition,
    train_val_split,
)
from .errors import ClientFailure, ConfigError
from .numkit import RngStream
from .optim import (
    adaalter_local_step,
    basic_prefed_step,
    mean_vectors,
    prefed_local_step,
    server_fedadagrad,
    server_fedadam,
    server_prefedopt,
    sgd_momentum_step,
    sgd_step,
)
from .precond import PrecondState

REAL_BYTES = 8
THREADS_ENV = "FEDPRECOND_THREADS"

METRIC_FIELDS = (
    "round", "train_loss", "val_loss", "val_acc", "grad_norm", "divergence",
    "uplink_bytes", "downlink_bytes", "eta_l_effective", "eta_g_effective",
)


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    train_loss: float
    val_loss: float
    val_acc: float
    grad_norm: float
    divergence: float
    uplink_bytes: int
    downlink_bytes: int
    eta_l_effective: float
    eta_g_effective: float

    def as_dict(self) -> dict:
        return asdict(self)


# problems ---------------------------------------------------------------------

class QuadProblem:
    """The quadratic testbed. Stochastic gradients add isotropic Gaussian noise
    of standard deviation ``noise_std / sqrt(batch_size)``.

    ``val_loss`` in its metrics is the optimality gap ``F(w) - F(w*)``.
    """

    samples_per_epoch = None

    def __init__(self, quad: QuadClientSet, noise_std: float = 0.0, batch_size: int = 1):
        self.quad = quad
        self.noise = noise_std / math.sqrt(batch_size)

    @property
    def dim(self) -> int:
        return self.quad.dim

    @property
    def num_clients(self) -> int:
        return self.quad.m

    def init_weights(self) -> np.ndarray:
        return np.zeros(self.dim)

    def client_grad(self, i: int, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        g = self.quad.client_grad(i, w)
        if self.noise > 0:
            g = g + self.noise * rng.standard_normal(self.dim)
        return g

    def client_full_grad(self, i: int, w: np.ndarray) -> np.ndarray:
        return self.quad.client_grad(i, w)

    def evaluate(self, w: np.ndarray) -> dict:
        f = self.quad.loss(w)
        return {
            "train_loss": f,
            "val_loss": f - self.quad.f_star,
            "val_acc": 0.0,
            "grad_norm": float(np.linalg.norm(self.quad.grad(w))),
        }


class DatasetProblem:
    def __init__(self, spec: models.ModelSpec, train: Dataset, part: Partition, val: Dataset | None,
                 batch_size: int, init_rng: RngStream):
        self.spec = spec
        self.train = train
        self.part = part
        self.val = val
        self.batch_size = batch_size
        self.init_rng = init_rng
        self.client_data = [train.batch(idx) for idx in part.assignments]
        smallest = min(part.sizes())
        if batch_size > smallest:
            raise ConfigError(f"batch_size {batch_size} exceeds the smallest client shard ({smallest})")

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def num_clients(self) -> int:
        return self.part.num_clients

    @property
    def samples_per_epoch(self) -> int:
        return len(self.train)

    def init_weights(self) -> np.ndarray:
        return self.spec.init(self.init_rng)

    def client_grad(self, i: int, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        batch = next_batch(self.train, self.part, i, self.batch_size, rng)
        return models.grad(self.spec, w, batch)

    def client_full_grad(self, i: int, w: np.ndarray) -> np.ndarray:
        return models.grad(self.spec, w, self.client_data[i])

    def evaluate(self, w: np.ndarray) -> dict:
        # global objective is the unweighted mean of client objectives
        train_loss = float(np.mean([models.loss(self.spec, w, b) for b in self.client_data]))
        g = mean_vectors([models.grad(self.spec, w, b) for b in self.client_data])
        held_out = self.val.batch() if self.val is not None else self.train.batch()
        val_acc = models.accuracy(self.spec, w, held_out) if self.spec.is_classifier else 0.0
        return {
            "train_loss": train_loss,
            "val_loss": models.loss(self.spec, w, held_out),
            "val_acc": val_acc,
            "grad_norm": float(np.linalg.norm(g)),
        }


def build_problem(cfg: ExperimentConfig):
    root = RngStream(cfg.seed)
    d = cfg.data
    if d.source == "quadratic":
        quad = gen_quadratics(cfg.num_clients, d.d, d.mu, d.L_q, d.hetero, root.derive("data/quadratic"))
        return QuadProblem(quad, d.noise_std, cfg.batch_size)

    spec = cfg.model
    val = None
    if d.source == "blobs":
        data = gen_blobs(spec.num_classes, spec.input_dim, d.n, d.spread, root.derive("data/blobs"))
        train, val = train_val_split(data, d.val_fraction, root.derive("data/split"))
    else:
        k = spec.num_classes if spec.is_classifier else 1
        train = load_dataset(d.path, k)
        if d.val_path:
            val = load_dataset(d.val_path, k)
        else:
            train, val = train_val_split(train, d.val_fraction, root.derive("data/split"))
    if train.dim != spec.input_dim:
        raise ConfigError(f"dataset has {train.dim} features, model.input_dim is {spec.input_dim}")
    part = partition(train, d.partition, cfg.num_clients, root.derive("data/partition"))
    return DatasetProblem(spec, train, part, val, cfg.batch_size, root.derive("init"))


# accounting and schedules -------------------------------------------------------

def comm_bytes(algorithm: str, d: int, num_sampled: int, local_steps: int = 1,
               first_moment_sync: str = "zero") -> tuple[int, int]:
    """Per-round (uplink, downlink) bytes with 8-byte reals."""
    if d < 1:
        raise ConfigError("d must be >= 1")
    unit = REAL_BYTES * d * num_sampled
    if algorithm in ("fedavg", "fedadagrad", "fedadam", "prefedopt"):
        return unit, unit
    if algorithm == "prefed":
        vectors = 3 if first_moment_sync == "average" else 2
        return vectors * unit, vectors * unit
    if algorithm == "adaalter":
        return 2 * unit, 2 * unit
    if algorithm == "basic_prefed":
        # one gradient up and one mean down per local step, plus the model exchange
        return (local_steps + 1) * unit, (local_steps + 1) * unit
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def lr_at(base: float, decay_factor: float, decay_every: int, epoch: int) -> float:
    if decay_every < 1:
        raise ConfigError("decay_every must be >= 1")
    return base * decay_factor ** (epoch // decay_every)


def sample_clients(m: int, fraction: float, rng: RngStream) -> list[int]:
    """``ceil(m * fraction)`` distinct ids drawn uniformly, returned sorted."""
    k = math.ceil(m * fraction)
    if not 1 <= k <= m:
        raise ConfigError(f"sample fraction {fraction} selects {k} of {m} clients")
    if k == m:
        return list(range(m))
    return sorted(int(i) for i in rng.generator().choice(m, size=k, replace=False))


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


# state --------------------------------------------------------------------------

@dataclass
class ServerState:
    w: np.ndarray
    t: int = 0
    precond: PrecondState | None = None   # prefedopt server preconditioner
    adam_m: np.ndarray | None = None
    v: np.ndarray | None = None           # fedadagrad / fedadam second moment
    client_P: np.ndarray | None = None    # prefed synchronised preconditioner
    client_v: np.ndarray | None = None    # adaalter synchronised accumulator
    client_m: np.ndarray | None = None    # prefed averaged first moment
    carried_m: dict = field(default_factory=dict)
    basic_P: dict = field(default_factory=dict)
    uplink_bytes: int = 0
    downlink_bytes: int = 0


@dataclass
class ClientResult:
    client: int
    w: np.ndarray
    extra: np.ndarray | None
    moment: np.ndarray | None
    sq_dist: list[float]


@dataclass
class RoundInfo:
    t: int
    sampled: list[int]
    w_before: np.ndarray
    clients: dict[int, ClientResult]
    divergence: float
    record: MetricsRecord | None


def _finite(x: np.ndarray, t: int, client: int, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ClientFailure(t, client, f"non-finite {what}")


def local_train(problem, cfg: ExperimentConfig, server: ServerState, client: int,
                eta_l: float, rng: RngStream) -> ClientResult:
    """Run ``K`` local steps of the configured client optimizer from ``server.w``."""
    opt = cfg.local_opt
    gen = rng.generator()
    w0 = server.w
    w = w0.copy()
    velocity = np.zeros_like(w)
    v_acc = server.client_v.copy() if opt.kind == "adaalter" else None
    pstate = None
    if opt.kind == "prefed":
        if opt.first_moment_sync == "average":
            m0 = server.client_m.copy()
        elif opt.first_moment_sync == "carry":
            m0 = server.carried_m.get(client, np.zeros_like(w)).copy()
        else:
            m0 = np.zeros_like(w)
        pstate = PrecondState(m0, server.client_P.copy(), opt.beta1, opt.beta2, opt.tau, "ema")

    sq_dist = []
    for _ in range(cfg.local_steps):
        g = problem.client_grad(client, w, gen)
        _finite(g, server.t, client, "gradient")
        if opt.kind == "sgd":
            w = sgd_step(w, g, eta_l)
        elif opt.kind == "sgd_momentum":
            w, velocity = sgd_momentum_step(w, velocity, g, eta_l, opt.momentum)
        elif opt.kind == "adaalter":
            w, v_acc = adaalter_local_step(w, v_acc, g, eta_l, opt.tau)
        elif opt.kind == "prefed":
            w, pstate = prefed_local_step(w, pstate, g, eta_l)
        else:
            raise ConfigError(f"local optimizer {opt.kind!r} cannot run independently")
        _finite(w, server.t, client, "weights")
        diff = w - w0
        sq_dist.append(float(diff @ diff))

    if opt.kind == "prefed":
        return ClientResult(client, w, pstate.P, pstate.m, sq_dist)
    return ClientResult(client, w, v_acc, None, sq_dist)


class Simulation:
    """One federated experiment; call :meth:`run` for the metrics stream."""

    def __init__(self, cfg: ExperimentConfig, problem=None, threads: int | None = None):
        validate(cfg)
        self.cfg = cfg
        self.problem = problem if problem is not None else build_problem(cfg)
        if self.problem.num_clients != cfg.num_clients:
            raise ConfigError("problem client count differs from num_clients")
        self.root = RngStream(cfg.seed)
        self.threads = thread_count() if threads is None else threads
        d = self.problem.dim
        self.server = ServerState(w=self.problem.init_weights())
        kind = cfg.server_opt.kind
        if kind == "prefedopt":
            self.server.precond = PrecondState.zeros(
                d, beta1=cfg.server_opt.beta1, beta2=cfg.server_opt.beta2, tau=cfg.server_opt.tau, mode="ema"
            )
        if kind in ("fedadagrad", "fedadam"):
            self.server.v = np.zeros(d)
        if kind == "fedadam":
            self.server.adam_m = np.zeros(d)
        if cfg.algorithm == "prefed":
            self.server.client_P = np.zeros(d)
            self.server.client_m = np.zeros(d)
        if cfg.algorithm == "adaalter":
            self.server.client_v = np.zeros(d)
        self.round_bytes = comm_bytes(
            cfg.algorithm, d, cfg.num_sampled, cfg.local_steps, cfg.local_opt.first_moment_sync
        )

    def epoch_of(self, t: int) -> int:
        per_epoch = self.problem.samples_per_epoch
        if per_epoch is None:
            return t
        processed = t * self.cfg.num_sampled * self.cfg.local_steps * self.cfg.batch_size
        return processed // per_epoch

    def learning_rates(self, t: int) -> tuple[float, float]:
        s, e = self.cfg.lr_schedule, self.epoch_of(t)
        eta_l = lr_at(self.cfg.local_opt.eta_l, s.local_decay_factor, s.local_decay_every, e)
        eta_g = lr_at(self.cfg.server_opt.eta_g, s.server_decay_factor, s.server_decay_every, e)
        return eta_l, eta_g

    def _train_clients(self, sampled: list[int], eta_l: float, executor) -> dict[int, ClientResult]:
        t = self.server.t
        streams = {i: self.root.derive(f"round/{t}/client/{i}") for i in sampled}
        if self.cfg.local_opt.kind == "basic_prefed":
            return self._train_basic(sampled, eta_l, streams)

        def body(i):
            return local_train(self.problem, self.cfg, self.server, i, eta_l, streams[i])

        if executor is None:
            results = [body(i) for i in sampled]
        else:
            results = list(executor.map(body, sampled))
        return {r.client: r for r in results}

    def _train_basic(self, sampled, eta_l, streams) -> dict[int, ClientResult]:
        t, opt = self.server.t, self.cfg.local_opt
        gens = [streams[i].generator() for i in sampled]
        ws = [self.server.w.copy() for _ in sampled]
        states = [
            self.server.basic_P.get(i) or PrecondState.zeros(self.problem.dim, tau=opt.tau, mode="accumulate")
            for i in sampled
        ]
        sq = [[] for _ in sampled]
        for _ in range(self.cfg.local_steps):
            gs = []
            for j, i in enumerate(sampled):
                g = self.problem.client_grad(i, ws[j], gens[j])
                _finite(g, t, i, "gradient")
                gs.append(g)
            ws, states = basic_prefed_step(ws, gs, states, eta_l, opt.tau)
            for j, i in enumerate(sampled):
                _finite(ws[j], t, i, "weights")
                diff = ws[j] - self.server.w
                sq[j].append(float(diff @ diff))
        for i, ps in zip(sampled, states):
            self.server.basic_P[i] = ps
        return {i: ClientResult(i, ws[j], states[j].P, None, sq[j]) for j, i in enumerate(sampled)}

    def _aggregate(self, results: dict[int, ClientResult], eta_g: float) -> np.ndarray:
        cfg, srv = self.cfg, self.server
        w_t = srv.w
        kind = cfg.server_opt.kind
        if kind == "average":
            if cfg.algorithm == "prefed":
                srv.client_P = mean_vectors({i: r.extra for i, r in results.items()})
                if cfg.local_opt.first_moment_sync == "average":
                    srv.client_m = mean_vectors({i: r.moment for i, r in results.items()})
                elif cfg.local_opt.first_moment_sync == "carry":
                    srv.carried_m.update({i: r.moment for i, r in results.items()})
            elif cfg.algorithm == "adaalter":
                srv.client_v = mean_vectors({i: r.extra for i, r in results.items()})
            return mean_vectors({i: r.w for i, r in results.items()})

        deltas = {i: r.w - w_t for i, r in results.items()}
        scfg = replace(cfg.server_opt, eta_g=eta_g)
        K = cfg.local_steps
        if kind == "fedadagrad":
            w, srv.v = server_fedadagrad(w_t, srv.v, deltas, scfg, K)
        elif kind == "fedadam":
            w, srv.adam_m, srv.v = server_fedadam(w_t, srv.adam_m, srv.v, deltas, scfg, K)
        else:
            w, srv.precond = server_prefedopt(w_t, srv.precond, deltas, K, scfg)
        return w

    def run_round(self, executor=None) -> RoundInfo:
        cfg, srv = self.cfg, self.server
        t = srv.t
        if t >= cfg.rounds:
            raise ConfigError("all rounds already completed")
        sampled = sample_clients(cfg.num_clients, cfg.sample_fraction, self.root.derive(f"round/{t}/sample"))
        eta_l, eta_g = self.learning_rates(t)
        w_before = srv.w
        results = self._train_clients(sampled, eta_l, executor)
        divergence = max(
            float(np.mean([results[i].sq_dist[k] for i in sampled])) for k in range(cfg.local_steps)
        )
        srv.w = self._aggregate(results, eta_g)
        up, down = self.round_bytes
        srv.uplink_bytes += up
        srv.downlink_bytes += down
        srv.t = t + 1

        record = None
        if srv.t % cfg.eval_every == 0:
            ev = self.problem.evaluate(srv.w)
            if not all(math.isfinite(v) for v in ev.values()):
                raise ClientFailure(t, -1, "non-finite evaluation metrics")
            record = MetricsRecord(
                round=srv.t, divergence=divergence,
                uplink_bytes=srv.uplink_bytes, downlink_bytes=srv.downlink_bytes,
                eta_l_effective=eta_l, eta_g_effective=eta_g, **ev,
            )
        return RoundInfo(t, sampled, w_before, results, divergence, record)

    def rounds(self):
        """Yield a :class:`RoundInfo` per round until the configured ``T``."""
        executor = None
        if self.threads > 1 and self.cfg.num_sampled > 1 and self.cfg.local_opt.kind != "basic_prefed":
            executor = ThreadPoolExecutor(max_workers=self.threads)
        try:
            while self.server.t < self.cfg.rounds:
                yield self.run_round(executor)
        finally:
            if executor is not None:
                executor.shutdown()

    def run(self):
        for info in self.rounds():
            if info.record is not None:
                yield info.record


def run_experiment(cfg: ExperimentConfig, **kwargs) -> list[MetricsRecord]:
    return list(Simulation(cfg, **kwargs).run())
