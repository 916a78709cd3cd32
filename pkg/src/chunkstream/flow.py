"""Toy conditional flow-matching action expert.

Training pairs interpolate between a Gaussian draw ``eps`` and a flattened
action chunk ``A``::

    A_tau = tau * A + (1 - tau) * eps        u = eps - A

and a small MLP ``E(A_tau, c, tau)`` regresses ``u`` under a squared L2 loss.
Since ``dA_tau/dtau = -u``, sampling starts from noise at ``tau = 0`` and takes
Euler steps ``A <- A - delta * E``.

Everything is plain numpy in float64 with a hand-written backward pass.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from . import vec
from .chunk import ActionChunk
from .episode import ACTION_DIM, EpisodeLog, TickRecord
from .expert import (
    ExpertObservation,
    NoCandidates,
    ObservedObject,
    Phase,
    PHASE_ORDER,
    SelectorKind,
    TargetSpec,
    resolve_target,
)
from .sim import EndEffectorCommand, GripperCommand, ObjectStatus, SceneConfig

log = logging.getLogger(__name__)

SELECTOR_ORDER = tuple(SelectorKind)
CONDITION_DIM = 3 + 3 + 3 + 3 + len(PHASE_ORDER) + len(SELECTOR_ORDER)
PARAM_MAGIC = b"CSFLOW\x00\x00"
PARAM_VERSION = 1


class NonFiniteLoss(FloatingPointError):
    """Training diverged: the loss or its gradient is not finite."""


class EmptyDataset(ValueError):
    pass


# -- interpolant -------------------------------------------------------------


@dataclass(frozen=True)
class FlowSample:
    chunk: np.ndarray
    noise: np.ndarray
    tau: float
    noisy: np.ndarray
    target: np.ndarray


def flow_sample(chunk, noise, tau: float) -> FlowSample:
    chunk = np.asarray(chunk, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    noisy = tau * chunk + (1.0 - tau) * noise
    return FlowSample(chunk, noise, float(tau), noisy, noise - chunk)


def make_flow_sample(chunk, rng: np.random.Generator) -> FlowSample:
    chunk = np.asarray(chunk, dtype=np.float64)
    if not np.all(np.isfinite(chunk)):
        raise ValueError("chunk has non-finite entries")
    tau = float(rng.uniform(0.0, 1.0))
    noise = rng.standard_normal(chunk.shape)
    return flow_sample(chunk, noise, tau)


# -- network -------------------------------------------------------------------


def tau_embedding(tau, freqs: Sequence[float]) -> np.ndarray:
    """``[tau, sin(2 pi f tau), cos(2 pi f tau) ...]`` for each row of ``tau``."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    f = np.asarray(freqs, dtype=np.float64).reshape(1, -1)
    angle = 2.0 * np.pi * tau * f
    return np.concatenate([tau, np.sin(angle), np.cos(angle)], axis=1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MlpParams:
    """Weights ``W[i]`` of shape (fan_in, fan_out) and biases ``b[i]``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    action_dim: int
    condition_dim: int
    freqs: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    @property
    def input_dim(self) -> int:
        return self.action_dim + self.condition_dim + 1 + 2 * len(self.freqs)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> "MlpParams":
        flat = np.asarray(flat, dtype=np.float64)
        arrays, i = [], 0
        for a in self.arrays():
            arrays.append(flat[i : i + a.size].reshape(a.shape).copy())
            i += a.size
        if i != flat.size:
            raise ValueError(f"expected {i} parameters, got {flat.size}")
        return MlpParams(arrays[0::2], arrays[1::2], self.action_dim, self.condition_dim, self.freqs)

    def copy(self) -> "MlpParams":
        return self.with_flat(self.flat())

    def zeros_like(self) -> "MlpParams":
        return self.with_flat(np.zeros(self.flat().size))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(
    action_dim: int,
    condition_dim: int,
    hidden: Sequence[int] = (256, 256),
    seed: int = 0,
    freqs: Sequence[float] = (1.0, 2.0, 4.0, 8.0),
) -> MlpParams:
    rng = np.random.default_rng(seed)
    sizes = [action_dim + condition_dim + 1 + 2 * len(freqs), *hidden, action_dim]
    weights = [rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(sizes, sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    return MlpParams(weights, biases, action_dim, condition_dim, tuple(float(f) for f in freqs))


def _inputs(params: MlpParams, noisy, cond, tau) -> np.ndarray:
    noisy = np.atleast_2d(np.asarray(noisy, dtype=np.float64))
    cond = np.asarray(cond, dtype=np.float64).reshape(noisy.shape[0], params.condition_dim)
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (noisy.shape[0],))
    return np.concatenate([noisy, cond, tau_embedding(tau, params.freqs)], axis=1)


def _forward(params: MlpParams, x: np.ndarray):
    pre, act = [], [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if i == last:
            return z, pre, act
        pre.append(z)
        h = z * _sigmoid(z)  # SiLU
        act.append(h)
    raise AssertionError("unreachable")


def predict(params: MlpParams, noisy, cond, tau) -> np.ndarray:
    """Network field for a batch (rows) of noisy chunks."""
    out, _, _ = _forward(params, _inputs(params, noisy, cond, tau))
    return out


def _stack(batch):
    noisy = np.stack([s.noisy for s, _ in batch])
    target = np.stack([s.target for s, _ in batch])
    tau = np.array([s.tau for s, _ in batch])
    cond = np.stack([np.asarray(c, dtype=np.float64).reshape(-1) for _, c in batch]) if batch else None
    return noisy, cond, tau, target


def loss_and_grad_arrays(params: MlpParams, noisy, cond, tau, target) -> tuple[float, MlpParams]:
    x = _inputs(params, noisy, cond, tau)
    out, pre, act = _forward(params, x)
    n = out.shape[0]
    diff = out - target
    # per-sample sums first, so a duplicated batch reproduces the single-sample loss exactly
    loss = float(np.sum(np.sum(diff * diff, axis=1)) / n)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    g = 2.0 * diff / n
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = act[i].T @ g
        gb[i] = g.sum(axis=0)
        if i == 0:
            break
        g = g @ params.weights[i].T
        z = pre[i - 1]
        s = _sigmoid(z)
        g = g * (s * (1.0 + z * (1.0 - s)))
    grad = MlpParams(gw, gb, params.action_dim, params.condition_dim, params.freqs)
    if not grad.is_finite():
        raise NonFiniteLoss("gradient is not finite")
    return loss, grad


def loss_and_grad(params: MlpParams, batch: Sequence[tuple[FlowSample, np.ndarray]]) -> tuple[float, MlpParams]:
    """Mean over the batch of ``||E(A_tau, c, tau) - u||^2`` and its exact gradient."""
    if not batch:
        raise ValueError("batch must be non-empty")
    noisy, cond, tau, target = _stack(batch)
    return loss_and_grad_arrays(params, noisy, cond, tau, target)


# -- training -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256)
    freqs: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    horizon: int = 20
    include_failures: bool = False

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Dataset:
    conditions: np.ndarray  # (N, C)
    chunks: np.ndarray  # (N, D)

    def __post_init__(self):
        self.chunks = np.asarray(self.chunks, dtype=np.float64)
        self.conditions = np.asarray(self.conditions, dtype=np.float64)
        if self.conditions.ndim != 2:
            self.conditions = self.conditions.reshape(len(self.chunks), -1)
        if self.chunks.ndim != 2:
            raise ValueError("chunks must be a 2-D array")

    def __len__(self) -> int:
        return len(self.chunks)


@dataclass
class TrainResult:
    params: MlpParams
    losses: list[float] = field(default_factory=list)


def train(dataset: Dataset, hyper: TrainConfig | None = None, init: MlpParams | None = None) -> TrainResult:
    """Adam on the flow-matching loss with fresh noise and tau every step."""
    hyper = hyper or TrainConfig()
    if dataset is None or len(dataset) == 0:
        raise EmptyDataset("no training pairs")
    rng = np.random.default_rng(hyper.seed)
    d = dataset.chunks.shape[1]
    c = dataset.conditions.shape[1]
    params = init.copy() if init is not None else init_params(d, c, hyper.hidden, hyper.seed, hyper.freqs)
    theta = params.flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    losses = []
    for step in range(1, hyper.steps + 1):
        idx = rng.integers(0, len(dataset), size=hyper.batch)
        chunks = dataset.chunks[idx]
        tau = rng.uniform(0.0, 1.0, size=hyper.batch)
        noise = rng.standard_normal(chunks.shape)
        noisy = tau[:, None] * chunks + (1.0 - tau[:, None]) * noise
        loss, grad = loss_and_grad_arrays(params, noisy, dataset.conditions[idx], tau, noise - chunks)
        g = grad.flat()
        m = hyper.beta1 * m + (1 - hyper.beta1) * g
        v = hyper.beta2 * v + (1 - hyper.beta2) * g * g
        mhat = m / (1 - hyper.beta1**step)
        vhat = v / (1 - hyper.beta2**step)
        theta = theta - hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)
        params = params.with_flat(theta)
        losses.append(loss)
        if step % 500 == 0 or step == hyper.steps:
            log.info("step %d loss %.5f", step, loss)
    return TrainResult(params, losses)


def evaluate_loss(params: MlpParams, dataset: Dataset, samples: int = 1024, seed: int = 0) -> float:
    """Monte Carlo flow-matching loss on fixed draws of (pair, tau, noise)."""
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(dataset), size=samples)
    chunks = dataset.chunks[idx]
    tau = rng.uniform(0.0, 1.0, size=samples)
    noise = rng.standard_normal(chunks.shape)
    noisy = tau[:, None] * chunks + (1.0 - tau[:, None]) * noise
    loss, _ = loss_and_grad_arrays(params, noisy, dataset.conditions[idx], tau, noise - chunks)
    return loss


# -- sampling ---------------------------------------------------------------------


def sample_batch(params: MlpParams, conditions, steps: int = 10, seed: int = 0, count: int | None = None) -> np.ndarray:
    """Euler-integrate ``count`` chunks (one per condition row) from noise."""
    if steps < 1:
        raise ValueError("need at least one Euler step")
    conditions = np.asarray(conditions, dtype=np.float64)
    if count is None:
        count = conditions.shape[0] if conditions.ndim == 2 else 1
    if params.condition_dim == 0:
        conditions = np.zeros((count, 0))
    else:
        conditions = np.broadcast_to(conditions.reshape(-1, params.condition_dim), (count, params.condition_dim))
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((count, params.action_dim))
    delta = 1.0 / steps
    for k in range(steps):
        a = a - delta * predict(params, a, conditions, k * delta)
    return a


def sample_chunk(params: MlpParams, condition, steps: int = 10, seed: int = 0) -> np.ndarray:
    return sample_batch(params, np.asarray(condition).reshape(1, -1), steps, seed)[0]


# -- action encoding ----------------------------------------------------------------


def encode_command(cmd) -> np.ndarray:
    """8-vector: target position, quaternion (w, x, y, z), gripper (+1 close, -1 open)."""
    if cmd is None:
        raise ValueError("cannot encode a missing command")
    grip = cmd.gripper_command if hasattr(cmd, "gripper_command") else GripperCommand(cmd.gripper)
    return np.array([*cmd.target_position, *cmd.target_orientation, 1.0 if grip is GripperCommand.CLOSE else -1.0])


def decode_action(row) -> EndEffectorCommand:
    row = np.asarray(row, dtype=np.float64)
    q = row[3:7]
    n = float(np.linalg.norm(q))
    quat = vec.TOP_DOWN if n == 0.0 or not np.isfinite(n) else tuple(float(x) for x in q / n)
    return EndEffectorCommand(
        target_position=(float(row[0]), float(row[1]), float(row[2])),
        target_orientation=quat,
        gripper_command=GripperCommand.CLOSE if row[7] > 0.0 else GripperCommand.OPEN,
    )


def chunk_from_vector(flat, start_tick: int) -> ActionChunk:
    rows = np.asarray(flat, dtype=np.float64).reshape(-1, ACTION_DIM)
    return ActionChunk(start_tick=start_tick, horizon=len(rows) - 1, actions=tuple(decode_action(r) for r in rows))


# -- conditioning ------------------------------------------------------------------


def observable_phase(observation: ExpertObservation) -> Phase:
    """Phase inferable from one observation (no controller memory)."""
    if observation.end_effector.attached_object is not None:
        return Phase.APPROACH_TARGET_PLACE
    try:
        resolve_target(observation)
    except NoCandidates:
        return Phase.RESET
    return Phase.APPROACH_OBJECT


def condition_vector(observation: ExpertObservation) -> np.ndarray:
    ee = observation.end_effector.position
    try:
        target = next(o for o in observation.objects if o.id == resolve_target(observation))
        tpos, tvel = target.position, target.velocity
    except NoCandidates:
        tpos, tvel = vec.ZERO, vec.ZERO
    phase = observable_phase(observation)
    phase_hot = [1.0 if p is phase else 0.0 for p in PHASE_ORDER]
    sel_hot = [1.0 if k is observation.instruction.kind else 0.0 for k in SELECTOR_ORDER]
    out = np.array([*ee, *tpos, *tvel, *observation.target_location, *phase_hot, *sel_hot], dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite condition vector")
    return out


def observation_from_record(record: TickRecord, header_scenario: dict, scene: SceneConfig | None = None) -> ExpertObservation:
    """Rebuild the controller's view of one logged tick (true velocities)."""
    from .sim import EndEffectorState, Gripper, Pose6D

    scene = scene or SceneConfig()
    kind, value, gather = header_scenario["instruction"]
    target_location = tuple(header_scenario.get("target_location", scene.target_location))
    objects = tuple(
        ObservedObject(o.id, o.label, o.position, o.velocity, ObjectStatus(o.status))
        for o in record.objects
        if o.status != ObjectStatus.PENDING.value
    )
    e = record.end_effector
    ee = EndEffectorState(Pose6D(e.position, e.orientation), e.velocity, Gripper(e.gripper), e.attached)
    return ExpertObservation(record.tick, ee, objects, TargetSpec(SelectorKind(kind), value, gather_all=bool(gather)),
                             target_location, scene)


def dataset_from_episodes(episodes: Sequence[EpisodeLog], horizon: int = 20, include_failures: bool = False) -> Dataset:
    """One (condition, chunk) pair per commanded tick; chunks past the end repeat the last command."""
    conds, chunks = [], []
    for ep in episodes:
        if not ep.footer.success and not include_failures:
            continue
        commanded = [t for t in ep.ticks if t.command is not None and not t.command.hold]
        if not commanded:
            continue
        actions = np.stack([encode_command(t.command) for t in commanded])
        for i, t in enumerate(commanded):
            idx = np.minimum(np.arange(i, i + horizon + 1), len(commanded) - 1)
            conds.append(condition_vector(observation_from_record(t, ep.header.scenario)))
            chunks.append(actions[idx].ravel())
    if not chunks:
        return Dataset(np.zeros((0, CONDITION_DIM)), np.zeros((0, (horizon + 1) * ACTION_DIM)))
    return Dataset(np.stack(conds), np.stack(chunks))


class FlowPolicy:
    """Chunk policy that samples the learned field; plugs into the streaming runtime."""

    name = "flow"
    uses_execution_feedback = False

    def __init__(self, params: MlpParams, steps: int = 10, seed: int = 0):
        if params.action_dim % ACTION_DIM:
            raise ValueError("action dimension is not a multiple of 8")
        self.params = params
        self.horizon = params.action_dim // ACTION_DIM - 1
        self.steps = steps
        self.seed = seed

    def reset(self) -> None:
        pass

    def infer(self, observation: ExpertObservation) -> ActionChunk:
        flat = sample_chunk(self.params, condition_vector(observation), self.steps, seed=(self.seed, observation.tick))
        return chunk_from_vector(flat, observation.tick)


# -- toy data -----------------------------------------------------------------------


def bimodal_dataset(dim: int, count: int, seed: int = 0) -> Dataset:
    """Unconditional chunks equal to all +1 or all -1 with equal probability."""
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=count)
    return Dataset(np.zeros((count, 0)), signs[:, None] * np.ones((count, dim)))


def mode_assignment(samples: np.ndarray, tolerance: float = 0.25) -> np.ndarray:
    """+1 / -1 for samples within ``tolerance`` (max-abs) of a mode, 0 otherwise."""
    samples = np.atleast_2d(samples)
    out = np.zeros(len(samples), dtype=int)
    out[np.max(np.abs(samples - 1.0), axis=1) <= tolerance] = 1
    out[np.max(np.abs(samples + 1.0), axis=1) <= tolerance] = -1
    return out


# -- persistence ---------------------------------------------------------------------


def save_params(path, params: MlpParams, *, seed: int = 0, config_digest: str = "") -> None:
    header = {
        "action_dim": params.action_dim,
        "condition_dim": params.condition_dim,
        "layers": [list(w.shape) for w in params.weights],
        "freqs": list(params.freqs),
        "seed": seed,
        "config_digest": config_digest,
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<II", PARAM_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.flat().astype("<f8").tobytes())


def load_params(path) -> tuple[MlpParams, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    version, n = struct.unpack("<II", data[8:16])
    if version != PARAM_VERSION:
        raise ValueError(f"{path}: parameter file version {version}, expected {PARAM_VERSION}")
    header = json.loads(data[16 : 16 + n])
    body = np.frombuffer(data[16 + n :], dtype="<f8").astype(np.float64)
    layers = header["layers"]
    hidden = [b for _, b in layers[:-1]]
    template = init_params(header["action_dim"], header["condition_dim"], hidden, 0, header["freqs"])
    if template.flat().size != body.size:
        raise ValueError(f"{path}: expected {template.flat().size} values, found {body.size}")
    return template.with_flat(body), header
