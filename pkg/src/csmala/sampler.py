"""MALA, stochastic MALA and corrected stochastic MALA kernels.

The three variants share one kernel and differ only in how the risk that
enters the Metropolis-Hastings ratio is computed:

* ``mala``   -- empirical risk on the full sample (drift still uses the
  Bernoulli batch gradient);
* ``smala``  -- ``(1/(n rho)) sum_i z_i loss_i``;
* ``csmala`` -- ``(1/n) sum_i z_i loss_i + zeta log(rho)/lambda |Z|``.

All acceptance arithmetic is done in log space. A rejected proposal keeps
the previous parameters *and* the previous batch, so the chain lives on the
joint ``(theta, z)`` space.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .risk import Mask, RiskParams, corrected_risk_from_losses

__all__ = [
    "ALGORITHMS",
    "ChainConfig",
    "ChainResult",
    "ChainState",
    "ChainStreams",
    "StepDiagnostics",
    "adapt_zeta",
    "draw_mask",
    "evaluate",
    "initial_state",
    "log_accept_prob",
    "maybe_restart",
    "propose",
    "run_chain",
    "step",
    "preset_config",
]

ALGORITHMS = ("mala", "smala", "csmala")


@dataclass(frozen=True)
class ChainConfig:
    """Tuning parameters of one chain.

    ``zeta`` is the fixed correction weight, or the starting value when
    ``adapt_zeta`` is set. ``restart_patience=None`` disables restarts.
    """

    algo: str
    lam: float
    gamma: float
    s: float
    rho: float = 1.0
    zeta: float = 1.0
    adapt_zeta: bool = False
    zeta_interval: int = 100
    burn_in: int = 1
    gap: int = 1
    draws: int = 1
    restart_patience: int | None = 100
    seed: int = 0
    chain_index: int = 0

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algo!r}; choose from {ALGORITHMS}")
        if not self.lam > 0:
            raise ValueError("lam must be > 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not self.s > 0:
            raise ValueError("s must be > 0")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")
        for name in ("burn_in", "gap", "draws", "zeta_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.restart_patience is not None and self.restart_patience < 1:
            raise ValueError("restart_patience must be >= 1 or None")

    @property
    def total_steps(self) -> int:
        return self.burn_in + self.gap * self.draws

    def risk_params(self, zeta: float) -> RiskParams:
        return RiskParams(self.lam, self.rho, zeta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ChainConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_burn_in(rho: float) -> int:
    # the rho = 0.1 cell uses a shortened burn-in of 50000
    if math.isclose(rho, 0.1):
        return 50_000
    return int(100_000 / rho)


def preset_config(
    algo: str,
    n: int,
    rho: float,
    n_params: int,
    *,
    desk_scale: bool = False,
    seed: int = 0,
    chain_index: int = 0,
    **overrides,
) -> ChainConfig:
    """Preset hyperparameters for one ``(algorithm, rho)`` cell.

    ``desk_scale`` divides burn-in and gap by 10. Keyword overrides replace
    any field of the resulting :class:`ChainConfig`.
    """
    lam = {"mala": n, "smala": n * rho, "csmala": n * (2.0 - rho)}[algo]
    gamma = 1e-4 / rho if algo == "csmala" else 1e-4
    burn_in, gap = default_burn_in(rho), 5000
    if desk_scale:
        burn_in, gap = max(1, burn_in // 10), gap // 10
    cfg = ChainConfig(
        algo=algo,
        lam=float(lam),
        gamma=gamma,
        s=0.2 / math.sqrt(n_params),
        rho=float(rho),
        zeta=1.0 if algo == "csmala" else 0.0,
        adapt_zeta=algo == "csmala",
        burn_in=burn_in,
        gap=gap,
        draws=20,
        seed=seed,
        chain_index=chain_index,
    )
    return replace(cfg, **overrides) if overrides else cfg


class ChainStreams:
    """Three independent Philox streams derived from ``(seed, chain_index)``.

    Batch draws, proposal noise and acceptance uniforms never share a stream,
    so variants that consume the same number of draws see identical randomness.
    """

    def __init__(self, seed: int, chain_index: int = 0):
        mask_ss, prop_ss, unif_ss = np.random.SeedSequence([int(seed), int(chain_index)]).spawn(3)
        self.mask = np.random.Generator(np.random.Philox(mask_ss))
        self.proposal = np.random.Generator(np.random.Philox(prop_ss))
        self.uniform = np.random.Generator(np.random.Philox(unif_ss))


class Point(NamedTuple):
    """Risk quantities at one ``(theta, z)`` pair."""

    risk: float
    grad: np.ndarray
    loss_sum: float


@dataclass(frozen=True)
class ChainState:
    theta: np.ndarray
    mask: Mask
    risk: float
    grad: np.ndarray
    loss_sum: float
    zeta: float
    step: int = 0
    steps_since_accept: int = 0
    last_accepted_theta: np.ndarray | None = None


@dataclass(frozen=True)
class StepDiagnostics:
    accepted: bool
    log_alpha: float
    mask_count: int
    risk_value: float
    restarted: bool = False
    nonfinite: bool = False

    @property
    def alpha(self) -> float:
        return math.exp(min(self.log_alpha, 0.0))


def draw_mask(n: int, rho: float, rng: np.random.Generator) -> Mask:
    """Independent ``Ber(rho)`` indicators; ``rho = 1`` returns all ones without drawing."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    if rho == 1.0:
        return Mask.full(n)
    return Mask.from_bits(rng.random(n) < rho)


def propose(state: ChainState, config: ChainConfig, rng: np.random.Generator) -> np.ndarray:
    """``theta - gamma * grad + s * w`` with ``w`` standard normal."""
    w = rng.standard_normal(state.theta.shape[0])
    return state.theta - config.gamma * state.grad + config.s * w


def evaluate(model, theta, mask: Mask, data, config: ChainConfig, zeta: float) -> Point:
    """Risk (per ``config.algo``) and drift gradient at ``(theta, mask)``.

    The drift gradient is always that of ``(1/(n rho)) sum_i z_i loss_i``.
    """
    n = data.n
    if mask.count == n:
        xs, ys = data.xs, data.ys
    else:
        xs, ys = data.xs[mask.bits], data.ys[mask.bits]
    losses, grad = model.losses_and_grad(theta, xs, ys, 1.0 / (n * config.rho))
    loss_sum = float(losses.sum())
    if config.algo == "smala":
        risk = loss_sum / (n * config.rho)
    elif config.algo == "csmala":
        risk = corrected_risk_from_losses(loss_sum, mask.count, n, config.risk_params(zeta))
    elif mask.count == n:
        risk = loss_sum / n
    else:
        risk = float(model.losses(theta, data.xs, data.ys).sum()) / n
    return Point(risk, grad, loss_sum)


def log_accept_prob(
    state: ChainState, theta_new: np.ndarray, point: Point, config: ChainConfig
) -> float:
    """Logarithm of the Metropolis-Hastings ratio before truncation at 0."""
    lam, gamma, s2 = config.lam, config.gamma, config.s * config.s
    fwd = theta_new - state.theta + gamma * state.grad
    bwd = state.theta - theta_new + gamma * point.grad
    return float(lam * (state.risk - point.risk) + (fwd @ fwd - bwd @ bwd) / (2.0 * s2))


def initial_state(model, config: ChainConfig, data, theta0, streams: ChainStreams) -> ChainState:
    theta0 = np.array(theta0, dtype=np.float64)
    if theta0.shape != (model.n_params,):
        raise ValueError(f"initial parameters have shape {theta0.shape}, expected ({model.n_params},)")
    mask = draw_mask(data.n, config.rho, streams.mask)
    point = evaluate(model, theta0, mask, data, config, config.zeta)
    state = ChainState(
        theta=theta0,
        mask=mask,
        risk=point.risk,
        grad=point.grad,
        loss_sum=point.loss_sum,
        zeta=config.zeta,
        last_accepted_theta=theta0,
    )
    if config.algo == "csmala" and config.adapt_zeta:
        state = replace_zeta(state, config, data.n, adapt_zeta(state, config, data.n))
    return state


def step(
    model, state: ChainState, config: ChainConfig, data, streams: ChainStreams
) -> tuple[ChainState, StepDiagnostics]:
    """One proposal plus accept/reject; restarts are handled by :func:`maybe_restart`."""
    mask_new = draw_mask(data.n, config.rho, streams.mask)
    theta_new = propose(state, config, streams.proposal)
    u = streams.uniform.random()

    nonfinite = False
    point = None
    if not model.in_support(theta_new):
        log_alpha = -math.inf
    else:
        point = evaluate(model, theta_new, mask_new, data, config, state.zeta)
        if not (math.isfinite(point.risk) and np.all(np.isfinite(point.grad))):
            log_alpha, nonfinite = -math.inf, True
        else:
            log_alpha = log_accept_prob(state, theta_new, point, config)
            if math.isnan(log_alpha):
                log_alpha, nonfinite = -math.inf, True

    if log_alpha == -math.inf:
        accepted = False
    else:
        accepted = log_alpha >= 0.0 or u == 0.0 or math.log(u) <= log_alpha
    if accepted:
        new_state = ChainState(
            theta=theta_new,
            mask=mask_new,
            risk=point.risk,
            grad=point.grad,
            loss_sum=point.loss_sum,
            zeta=state.zeta,
            step=state.step + 1,
            steps_since_accept=0,
            last_accepted_theta=theta_new,
        )
    else:
        new_state = replace(
            state, step=state.step + 1, steps_since_accept=state.steps_since_accept + 1
        )
    diag = StepDiagnostics(
        accepted=bool(accepted),
        log_alpha=log_alpha,
        mask_count=mask_new.count,
        risk_value=new_state.risk,
        nonfinite=nonfinite,
    )
    return new_state, diag


def adapt_zeta(state: ChainState, config: ChainConfig, n: int) -> float:
    """Correction weight that cancels the batch-size dependence of the corrected risk.

    Solves ``zeta |log rho| / lambda = R_hat / n`` with ``R_hat`` the mean loss
    over the current batch, so that ``lambda * risk`` is (to first order)
    independent of ``|Z|``. Returns the current value for ``rho = 1`` or an
    empty batch.
    """
    if config.rho >= 1.0 or state.mask.count == 0:
        return state.zeta
    mean_loss = state.loss_sum / state.mask.count
    return max(0.0, config.lam * mean_loss / (n * abs(math.log(config.rho))))


def replace_zeta(state: ChainState, config: ChainConfig, n: int, zeta: float) -> ChainState:
    """Swap in a new ``zeta`` and recompute the stored corrected risk to match."""
    if zeta == state.zeta:
        return state
    risk = corrected_risk_from_losses(state.loss_sum, state.mask.count, n, config.risk_params(zeta))
    return replace(state, zeta=zeta, risk=risk)


def maybe_restart(
    model, state: ChainState, config: ChainConfig, data, streams: ChainStreams
) -> tuple[ChainState, bool]:
    """Restart from the last accepted parameters with a fresh batch after a long rejection run.

    The global step counter is untouched, so restarts never lengthen a chain.
    """
    patience = config.restart_patience
    if patience is None or state.steps_since_accept < patience:
        return state, False
    theta = state.last_accepted_theta
    mask = draw_mask(data.n, config.rho, streams.mask)
    point = evaluate(model, theta, mask, data, config, state.zeta)
    return (
        replace(
            state,
            theta=theta,
            mask=mask,
            risk=point.risk,
            grad=point.grad,
            loss_sum=point.loss_sum,
            steps_since_accept=0,
        ),
        True,
    )


TRACE_COLUMNS = ("step", "accepted", "log_alpha", "mask_count", "risk_value", "restarted")


@dataclass
class ChainResult:
    """Retained draws and per-step diagnostics of one chain.

    ``first_draw`` is the state right after burn-in; ``draws`` holds the
    ``N`` states spaced ``gap`` steps apart after it.
    """

    config: ChainConfig
    first_draw: np.ndarray
    draws: np.ndarray
    accepted: np.ndarray
    log_alpha: np.ndarray
    mask_count: np.ndarray
    risk_value: np.ndarray
    restarted: np.ndarray
    zeta: np.ndarray
    monitor_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    monitor_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    final_state: ChainState | None = None

    @property
    def acceptance_rate(self) -> float:
        return float(np.count_nonzero(self.accepted)) / len(self.accepted)

    def accepted_batch_sizes(self) -> np.ndarray:
        return self.mask_count[self.accepted]

    def write_trace(self, path) -> Path:
        """One CSV row per step; floats use ``repr`` so reruns are byte-identical."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for k in range(len(self.accepted)):
                w.writerow(
                    (
                        k + 1,
                        int(self.accepted[k]),
                        repr(float(self.log_alpha[k])),
                        int(self.mask_count[k]),
                        repr(float(self.risk_value[k])),
                        int(self.restarted[k]),
                    )
                )
        tmp.replace(path)
        return path


def run_chain(
    model,
    config: ChainConfig,
    data,
    theta_init,
    *,
    monitor: Callable[[np.ndarray], float] | None = None,
    monitor_every: int = 1,
    streams: ChainStreams | None = None,
) -> ChainResult:
    """Run ``burn_in + gap * draws`` steps and keep the scheduled states.

    ``monitor(theta)`` is evaluated on the current parameters every
    ``monitor_every`` steps (used for validation-risk curves).
    """
    if streams is None:
        streams = ChainStreams(config.seed, config.chain_index)
    state = initial_state(model, config, data, theta_init, streams)
    T = config.total_steps
    accepted = np.zeros(T, dtype=bool)
    log_alpha = np.empty(T)
    mask_count = np.empty(T, dtype=np.int64)
    risk_value = np.empty(T)
    restarted = np.zeros(T, dtype=bool)
    zeta = np.empty(T)
    draws = np.empty((config.draws, model.n_params))
    first_draw = None
    mon_steps, mon_vals = [], []
    adapt = config.algo == "csmala" and config.adapt_zeta

    for k in range(T):
        t = k + 1
        state, diag = step(model, state, config, data, streams)
        state, did_restart = maybe_restart(model, state, config, data, streams)
        if adapt and t % config.zeta_interval == 0:
            state = replace_zeta(state, config, data.n, adapt_zeta(state, config, data.n))
        accepted[k] = diag.accepted
        log_alpha[k] = diag.log_alpha
        mask_count[k] = diag.mask_count
        risk_value[k] = state.risk
        restarted[k] = did_restart
        zeta[k] = state.zeta
        if t == config.burn_in:
            first_draw = state.theta.copy()
        elif t > config.burn_in and (t - config.burn_in) % config.gap == 0:
            draws[(t - config.burn_in) // config.gap - 1] = state.theta
        if monitor is not None and t % monitor_every == 0:
            mon_steps.append(t)
            mon_vals.append(float(monitor(state.theta)))

    return ChainResult(
        config=config,
        first_draw=first_draw,
        draws=draws,
        accepted=accepted,
        log_alpha=log_alpha,
        mask_count=mask_count,
        risk_value=risk_value,
        restarted=restarted,
        zeta=zeta,
        monitor_steps=np.asarray(mon_steps, dtype=np.int64),
        monitor_values=np.asarray(mon_vals),
        final_state=state,
    )
