"""Finite classical two-time processes and their memory structure.

A process here is a "comb": a prior over a finite latent space, one latent
transition kernel per instrument label, and an observation kernel pushing
latent states to a finite observable space.  Kernels are column-stochastic
matrices (column j = the distribution of the target given source state j),
so composition is plain matrix multiplication and distributions are column
vectors acted on from the left.

The module supports the two constructions used by the verification suite:

* processes where the second step factors through the observable by
  construction, so one fixed channel maps every one-step observable law to
  the two-step law (no distinguishability can flow back); and
* product-space processes (parameter component x buffer component) with a
  break kernel that resets the buffer, together with a lifting kernel from
  observables back to latent states, which makes the same factorization
  explicit after the break.

Brute-force checks against path enumeration live in the test suite.
"""

from dataclasses import dataclass, field

import numpy as np

from .divergences import KINDS, div_row

_STOCH_TOL = 1e-12


@dataclass(frozen=True)
class Space:
    """A labeled finite space."""

    name: str
    labels: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.labels)


def _check_stochastic(matrix: np.ndarray, what: str) -> None:
    if matrix.ndim != 2:
        raise ValueError(f"{what}: matrix must be 2-D")
    if np.any(matrix < -_STOCH_TOL):
        raise ValueError(f"{what}: negative entries")
    col_sums = matrix.sum(axis=0)
    if np.any(np.abs(col_sums - 1.0) > _STOCH_TOL):
        worst = float(np.max(np.abs(col_sums - 1.0)))
        raise ValueError(f"{what}: columns do not sum to 1 (max deviation {worst:.3e})")


@dataclass(frozen=True)
class Kernel:
    """Column-stochastic map between labeled finite spaces."""

    matrix: np.ndarray
    from_space: Space
    to_space: Space

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        if m.shape != (self.to_space.size, self.from_space.size):
            raise ValueError(
                f"kernel shape {m.shape} does not match "
                f"{self.from_space.name}->{self.to_space.name} "
                f"({self.to_space.size}x{self.from_space.size})"
            )
        _check_stochastic(m, f"kernel {self.from_space.name}->{self.to_space.name}")

    def apply(self, dist: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(dist, dtype=np.float64)


def identity_kernel(space: Space) -> Kernel:
    return Kernel(np.eye(space.size), space, space)


def link(k2: Kernel, k1: Kernel) -> Kernel:
    """Compose kernels: first k1, then k2."""
    if k1.to_space != k2.from_space:
        raise ValueError(
            f"space mismatch: {k1.to_space.name} (output of first) vs "
            f"{k2.from_space.name} (input of second)"
        )
    return Kernel(k2.matrix @ k1.matrix, k1.from_space, k2.to_space)


@dataclass(frozen=True)
class Comb:
    """Two-time process: prior, per-instrument latent kernels, observation.

    ``break_kernel``, when present, is the latent map applied between the
    first and second instrument to sever the memory channel (for product
    spaces: keep the parameter component, reset the buffer component).
    """

    state_space: Space
    obs_space: Space
    prior: np.ndarray
    instrument_kernels: dict[str, Kernel]
    observation: Kernel
    break_kernel: Kernel | None = None

    def __post_init__(self):
        prior = np.asarray(self.prior, dtype=np.float64)
        object.__setattr__(self, "prior", prior)
        if prior.shape != (self.state_space.size,):
            raise ValueError("prior length does not match state space")
        _check_stochastic(prior[:, None], "prior")
        for label, kern in self.instrument_kernels.items():
            if kern.from_space != self.state_space or kern.to_space != self.state_space:
                raise ValueError(f"instrument {label!r} does not act on the state space")
        if self.observation.from_space != self.state_space:
            raise ValueError("observation kernel does not read the state space")
        if self.observation.to_space != self.obs_space:
            raise ValueError("observation kernel does not write the observable space")
        if self.break_kernel is not None and (
            self.break_kernel.from_space != self.state_space
            or self.break_kernel.to_space != self.state_space
        ):
            raise ValueError("break kernel does not act on the state space")

    def kernel(self, label: str) -> Kernel:
        try:
            return self.instrument_kernels[label]
        except KeyError:
            raise KeyError(f"unknown instrument label {label!r}") from None


def _renorm(dist: np.ndarray) -> np.ndarray:
    total = dist.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("distribution is not normalizable")
    return dist / total


def two_time_laws(
    comb: Comb, i0: str, i1: str, break_before_second: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """One- and two-step observable laws for the instrument pair (i0, i1)."""
    pi1 = comb.kernel(i0).apply(comb.prior)
    phi1 = comb.observation.apply(pi1)
    mid = pi1
    if break_before_second:
        if comb.break_kernel is None:
            raise ValueError("comb has no configured break kernel")
        mid = comb.break_kernel.apply(pi1)
    pi2 = comb.kernel(i1).apply(mid)
    phi2 = comb.observation.apply(pi2)
    return _renorm(phi1), _renorm(phi2)


def channel_from_break(comb: Comb, b_label: str, lifting: Kernel) -> Kernel:
    """Observable channel O . (K_B . break) . R induced by the broken process.

    ``lifting`` maps observables back to latent states; with a valid lifting
    the returned channel reproduces every post-B observable law from the
    corresponding mid-time observable law.
    """
    if comb.break_kernel is None:
        raise ValueError("comb has no configured break kernel")
    if lifting.from_space != comb.obs_space or lifting.to_space != comb.state_space:
        raise ValueError("lifting kernel must map observables to latent states")
    broken_b = link(comb.kernel(b_label), comb.break_kernel)
    return link(comb.observation, link(broken_b, lifting))


@dataclass
class NoBackflowReport:
    """Result of checking that no instrument pair gains distinguishability."""

    applicable: bool
    omc_residual: float
    max_delta: float
    note: str = ""
    deltas: list[tuple[str, str, str, float]] = field(default_factory=list)


def verify_no_backflow(
    comb: Comb,
    instrument_pairs: list[tuple[str, str]],
    b_label: str,
    lambda_b: Kernel,
    kinds: tuple[str, ...] = KINDS,
    break_before_second: bool = False,
    omc_tol: float = 1e-10,
) -> NoBackflowReport:
    """Check the single-channel condition and the resulting no-back-flow bound.

    First verifies that ``lambda_b`` maps each one-step law to the matching
    two-step law (within ``omc_tol`` in total variation) for every instrument
    appearing in the pairs.  If that precondition fails, the report is marked
    not applicable.  Otherwise reports the largest D2 - D1 over all pairs and
    divergence kinds.
    """
    labels = sorted({lbl for pair in instrument_pairs for lbl in pair})
    laws = {
        lbl: two_time_laws(comb, lbl, b_label, break_before_second=break_before_second)
        for lbl in labels
    }
    residual = 0.0
    for lbl in labels:
        phi1, phi2 = laws[lbl]
        predicted = _renorm(lambda_b.apply(phi1))
        residual = max(residual, float(0.5 * np.abs(predicted - phi2).sum()))
    if residual > omc_tol:
        return NoBackflowReport(
            applicable=False,
            omc_residual=residual,
            max_delta=float("nan"),
            note="single-channel condition not satisfied; bound not applicable",
        )

    report = NoBackflowReport(applicable=True, omc_residual=residual, max_delta=-np.inf)
    for a, a_prime in instrument_pairs:
        phi1_a, phi2_a = laws[a]
        phi1_ap, phi2_ap = laws[a_prime]
        for kind in kinds:
            delta = div_row(kind, phi2_a, phi2_ap) - div_row(kind, phi1_a, phi1_ap)
            report.deltas.append((a, a_prime, kind, delta))
            report.max_delta = max(report.max_delta, delta)
    return report


def search_backflow_witness(
    comb: Comb,
    instrument_pairs: list[tuple[str, str]],
    b_label: str,
    kinds: tuple[str, ...] = KINDS,
    break_before_second: bool = False,
) -> tuple[tuple[str, str], str, float]:
    """Largest D2 - D1 over the supplied pairs; positive values exhibit memory."""
    best = (instrument_pairs[0], kinds[0], -np.inf)
    for pair in instrument_pairs:
        phi1_a, phi2_a = two_time_laws(comb, pair[0], b_label, break_before_second)
        phi1_ap, phi2_ap = two_time_laws(comb, pair[1], b_label, break_before_second)
        for kind in kinds:
            delta = div_row(kind, phi2_a, phi2_ap) - div_row(kind, phi1_a, phi1_ap)
            if delta > best[2]:
                best = (pair, kind, delta)
    return best


# ---------------------------------------------------------------------------
# Constructors for product spaces, breaks, and randomized verification runs.


def product_state_space(n_theta: int, n_upsilon: int) -> Space:
    """Latent space of (parameter, buffer) pairs, parameter-major ordering."""
    labels = tuple(f"t{i}u{j}" for i in range(n_theta) for j in range(n_upsilon))
    return Space(f"S({n_theta}x{n_upsilon})", labels)


def buffer_reset_kernel(n_theta: int, n_upsilon: int) -> Kernel:
    """Deterministic map (theta, upsilon) -> (theta, 0) on a product space."""
    space = product_state_space(n_theta, n_upsilon)
    m = np.zeros((space.size, space.size))
    for i in range(n_theta):
        for j in range(n_upsilon):
            m[i * n_upsilon + 0, i * n_upsilon + j] = 1.0
    return Kernel(m, space, space)


def theta_readout_kernel(n_theta: int, n_upsilon: int) -> Kernel:
    """Observation that reveals the parameter component exactly."""
    state = product_state_space(n_theta, n_upsilon)
    obs = Space(f"Theta({n_theta})", tuple(f"t{i}" for i in range(n_theta)))
    m = np.zeros((n_theta, state.size))
    for i in range(n_theta):
        for j in range(n_upsilon):
            m[i, i * n_upsilon + j] = 1.0
    return Kernel(m, state, obs)


def theta_lifting_kernel(n_theta: int, n_upsilon: int) -> Kernel:
    """Lifting theta -> (theta, 0); right inverse of the parameter readout."""
    state = product_state_space(n_theta, n_upsilon)
    obs = Space(f"Theta({n_theta})", tuple(f"t{i}" for i in range(n_theta)))
    m = np.zeros((state.size, n_theta))
    for i in range(n_theta):
        m[i * n_upsilon + 0, i] = 1.0
    return Kernel(m, obs, state)


def random_stochastic(rng: np.random.Generator, n_to: int, n_from: int) -> np.ndarray:
    m = rng.random((n_to, n_from)) + 1e-3
    return m / m.sum(axis=0, keepdims=True)


def random_prior(rng: np.random.Generator, n: int) -> np.ndarray:
    p = rng.random(n) + 1e-3
    return p / p.sum()


B_LABEL = "B"


def random_factoring_comb(
    rng: np.random.Generator,
    max_states: int = 6,
    max_obs: int = 4,
    n_instruments: int = 5,
) -> tuple[Comb, str, Kernel]:
    """Random comb whose second step factors through the observable.

    The kernel for the second instrument is built as (lift back from the
    observable) after (observe), so a single observable channel reproduces
    the two-step law for every first instrument by construction.
    """
    n_s = int(rng.integers(2, max_states + 1))
    n_o = int(rng.integers(2, max_obs + 1))
    state = Space(f"S{n_s}", tuple(f"s{i}" for i in range(n_s)))
    obs = Space(f"O{n_o}", tuple(f"o{i}" for i in range(n_o)))
    observation = Kernel(random_stochastic(rng, n_o, n_s), state, obs)
    lift = Kernel(random_stochastic(rng, n_s, n_o), obs, state)
    kernels = {
        f"I{i}": Kernel(random_stochastic(rng, n_s, n_s), state, state)
        for i in range(n_instruments)
    }
    kernels[B_LABEL] = link(lift, observation)
    comb = Comb(
        state_space=state,
        obs_space=obs,
        prior=random_prior(rng, n_s),
        instrument_kernels=kernels,
        observation=observation,
    )
    lambda_b = link(observation, lift)
    return comb, B_LABEL, lambda_b


def random_break_comb(
    rng: np.random.Generator,
    max_theta: int = 4,
    max_upsilon: int = 3,
    n_instruments: int = 5,
) -> tuple[Comb, str, Kernel]:
    """Random product-space comb where the buffer reset restores the channel.

    The observation reveals the parameter component, the break resets the
    buffer, and the lifting sends an observed parameter to (parameter, 0);
    the observable channel O . (K_B . break) . R then holds exactly for any
    second-step kernel.
    """
    n_t = int(rng.integers(2, max_theta + 1))
    n_u = int(rng.integers(2, max_upsilon + 1))
    state = product_state_space(n_t, n_u)
    observation = theta_readout_kernel(n_t, n_u)
    kernels = {
        f"I{i}": Kernel(random_stochastic(rng, state.size, state.size), state, state)
        for i in range(n_instruments)
    }
    kernels[B_LABEL] = Kernel(random_stochastic(rng, state.size, state.size), state, state)
    comb = Comb(
        state_space=state,
        obs_space=observation.to_space,
        prior=random_prior(rng, state.size),
        instrument_kernels=kernels,
        observation=observation,
        break_kernel=buffer_reset_kernel(n_t, n_u),
    )
    lambda_b = channel_from_break(comb, B_LABEL, theta_lifting_kernel(n_t, n_u))
    return comb, B_LABEL, lambda_b


def instrument_pairs(comb: Comb, exclude: tuple[str, ...] = (B_LABEL,)) -> list[tuple[str, str]]:
    labels = sorted(lbl for lbl in comb.instrument_kernels if lbl not in exclude)
    return [(a, b) for i, a in enumerate(labels) for b in labels[i + 1 :]]


def memoryful_demo_comb(flip_prob: float = 0.3) -> tuple[Comb, tuple[str, str], str]:
    """Hand-built four-state process with strictly positive back-flow.

    The buffer stores which first instrument ran; both instruments induce the
    same parameter law (so the mid-time observables coincide), but the second
    step routes on the buffer, separating the branches only after it acts.
    Applying the buffer reset provably removes the effect.
    """
    n_t, n_u = 2, 2
    state = product_state_space(n_t, n_u)
    observation = theta_readout_kernel(n_t, n_u)

    def first_step(buffer_value: int) -> Kernel:
        m = np.zeros((state.size, state.size))
        for i in range(n_t):
            for j in range(n_u):
                src = i * n_u + j
                m[i * n_u + buffer_value, src] += 1.0 - flip_prob
                m[(1 - i) * n_u + buffer_value, src] += flip_prob
        return Kernel(m, state, state)

    b_matrix = np.zeros((state.size, state.size))
    for i in range(n_t):
        # buffer 0: keep the parameter; buffer 1: flip it.
        b_matrix[i * n_u + 0, i * n_u + 0] = 1.0
        b_matrix[(1 - i) * n_u + 1, i * n_u + 1] = 1.0
    kernels = {"A": first_step(0), "Aprime": first_step(1), B_LABEL: Kernel(b_matrix, state, state)}

    prior = np.zeros(state.size)
    prior[0] = 1.0
    comb = Comb(
        state_space=state,
        obs_space=observation.to_space,
        prior=prior,
        instrument_kernels=kernels,
        observation=observation,
        break_kernel=buffer_reset_kernel(n_t, n_u),
    )
    return comb, ("A", "Aprime"), B_LABEL
