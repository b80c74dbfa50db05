"""The two-step A/B micro-experiment and the sweep around it.

One micro-experiment starts from cached base parameters, runs k optimizer
steps under a first instrument (A or its contrast A', which differ only by
augmentation on the same batch), then k steps under a common second
instrument B.  Carrying the optimizer buffers into B is the "no break"
condition; zeroing them immediately before B is the causal break.  The
measurement is the pair of mean probe divergences before and after B,

    d1 = div(P(theta_A), P(theta_A'))      d2 = div(P(theta_AB), P(theta_A'B))

and the per-repeat back-flow delta = d2 - d1 for each divergence kind.
A positive mean delta certifies that no single fixed channel maps the
mid-time probe laws to the post-B laws.

Randomness discipline: each repeat derives its own streams from
(seed, repeat_id, tag).  The A/A' kernels share one augmentation seed (they
must differ only by kind), and B's plan and draws are common to both
branches of a repeat.  Records are pure functions of (config, seed,
repeat_id), so repeats can run in any order or in parallel.
"""

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import partial
from hashlib import sha256
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .data import Dataset, load_table, make_synthetic, split_probe
from .divergences import KINDS, div_avg
from .errors import ConfigError, NanGuardError
from .instruments import (
    AUG_KINDS,
    AugmentationKernel,
    Instrument,
    apply_augmentation,
    make_pair_A_Aprime,
    sample_batch_plan,
)
from .model import ModelSpec, forward, init_params, loss_and_grad, penultimate_features
from .optimizer import OptimizerConfig, OptimizerState, causal_break, step
from .seeding import derive_seed
from .stats import bh_fdr, bh_qvalues, bootstrap_mean_ci, normal_ci_half_width, t_test_mean, tost_equivalence

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Regime:
    """One micro-step regime: step count, optimizer knobs, augmentations, overlap."""

    name: str
    k: int
    lr: float
    momentum: float
    aug_a: str
    aug_aprime: str
    aug_b: str
    overlap: float
    same_classes: bool

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"regime {self.name!r}: k must be at least 1")
        if not self.lr > 0:
            raise ValueError(f"regime {self.name!r}: lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"regime {self.name!r}: momentum must lie in [0, 1)")
        for label, kind in (("aug_a", self.aug_a), ("aug_aprime", self.aug_aprime), ("aug_b", self.aug_b)):
            if kind not in AUG_KINDS:
                raise ValueError(f"regime {self.name!r}: {label} must be one of {AUG_KINDS}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"regime {self.name!r}: overlap must lie in [0, 1]")


REGIME_PRESETS = {
    "standard": Regime("standard", 3, 0.02, 0.90, "weak", "color", "weak", 0.5, True),
    "resonant_strong": Regime("resonant_strong", 6, 0.03, 0.99, "color", "blur", "weak", 1.0, True),
    "resonant_mid": Regime("resonant_mid", 6, 0.03, 0.95, "color", "blur", "weak", 0.75, True),
    "orthogonal": Regime("orthogonal", 6, 0.03, 0.99, "color", "blur", "blur", 0.0, False),
    "negative": Regime("negative", 1, 0.005, 0.00, "none", "none", "none", 0.0, False),
}


@dataclass(frozen=True)
class ProtocolSettings:
    """Micro-step context shared by every instrument of a run."""

    batch_size: int = 64
    weight_decay: float = 1e-4
    clip_norm: float | None = 1.0


@dataclass
class BackflowRecord:
    """Per-repeat measurement; d1/d2/delta are None when the repeat errored."""

    repeat_id: int
    seed: int
    break_applied: bool
    d1: dict[str, float] | None
    d2: dict[str, float] | None
    delta: dict[str, float] | None
    momentum_alignment: float | None = None
    retried: bool = False
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class MicroResult:
    """Detailed outcome of one micro-experiment, for diagnostics and oracles."""

    record: BackflowRecord
    plan: object = None
    instrument_a: Instrument | None = None
    instrument_aprime: Instrument | None = None
    instrument_b: Instrument | None = None
    params_mid_a: np.ndarray | None = None
    params_mid_aprime: np.ndarray | None = None
    params_end_a: np.ndarray | None = None
    params_end_aprime: np.ndarray | None = None
    velocity_mid_a: np.ndarray | None = None
    velocity_mid_aprime: np.ndarray | None = None
    first_b_params_a: np.ndarray | None = None
    first_b_params_aprime: np.ndarray | None = None
    grad_b_mid_a: np.ndarray | None = None
    lr_scale: float = 1.0


def probe_identifier(dataset: Dataset, probe_indices: np.ndarray) -> str:
    h = sha256()
    h.update(np.ascontiguousarray(probe_indices, dtype=np.int64).tobytes())
    h.update(json.dumps(dataset.provenance, sort_keys=True, default=str).encode())
    return h.hexdigest()[:12]


def _aug_kernel(kind: str, seed: int, dataset: Dataset) -> AugmentationKernel:
    """Kernel for this dataset; image datasets get the image transform forms."""
    params = {}
    if "image_shape" in dataset.provenance:
        params["image_shape"] = tuple(dataset.provenance["image_shape"])
    return AugmentationKernel(kind, seed, params)


def _run_instrument(
    spec: ModelSpec,
    params: np.ndarray,
    state: OptimizerState,
    instrument: Instrument,
    dataset: Dataset,
    base_config: OptimizerConfig,
    capture_first: bool = False,
):
    config = base_config
    if instrument.optimizer_overrides is not None:
        lr, momentum = instrument.optimizer_overrides
        config = replace(base_config, lr=lr, momentum=momentum)
    x = apply_instrument_batch(instrument, dataset)
    y = dataset.labels[instrument.batch_indices]
    first = None
    for t in range(instrument.k):
        _, grad = loss_and_grad(spec, params, x, y)
        params, state = step(params, state, grad, config)
        if t == 0 and capture_first:
            first = params.copy()
    return params, state, first


def apply_instrument_batch(instrument: Instrument, dataset: Dataset) -> np.ndarray:
    """The augmented batch an instrument trains on (fixed for its k steps)."""
    return apply_augmentation(instrument.aug, dataset.features[instrument.batch_indices])


def run_micro_experiment_detailed(
    base_params: np.ndarray,
    spec: ModelSpec,
    regime: Regime,
    break_applied: bool,
    dataset: Dataset,
    probe: np.ndarray,
    seed: int,
    settings: ProtocolSettings = ProtocolSettings(),
    repeat_id: int = 0,
) -> MicroResult:
    """One micro-experiment with intermediate states exposed.

    Retries once at half the learning rate if any loss, gradient, or update
    stops being finite; a second failure yields an error record.
    """
    try:
        return _attempt_micro(
            base_params, spec, regime, break_applied, dataset, probe, seed, settings, repeat_id, 1.0
        )
    except NanGuardError:
        pass
    try:
        result = _attempt_micro(
            base_params, spec, regime, break_applied, dataset, probe, seed, settings, repeat_id, 0.5
        )
        result.record.retried = True
        return result
    except NanGuardError as exc:
        record = BackflowRecord(
            repeat_id=repeat_id,
            seed=seed,
            break_applied=break_applied,
            d1=None,
            d2=None,
            delta=None,
            retried=True,
            error=f"nan_guard: {exc}",
        )
        return MicroResult(record=record, lr_scale=0.5)


def _attempt_micro(
    base_params, spec, regime, break_applied, dataset, probe, seed, settings, repeat_id, lr_scale
) -> MicroResult:
    plan = sample_batch_plan(
        dataset,
        settings.batch_size,
        regime.overlap,
        regime.same_classes,
        derive_seed(seed, "plan"),
    )
    overrides = (regime.lr * lr_scale, regime.momentum)
    aug_seed_first = derive_seed(seed, "aug_first")
    instr_a, instr_ap = make_pair_A_Aprime(
        plan,
        _aug_kernel(regime.aug_a, aug_seed_first, dataset),
        _aug_kernel(regime.aug_aprime, aug_seed_first, dataset),
        regime.k,
        overrides,
    )
    instr_b = Instrument(
        plan.indices_b,
        _aug_kernel(regime.aug_b, derive_seed(seed, "aug_b"), dataset),
        regime.k,
        overrides,
    )
    base_config = OptimizerConfig(
        lr=regime.lr * lr_scale,
        momentum=regime.momentum,
        weight_decay=settings.weight_decay,
        clip_norm=settings.clip_norm,
    )

    zeros = OptimizerState.zeros(base_params.size)
    params_a, state_a, _ = _run_instrument(spec, base_params.copy(), zeros, instr_a, dataset, base_config)
    params_ap, state_ap, _ = _run_instrument(
        spec, base_params.copy(), OptimizerState.zeros(base_params.size), instr_ap, dataset, base_config
    )

    probe_x = dataset.features[probe]
    pid = probe_identifier(dataset, probe)
    preds_mid_a = forward(spec, params_a, probe_x, pid)
    preds_mid_ap = forward(spec, params_ap, probe_x, pid)
    d1 = {kind: div_avg(kind, preds_mid_a, preds_mid_ap) for kind in KINDS}

    alignment = None
    grad_b_mid = None
    if not break_applied:
        xb = apply_instrument_batch(instr_b, dataset)
        _, grad_b_mid = loss_and_grad(spec, params_a, xb, dataset.labels[instr_b.batch_indices])
        alignment = diag.cosine(grad_b_mid, state_a.velocity)

    velocity_mid_a = state_a.velocity.copy()
    velocity_mid_ap = state_ap.velocity.copy()
    if break_applied:
        state_a = causal_break(state_a)
        state_ap = causal_break(state_ap)

    params_ab, _, first_a = _run_instrument(
        spec, params_a, state_a, instr_b, dataset, base_config, capture_first=True
    )
    params_apb, _, first_ap = _run_instrument(
        spec, params_ap, state_ap, instr_b, dataset, base_config, capture_first=True
    )
    preds_end_a = forward(spec, params_ab, probe_x, pid)
    preds_end_ap = forward(spec, params_apb, probe_x, pid)
    d2 = {kind: div_avg(kind, preds_end_a, preds_end_ap) for kind in KINDS}
    delta = {kind: d2[kind] - d1[kind] for kind in KINDS}

    record = BackflowRecord(
        repeat_id=repeat_id,
        seed=seed,
        break_applied=break_applied,
        d1=d1,
        d2=d2,
        delta=delta,
        momentum_alignment=alignment,
    )
    return MicroResult(
        record=record,
        plan=plan,
        instrument_a=instr_a,
        instrument_aprime=instr_ap,
        instrument_b=instr_b,
        params_mid_a=params_a,
        params_mid_aprime=params_ap,
        params_end_a=params_ab,
        params_end_aprime=params_apb,
        velocity_mid_a=velocity_mid_a,
        velocity_mid_aprime=velocity_mid_ap,
        first_b_params_a=first_a,
        first_b_params_aprime=first_ap,
        grad_b_mid_a=grad_b_mid,
        lr_scale=lr_scale,
    )


def run_micro_experiment(
    base_params: np.ndarray,
    spec: ModelSpec,
    regime: Regime,
    break_applied: bool,
    dataset: Dataset,
    probe: np.ndarray,
    seed: int,
    settings: ProtocolSettings = ProtocolSettings(),
    repeat_id: int = 0,
) -> BackflowRecord:
    """One repeat of the two-step experiment; see the module docstring."""
    return run_micro_experiment_detailed(
        base_params, spec, regime, break_applied, dataset, probe, seed, settings, repeat_id
    ).record


def run_noncommute_curve(
    base_params: np.ndarray,
    spec: ModelSpec,
    regime: Regime,
    break_applied: bool,
    dataset: Dataset,
    probe_subset: np.ndarray,
    seed: int,
    k_max: int = 6,
    settings: ProtocolSettings = ProtocolSettings(),
) -> list[tuple[int, float]]:
    """Order sensitivity: TV between A-then-B and B-then-A endpoints vs k.

    Both orders start from the same base parameters and share the repeat's
    batch plan and augmentation draws; under the break condition the buffers
    are zeroed at the switch point in both orders.
    """
    plan = sample_batch_plan(
        dataset, settings.batch_size, regime.overlap, regime.same_classes, derive_seed(seed, "plan")
    )
    overrides = (regime.lr, regime.momentum)
    base_config = OptimizerConfig(
        lr=regime.lr,
        momentum=regime.momentum,
        weight_decay=settings.weight_decay,
        clip_norm=settings.clip_norm,
    )
    aug_a = _aug_kernel(regime.aug_a, derive_seed(seed, "aug_first"), dataset)
    aug_b = _aug_kernel(regime.aug_b, derive_seed(seed, "aug_b"), dataset)
    probe_x = dataset.features[probe_subset]
    pid = probe_identifier(dataset, probe_subset)

    curve = []
    for k in range(1, k_max + 1):
        instr_a = Instrument(plan.indices_a, aug_a, k, overrides)
        instr_b = Instrument(plan.indices_b, aug_b, k, overrides)
        endpoints = []
        for first, second in ((instr_a, instr_b), (instr_b, instr_a)):
            params, state, _ = _run_instrument(
                spec, base_params.copy(), OptimizerState.zeros(base_params.size), first, dataset, base_config
            )
            if break_applied:
                state = causal_break(state)
            params, _, _ = _run_instrument(spec, params, state, second, dataset, base_config)
            endpoints.append(forward(spec, params, probe_x, pid))
        curve.append((k, div_avg("tv", endpoints[0], endpoints[1])))
    return curve


def pretrain(
    spec: ModelSpec,
    params: np.ndarray,
    dataset: Dataset,
    passes: int = 3,
    batch_size: int = 64,
    seed: int = 0,
    lr: float = 0.1,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> np.ndarray:
    """Short base-training run over the train split (the "early" stage)."""
    rng = np.random.default_rng(seed)
    config = OptimizerConfig(lr=lr, momentum=momentum, weight_decay=weight_decay, clip_norm=1.0)
    state = OptimizerState.zeros(params.size)
    params = params.copy()
    for _ in range(passes):
        order = rng.permutation(dataset.train_indices)
        for start in range(0, len(order) - batch_size + 1, batch_size):
            batch = order[start : start + batch_size]
            _, grad = loss_and_grad(spec, params, dataset.features[batch], dataset.labels[batch])
            params, state = step(params, state, grad, config)
    return params


# ---------------------------------------------------------------------------
# Repeat collection with the early-stop discipline.


@dataclass(frozen=True)
class EarlyStopPolicy:
    """Stop a cell once the mean TV delta is pinned down tightly enough.

    After at least ``floor`` repeats, every ``stride`` repeats the
    normal-approximation 95% CI half-width of the mean TV delta is compared
    against ``half_width``.
    """

    enabled: bool = True
    floor: int = 64
    stride: int = 32
    half_width: float = 2e-4


def collect_with_early_stop(
    sample_fn,
    max_repeats: int,
    policy: EarlyStopPolicy = EarlyStopPolicy(),
    executor: ProcessPoolExecutor | None = None,
) -> tuple[list[BackflowRecord], bool]:
    """Run ``sample_fn(repeat_id)`` for up to ``max_repeats`` repeats.

    Returns the records and whether the early-stop rule fired.  Errored
    repeats are kept in the list (for the logs) but excluded from the
    half-width check.
    """
    checkpoints = []
    if policy.enabled:
        n = policy.floor
        while n < max_repeats:
            checkpoints.append(n)
            n += policy.stride
    boundaries = checkpoints + [max_repeats]

    records: list[BackflowRecord] = []
    early_stopped = False
    done = 0
    for boundary in boundaries:
        ids = range(done, boundary)
        if executor is None:
            records.extend(sample_fn(i) for i in ids)
        else:
            records.extend(executor.map(sample_fn, ids))
        done = boundary
        if boundary in checkpoints:
            valid = [r.delta["tv"] for r in records if r.ok]
            if len(valid) >= 2 and normal_ci_half_width(valid) <= policy.half_width:
                early_stopped = True
                break
    return records, early_stopped


# ---------------------------------------------------------------------------
# Run configuration.


@dataclass(frozen=True)
class StatsPolicy:
    bootstrap_samples: int = 2000
    tost_epsilon: float = 1e-3
    bh_q: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    dataset: dict
    model: dict
    regimes: tuple[Regime, ...]
    output_dir: str
    base_stage: str = "init"
    break_flags: tuple[str, ...] = ("no", "break")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    repeats: int = 128
    batch_size: int = 64
    probe_size: int = 512
    probe_seed: int = 0
    weight_decay: float = 1e-4
    clip_norm: float | None = 1.0
    early_stop: EarlyStopPolicy = EarlyStopPolicy()
    stats: StatsPolicy = StatsPolicy()
    diagnostics_enabled: bool = True
    noncommute_k_max: int = 6
    probe_subset: int = 512
    pretrain_passes: int = 3
    workers: int = 1

    def settings(self) -> ProtocolSettings:
        return ProtocolSettings(
            batch_size=self.batch_size, weight_decay=self.weight_decay, clip_norm=self.clip_norm
        )

    def model_spec(self) -> ModelSpec:
        return ModelSpec(**self.model)

    def digest(self) -> str:
        # identifies the experiment: storage location and parallelism excluded
        payload = {k: v for k, v in asdict(self).items() if k not in ("output_dir", "workers")}
        blob = json.dumps(payload, sort_keys=True, default=str)
        return sha256(blob.encode()).hexdigest()[:16]


def resolve_regime(entry) -> Regime:
    if isinstance(entry, str):
        if entry not in REGIME_PRESETS:
            raise ConfigError(
                f"regimes: unknown preset {entry!r}; known presets: {sorted(REGIME_PRESETS)}"
            )
        return REGIME_PRESETS[entry]
    if isinstance(entry, dict):
        try:
            return Regime(**entry)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"regimes: invalid regime mapping: {exc}") from None
    raise ConfigError(f"regimes: entries must be preset names or mappings, got {type(entry)}")


def config_from_mapping(mapping: dict) -> RunConfig:
    """Validate a parsed configuration file and normalize it to a RunConfig."""
    m = dict(mapping)
    for required in ("dataset", "model", "regimes", "output_dir"):
        if required not in m:
            raise ConfigError(f"{required}: missing required field")
    regimes = tuple(resolve_regime(entry) for entry in m["regimes"])
    if not regimes:
        raise ConfigError("regimes: at least one regime is required")
    names = [r.name for r in regimes]
    if len(set(names)) != len(names):
        raise ConfigError(f"regimes: duplicate regime names {names}")

    break_flags = tuple(m.get("break_flags", ("no", "break")))
    for flag in break_flags:
        if flag not in ("no", "break"):
            raise ConfigError(f"break_flags: entries must be 'no' or 'break', got {flag!r}")
    if not break_flags:
        raise ConfigError("break_flags: at least one condition is required")

    seeds = tuple(int(s) for s in m.get("seeds", (0, 1, 2, 3, 4)))
    if not seeds:
        raise ConfigError("seeds: at least one seed is required")

    base_stage = m.get("base_stage", "init")
    if base_stage not in ("init", "early"):
        raise ConfigError(f"base_stage: must be 'init' or 'early', got {base_stage!r}")

    optimizer = dict(m.get("optimizer", {}))
    early = dict(m.get("early_stop", {}))
    stats_m = dict(m.get("stats", {}))
    diag_m = dict(m.get("diagnostics", {}))

    try:
        config = RunConfig(
            dataset=dict(m["dataset"]),
            model=dict(m["model"]),
            regimes=regimes,
            output_dir=str(m["output_dir"]),
            base_stage=base_stage,
            break_flags=break_flags,
            seeds=seeds,
            repeats=int(m.get("repeats", 128)),
            batch_size=int(m.get("batch_size", 64)),
            probe_size=int(m.get("probe_size", 512)),
            probe_seed=int(m.get("probe_seed", 0)),
            weight_decay=float(optimizer.get("weight_decay", 1e-4)),
            clip_norm=(None if optimizer.get("clip_norm", 1.0) is None else float(optimizer.get("clip_norm", 1.0))),
            early_stop=EarlyStopPolicy(
                enabled=bool(early.get("enabled", True)),
                floor=int(early.get("floor", 64)),
                stride=int(early.get("stride", 32)),
                half_width=float(early.get("half_width", 2e-4)),
            ),
            stats=StatsPolicy(
                bootstrap_samples=int(stats_m.get("bootstrap_samples", 2000)),
                tost_epsilon=float(stats_m.get("tost_epsilon", 1e-3)),
                bh_q=float(stats_m.get("bh_q", 0.05)),
            ),
            diagnostics_enabled=bool(diag_m.get("enabled", True)),
            noncommute_k_max=int(diag_m.get("noncommute_k_max", 6)),
            probe_subset=int(diag_m.get("probe_subset", 512)),
            pretrain_passes=int(m.get("pretrain_passes", 3)),
            workers=int(m.get("workers", os.environ.get("BACKFLOW_WORKERS", 1))),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    if config.repeats < 1:
        raise ConfigError("repeats: must be positive")
    if config.workers < 1:
        raise ConfigError("workers: must be positive")
    spec = config.model_spec()
    dataset_classes = config.dataset.get("num_classes")
    if dataset_classes is not None and int(dataset_classes) != spec.num_classes:
        raise ConfigError(
            f"model: num_classes {spec.num_classes} does not match dataset num_classes {dataset_classes}"
        )
    return config


def build_dataset(config: RunConfig) -> Dataset:
    spec = dict(config.dataset)
    kind = spec.pop("kind", None)
    if kind == "synthetic":
        dataset = make_synthetic(**spec)
    elif kind == "file":
        dataset = load_table(spec["path"], spec["format"])
    else:
        raise ConfigError(f"dataset: kind must be 'synthetic' or 'file', got {kind!r}")
    return split_probe(dataset, config.probe_size, derive_seed("probe", config.probe_seed))


def base_parameters(config: RunConfig, dataset: Dataset, seed_value: int) -> np.ndarray:
    spec = config.model_spec()
    params = init_params(spec, derive_seed(seed_value, "init"))
    if config.base_stage == "early":
        params = pretrain(
            spec,
            params,
            dataset,
            passes=config.pretrain_passes,
            batch_size=config.batch_size,
            seed=derive_seed(seed_value, "pretrain"),
        )
    return params


# ---------------------------------------------------------------------------
# Sweep execution and summary assembly.


def _cell_repeat(
    base_params,
    spec,
    regime,
    break_applied,
    dataset,
    probe,
    settings,
    seed_value,
    repeat_id,
):
    repeat_seed = derive_seed("repeat", seed_value, repeat_id)
    return run_micro_experiment(
        base_params, spec, regime, break_applied, dataset, probe, repeat_seed, settings, repeat_id
    )


def _record_payload(record: BackflowRecord) -> dict:
    return {
        "record": "repeat",
        "repeat_id": record.repeat_id,
        "seed": record.seed,
        "break_applied": record.break_applied,
        "d1": record.d1,
        "d2": record.d2,
        "delta": record.delta,
        "momentum_alignment": record.momentum_alignment,
        "retried": record.retried,
        "error": record.error,
    }


def record_from_payload(payload: dict) -> BackflowRecord:
    return BackflowRecord(
        repeat_id=payload["repeat_id"],
        seed=payload["seed"],
        break_applied=payload["break_applied"],
        d1=payload["d1"],
        d2=payload["d2"],
        delta=payload["delta"],
        momentum_alignment=payload.get("momentum_alignment"),
        retried=payload.get("retried", False),
        error=payload.get("error"),
    )


def _dump_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def cell_filename(regime_name: str, flag: str, seed: int) -> str:
    return f"{regime_name}__{flag}__seed{seed}.jsonl"


def _metric_block(deltas: np.ndarray, policy: StatsPolicy, boot_seed: int) -> dict:
    n = deltas.size
    block: dict = {"n": int(n)}
    if n < 2:
        block.update({"mean": float(deltas.mean()) if n else None})
        return block
    boot = bootstrap_mean_ci(deltas, n_boot=policy.bootstrap_samples, seed=boot_seed)
    block.update(
        {
            "mean": boot.mean,
            "ci_low": boot.ci_low,
            "ci_high": boot.ci_high,
            "half_width": boot.half_width,
        }
    )
    one_sided = t_test_mean(deltas, alternative="greater")
    two_sided = t_test_mean(deltas, alternative="two-sided")
    block["p_one_sided"] = one_sided.p_value
    block["p_two_sided"] = two_sided.p_value
    if n >= 3:
        nominal = tost_equivalence(deltas, epsilon=policy.tost_epsilon)
        se = float(deltas.std(ddof=1) / math.sqrt(n))
        scaled_eps = max(policy.tost_epsilon, 3.0 * se)
        scaled = tost_equivalence(deltas, epsilon=scaled_eps)
        block["tost_p"] = nominal.p_value
        block["tost_verdict"] = nominal.verdict
        block["tost_scaled_epsilon"] = scaled_eps
        block["tost_scaled_p"] = scaled.p_value
        block["tost_scaled_verdict"] = scaled.verdict
    return block


def _cell_diagnostics(config, spec, regime, break_applied, dataset, probe, base_params, seed_value, records):
    sub = dataset.probe_indices[: min(config.probe_subset, len(dataset.probe_indices))]
    detailed = run_micro_experiment_detailed(
        base_params,
        spec,
        regime,
        break_applied,
        dataset,
        probe,
        derive_seed("diag", seed_value),
        config.settings(),
    )
    curve = run_noncommute_curve(
        base_params,
        spec,
        regime,
        break_applied,
        dataset,
        sub,
        derive_seed("noncommute", seed_value),
        k_max=config.noncommute_k_max,
        settings=config.settings(),
    )
    alignments = [r.momentum_alignment for r in records if r.ok and r.momentum_alignment is not None]
    payload = {
        "record": "diagnostics",
        "regime": regime.name,
        "break": "break" if break_applied else "no",
        "seed": seed_value,
        "noncommute": [[k, v] for k, v in curve],
        "noncommute_slope": diag.curve_slope([k for k, _ in curve], [v for _, v in curve])
        if len(curve) >= 2
        else None,
        "alignment_mean": float(np.mean(alignments)) if alignments else None,
    }
    if detailed.record.ok:
        x_sub = dataset.features[sub]
        feats = [
            penultimate_features(spec, p, x_sub)
            for p in (
                detailed.params_mid_a,
                detailed.params_mid_aprime,
                detailed.params_end_a,
                detailed.params_end_aprime,
            )
        ]
        pid = probe_identifier(dataset, sub)
        preds = [
            forward(spec, p, x_sub, pid).probs
            for p in (
                detailed.params_mid_a,
                detailed.params_end_a,
                detailed.params_mid_aprime,
                detailed.params_end_aprime,
            )
        ]
        projection = diag.pca_project(preds)
        payload.update(
            {
                "cka_first": diag.linear_cka(feats[0], feats[1]),
                "cka_second": diag.linear_cka(feats[2], feats[3]),
                "pca_points": [[float(a), float(b)] for a, b in projection.points],
                "pca_labels": ["A", "AB", "Aprime", "AprimeB"],
                "pca_explained": list(projection.explained_variance),
            }
        )
    else:
        payload["error"] = detailed.record.error
    return payload


@dataclass
class SweepResult:
    run_dir: Path
    summary: dict


def run_sweep(config: RunConfig, created_at: str | None = None) -> SweepResult:
    """Execute every (regime, break flag, seed) cell and write run artifacts.

    Writes one JSONL file per cell (header line carries the only timestamp),
    a diagnostics JSONL, and summary.json with bootstrap CIs, TOST, one- and
    two-sided tests, and BH q-values across cells per divergence kind.
    """
    run_dir = Path(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if created_at is None:
        created_at = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())

    spec = config.model_spec()
    dataset = build_dataset(config)
    if spec.input_dim != dataset.input_dim:
        raise ConfigError(
            f"model: input_dim {spec.input_dim} does not match dataset input_dim {dataset.input_dim}"
        )
    if spec.num_classes != dataset.num_classes:
        raise ConfigError(
            f"model: num_classes {spec.num_classes} does not match dataset classes {dataset.num_classes}"
        )
    probe = dataset.probe_indices
    digest = config.digest()

    (run_dir / "config.json").write_text(
        json.dumps(asdict(config), indent=2, sort_keys=True, default=str) + "\n"
    )

    executor = ProcessPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    base_by_seed = {s: base_parameters(config, dataset, s) for s in config.seeds}

    cells = []
    cell_records: dict[tuple[str, str, int], list[BackflowRecord]] = {}
    diagnostics_payloads = []
    try:
        for regime in config.regimes:
            for flag in config.break_flags:
                break_applied = flag == "break"
                for seed_value in config.seeds:
                    sample_fn = partial(
                        _cell_repeat,
                        base_by_seed[seed_value],
                        spec,
                        regime,
                        break_applied,
                        dataset,
                        probe,
                        config.settings(),
                        seed_value,
                    )
                    records, early_stopped = collect_with_early_stop(
                        sample_fn, config.repeats, config.early_stop, executor
                    )
                    cell_records[(regime.name, flag, seed_value)] = records
                    path = run_dir / cell_filename(regime.name, flag, seed_value)
                    header = {
                        "record": "header",
                        "schema_version": SCHEMA_VERSION,
                        "created_at": created_at,
                        "regime": regime.name,
                        "break": flag,
                        "seed": seed_value,
                        "config_digest": digest,
                    }
                    lines = [_dump_line(header)] + [_dump_line(_record_payload(r)) for r in records]
                    path.write_text("\n".join(lines) + "\n")
                    cells.append(
                        _summarize_cell(config, regime, flag, seed_value, records, early_stopped)
                    )
                    if config.diagnostics_enabled:
                        diagnostics_payloads.append(
                            _cell_diagnostics(
                                config,
                                spec,
                                regime,
                                break_applied,
                                dataset,
                                probe,
                                base_by_seed[seed_value],
                                seed_value,
                                records,
                            )
                        )
    finally:
        if executor is not None:
            executor.shutdown()

    if config.diagnostics_enabled:
        header = {
            "record": "header",
            "schema_version": SCHEMA_VERSION,
            "created_at": created_at,
            "config_digest": digest,
        }
        lines = [_dump_line(header)] + [_dump_line(p) for p in diagnostics_payloads]
        (run_dir / "diagnostics.jsonl").write_text("\n".join(lines) + "\n")

    pooled = []
    for regime in config.regimes:
        for flag in config.break_flags:
            merged: list[BackflowRecord] = []
            for seed_value in config.seeds:
                merged.extend(cell_records[(regime.name, flag, seed_value)])
            pooled.append(_summarize_pool(config, regime, flag, merged))

    bh_blocks = {}
    for kind in KINDS:
        entries = []
        for cell in cells:
            metric = cell["metrics"].get(kind, {})
            if "p_two_sided" in metric:
                entries.append(
                    {
                        "regime": cell["regime"],
                        "break": cell["break"],
                        "seed": cell["seed"],
                        "p_two_sided": metric["p_two_sided"],
                    }
                )
        ps = [e["p_two_sided"] for e in entries]
        if ps:
            qvals = bh_qvalues(ps)
            flags = bh_fdr(ps, q=config.stats.bh_q)
            for entry, qv, fl in zip(entries, qvals, flags):
                entry["q_value"] = float(qv)
                entry["significant"] = bool(fl)
        bh_blocks[kind] = entries

    summary = {
        "schema_version": SCHEMA_VERSION,
        "meta": {
            "created_at": created_at,
            "config_digest": digest,
            "regimes": {r.name: asdict(r) for r in config.regimes},
            "base_stage": config.base_stage,
        },
        "cells": cells,
        "pooled": pooled,
        "bh": bh_blocks,
        "n_persistent_errors": int(
            sum(1 for records in cell_records.values() for r in records if not r.ok)
        ),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, allow_nan=False) + "\n")
    return SweepResult(run_dir=run_dir, summary=summary)


def _summarize_cell(config, regime, flag, seed_value, records, early_stopped) -> dict:
    valid = [r for r in records if r.ok]
    metrics = {}
    for kind in KINDS:
        deltas = np.array([r.delta[kind] for r in valid])
        boot_seed = derive_seed("bootstrap", regime.name, flag, seed_value, kind)
        metrics[kind] = _metric_block(deltas, config.stats, boot_seed)
    alignments = [r.momentum_alignment for r in valid if r.momentum_alignment is not None]
    return {
        "regime": regime.name,
        "break": flag,
        "seed": seed_value,
        "n_repeats": len(records),
        "n_errors": len(records) - len(valid),
        "early_stopped": early_stopped,
        "alignment_mean": float(np.mean(alignments)) if alignments else None,
        "metrics": metrics,
    }


def _summarize_pool(config, regime, flag, records) -> dict:
    valid = [r for r in records if r.ok]
    metrics = {}
    for kind in KINDS:
        deltas = np.array([r.delta[kind] for r in valid])
        boot_seed = derive_seed("bootstrap-pooled", regime.name, flag, kind)
        metrics[kind] = _metric_block(deltas, config.stats, boot_seed)
    return {
        "regime": regime.name,
        "break": flag,
        "n_repeats": len(records),
        "n_errors": len(records) - len(valid),
        "metrics": metrics,
    }
