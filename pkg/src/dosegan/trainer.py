"""Alternating GAN training, plateau schedule, early stopping and ablations."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterable

import numpy as np

from . import losses
from .dosesim import DRF_LEVELS, Dataset, VolumePair, denormalize, normalize
from .losses import LossBreakdown, LossWeights, NonFiniteLossError
from .nets import ConfigError, NetConfig, Networks, init_networks
from .optim import AdamState, PlateauScheduler, adam_step
from .rng import Rng
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "cg", "cg-gan", "full")
VARIANT_LABELS = {
    "baseline": "Baseline",
    "cg": "Baseline+CG",
    "cg-gan": "CG-3DGAN",
    "full": "CG-3DGAN+SR",
}
STAGE_MODES = ("end_to_end", "two_stage")
PAIR_SELECTIONS = ("rotate", "all")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    max_epochs: int = 100
    lr_initial: float = 2e-4
    lr_factor: float = 0.1
    lr_patience: int = 5
    lr_stop_threshold: float = 2e-6
    weights: LossWeights = field(default_factory=LossWeights)
    stage_mode: str = "end_to_end"
    stage1_epochs: int | None = None
    variant: str = "full"
    pair_selection: str = "rotate"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if not 0 < self.lr_factor < 1:
            raise ConfigError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.lr_initial <= 0 or self.lr_stop_threshold <= 0 or self.lr_patience < 1:
            raise ConfigError("lr_initial, lr_stop_threshold and lr_patience must be positive")
        if self.stage_mode not in STAGE_MODES:
            raise ConfigError(f"stage_mode must be one of {STAGE_MODES}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.pair_selection not in PAIR_SELECTIONS:
            raise ConfigError(f"pair_selection must be one of {PAIR_SELECTIONS}")
        if self.stage_mode == "two_stage" and self.variant != "full":
            raise ConfigError("two_stage training needs the full variant")
        if self.stage1_epochs is not None and not 1 <= self.stage1_epochs < self.max_epochs:
            raise ConfigError("stage1_epochs must be in [1, max_epochs)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights(**d["weights"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def first_stage_epochs(self) -> int:
        return self.stage1_epochs if self.stage1_epochs is not None else max(1, self.max_epochs // 2)


@dataclass(frozen=True)
class Plan:
    """Which branches a step runs, derived from variant, stage and weights."""

    use_class: bool
    use_refiner: bool
    use_disc: bool
    train_coarse: bool
    train_refiner: bool


def step_plan(config: TrainConfig, stage: int = 1) -> Plan:
    w1, w2, w3, w4 = config.weights.as_tuple()
    v = config.variant
    use_class = v != "baseline" and w2 > 0
    use_refiner = v == "full"
    use_disc = v in ("cg-gan", "full") and w4 > 0
    if config.stage_mode == "two_stage":
        if stage == 1:
            return Plan(use_class, False, False, True, False)
        return Plan(use_class, True, use_disc, False, w3 > 0 or use_disc)
    refine_term = use_refiner and w3 > 0
    return Plan(
        use_class=use_class,
        use_refiner=use_refiner,
        use_disc=use_disc,
        train_coarse=w1 > 0 or refine_term or use_disc,
        train_refiner=use_refiner and (refine_term or use_disc),
    )


@dataclass
class EpochLog:
    epoch: int
    stage: int
    train: LossBreakdown
    val_total: float
    val_accuracy: float
    lr: float
    stopped: bool = False

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EpochLog":
        d = json.loads(line)
        d["train"] = LossBreakdown(**d["train"])
        return cls(**d)


@dataclass
class TrainState:
    """Everything needed to resume a run exactly."""

    net_config: NetConfig
    train_config: TrainConfig
    nets: Networks
    adam_g: AdamState
    adam_d: AdamState
    scheduler: PlateauScheduler
    rng: Rng
    epoch: int = 0
    stage: int = 1
    finished: bool = False

    @classmethod
    def fresh(cls, net_config: NetConfig, train_config: TrainConfig) -> "TrainState":
        net_config.validate()
        train_config.validate()
        root = Rng(train_config.seed)
        tc = train_config

        def adam():
            return AdamState(tc.adam_beta1, tc.adam_beta2, tc.adam_eps)

        return cls(
            net_config, train_config, init_networks(net_config, root.split("init")), adam(), adam(),
            PlateauScheduler(tc.lr_initial, tc.lr_factor, tc.lr_patience, tc.lr_stop_threshold),
            root.split("shuffle"),
        )


# ----------------------------------------------------------------------------
# batches


def stack_batch(pairs: list[VolumePair], norm_max: float) -> tuple[Tensor, Tensor, np.ndarray]:
    x = np.stack([normalize(p.x, norm_max) for p in pairs])[:, None]
    y = np.stack([normalize(p.y_s, norm_max) for p in pairs])[:, None]
    labels = np.array([p.y_c for p in pairs], dtype=np.int64)
    return Tensor(x), Tensor(y), labels


def select_pairs(dataset: Dataset, split: str, selection: str, epoch: int = 0) -> list[VolumePair]:
    """Training/validation pairs for one epoch.

    ``rotate`` keeps one DRF per volume, cycling the DRF with the epoch so a
    split of V volumes yields V DRF-balanced pairs; ``all`` uses every pair.
    """
    pairs = dataset.pairs(split)
    if selection == "all":
        return pairs
    by_volume: dict[int, dict[int, VolumePair]] = {}
    for p in pairs:
        by_volume.setdefault(p.volume_id, {})[p.drf_value] = p
    out = []
    for j, vid in enumerate(sorted(by_volume)):
        levels = [d for d in DRF_LEVELS if d in by_volume[vid]]
        out.append(by_volume[vid][levels[(j + epoch) % len(levels)]])
    return out


def _batches(items: list, size: int) -> Iterable[list]:
    for i in range(0, len(items), size):
        yield items[i:i + size]


# ----------------------------------------------------------------------------
# one step


def _guard(term: str, fn: Callable[[], Tensor]) -> Tensor:
    try:
        return fn()
    except NonFiniteError as exc:
        raise NonFiniteLossError(term) from exc


def active_generator_params(nets: Networks, plan: Plan, config: TrainConfig) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    ml = nets.mlnet.named_parameters()
    if plan.train_coarse:
        for name in nets.mlnet.reconstruction_names():
            params[f"mlnet/{name}"] = ml[name]
        if plan.use_class:
            for name in nets.mlnet.head_names():
                params[f"mlnet/{name}"] = ml[name]
    if plan.train_refiner:
        for name, t in nets.contextual.named_parameters().items():
            params[f"contextual/{name}"] = t
    return params


def train_step(state: TrainState, batch: list[VolumePair], norm_max: float) -> LossBreakdown:
    """Discriminator update (fake held constant), then generator update."""
    if not batch:
        raise ValueError("empty batch")
    cfg = state.train_config
    plan = step_plan(cfg, state.stage)
    nets = state.nets
    lr = state.scheduler.lr
    x, y, labels = stack_batch(batch, norm_max)

    if plan.train_coarse:
        coarse, logits = _guard("l_re", lambda: nets.mlnet(x, training=True))
    else:
        with no_grad():
            coarse, logits = nets.mlnet(x, training=False)
    refined = _guard("l_refine", lambda: nets.contextual(coarse)) if plan.use_refiner else coarse

    d_loss = None
    if plan.use_disc:
        d_loss = _guard("l_dis_d", lambda: losses.discriminator_loss(nets.discriminator, x, y, refined))
        nets.discriminator.zero_grad()
        d_loss.backward()
        adam_step(nets.discriminator.trainable_parameters(), state.adam_d, lr)

    w = cfg.weights
    l_re = _guard("l_re", lambda: losses.reconstruction_loss(coarse, y)) if w.reconstruction > 0 else None
    l_class = _guard("l_class", lambda: losses.classification_loss(logits, labels)) if plan.use_class else None
    l_refine = None
    if plan.use_refiner and w.refinement > 0:
        l_refine = _guard("l_refine", lambda: losses.perceptual_loss(nets.features, refined, y))
    l_dis_g = None
    if plan.use_disc:
        l_dis_g = _guard("l_dis_g", lambda: losses.generator_adversarial_loss(nets.discriminator, x, refined))

    total, breakdown = losses.total_loss(w, l_re, l_class, l_refine, l_dis_g, d_loss)
    params = active_generator_params(nets, plan, cfg)
    if total is not None and params:
        nets.mlnet.zero_grad()
        nets.contextual.zero_grad()
        total.backward()
        adam_step(params, state.adam_g, lr)
    return breakdown


# ----------------------------------------------------------------------------
# validation


def evaluate_losses(state: TrainState, pairs: list[VolumePair], norm_max: float) -> tuple[LossBreakdown, float]:
    """Eval-mode mean loss breakdown and DRF classification accuracy."""
    cfg = state.train_config
    plan = step_plan(cfg, state.stage)
    nets = state.nets
    sums = np.zeros(5)
    correct = 0
    n = 0
    with no_grad():
        for batch in _batches(pairs, cfg.batch_size):
            x, y, labels = stack_batch(batch, norm_max)
            coarse, logits = nets.mlnet(x, training=False)
            refined = nets.contextual(coarse) if plan.use_refiner else coarse
            parts = [losses.reconstruction_loss(coarse, y).item(),
                     losses.classification_loss(logits, labels).item() if plan.use_class else 0.0,
                     losses.perceptual_loss(nets.features, refined, y).item()
                     if plan.use_refiner and cfg.weights.refinement > 0 else 0.0,
                     0.0, 0.0]
            if plan.use_disc:
                d, g = losses.adversarial_losses(nets.discriminator, x, y, refined, training=False)
                parts[3], parts[4] = g.item(), d.item()
            sums += np.array(parts) * len(batch)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            n += len(batch)
    m = sums / n
    bd = LossBreakdown(l_re=float(m[0]), l_class=float(m[1]), l_refine=float(m[2]), l_dis_g=float(m[3]),
                       l_dis_d=float(m[4]))
    bd.l_total = losses.weighted_total(cfg.weights, bd.l_re, bd.l_class, bd.l_refine, bd.l_dis_g)
    return bd, correct / n


def mean_breakdown(items: list[LossBreakdown], weights: LossWeights) -> LossBreakdown:
    bd = LossBreakdown(
        l_re=float(np.mean([b.l_re for b in items])),
        l_class=float(np.mean([b.l_class for b in items])),
        l_refine=float(np.mean([b.l_refine for b in items])),
        l_dis_g=float(np.mean([b.l_dis_g for b in items])),
        l_dis_d=float(np.mean([b.l_dis_d for b in items])),
    )
    bd.l_total = losses.weighted_total(weights, bd.l_re, bd.l_class, bd.l_refine, bd.l_dis_g)
    return bd


# ----------------------------------------------------------------------------
# fit


def fit(
    dataset: Dataset,
    net_config: NetConfig | None = None,
    train_config: TrainConfig | None = None,
    state: TrainState | None = None,
    on_epoch: Callable[[EpochLog, TrainState], None] | None = None,
) -> tuple[TrainState, list[EpochLog]]:
    """Train until ``max_epochs`` or early stop; pass ``state`` to resume."""
    if state is None:
        state = TrainState.fresh(net_config or NetConfig(), train_config or TrainConfig())
    cfg = state.train_config
    if dataset.manifest.extent != state.net_config.volume_extent:
        raise ConfigError(
            f"dataset extent {dataset.manifest.extent} != network extent {state.net_config.volume_extent}")
    norm_max = dataset.manifest.norm_max
    if not dataset.pairs("train") or not dataset.pairs("val"):
        raise ValueError("fit needs non-empty train and val splits")
    val_pairs = select_pairs(dataset, "val", cfg.pair_selection, 0)

    logs: list[EpochLog] = []
    while not state.finished and state.epoch < cfg.max_epochs:
        epoch = state.epoch + 1
        train_pairs = select_pairs(dataset, "train", cfg.pair_selection, epoch - 1)
        order = state.rng.split(epoch).permutation(len(train_pairs))
        shuffled = [train_pairs[i] for i in order]
        step_logs = [train_step(state, b, norm_max) for b in _batches(shuffled, cfg.batch_size)]
        train_bd = mean_breakdown(step_logs, cfg.weights)
        val_bd, acc = evaluate_losses(state, val_pairs, norm_max)
        lr, stop = state.scheduler.step(val_bd.l_total)
        state.epoch = epoch
        stage_done = (cfg.stage_mode == "two_stage" and state.stage == 1
                      and (stop or epoch >= cfg.first_stage_epochs))
        entry = EpochLog(epoch, state.stage, train_bd, val_bd.l_total, acc, lr, stopped=stop and not stage_done)
        if stage_done:
            state.stage = 2
            state.scheduler = PlateauScheduler(cfg.lr_initial, cfg.lr_factor, cfg.lr_patience, cfg.lr_stop_threshold)
        elif stop:
            state.finished = True
        if state.epoch >= cfg.max_epochs:
            state.finished = True
        logs.append(entry)
        log.info("epoch %d stage %d l_total %.5f val %.5f acc %.3f lr %.2e",
                 epoch, entry.stage, train_bd.l_total, val_bd.l_total, acc, lr)
        if on_epoch is not None:
            on_epoch(entry, state)
    return state, logs


# ----------------------------------------------------------------------------
# ablation


def variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    return replace(config, variant=variant, stage_mode="end_to_end" if variant != "full" else config.stage_mode)


@dataclass
class AblationResult:
    variant: str
    state: TrainState | None
    logs: list[EpochLog]
    error: str | None = None


def run_ablation(
    dataset: Dataset,
    net_config: NetConfig,
    train_config: TrainConfig,
    variants: tuple[str, ...] = VARIANTS,
    on_epoch: Callable[[str, EpochLog], None] | None = None,
) -> list[AblationResult]:
    """Train each variant from the same seed and data; a NaN abort is recorded, not raised."""
    results = []
    for v in variants:
        cfg = variant_config(train_config, v)
        cb = None if on_epoch is None else (lambda entry, _s, v=v: on_epoch(v, entry))
        try:
            state, logs = fit(dataset, net_config, cfg, on_epoch=cb)
            results.append(AblationResult(v, state, logs))
        except (NonFiniteLossError, NonFiniteError) as exc:
            log.warning("variant %s aborted: %s", v, exc)
            results.append(AblationResult(v, None, [], error=str(exc)))
    return results


# ----------------------------------------------------------------------------
# inference


def predict(state: TrainState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode (coarse, final) outputs for normalized inputs of shape (N, 1, E, E, E).

    The final output is the refined volume for the full model and the coarse
    volume for variants without a refiner.
    """
    nets = state.nets
    with no_grad():
        coarse, _ = nets.mlnet(Tensor(x), training=False)
        final = nets.contextual(coarse) if state.train_config.variant == "full" else coarse
    return coarse.data, final.data


def predictor(state: TrainState, norm_max: float, which: str = "final") -> Callable[[list[VolumePair]], list[np.ndarray]]:
    """Batch predictor in the dataset's physical units, for ``metrics.evaluate``."""
    if which not in ("coarse", "final"):
        raise ValueError(f"which must be 'coarse' or 'final', got {which!r}")

    def run(pairs: list[VolumePair]) -> list[np.ndarray]:
        x = np.stack([normalize(p.x, norm_max) for p in pairs])[:, None]
        coarse, final = predict(state, x)
        out = coarse if which == "coarse" else final
        return [denormalize(v[0], norm_max) for v in out]

    return run
