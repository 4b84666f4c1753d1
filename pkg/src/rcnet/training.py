"""Training loops (fixed-step, cost-adjustable, aggregated-loss),
inference, and evaluation metrics.

All regimes share one loop. Randomness is split into independent named
streams (init/data/step/noise), so a cost-adjustable run with a singleton
step distribution consumes data and noise randomness exactly like the
fixed-step regime and produces a bit-identical trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .autodiff import Tape, Tensor, backward
from .data import DenoiseEvalSet, LabeledDataset, psnr
from .networks import Network
from .optim import SGD, clip_grad_norm, global_grad_norm
from .rc import StepDistribution


class RngStreams:
    """Independent deterministic RNG streams per concern."""

    NAMES = ("init", "data", "step", "noise")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        for name, child in zip(self.NAMES, children):
            setattr(self, name, np.random.Generator(np.random.PCG64(child)))

    def state(self) -> dict:
        return {name: getattr(self, name).bit_generator.state
                for name in self.NAMES}

    def set_state(self, state: dict) -> None:
        for name in self.NAMES:
            getattr(self, name).bit_generator.state = state[name]


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    shared_lr_scale: float = 0.5
    clip_max_norm: float = 5.0
    epochs: int = 2
    batch_size: int = 50
    step_distribution: StepDistribution = field(
        default_factory=lambda: StepDistribution.fixed(1))
    seed: int = 0
    loss: str = "cross_entropy"  # or "l2_residual"
    eval_each_epoch: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0 (0 = dry run), got {self.lr}")
        if not 0.0 < self.shared_lr_scale <= 1.0:
            raise ValueError(
                f"shared_lr_scale must be in (0, 1], got {self.shared_lr_scale}")
        if self.clip_max_norm <= 0:
            raise ValueError(
                f"clip_max_norm must be positive, got {self.clip_max_norm}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.loss not in ("cross_entropy", "l2_residual"):
            raise ValueError(f"unknown loss '{self.loss}'")


@dataclass
class IterationRecord:
    iteration: int
    step: int            # sampled unified step; -1 for aggregated iterations
    loss: float
    grad_norm_pre: float
    grad_norm_post: float


@dataclass
class EpochRecord:
    epoch: int
    metrics: dict[int, float]  # unroll step -> metric


class RunLog:
    """Per-iteration and per-epoch records of one training run."""

    METRICS_HEADER = ("iteration", "step", "loss", "grad_norm_pre",
                      "grad_norm_post")

    def __init__(self, metric_name: str):
        self.metric_name = metric_name
        self.iterations: list[IterationRecord] = []
        self.epochs: list[EpochRecord] = []
        self.final_rng_state: dict | None = None  # for resumable checkpoints

    def write_metrics_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(",".join(self.METRICS_HEADER) + "\n")
            for r in self.iterations:
                f.write(f"{r.iteration},{r.step},{r.loss!r},"
                        f"{r.grad_norm_pre!r},{r.grad_norm_post!r}\n")

    def write_eval_csv(self, path) -> None:
        steps = sorted({s for rec in self.epochs for s in rec.metrics})
        header = ["epoch"] + [f"{self.metric_name}@{s}" for s in steps]
        with open(path, "w") as f:
            f.write(",".join(header) + "\n")
            for rec in self.epochs:
                row = [str(rec.epoch)] + [repr(rec.metrics[s]) for s in steps]
                f.write(",".join(row) + "\n")


def _zero_grads(params) -> None:
    for p in params:
        p.grad[...] = 0.0


def _loss_for(network: Network, xb: np.ndarray, target, step: int,
              classify: bool) -> Tensor:
    out = network.forward(xb, step, training=True)
    if classify:
        return F.softmax_cross_entropy(out, target)
    return F.mse_loss(out, Tensor(target))


def _train(network: Network, train_set, test_set, cfg: TrainConfig,
           aggregated: bool, resume_state: dict | None = None) -> RunLog:
    dist = cfg.step_distribution
    if dist.support[-1] > network.max_step:
        raise ValueError(
            f"step support {list(dist.support)} exceeds the network's "
            f"max_step {network.max_step}")
    classify = network.spec.task == "classify"
    if classify != (cfg.loss == "cross_entropy"):
        raise ValueError(f"loss '{cfg.loss}' does not match task "
                         f"'{network.spec.task}'")

    rngs = RngStreams(cfg.seed)
    params = network.parameters()
    for p in params:
        if p.is_shared:
            p.lr_scale = cfg.shared_lr_scale
    opt = (SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
           if cfg.lr > 0 else None)  # lr == 0: dry run, no updates

    log = RunLog("err" if classify else "psnr")
    iteration = 0
    start_epoch = 0
    if resume_state is not None:
        rngs.set_state(resume_state["rng"])
        iteration = int(resume_state["iteration"])
        start_epoch = int(resume_state["epoch"])

    if classify:
        images, labels = train_set.images, train_set.labels
    else:
        images = train_set.clean
    n = len(images)
    dtype = network.spec.dtype

    patch = getattr(train_set, "patch_size", None) if not classify else None
    if patch is not None and patch >= images.shape[-1]:
        patch = None  # images already at or below patch size

    for epoch in range(start_epoch, cfg.epochs):
        if not classify:
            if patch is not None:
                hh, ww = images.shape[-2:]
                tops = rngs.data.integers(0, hh - patch + 1, size=n)
                lefts = rngs.data.integers(0, ww - patch + 1, size=n)
                epoch_clean = np.stack(
                    [images[i, :, t:t + patch, l:l + patch]
                     for i, (t, l) in enumerate(zip(tops, lefts))])
            else:
                epoch_clean = images
            noise = rngs.noise.standard_normal(epoch_clean.shape,
                                               dtype=np.float32)
            noisy_epoch = epoch_clean + np.float32(train_set.sigma) * noise
        order = rngs.data.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            if classify:
                xb = images[idx].astype(dtype, copy=False)
                target = labels[idx]
            else:
                xb = noisy_epoch[idx].astype(dtype, copy=False)
                target = epoch_clean[idx].astype(dtype, copy=False)

            with Tape() as tape:
                if aggregated:
                    step_rec = -1
                    loss = None
                    for s, prob in zip(dist.support, dist.probs):
                        term = F.scale(
                            _loss_for(network, xb, target, s, classify), prob)
                        loss = term if loss is None else F.add(loss, term)
                else:
                    step_rec = dist.sample(rngs.step)
                    loss = _loss_for(network, xb, target, step_rec, classify)
            _zero_grads(params)
            backward(tape, loss)
            pre = clip_grad_norm(params, cfg.clip_max_norm)
            post = global_grad_norm(params)
            if opt is not None:
                opt.step()
            iteration += 1
            log.iterations.append(IterationRecord(
                iteration, step_rec, float(loss.data), pre, post))

        if cfg.eval_each_epoch and test_set is not None:
            metrics = {}
            for s in dist.support:
                if classify:
                    metrics[s] = evaluate_classification(network, test_set, s)
                else:
                    metrics[s] = evaluate_denoise(network, test_set, s)
            log.epochs.append(EpochRecord(epoch + 1, metrics))

    network.trained_support = list(dist.support)
    log.final_rng_state = rngs.state()
    return log


def train_fixed(network: Network, train_set, test_set,
                cfg: TrainConfig) -> RunLog:
    """Fixed-step regime: the degenerate singleton-distribution case of
    the shared loop, so it collapses bit-identically."""
    if not cfg.step_distribution.is_singleton:
        raise ValueError(
            f"fixed-step training needs a singleton step distribution, got "
            f"support {list(cfg.step_distribution.support)}")
    return _train(network, train_set, test_set, cfg, aggregated=False)


def train_cost_adjustable(network: Network, train_set, test_set,
                          cfg: TrainConfig,
                          resume_state: dict | None = None) -> RunLog:
    """One sampled unified step per iteration; only the BN groups that
    step touches see forward passes or running-stat updates."""
    if network.spec.bn_mode != "double_independent":
        raise ValueError(
            "cost-adjustable training requires bn_mode 'double_independent', "
            f"got '{network.spec.bn_mode}'")
    return _train(network, train_set, test_set, cfg, aggregated=False,
                  resume_state=resume_state)


def train_aggregated(network: Network, train_set, test_set,
                     cfg: TrainConfig) -> RunLog:
    """Optional mode: every iteration forwards at every support step and
    optimizes the probability-weighted loss sum in a single update.
    Iteration cost grows with the support size."""
    if network.spec.bn_mode != "double_independent":
        raise ValueError(
            "aggregated training requires bn_mode 'double_independent', "
            f"got '{network.spec.bn_mode}'")
    return _train(network, train_set, test_set, cfg, aggregated=True)


def run_training(network: Network, train_set, test_set, cfg: TrainConfig,
                 regime: str, resume_state: dict | None = None) -> RunLog:
    """Regime dispatch used by the CLI; validates like the direct entry
    points and supports resuming at epoch granularity."""
    if regime == "fixed":
        if not cfg.step_distribution.is_singleton:
            raise ValueError(
                "fixed-step training needs a singleton step distribution")
    elif regime in ("cost_adjustable", "aggregated"):
        if network.spec.bn_mode != "double_independent":
            raise ValueError(
                f"regime '{regime}' requires bn_mode 'double_independent'")
    else:
        raise ValueError(f"unknown regime '{regime}'")
    return _train(network, train_set, test_set, cfg,
                  aggregated=regime == "aggregated",
                  resume_state=resume_state)


# ---------------------------------------------------------------------------
# inference and metrics

def infer(network: Network, x, step: int) -> np.ndarray:
    """Eval-mode forward at ``step``; the step must be in the trained
    support (any step up to max_step for untrained networks)."""
    support = network.trained_support
    if support is not None and step not in support:
        raise ValueError(
            f"step {step} outside the trained support {sorted(support)}")
    out = network.forward(x, step, training=False, update_stats=False)
    return out.data


def evaluate_classification(network: Network, dataset: LabeledDataset,
                            step: int, batch_size: int = 250) -> float:
    """Misclassified fraction in [0, 1] over the dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    dtype = network.spec.dtype
    wrong = 0
    for lo in range(0, len(dataset), batch_size):
        xb = dataset.images[lo:lo + batch_size].astype(dtype, copy=False)
        logits = network.forward(xb, step, training=False,
                                 update_stats=False).data
        pred = logits.argmax(axis=1)
        wrong += int((pred != dataset.labels[lo:lo + batch_size]).sum())
    return wrong / len(dataset)


def evaluate_denoise(network: Network, eval_set: DenoiseEvalSet, step: int,
                     max_value: float = 255.0) -> float:
    """Mean per-image PSNR (dB) of the clipped prediction vs clean."""
    if len(eval_set) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    dtype = network.spec.dtype
    values = []
    for pair in eval_set.pairs:
        pred = network.forward(pair.noisy[None].astype(dtype, copy=False),
                               step, training=False, update_stats=False).data[0]
        pred = np.clip(pred, 0.0, max_value)
        values.append(psnr(pred, pair.clean, max_value))
    return float(np.mean(values))


def noisy_input_psnr(eval_set: DenoiseEvalSet,
                     max_value: float = 255.0) -> float:
    """Mean PSNR of the raw noisy inputs against their clean images."""
    return float(np.mean([psnr(np.clip(p.noisy, 0.0, max_value), p.clean,
                               max_value) for p in eval_set.pairs]))
