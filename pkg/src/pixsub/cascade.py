"""The refine -> blur -> substitute cascade and its stage-wise training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from pixsub.degrade import DegradeSpec, convolve, decimate
from pixsub.formation import ResidualReport, SubstitutionRecord, constraint_residual, pixel_substitute
from pixsub.image import Image
from pixsub.metrics import MetricsReport, evaluate_sr, mse_to_psnr
from pixsub.neural import AdamState, ToyNet, adam_step, formation_loss, l1_loss, load_weights
from pixsub.refine import IterationTrace, RefinerSpec, refine_bicubic, refine_gradprior, refine_ibp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CascadeConfig:
    """``T`` stages over a shared degradation model.

    Stage 1 sees the LR image; every later stage sees the substituted HR
    image of the previous stage.  With ``shared_weights`` all stages after
    the first reuse the stage-2 network.
    """

    T: int = 3
    degrade: DegradeSpec = field(default_factory=DegradeSpec)
    stages: tuple = ()
    shared_weights: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        stages = tuple(self.stages) if self.stages else tuple(RefinerSpec() for _ in range(self.T))
        if len(stages) != self.T:
            raise ValueError(f"{len(stages)} stage specs given for T={self.T}")
        object.__setattr__(self, "stages", stages)

    @property
    def scale(self) -> int:
        return self.degrade.scale

    def truncated(self, T: int) -> "CascadeConfig":
        return CascadeConfig(T=T, degrade=self.degrade, stages=self.stages[:T], shared_weights=self.shared_weights)


@dataclass
class StageRecord:
    output: Image  # I_t
    blurred: Image  # B = k * I_t
    substituted: Image  # B-hat
    substitution: SubstitutionRecord
    output_residual: ResidualReport  # regenerated LR from I_t vs observation
    substituted_residual: ResidualReport  # decimate(B-hat) vs observation
    iteration: Optional[IterationTrace] = None
    metrics: Optional[MetricsReport] = None

    @property
    def diverged(self) -> bool:
        return self.iteration is not None and self.iteration.diverged

    def summary(self) -> dict:
        d = {
            "substituted_count": self.substitution.substituted_count,
            "expected_count": self.substitution.expected_count,
            "max_injected_delta": self.substitution.max_injected_delta,
            "output_residual": self.output_residual.as_dict(),
            "substituted_residual": self.substituted_residual.as_dict(),
            "diverged": self.diverged,
        }
        if self.metrics is not None:
            d["metrics"] = self.metrics.as_dict()
        return d


class StageTrace(list):
    """One :class:`StageRecord` per stage, in order."""


def _decimation_residual(bhat: Image, lr: Image, s: int) -> ResidualReport:
    diff = decimate(bhat, s).data - lr.data
    mse = float(np.mean(diff * diff))
    return ResidualReport(mse=mse, psnr=mse_to_psnr(mse), max_abs=float(np.max(np.abs(diff))), quantized=False)


def _net_for_stage(t: int, spec: RefinerSpec, cfg: CascadeConfig, nets) -> ToyNet:
    if nets is not None and nets[t] is not None:
        net = nets[t]
    elif cfg.shared_weights and t > 1 and nets is not None and nets[1] is not None:
        net = nets[1]
    else:
        path = cfg.stages[1].weights_path if cfg.shared_weights and t > 1 else spec.weights_path
        if not path:
            raise ValueError(f"stage {t + 1}: toynet refiner has no weights")
        net = ToyNet.from_params(load_weights(path))
    want_up = t == 0
    if net.has_upsampler != want_up:
        raise ValueError(
            f"stage {t + 1}: network {'has' if net.has_upsampler else 'lacks'} an upsampler, "
            f"but this stage consumes {'LR' if want_up else 'HR'}-sized input"
        )
    if want_up and net.scale != cfg.scale:
        raise ValueError(f"stage 1 network upsamples x{net.scale}, config asks for x{cfg.scale}")
    return net


def apply_refiner(t: int, x: Image, lr: Image, cfg: CascadeConfig, nets=None):
    """Run stage ``t`` (0-based) on input ``x``; returns ``(I_t, iteration trace or None)``."""
    spec = cfg.stages[t]
    s = cfg.scale
    if spec.kind == "bicubic":
        return refine_bicubic(x, s if t == 0 else 1), None
    if spec.kind in ("ibp", "gradprior"):
        init = refine_bicubic(x, s) if t == 0 else x
        trace = IterationTrace()
        if spec.kind == "ibp":
            out = refine_ibp(lr, init, cfg.degrade, spec.iters, spec.step, trace=trace)
        else:
            out = refine_gradprior(lr, init, cfg.degrade, spec.iters, spec.step, spec.lambda_prior, trace=trace)
        return out, trace
    net = _net_for_stage(t, spec, cfg, nets)
    if net.channels != x.channels:
        raise ValueError(f"stage {t + 1}: network expects {net.channels} channels, image has {x.channels}")
    return Image(net.forward(x.data[None])[0]), None


def substitute_stage(out: Image, lr: Image, cfg: CascadeConfig):
    blurred = convolve(out, cfg.degrade.blur_kernel())
    bhat, record = pixel_substitute(blurred, lr, cfg.scale)
    return blurred, bhat, record


def run_cascade(
    lr: Image,
    cfg: CascadeConfig,
    nets: Optional[Sequence[Optional[ToyNet]]] = None,
    hr_gt: Optional[Image] = None,
) -> tuple[Image, StageTrace]:
    """Super-resolve ``lr`` through ``cfg.T`` stages.

    ``nets[t]`` supplies an in-memory network for toynet stage ``t`` (0-based);
    otherwise weights are loaded from the stage spec.  With ``hr_gt`` every
    stage output is also scored with :func:`evaluate_sr`.
    """
    if nets is not None and len(nets) < cfg.T:
        nets = list(nets) + [None] * (cfg.T - len(nets))
    trace = StageTrace()
    x = lr
    out = lr
    for t in range(cfg.T):
        out, it = apply_refiner(t, x, lr, cfg, nets)
        if (out.height, out.width) != (lr.height * cfg.scale, lr.width * cfg.scale):
            raise ValueError(f"stage {t + 1} produced {out.width}x{out.height}, expected HR size")
        blurred, bhat, record = substitute_stage(out, lr, cfg)
        trace.append(StageRecord(
            output=out,
            blurred=blurred,
            substituted=bhat,
            substitution=record,
            output_residual=constraint_residual(out, lr, cfg.degrade),
            substituted_residual=_decimation_residual(bhat, lr, cfg.scale),
            iteration=it,
            metrics=evaluate_sr(out, hr_gt, cfg.scale) if hr_gt is not None else None,
        ))
        x = bhat
    return out, trace


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    nets: list  # one ToyNet per stage
    history: list  # (stage, step, loss) rows, stage 1-based
    stage_losses: dict  # stage -> (mean L1 before, mean L1 after)


def mean_l1(net: ToyNet, inputs: Sequence[Image], targets: Sequence[Image]) -> float:
    return float(np.mean([l1_loss(net.forward(x.data[None]), y.data[None])[0] for x, y in zip(inputs, targets)]))


def _check_samples(samples, cfg: CascadeConfig, trainable_T: int):
    if not samples:
        raise ValueError("no training samples")
    bad = [i + 1 for i, sp in enumerate(cfg.stages[:trainable_T]) if sp.kind != "toynet"]
    if bad:
        raise ValueError(f"stages {bad} are not trainable (kind must be toynet)")
    s = cfg.scale
    for i, (lr, hr) in enumerate(samples):
        if (hr.height, hr.width) != (lr.height * s, lr.width * s) or hr.channels != lr.channels:
            raise ValueError(f"sample {i}: HR {hr.shape} inconsistent with LR {lr.shape} at x{s}")


def _train_stage(net, inputs, targets, lrs, epochs, rng, adam, spec=None, lam=0.0, on_step=None):
    history = []
    step = 0
    for _ in range(epochs):
        for n in rng.permutation(len(inputs)):
            y, cache = net.forward(inputs[n].data[None], keep=True)
            loss, g = l1_loss(y, targets[n].data[None])
            if lam:
                floss, fg = formation_loss(y, lrs[n].data[None], spec, lam)
                loss += floss
                g = g + fg
            grads, _ = net.backward(cache, g)
            adam_step(net.params, grads, adam)
            step += 1
            history.append((step, loss))
            if on_step is not None:
                on_step(step, loss)
    return history


def _new_adam(lr, beta1, beta2, eps):
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def train_cascade(
    samples: Sequence[tuple[Image, Image]],
    cfg: CascadeConfig,
    epochs: int,
    seed: int = 0,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    on_step: Optional[Callable] = None,
) -> TrainResult:
    """Greedy stage-by-stage training with an L1 loss.

    Stage ``t`` is trained with every earlier stage frozen; its inputs are the
    substituted images produced by that frozen prefix.  One Adam step per
    sample (minibatch of one), samples shuffled each epoch.
    """
    _check_samples(samples, cfg, cfg.T)
    lrs = [lr_img for lr_img, _ in samples]
    hrs = [hr for _, hr in samples]
    channels = lrs[0].channels
    nets: list = []
    history: list = []
    stage_losses: dict = {}
    for t in range(cfg.T):
        spec = cfg.stages[t]
        if cfg.shared_weights and t > 1:
            nets.append(nets[1])
            continue
        if t == 0:
            inputs = lrs
        else:
            inputs = []
            for lr_img in lrs:
                out, _ = apply_refiner(t - 1, prev_inputs[len(inputs)], lr_img, cfg, nets)
                inputs.append(substitute_stage(out, lr_img, cfg)[1])
        net = ToyNet.create(channels, spec.features, spec.blocks, cfg.scale, has_upsampler=(t == 0), seed=[seed, t])
        before = mean_l1(net, inputs, hrs)
        rng = np.random.default_rng([seed, t, 1])
        adam = _new_adam(lr, beta1, beta2, eps)
        cb = (lambda st, ls, _t=t: on_step(_t + 1, st, ls)) if on_step else None
        rows = _train_stage(net, inputs, hrs, lrs, epochs, rng, adam, on_step=cb)
        history.extend((t + 1, st, ls) for st, ls in rows)
        stage_losses[t + 1] = (before, mean_l1(net, inputs, hrs))
        log.info("stage %d: mean L1 %.5f -> %.5f", t + 1, *stage_losses[t + 1])
        nets.append(net)
        prev_inputs = inputs
    return TrainResult(nets=nets, history=history, stage_losses=stage_losses)


def train_soft_constraint(
    samples: Sequence[tuple[Image, Image]],
    cfg: CascadeConfig,
    lam: float = 0.01,
    epochs: int = 1,
    seed: int = 0,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    on_step: Optional[Callable] = None,
) -> TrainResult:
    """Single feed-forward stage trained on L1 plus ``lam`` times the formation loss.

    Initialisation and sample order match stage 1 of :func:`train_cascade`
    for the same seed, so ``lam=0`` reproduces it exactly.
    """
    if cfg.T != 1:
        raise ValueError(f"soft-constraint training needs T=1, got T={cfg.T}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    _check_samples(samples, cfg, 1)
    lrs = [a for a, _ in samples]
    hrs = [b for _, b in samples]
    spec = cfg.stages[0]
    net = ToyNet.create(lrs[0].channels, spec.features, spec.blocks, cfg.scale, has_upsampler=True, seed=[seed, 0])
    before = mean_l1(net, lrs, hrs)
    rng = np.random.default_rng([seed, 0, 1])
    adam = _new_adam(lr, beta1, beta2, eps)
    cb = (lambda st, ls: on_step(1, st, ls)) if on_step else None
    rows = _train_stage(net, lrs, hrs, lrs, epochs, rng, adam, spec=cfg.degrade, lam=lam, on_step=cb)
    return TrainResult(
        nets=[net],
        history=[(1, st, ls) for st, ls in rows],
        stage_losses={1: (before, mean_l1(net, lrs, hrs))},
    )
