"""Differentiable compute kernel.

Thin layer over torch autograd that gives the VQ model and the emotion
classifier a fixed vocabulary of length-preserving 1-D layers, the three
losses they train with, a clipped Adam step with a plateau scheduler and a
finite-difference gradient checker.
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.errors import BackwardError, NonFiniteGradientError, ShapeMismatchError
from ..models.schemas import GradCheckReport, LayerKind, LayerSpec, LossKind, Mode, OptimizerConfig
import logging

logger = logging.getLogger(__name__)


_CHANNEL_KINDS = (LayerKind.CONV1D, LayerKind.DECONV1D, LayerKind.BATCHNORM1D)


class SpecLayer(nn.Module):
    """A torch module built from a LayerSpec that validates its input shape"""

    def __init__(self, spec: LayerSpec, name: str = ""):
        super().__init__()
        self.spec = spec
        self.layer_name = name or spec.kind.value
        self.module = self._build(spec)

    @staticmethod
    def _build(spec: LayerSpec) -> nn.Module:
        if spec.kind == LayerKind.CONV1D:
            return nn.Conv1d(spec.in_channels, spec.out_channels, spec.kernel_size, spec.stride, spec.padding)
        if spec.kind == LayerKind.DECONV1D:
            return nn.ConvTranspose1d(
                spec.in_channels, spec.out_channels, spec.kernel_size, spec.stride, spec.padding
            )
        if spec.kind == LayerKind.BATCHNORM1D:
            return nn.BatchNorm1d(spec.in_channels, eps=spec.eps, momentum=spec.momentum)
        if spec.kind == LayerKind.RELU:
            return nn.ReLU()
        if spec.kind == LayerKind.IDENTITY:
            return nn.Identity()
        if spec.kind == LayerKind.MAXPOOL1D:
            return nn.MaxPool1d(spec.pool_kernel)
        if spec.kind == LayerKind.DROPOUT:
            return nn.Dropout(spec.p)
        if spec.kind == LayerKind.LINEAR:
            return nn.Linear(spec.in_features, spec.out_features)
        raise ValueError(f"Unsupported layer kind {spec.kind}")

    def check_input(self, x: torch.Tensor) -> None:
        spec = self.spec
        if spec.kind in _CHANNEL_KINDS:
            if x.dim() != 3 or x.shape[1] != spec.in_channels:
                raise ShapeMismatchError(self.layer_name, f"[B, {spec.in_channels}, L]", list(x.shape))
        elif spec.kind == LayerKind.MAXPOOL1D:
            if x.dim() != 3 or x.shape[2] < spec.pool_kernel:
                raise ShapeMismatchError(self.layer_name, f"[B, C, L >= {spec.pool_kernel}]", list(x.shape))
        elif spec.kind == LayerKind.LINEAR:
            features = int(math.prod(x.shape[1:])) if x.dim() > 1 else -1
            if features != spec.in_features:
                raise ShapeMismatchError(self.layer_name, f"[B, {spec.in_features}]", list(x.shape))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        if self.spec.kind == LayerKind.LINEAR and x.dim() > 2:
            x = x.flatten(1)
        return self.module(x)


class SpecStack(nn.Sequential):
    """Sequential stack of SpecLayers"""

    def __init__(self, specs: Sequence[LayerSpec], prefix: str = "layer"):
        super().__init__(*[SpecLayer(spec, f"{prefix}{i}.{spec.kind.value}") for i, spec in enumerate(specs)])
        self.specs = list(specs)


def conv_block(in_channels: int, out_channels: int, last: bool = False, deconv: bool = False) -> List[LayerSpec]:
    """Conv (or deconv) -> BatchNorm -> ReLU, with Identity in place of ReLU on the last block"""
    kind = LayerKind.DECONV1D if deconv else LayerKind.CONV1D
    return [
        LayerSpec(kind=kind, in_channels=in_channels, out_channels=out_channels),
        LayerSpec(kind=LayerKind.BATCHNORM1D, in_channels=out_channels),
        LayerSpec(kind=LayerKind.IDENTITY if last else LayerKind.RELU),
    ]


@dataclass
class ForwardTrace:
    output: torch.Tensor
    parameters: Dict[str, torch.Tensor]
    inputs: Dict[str, torch.Tensor] = field(default_factory=dict)
    mode: Mode = Mode.TRAIN
    consumed: bool = False


@dataclass
class LossResult:
    value: torch.Tensor
    contributions: torch.Tensor
    n_terms: int
    empty: bool = False


class AdamOptimizer:
    """Adam with L2 weight decay and global-norm gradient clipping"""

    def __init__(self, named_parameters: Iterable[Tuple[str, torch.Tensor]], config: OptimizerConfig):
        self.config = config
        self.named = [(name, p) for name, p in named_parameters if p.requires_grad]
        self.optimizer = torch.optim.Adam(
            [p for _, p in self.named],
            lr=config.lr,
            betas=tuple(config.betas),
            eps=config.eps,
            weight_decay=config.weight_decay,
        )

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def step(self) -> float:
        """Check, clip and apply gradients; returns the pre-clip global norm"""
        for name, p in self.named:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                logger.error(f"Non-finite gradient in {name}")
                raise NonFiniteGradientError(name)
        params = [p for _, p in self.named if p.grad is not None]
        if not params:
            return 0.0
        if self.config.clip_norm is not None:
            norm = torch.nn.utils.clip_grad_norm_(params, self.config.clip_norm)
        else:
            norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad) for p in params]))
        self.optimizer.step()
        return float(norm)

    def state_dict(self) -> dict:
        return self.optimizer.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state)


class PlateauScheduler:
    """Multiply the learning rate by `factor` after `patience` flat validation epochs"""

    def __init__(self, optimizer: AdamOptimizer, factor: float = 0.1, patience: int = 10):
        self.optimizer = optimizer
        # torch reduces once the bad-epoch count exceeds its patience
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer.optimizer, mode="min", factor=factor, patience=max(patience - 1, 0)
        )

    def step(self, metric: float) -> float:
        self.scheduler.step(metric)
        return self.optimizer.lr

    def state_dict(self) -> dict:
        return self.scheduler.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.scheduler.load_state_dict(state)


class NumKernel:
    def build_layer(self, spec: LayerSpec, name: str = "") -> SpecLayer:
        return SpecLayer(spec, name)

    def build_stack(self, specs: Sequence[LayerSpec], prefix: str = "layer") -> SpecStack:
        return SpecStack(specs, prefix)

    def layer_forward(self, layer: Union[SpecLayer, LayerSpec], x: torch.Tensor, mode: Mode = Mode.EVAL) -> torch.Tensor:
        """Run a single layer in train or eval mode"""
        if isinstance(layer, LayerSpec):
            layer = SpecLayer(layer)
        layer.train(mode == Mode.TRAIN)
        with torch.set_grad_enabled(mode == Mode.TRAIN):
            return layer(x)

    def forward(self, module: nn.Module, *inputs: torch.Tensor, mode: Mode = Mode.TRAIN) -> ForwardTrace:
        """Run a module and record the trace needed by backward"""
        module.train(mode == Mode.TRAIN)
        recording = mode == Mode.TRAIN
        leaves = {
            f"input{i}": x.detach().clone().requires_grad_(recording and x.is_floating_point())
            for i, x in enumerate(inputs)
        }
        with torch.set_grad_enabled(recording):
            output = module(*leaves.values())
        return ForwardTrace(
            output=output,
            parameters=dict(module.named_parameters()),
            inputs=leaves,
            mode=mode,
        )

    def attach(self, output: torch.Tensor, module: nn.Module, inputs: Optional[Dict[str, torch.Tensor]] = None) -> ForwardTrace:
        """Wrap an externally computed loss as a trace of `module`"""
        return ForwardTrace(output=output, parameters=dict(module.named_parameters()), inputs=inputs or {})

    def backward(self, trace: Optional[ForwardTrace], upstream: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
        """Populate gradients for every trainable parameter and recorded input"""
        if trace is None:
            raise BackwardError("backward called without a recorded forward")
        if trace.mode != Mode.TRAIN or not trace.output.requires_grad:
            raise BackwardError("forward was not recorded in train mode")
        if trace.consumed:
            raise BackwardError("trace was already consumed by a previous backward")

        for p in trace.parameters.values():
            p.grad = None
        if upstream is None:
            if trace.output.numel() != 1:
                raise BackwardError("upstream gradient required for a non-scalar output")
            upstream = torch.ones_like(trace.output)
        trace.output.backward(upstream)
        trace.consumed = True

        grads: Dict[str, torch.Tensor] = {}
        for name, p in trace.parameters.items():
            if not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            grads[name] = p.grad
        for name, x in trace.inputs.items():
            if x.requires_grad:
                grads[name] = x.grad if x.grad is not None else torch.zeros_like(x)
        return grads

    def loss_eval(
        self,
        kind: LossKind,
        prediction: torch.Tensor,
        target: torch.Tensor,
        observed_mask: Optional[torch.Tensor] = None,
        class_weights: Optional[torch.Tensor] = None,
    ) -> LossResult:
        if kind == LossKind.MASKED_MSE:
            return self.masked_mse(prediction, target, observed_mask)
        if kind == LossKind.WEIGHTED_BCE_LOGITS:
            return self.weighted_bce_logits(prediction, target, observed_mask)
        if kind == LossKind.CROSS_ENTROPY:
            return self.cross_entropy(prediction, target, class_weights)
        raise ValueError(f"Unknown loss {kind}")

    def masked_mse(self, prediction: torch.Tensor, target: torch.Tensor, observed_mask: Optional[torch.Tensor]) -> LossResult:
        """Mean squared error over entries whose mask is exactly 1"""
        if observed_mask is None:
            raise ValueError("masked_mse requires an observation mask")
        observed = observed_mask == 1
        # masked entries feed a constant, so neither their values nor NaN sentinels reach the graph
        safe_target = torch.where(observed, target, torch.zeros_like(target))
        residual = torch.where(observed, prediction - safe_target, torch.zeros_like(prediction))
        contributions = residual**2
        n = int(observed.sum())
        if n == 0:
            return LossResult(value=(prediction * 0.0).sum(), contributions=contributions, n_terms=0, empty=True)
        return LossResult(value=contributions.sum() / n, contributions=contributions, n_terms=n)

    def weighted_bce_logits(
        self, logits: torch.Tensor, target: torch.Tensor, observed_mask: Optional[torch.Tensor] = None
    ) -> LossResult:
        """Binary cross-entropy on logits with balanced class weights n / (2 n_c)"""
        observed = torch.ones_like(target, dtype=torch.bool) if observed_mask is None else observed_mask == 1
        safe_target = torch.where(observed, target, torch.zeros_like(target))
        n = int(observed.sum())
        if n == 0:
            return LossResult(value=(logits * 0.0).sum(), contributions=torch.zeros_like(logits), n_terms=0, empty=True)

        positives = int(((safe_target > 0.5) & observed).sum())
        negatives = n - positives
        if positives == 0 or negatives == 0:
            w_pos = w_neg = 1.0
        else:
            w_pos, w_neg = n / (2.0 * positives), n / (2.0 * negatives)
        weights = torch.where(safe_target > 0.5, torch.full_like(logits, w_pos), torch.full_like(logits, w_neg))
        raw = F.binary_cross_entropy_with_logits(logits, safe_target, reduction="none")
        contributions = torch.where(observed, weights * raw, torch.zeros_like(raw))
        return LossResult(value=contributions.sum() / n, contributions=contributions, n_terms=n)

    def cross_entropy(
        self, logits: torch.Tensor, target: torch.Tensor, class_weights: Optional[torch.Tensor] = None
    ) -> LossResult:
        contributions = F.cross_entropy(logits, target.long(), weight=class_weights, reduction="none")
        n = int(target.numel())
        if n == 0:
            return LossResult(value=(logits * 0.0).sum(), contributions=contributions, n_terms=0, empty=True)
        if class_weights is not None:
            value = contributions.sum() / class_weights[target.long()].sum()
        else:
            value = contributions.mean()
        return LossResult(value=value, contributions=contributions, n_terms=n)

    def make_optimizer(self, module: nn.Module, config: OptimizerConfig) -> AdamOptimizer:
        return AdamOptimizer(module.named_parameters(), config)

    def optimize_step(self, optimizer: AdamOptimizer) -> float:
        return optimizer.step()

    def grad_check(
        self,
        fragment: nn.Module,
        inputs: Union[torch.Tensor, Sequence[torch.Tensor]],
        tolerance: float = 1e-4,
        step: float = 1e-6,
        seed: int = 0,
        objective: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
        norm_floor: float = 1e-3,
    ) -> GradCheckReport:
        """Compare autograd against float64 central differences

        Per-tensor error is `|a - n| / max(|a| + |n|, norm_floor)`; tensors whose gradient
        vanishes analytically (a bias ahead of batchnorm) are compared in absolute terms.
        """
        model = copy.deepcopy(fragment).double()
        model.train()
        if isinstance(inputs, torch.Tensor):
            inputs = [inputs]
        xs = [x.detach().clone().double().requires_grad_(True) for x in inputs]

        def evaluate() -> torch.Tensor:
            # identical dropout masks on every evaluation
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                out = model(*xs)
            return objective(out) if objective is not None else (out * weights).sum()

        weights = None
        if objective is None:
            with torch.no_grad(), torch.random.fork_rng():
                torch.manual_seed(seed)
                sample = model(*xs)
            generator = torch.Generator().manual_seed(seed)
            weights = torch.randn(sample.shape, generator=generator, dtype=torch.float64)

        tensors: Dict[str, torch.Tensor] = {name: p for name, p in model.named_parameters() if p.requires_grad}
        tensors.update({f"input{i}": x for i, x in enumerate(xs)})
        n_params = sum(t.numel() for t in tensors.values())
        if n_params > 5000:
            logger.warning(f"Gradient check over {n_params} entries, expect a slow run")

        for t in tensors.values():
            t.grad = None
        evaluate().backward()
        analytic = {name: (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)) for name, t in tensors.items()}

        per_tensor: Dict[str, float] = {}
        with torch.no_grad():
            for name, t in tensors.items():
                flat = t.data.view(-1)
                numeric = torch.zeros_like(flat)
                for i in range(flat.numel()):
                    original = flat[i].item()
                    flat[i] = original + step
                    upper = evaluate().item()
                    flat[i] = original - step
                    lower = evaluate().item()
                    flat[i] = original
                    numeric[i] = (upper - lower) / (2.0 * step)
                a = analytic[name].view(-1)
                denominator = max(float(a.norm() + numeric.norm()), norm_floor)
                per_tensor[name] = float((a - numeric).norm()) / denominator

        max_rel_err = max(per_tensor.values()) if per_tensor else 0.0
        report = GradCheckReport(
            max_rel_err=max_rel_err,
            passed=max_rel_err < tolerance,
            tolerance=tolerance,
            per_tensor=per_tensor,
        )
        if not report.passed:
            logger.warning(f"Gradient check failed: max relative error {max_rel_err:.3e}")
        return report

    def count_parameters(self, module: nn.Module) -> int:
        return sum(p.numel() for p in module.parameters() if p.requires_grad)


# Global kernel instance
numkernel = NumKernel()
