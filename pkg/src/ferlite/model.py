"""Trainable-model abstraction, classification-head ops, and backends.

Two backends satisfy the same interface:

* a desk-scale reference backend: softmax regression over flattened
  (optionally strided) pixels, with analytic gradients, so the whole
  pipeline is verifiable end to end on a laptop;
* an adapter slot for an externally provided pretrained feature
  extractor, resolved at runtime from a ``module:factory`` string.  When
  the runtime is missing the pipeline degrades to the reference backend
  with a distinct error.

Parameters live in named groups tagged backbone / head / normalization,
which is what the training controller's freeze policies act on.
"""

from __future__ import annotations

import abc
import importlib
import warnings
from dataclasses import dataclass

import numpy as np

from .loss import ce_grad_logits, stable_softmax
from .seeding import RngKey, keyed_rng

ROLES = ("backbone", "head", "normalization")
ADAPTER_PARAM_RANGE = (9_000_000, 9_500_000)


class CapabilityError(RuntimeError):
    """A model exposes a role tag or refuses a policy the pipeline needs."""


class AdapterUnavailableError(RuntimeError):
    """The configured external backbone runtime cannot be loaded."""


class ParamCountWarning(UserWarning):
    """Assembled adapter parameter count is outside the expected range."""


@dataclass
class ParameterGroup:
    name: str
    role: str
    values: np.ndarray
    trainable: bool = True

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise CapabilityError(f"unknown parameter role {self.role!r}")
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class HeadSpec:
    """Global-pool features -> dropout -> dense softmax classifier."""

    feature_dim: int
    dropout_rate: float = 0.5
    num_classes: int = 7

    def __post_init__(self) -> None:
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


def global_average_pool(feature_map: np.ndarray) -> np.ndarray:
    """Mean over the spatial axes of an HxWxC map."""
    feature_map = np.asarray(feature_map, dtype=np.float64)
    return feature_map.mean(axis=(0, 1))


def dropout_apply(
    vec: np.ndarray, rate: float, rng_key: RngKey, training: bool
) -> np.ndarray:
    """Inverted dropout: zero with probability rate, scale survivors.

    Evaluation mode and rate 0 are exact identities.
    """
    vec = np.asarray(vec, dtype=np.float64)
    if not training or rate == 0.0:
        return vec.copy()
    mask = keyed_rng(*rng_key).random(vec.shape) >= rate
    return vec * mask / (1.0 - rate)


def head_forward(
    features: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    rng_key: RngKey = (),
    training: bool = False,
    dropout_rate: float = 0.5,
) -> np.ndarray:
    """softmax(W^T . dropout(features) + b) with max-subtraction stability."""
    dropped = dropout_apply(features, dropout_rate, rng_key, training)
    return stable_softmax(dropped @ np.asarray(weights) + np.asarray(bias))


class TrainableModel(abc.ABC):
    """What the training controller needs from any backend."""

    num_classes: int
    input_scale: float

    @abc.abstractmethod
    def prepare(self, images: np.ndarray) -> np.ndarray:
        """Backend-specific batch preparation from (N, 48, 48) images."""

    @abc.abstractmethod
    def forward(
        self, inputs: np.ndarray, *, training: bool = False, rng_key: RngKey = ()
    ) -> np.ndarray:
        """Class-probability rows; each sums to 1 and is elementwise >= 0."""

    @abc.abstractmethod
    def loss_and_grads(
        self,
        inputs: np.ndarray,
        targets: np.ndarray,
        sample_weights: np.ndarray,
        *,
        rng_key: RngKey = (),
        normalize_by_weight_sum: bool = False,
    ) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
        """(batch loss, probabilities, gradient per parameter name)."""

    @abc.abstractmethod
    def parameter_groups(self) -> list[ParameterGroup]:
        """Live group objects; freeze policies mutate their flags."""

    def get_parameters(self) -> dict[str, np.ndarray]:
        return {g.name: g.values.copy() for g in self.parameter_groups()}

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        groups = {g.name: g for g in self.parameter_groups()}
        for name, values in params.items():
            if name not in groups:
                raise KeyError(f"unknown parameter group {name!r}")
            if groups[name].values.shape != np.shape(values):
                raise ValueError(f"shape mismatch for {name!r}")
            groups[name].values = np.asarray(values, dtype=np.float64).copy()


def count_params(model: TrainableModel, trainable_only: bool = False) -> int:
    return sum(
        g.values.size
        for g in model.parameter_groups()
        if g.trainable or not trainable_only
    )


class ReferenceSoftmaxModel(TrainableModel):
    """Softmax regression over flattened pixels with analytic gradients.

    The feature extractor is the identity (an empty backbone group); the
    head is dropout plus a dense softmax layer.  Gradients come from
    ce_grad_logits and the chain rule, which makes this backend a correct
    and fast stand-in for exercising the loss, optimizer, controller, and
    metrics stack.
    """

    input_scale = 1.0 / 255.0

    def __init__(
        self,
        input_dim: int,
        num_classes: int = 7,
        *,
        dropout_rate: float = 0.5,
        downsample: int = 1,
    ) -> None:
        if input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        self.num_classes = num_classes
        self.dropout_rate = dropout_rate
        self.downsample = downsample
        self._groups = [
            ParameterGroup("backbone", "backbone", np.zeros(0)),
            ParameterGroup("head/weight", "head", np.zeros((input_dim, num_classes))),
            ParameterGroup("head/bias", "head", np.zeros(num_classes)),
        ]

    @classmethod
    def for_images(
        cls, num_classes: int = 7, *, dropout_rate: float = 0.5, downsample: int = 1
    ) -> "ReferenceSoftmaxModel":
        side = (48 + downsample - 1) // downsample
        return cls(
            side * side,
            num_classes,
            dropout_rate=dropout_rate,
            downsample=downsample,
        )

    def prepare(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if self.downsample > 1:
            images = images[:, :: self.downsample, :: self.downsample]
        return images.reshape(images.shape[0], -1) * self.input_scale

    def parameter_groups(self) -> list[ParameterGroup]:
        return self._groups

    def _params(self) -> tuple[np.ndarray, np.ndarray]:
        by_name = {g.name: g.values for g in self._groups}
        return by_name["head/weight"], by_name["head/bias"]

    def _dropped(self, inputs: np.ndarray, training: bool, rng_key: RngKey) -> np.ndarray:
        return dropout_apply(inputs, self.dropout_rate, rng_key, training)

    def forward(
        self, inputs: np.ndarray, *, training: bool = False, rng_key: RngKey = ()
    ) -> np.ndarray:
        weights, bias = self._params()
        return stable_softmax(self._dropped(inputs, training, rng_key) @ weights + bias)

    def loss_and_grads(
        self,
        inputs: np.ndarray,
        targets: np.ndarray,
        sample_weights: np.ndarray,
        *,
        rng_key: RngKey = (),
        normalize_by_weight_sum: bool = False,
    ) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
        weights, bias = self._params()
        dropped = self._dropped(inputs, training=True, rng_key=rng_key)
        logits = dropped @ weights + bias
        probs = stable_softmax(logits)

        targets = np.asarray(targets, dtype=np.float64)
        w = np.asarray(sample_weights, dtype=np.float64)
        per_sample = -np.sum(targets * np.log(probs), axis=1)
        denom = float(w.sum()) if normalize_by_weight_sum else float(len(w))
        loss = float((w * per_sample).sum() / denom)

        dlogits = ce_grad_logits(logits, targets, w[:, None]) / denom
        grads = {
            "head/weight": dropped.T @ dlogits,
            "head/bias": dlogits.sum(axis=0),
        }
        return loss, probs, grads

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(inputs), axis=1)


def reference_model_build(input_dim: int, num_classes: int = 7, **kwargs) -> ReferenceSoftmaxModel:
    return ReferenceSoftmaxModel(input_dim, num_classes, **kwargs)


def build_external_backbone(runtime: str | None, head: HeadSpec) -> TrainableModel:
    """Resolve 'module:factory' naming an external pretrained backbone.

    The factory receives the head spec and must return a TrainableModel
    with correctly tagged parameter groups.  A missing or unresolvable
    runtime raises AdapterUnavailableError so callers can degrade to the
    reference backend; an assembled model outside the expected parameter
    range only warns.
    """
    if not runtime:
        raise AdapterUnavailableError(
            "no external backbone runtime configured; use the reference backend"
        )
    module_name, _, attr = runtime.partition(":")
    if not attr:
        raise AdapterUnavailableError(f"runtime {runtime!r} is not 'module:factory'")
    try:
        module = importlib.import_module(module_name)
    except ImportError as exc:
        raise AdapterUnavailableError(f"cannot import runtime {module_name!r}: {exc}") from exc
    factory = getattr(module, attr, None)
    if factory is None:
        raise AdapterUnavailableError(f"{module_name!r} has no attribute {attr!r}")

    model = factory(head)
    for group in model.parameter_groups():
        if group.role not in ROLES:
            raise CapabilityError(f"adapter group {group.name!r} has unknown role {group.role!r}")
    total = count_params(model)
    low, high = ADAPTER_PARAM_RANGE
    if not low <= total <= high:
        warnings.warn(
            f"adapter parameter count {total} outside expected range [{low}, {high}]",
            ParamCountWarning,
            stacklevel=2,
        )
    return model
