"""
Small numpy MLP heads used by dynamic shifting

WeightHead turns per-seed features into softmax weights over the bandwidth
candidates. DirectRegressionHead regresses one positive Gaussian bandwidth
per seed.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax
from sklearn.preprocessing import StandardScaler

from errors import ShapeMismatchError

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN_SIZES = (64, 64)
DEFAULT_DELTA_MIN = 0.05


@dataclass
class ForwardCache:
    """Intermediate values of one MLP forward pass, kept for backpropagation"""
    inputs: np.ndarray
    pre_activations: List[np.ndarray]
    activations: List[np.ndarray]


class MLP:
    """Fully connected network with ReLU hidden layers and a linear output layer"""

    KIND = 0

    def __init__(self, layer_sizes: Sequence[int], seed: int = 0, zero_init: bool = False):
        """
        Initialize the network

        Args:
            layer_sizes: Widths from input to output, at least two entries
            seed: RNG seed for He-normal initialization
            zero_init: Start from all-zero parameters instead
        """
        if len(layer_sizes) < 2 or any(int(s) < 1 for s in layer_sizes):
            raise ValueError(f"Invalid layer sizes {list(layer_sizes)}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.logger = logging.getLogger(__name__)

        rng = np.random.default_rng(seed)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            if zero_init:
                weight = np.zeros((fan_in, fan_out))
            else:
                weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append(weight)
            self.biases.append(np.zeros(fan_out))

        # Feature normalization applied before the first layer
        self.input_mean = np.zeros(self.input_dim)
        self.input_scale = np.ones(self.input_dim)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def fit_normalizer(self, features: np.ndarray):
        """Fit the input standardization on a feature matrix"""
        features = self._check_features(features)
        scaler = StandardScaler().fit(features)
        self.input_mean = np.asarray(scaler.mean_, dtype=np.float64)
        self.input_scale = np.asarray(scaler.scale_, dtype=np.float64)
        self.logger.debug(f"Fitted feature normalizer on {len(features)} rows")

    def _check_features(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.input_dim:
            raise ShapeMismatchError(
                f"Head expects features of width {self.input_dim}, got shape {features.shape}"
            )
        return features

    def forward(self, features: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        """
        Raw network output

        Args:
            features: (N, D') unnormalized features

        Returns:
            Tuple of ((N, out) outputs, cache for backward)
        """
        features = self._check_features(features)
        x = (features - self.input_mean) / self.input_scale
        pre_activations = []
        activations = [x]
        last = len(self.weights) - 1
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            z = activations[-1] @ weight + bias
            pre_activations.append(z)
            activations.append(z if i == last else np.maximum(z, 0.0))
        return activations[-1], ForwardCache(features, pre_activations, activations)

    def backward(self, cache: ForwardCache, d_output: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """
        Backpropagate a gradient on the raw output

        Args:
            cache: Cache returned by forward
            d_output: (N, out) gradient of the cost w.r.t. the output

        Returns:
            Tuple of (parameter gradients keyed like parameters(), (N, D') gradient w.r.t. features)
        """
        grads: Dict[str, np.ndarray] = {}
        grad = np.asarray(d_output, dtype=np.float64)
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                grad = grad * (cache.pre_activations[i] > 0)
            grads[f"W{i}"] = cache.activations[i].T @ grad
            grads[f"b{i}"] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        d_features = grad / self.input_scale
        return grads, d_features

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live parameter arrays keyed W0, b0, W1, b1, ..."""
        params = {}
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            params[f"W{i}"] = weight
            params[f"b{i}"] = bias
        return params

    def set_parameters(self, params: Dict[str, np.ndarray]):
        for i in range(len(self.weights)):
            weight = np.asarray(params[f"W{i}"], dtype=np.float64)
            bias = np.asarray(params[f"b{i}"], dtype=np.float64)
            if weight.shape != self.weights[i].shape or bias.shape != self.biases[i].shape:
                raise ShapeMismatchError(f"Layer {i} parameters have the wrong shape")
            self.weights[i] = weight.copy()
            self.biases[i] = bias.copy()

    def copy(self) -> 'MLP':
        clone = self.__class__.__new__(self.__class__)
        clone.__dict__.update(self.__dict__)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone.input_mean = self.input_mean.copy()
        clone.input_scale = self.input_scale.copy()
        return clone


class WeightHead(MLP):
    """MLP followed by a row-wise softmax over the bandwidth candidates"""

    KIND = 1

    @classmethod
    def create(cls, feature_dim: int, num_candidates: int,
               hidden_sizes: Sequence[int] = DEFAULT_HIDDEN_SIZES,
               seed: int = 0, zero_init: bool = False) -> 'WeightHead':
        return cls([feature_dim, *hidden_sizes, num_candidates], seed=seed, zero_init=zero_init)

    @property
    def num_candidates(self) -> int:
        return self.output_dim

    def weights_for(self, features: np.ndarray) -> np.ndarray:
        """(N, l) candidate weights; every row sums to 1"""
        logits, _ = self.forward(features)
        return softmax(logits, axis=1)


class DirectRegressionHead(MLP):
    """MLP emitting one bandwidth per seed: softplus(raw) + delta_min"""

    KIND = 2

    def __init__(self, layer_sizes: Sequence[int], seed: int = 0, zero_init: bool = False,
                 delta_min: float = DEFAULT_DELTA_MIN):
        if layer_sizes[-1] != 1:
            raise ValueError("Direct-regression head must have a single output")
        if not delta_min > 0:
            raise ValueError(f"delta_min must be positive, got {delta_min}")
        super().__init__(layer_sizes, seed=seed, zero_init=zero_init)
        self.delta_min = float(delta_min)

    @classmethod
    def create(cls, feature_dim: int, hidden_sizes: Sequence[int] = DEFAULT_HIDDEN_SIZES,
               seed: int = 0, zero_init: bool = False,
               delta_min: float = DEFAULT_DELTA_MIN) -> 'DirectRegressionHead':
        return cls([feature_dim, *hidden_sizes, 1], seed=seed, zero_init=zero_init, delta_min=delta_min)

    def bandwidths_for(self, features: np.ndarray) -> np.ndarray:
        """(N,) strictly positive bandwidths in meters"""
        raw, _ = self.forward(features)
        return np.logaddexp(0.0, raw[:, 0]) + self.delta_min

    @staticmethod
    def bandwidth_slope(raw: np.ndarray) -> np.ndarray:
        """Derivative of the bandwidth w.r.t. the raw output"""
        return expit(raw)


def build_head(kind: str, feature_dim: int, num_candidates: int,
               hidden_sizes: Sequence[int] = DEFAULT_HIDDEN_SIZES, seed: int = 0,
               zero_init: bool = False, delta_min: Optional[float] = None) -> MLP:
    """
    Create a fresh head of the given style

    Args:
        kind: 'weighted' or 'direct'
        feature_dim: Feature width D'
        num_candidates: Number of bandwidth candidates (weighted heads only)
        hidden_sizes: Hidden layer widths
        seed: Initialization seed
        zero_init: All-zero parameters
        delta_min: Minimum bandwidth of a direct head

    Returns:
        WeightHead or DirectRegressionHead
    """
    if kind == 'weighted':
        return WeightHead.create(feature_dim, num_candidates, hidden_sizes, seed=seed, zero_init=zero_init)
    if kind == 'direct':
        return DirectRegressionHead.create(
            feature_dim, hidden_sizes, seed=seed, zero_init=zero_init,
            delta_min=DEFAULT_DELTA_MIN if delta_min is None else delta_min,
        )
    raise ValueError(f"Unknown head style '{kind}'")
