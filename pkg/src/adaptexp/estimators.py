"""scikit-learn style wrappers around the quantizer and layer search."""

from __future__ import annotations

from typing import Optional

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_bits, check_tensor
from .expquant import QuantizedTensor, QuantParams, fake_quantize, quantization_error, quantize_tensor
from .search import (
    LayerQuantResult,
    LayerSearch,
    SearchConfig,
    scale_activation_threshold,
    search_optimal_base,
)


class ExponentialQuantizer(TransformerMixin, BaseEstimator):
    """Fit a per-tensor exponential codec by hill-climbing the base.

    ``transform`` returns the dequantized (fake-quantized) values with the
    input's shape; ``quantize`` returns the integer codes.
    """

    def __init__(self, bits: int = 4, epsilon: float = 0.01, max_steps: int = 10_000):
        self.bits = bits
        self.epsilon = epsilon
        self.max_steps = max_steps

    def fit(self, X, y=None):
        check_bits(self.bits)
        x = check_tensor(X)
        cfg = SearchConfig(epsilon=self.epsilon, max_steps=self.max_steps)
        res = search_optimal_base(x, self.bits, cfg)
        self.params_: QuantParams = res.params
        self.rmae_ = res.rmae
        self.init_params_ = res.init_params
        self.n_steps_ = res.steps
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        x = check_tensor(X)
        return fake_quantize(x, self.params_).reshape(x.shape)

    def quantize(self, X) -> QuantizedTensor:
        check_is_fitted(self, "params_")
        return quantize_tensor(check_tensor(X), self.params_)

    def score(self, X, y=None) -> float:
        """Negative relative mean absolute error, so larger is better."""
        check_is_fitted(self, "params_")
        return -quantization_error(check_tensor(X), self.params_)


class LayerQuantizer(BaseEstimator):
    """Smallest shared-base bitwidth meeting both error thresholds.

    ``fit(activations, weights)``; ``thr_act=None`` derives the activation
    threshold from ``thr_w`` and the tensors' mean magnitudes.
    """

    def __init__(self, thr_w: float = 0.05, thr_act: Optional[float] = None,
                 config: Optional[SearchConfig] = None):
        self.thr_w = thr_w
        self.thr_act = thr_act
        self.config = config

    def fit(self, X, y):
        acts, weights = check_tensor(X), check_tensor(y)
        search = LayerSearch(acts, weights, self.config)
        thr_act = self.thr_act
        if thr_act is None:
            thr_act = scale_activation_threshold(self.thr_w, search.mean_act, search.mean_w)
        self.result_: LayerQuantResult = search.select(thr_act, self.thr_w)
        self.bits_ = self.result_.bits
        self.start_ = self.result_.start
        return self

    def transform(self, X, y):
        """Fake-quantize an (activations, weights) pair with the fitted codecs."""
        check_is_fitted(self, "result_")
        a, w = check_tensor(X), check_tensor(y)
        return (fake_quantize(a, self.result_.act_params).reshape(a.shape),
                fake_quantize(w, self.result_.w_params).reshape(w.shape))
