"""Segmentation backbones: the model interface and a tiny reference conv-net."""
from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, conv2d, relu

NUM_CLASSES = 2


@runtime_checkable
class SegmentationModel(Protocol):
    """Anything mapping images [3,H,W] (or [N,3,H,W]) to logits [2,H,W].

    ``parameters()`` returns the trainable tensors keyed by a stable name;
    the trainer and checkpoint code rely on nothing else.
    """

    def parameters(self) -> dict[str, Tensor]: ...

    def __call__(self, image: Tensor) -> Tensor: ...


class TinySegNet:
    """Three shape-preserving 3x3 conv layers, 3 -> 8 -> 8 -> 2, ReLU between."""

    widths = (3, 8, 8, NUM_CLASSES)
    kernel_size = 3
    min_size = 7  # receptive field of three stacked 3x3 convs

    def __init__(self, params: dict[str, Tensor]):
        self._params = params

    @classmethod
    def init_parameters(cls, seed: int) -> "TinySegNet":
        """Fan-in scaled uniform kernels (std = 1/sqrt(fan_in)), zero biases."""
        rng = np.random.default_rng(seed)
        k = cls.kernel_size
        params = {}
        for layer, (c_in, c_out) in enumerate(zip(cls.widths[:-1], cls.widths[1:]), start=1):
            fan_in = c_in * k * k
            bound = np.sqrt(3.0 / fan_in)
            params[f"conv{layer}.weight"] = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)), requires_grad=True)
            params[f"conv{layer}.bias"] = Tensor(np.zeros((c_out, 1, 1)), requires_grad=True)
        return cls(params)

    @classmethod
    def zeros(cls) -> "TinySegNet":
        model = cls.init_parameters(0)
        for p in model._params.values():
            p.data[...] = 0.0
        return model

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def num_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def __call__(self, image: Tensor) -> Tensor:
        if image.ndim not in (3, 4) or image.shape[-3] != self.widths[0]:
            raise DimensionError(f"TinySegNet expects [3,H,W] or [N,3,H,W] input, got {image.shape}")
        if min(image.shape[-2:]) < self.min_size:
            raise DimensionError(f"TinySegNet needs H,W >= {self.min_size}, got {image.shape[-2:]}")
        p = self._params
        pad = self.kernel_size // 2
        h = relu(conv2d(image, p["conv1.weight"], pad) + p["conv1.bias"])
        h = relu(conv2d(h, p["conv2.weight"], pad) + p["conv2.bias"])
        return conv2d(h, p["conv3.weight"], pad) + p["conv3.bias"]


def forward(model: SegmentationModel, image: Tensor) -> Tensor:
    return model(image)
