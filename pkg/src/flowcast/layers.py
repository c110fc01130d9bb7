"""Small trainable building blocks shared by the encoders and flows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class Linear:
    w: Tensor   # (fan_in, fan_out)
    b: Tensor   # (fan_out,)

    @staticmethod
    def init(fan_in: int, fan_out: int, rng: np.random.Generator,
             zero: bool = False) -> "Linear":
        if zero:
            return Linear(ad.zeros_init((fan_in, fan_out)), ad.zeros_init((fan_out,)))
        return Linear(ad.uniform_init((fan_in, fan_out), fan_in, rng),
                      ad.zeros_init((fan_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]


@dataclass
class Mlp:
    """Feed-forward perceptron with tanh between layers.

    ``final_tanh`` bounds the output in (-1, 1); ``zero_final`` starts the
    net at the zero function, which the flows use to begin at the identity.
    """

    layers: list[Linear]
    final_tanh: bool = False

    @staticmethod
    def init(sizes: list[int], rng: np.random.Generator,
             zero_final: bool = False, final_tanh: bool = False) -> "Mlp":
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            is_last = i == len(sizes) - 2
            layers.append(Linear.init(fan_in, fan_out, rng, zero=zero_final and is_last))
        return Mlp(layers=layers, final_tanh=final_tanh)

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_tanh:
                x = ad.tanh(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]
