"""Seeded random streams.

Every stochastic component draws from a PCG64 generator built from
``SeedSequence(seed, spawn_key=key)``, so a (seed, key) pair names one
reproducible stream and sibling streams never overlap.

Normal and exponential variates are produced by inverse-CDF transforms of
53-bit uniforms on the open interval (0, 1): ``ndtri(u)`` and
``-log(u)``. This pins the meaning of "seed 42" to the PCG64 bit stream
rather than to numpy's ziggurat implementation.
"""
from __future__ import annotations

from typing import Iterable, Union

import numpy as np
from scipy.special import ndtri

Key = Union[int, Iterable[int]]

_TWO_53 = float(2**53)


def make_rng(seed: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    # random() returns k / 2**53; shift to the cell midpoint to exclude 0
    u = rng.random(size)
    return (np.floor(u * _TWO_53) + 0.5) / _TWO_53


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    return ndtri(open_uniform(rng, size))


def exponential(rng: np.random.Generator, size, mean: float = 1.0) -> np.ndarray:
    return -mean * np.log(open_uniform(rng, size))
