"""Parameter registry and the shared dense building block."""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Parameter, Value


class ParamStore:
    """Owns every parameter and normalization running state of a model.

    Parameters are created lazily on first use under a slash-free dotted
    name, so building a forward graph once also builds the model.
    """

    def __init__(self, seed: int = 0):
        self.params: dict[str, Parameter] = {}
        self.bn_state: dict[str, dict] = {}
        self.seed = seed
        self.training = True
        # inference normalizes with the statistics of the cloud at hand unless
        # this is set; training always does (one pair per step)
        self.use_running_stats = False

    def get(self, name: str, shape: tuple, init: str = "he") -> Parameter:
        p = self.params.get(name)
        if p is None:
            p = Parameter(name, self._init(name, shape, init))
            self.params[name] = p
        elif p.value.shape != tuple(shape):
            raise T.DimensionError(f"parameter {name} has shape {p.value.shape}, requested {shape}")
        return p

    def _init(self, name, shape, init):
        # seeded per name so toggling one sub-module leaves the others' init intact
        rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
        if init == "zeros":
            return np.zeros(shape)
        if init == "ones":
            return np.ones(shape)
        fan_in = shape[0]
        std = np.sqrt(2.0 / fan_in) if init == "he" else np.sqrt(1.0 / fan_in)
        return rng.normal(0.0, std, size=shape)

    def norm_state(self, name: str, c: int) -> dict:
        st = self.bn_state.get(name)
        if st is None:
            dtype = T.default_dtype()
            st = {"mean": np.zeros(c, dtype=dtype), "var": np.ones(c, dtype=dtype)}
            self.bn_state[name] = st
        return st

    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    def state_arrays(self, with_optimizer: bool = True) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in sorted(self.params):
            p = self.params[name]
            out[name] = p.data
            if with_optimizer:
                out[f"adam.m/{name}"] = p.m
                out[f"adam.v/{name}"] = p.v
                out[f"adam.step/{name}"] = np.array([p.step], dtype=np.float32)
        for name in sorted(self.bn_state):
            out[f"bn.mean/{name}"] = self.bn_state[name]["mean"]
            out[f"bn.var/{name}"] = self.bn_state[name]["var"]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        dtype = T.default_dtype()
        for key, arr in arrays.items():
            kind, _, name = key.partition("/")
            if not name:
                p = self.params.get(key)
                if p is None:
                    p = Parameter(key, arr)
                    self.params[key] = p
                p.value.data = np.array(arr, dtype=dtype)
                if p.m.shape != arr.shape:
                    p.m = np.zeros(arr.shape, dtype=dtype)
                    p.v = np.zeros(arr.shape, dtype=dtype)
            elif kind in ("adam.m", "adam.v", "adam.step"):
                continue
            elif kind in ("bn.mean", "bn.var"):
                st = self.norm_state(name, arr.shape[0])
                st["mean" if kind == "bn.mean" else "var"] = np.array(arr, dtype=dtype)
            else:
                raise ValueError(f"unknown checkpoint entry {key}")
        for key, arr in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "adam.m":
                self.params[name].m = np.array(arr, dtype=dtype)
            elif kind == "adam.v":
                self.params[name].v = np.array(arr, dtype=dtype)
            elif kind == "adam.step":
                self.params[name].step = int(arr[0])


def normalize_features(store: ParamStore, name: str, x: Value) -> Value:
    c = x.shape[-1]
    scale = store.get(f"{name}.scale", (c,), "ones")
    shift = store.get(f"{name}.shift", (c,), "zeros")
    state = store.norm_state(name, c)
    if store.training:
        return T.batch_norm(x, scale.value, shift.value, state, training=True)
    if store.use_running_stats:
        return T.batch_norm(x, scale.value, shift.value, state, training=False)
    return T.batch_norm(x, scale.value, shift.value, None, training=True)


def dense(store: ParamStore, name: str, x: Value, cout: int, norm: bool = True,
          act: str | None = "leaky_relu") -> Value:
    """Linear layer, optional normalization, optional leaky ReLU."""
    cin = x.shape[-1]
    w = store.get(f"{name}.w", (cin, cout), "he" if act else "xavier")
    b = store.get(f"{name}.b", (cout,), "zeros")
    y = T.linear(x, w.value, b.value)
    if norm:
        y = normalize_features(store, f"{name}.bn", y)
    if act == "leaky_relu":
        y = T.leaky_relu(y)
    return y


def mlp(store: ParamStore, name: str, x: Value, widths: list[int], last_plain: bool = False) -> Value:
    """Stack of dense layers; ``last_plain`` leaves the final layer without norm/activation."""
    for i, c in enumerate(widths):
        plain = last_plain and i == len(widths) - 1
        x = dense(store, f"{name}.{i}", x, c, norm=not plain, act=None if plain else "leaky_relu")
    return x
