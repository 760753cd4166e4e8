"""Analytic collective performance model.

Bus bandwidth comes from per-algorithm anchor points interpolated linearly
in log2(message size), scaled by a channel-efficiency curve. Latency uses
the usual bus-bandwidth convention: an AllReduce moves 2(n-1)/n of the
payload per rank, AllGather and ReduceScatter (n-1)/n, Broadcast all of it.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from ._data import DEFAULT_MODEL, load_toml, resolve
from .context import Algorithm, Collective, Protocol

MiB = 1 << 20


@dataclass(eq=False)
class PerfModel:
    name: str
    anchors: dict  # Algorithm -> (log2 size in MiB array, GB/s array)
    channel_points: tuple[tuple[float, float], ...]
    ranks: int = 8
    max_channels: int = 32
    default_algorithm: Algorithm = Algorithm.NVLS
    default_protocol: Protocol = Protocol.SIMPLE
    tree_factor: float = 0.9
    ll_factor_small: float = 0.5
    ll_factor_large: float = 0.9
    ll_threshold_mib: float = 1.0
    reference: dict = field(default_factory=dict)

    def __post_init__(self):
        for algo, (xs, ys) in self.anchors.items():
            if len(xs) == 0 or np.any(np.asarray(ys) <= 0):
                raise ValueError(f"anchors for {algo.name} must be non-empty and positive")
            if np.any(np.diff(xs) <= 0):
                raise ValueError(f"anchor sizes for {algo.name} must be strictly increasing")
        pts = sorted(self.channel_points)
        if not pts or any(v <= 0 for _, v in pts):
            raise ValueError("channel curve points must be positive")
        if any(b[1] < a[1] for a, b in zip(pts, pts[1:])):
            raise ValueError("channel curve must be non-decreasing")
        self._cx = np.log2([c for c, _ in pts])
        self._cy = np.log([v for _, v in pts])

    def anchor_bandwidth(self, algorithm: Algorithm, msg_size: int) -> float:
        """GB/s at the best channel count, before protocol and channel scaling."""
        if algorithm is Algorithm.TREE and Algorithm.TREE not in self.anchors:
            return self.tree_factor * self.anchor_bandwidth(Algorithm.RING, msg_size)
        xs, ys = self.anchors[algorithm]
        x = math.log2(max(msg_size, 1) / MiB)
        return float(np.interp(x, xs, ys))

    def channel_curve(self, n_channels: int) -> float:
        x = math.log2(max(n_channels, 1))
        return float(math.exp(np.interp(x, self._cx, self._cy)))

    def protocol_factor(self, protocol: Protocol, msg_size: int) -> float:
        if protocol is Protocol.LL:
            small = msg_size < self.ll_threshold_mib * MiB
            return self.ll_factor_small if small else self.ll_factor_large
        return 1.0

    def bus_bandwidth(self, algorithm: Algorithm, protocol: Protocol, n_channels: int,
                      msg_size: int) -> float:
        return (self.anchor_bandwidth(algorithm, msg_size)
                * self.protocol_factor(protocol, msg_size)
                * self.channel_curve(n_channels))


def model_bus_bandwidth(model: PerfModel, decision, msg_size: int) -> float:
    return model.bus_bandwidth(decision.algorithm, decision.protocol, decision.n_channels, msg_size)


def bus_bytes(collective: Collective, msg_size: int, n_ranks: int) -> float:
    n = max(n_ranks, 1)
    if collective is Collective.ALLREDUCE:
        return msg_size * 2 * (n - 1) / n
    if collective in (Collective.ALLGATHER, Collective.REDUCESCATTER):
        return msg_size * (n - 1) / n
    return float(msg_size)


def latency_ns(collective: Collective, msg_size: int, n_ranks: int, bus_gbps: float) -> float:
    # GB/s is bytes per nanosecond
    return bus_bytes(collective, msg_size, n_ranks) / bus_gbps


def load_model(path: str | os.PathLike | None = None) -> PerfModel:
    cfg = load_toml(resolve(path, ".toml") if path is not None else DEFAULT_MODEL)
    points: dict[Algorithm, list[tuple[float, float]]] = {}
    for algo, size_mib, gbps in cfg["anchors"]:
        points.setdefault(Algorithm[algo.upper()], []).append((float(size_mib), float(gbps)))
    anchors = {}
    for algo, pts in points.items():
        pts.sort()
        anchors[algo] = (np.log2([s for s, _ in pts]), np.array([g for _, g in pts]))
    kw = {k: cfg[k] for k in ("ranks", "max_channels", "tree_factor", "ll_factor_small",
                              "ll_factor_large", "ll_threshold_mib") if k in cfg}
    if "default_algorithm" in cfg:
        kw["default_algorithm"] = Algorithm[cfg["default_algorithm"].upper()]
    if "default_protocol" in cfg:
        kw["default_protocol"] = Protocol[cfg["default_protocol"].upper()]
    return PerfModel(name=cfg.get("name", "model"), anchors=anchors,
                     channel_points=tuple((float(c), float(v)) for c, v in cfg["channel_curve"]),
                     reference=cfg.get("reference", {}), **kw)
