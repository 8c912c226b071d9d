"""Scenario configuration: loading, validation, path-gain construction.

Configs are plain JSON with explicit units in the key names.  Anything
expressed in dB carries a ``_db`` suffix and is converted to linear scale
once, at load time, so the rest of the code never sees dB.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import friis_cross_gain
from .errors import ConfigurationError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SystemConfig:
    """All scenario parameters for one K-pair interference network.

    Queue quantities are in bits, rates in bit/s, powers in watts and path
    gains linear.  ``L[k, j]`` is the long-term gain from transmitter j to
    receiver k; the noise floor is normalised to unit power so the average
    transmit SNR of pair k at reference power ``ref_power_w`` is
    ``ref_power_w * L[k, k]``.
    """

    K: int
    nt: int
    nr: int
    bandwidth_hz: float
    slot_s: float
    zeta: float
    mu: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eta: float
    q_low: float
    q_high: float
    L: np.ndarray
    ref_power_w: float = 1.0
    rng_seed: int = 0
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def d(self) -> int:
        return min(self.nt, self.nr)

    def validate(self) -> None:
        """Raise ConfigurationError naming every violated invariant."""
        problems = []
        if self.K < 1:
            problems.append("pair count: K >= 1 required")
        if self.nt < 1 or self.nr < 1:
            problems.append("antenna counts: Nt >= 1 and Nr >= 1 required")
        if self.nt < self.K:
            problems.append(f"antenna budget: Nt >= K required (Nt={self.nt}, K={self.K})")
        if not (0.0 < self.zeta <= 1.0):
            problems.append(f"MCS constant: zeta in (0, 1] required, got {self.zeta}")
        if not (self.q_high > self.q_low > 0.0):
            problems.append(
                f"buffer thresholds: Q_high > Q_low > 0 required "
                f"(Q_low={self.q_low}, Q_high={self.q_high})"
            )
        if self.bandwidth_hz <= 0 or self.slot_s <= 0 or self.eta <= 0:
            problems.append("bandwidth, slot duration and eta must be positive")
        if self.ref_power_w <= 0:
            problems.append("reference power must be positive")
        if np.any(self.mu <= 0) or np.any(self.gamma <= 0) or np.any(self.beta <= 0):
            problems.append("playback rates and cost weights must be positive")
        if self.L.shape != (self.K, self.K):
            problems.append(f"path-gain matrix: expected {self.K}x{self.K}, got {self.L.shape}")
        else:
            # Zero cross gains are allowed: they are the decoupled limit used
            # by the consistency experiments.
            if np.any(np.diagonal(self.L) <= 0) or np.any(self.L < 0):
                problems.append("path gains: direct gains positive, cross gains >= 0")
            else:
                for k in range(self.K):
                    for j in range(self.K):
                        if j != k and self.L[k, j] >= self.L[k, k]:
                            problems.append(
                                f"weak interference: L[{k},{j}] < L[{k},{k}] required"
                            )
        # Weight condition keeping the target queue inside (Q_low, Q_high);
        # checked in log space because eta * (Q_high - Q_low) overflows exp.
        span = self.eta * (self.q_high - self.q_low)
        for k in range(self.K):
            ratio = math.log(self.gamma[k] / self.beta[k])
            if not (-span < ratio < span):
                problems.append(
                    f"weight condition: eta*(Q_low-Q_high) < ln(gamma_{k}/beta_{k}) "
                    f"< eta*(Q_high-Q_low) violated"
                )
        if problems:
            raise ConfigurationError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "pairs": self.K,
            "tx_antennas": self.nt,
            "rx_antennas": self.nr,
            "bandwidth_hz": self.bandwidth_hz,
            "slot_s": self.slot_s,
            "mcs_zeta": self.zeta,
            "playback_rate_bps": self.mu.tolist(),
            "interruption_weight": self.gamma.tolist(),
            "overflow_weight": self.beta.tolist(),
            "smooth_eta_per_bit": self.eta,
            "q_low_bits": self.q_low,
            "q_high_bits": self.q_high,
            "ref_power_w": self.ref_power_w,
            "rng_seed": self.rng_seed,
            "path_gains": {"mode": "explicit", "matrix": self.L.tolist()},
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _per_pair(value, k: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.full(k, arr[0])
    if arr.size != k:
        raise ConfigurationError(f"{name}: expected scalar or {k} values, got {arr.size}")
    return arr


def build_path_gains(spec: dict, k: int, ref_power_w: float) -> np.ndarray:
    """Construct the K x K linear path-gain matrix from its JSON spec.

    Modes:
      snr       direct gains back-solved from an SNR target at the reference
                power, cross gains a uniform ratio of the direct gain
      friis     direct gain given, cross gains from the carrier-sensing
                path-loss formula
      explicit  full matrix given
    """
    mode = spec.get("mode")
    if mode == "explicit":
        mat = np.asarray(spec["matrix"], dtype=float)
        if mat.shape != (k, k):
            raise ConfigurationError(f"path_gains.matrix must be {k}x{k}")
        return mat
    if mode == "snr":
        direct = 10.0 ** (float(spec["snr_db"]) / 10.0) / ref_power_w
        ratio = float(spec.get("cross_ratio", 0.1))
        if not (0.0 <= ratio < 1.0):
            raise ConfigurationError("path_gains.cross_ratio must be in [0, 1)")
        mat = np.full((k, k), ratio * direct)
        np.fill_diagonal(mat, direct)
        return mat
    if mode == "friis":
        direct = 10.0 ** (float(spec["direct_gain_db"]) / 10.0)
        cross = friis_cross_gain(
            10.0 ** (float(spec.get("rx_gain_db", 0.0)) / 10.0),
            10.0 ** (float(spec.get("tx_gain_db", 0.0)) / 10.0),
            float(spec["wavelength_m"]),
            float(spec["sensing_distance_m"]),
        )
        if cross >= direct:
            raise ConfigurationError(
                "friis cross gain is not below the direct gain; "
                "increase the sensing distance"
            )
        mat = np.full((k, k), cross)
        np.fill_diagonal(mat, direct)
        return mat
    raise ConfigurationError(f"unknown path_gains mode {mode!r}")


def config_from_dict(data: dict) -> SystemConfig:
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported config schema_version {version}")
    try:
        k = int(data["pairs"])
        ref_power = float(data.get("ref_power_w", 1.0))
        cfg = SystemConfig(
            K=k,
            nt=int(data["tx_antennas"]),
            nr=int(data["rx_antennas"]),
            bandwidth_hz=float(data["bandwidth_hz"]),
            slot_s=float(data["slot_s"]),
            zeta=float(data.get("mcs_zeta", 1.0)),
            mu=_per_pair(data["playback_rate_bps"], k, "playback_rate_bps"),
            gamma=_per_pair(data["interruption_weight"], k, "interruption_weight"),
            beta=_per_pair(data["overflow_weight"], k, "overflow_weight"),
            eta=float(data["smooth_eta_per_bit"]),
            q_low=float(data["q_low_bits"]),
            q_high=float(data["q_high_bits"]),
            L=build_path_gains(data["path_gains"], k, ref_power),
            ref_power_w=ref_power,
            rng_seed=int(data.get("rng_seed", 0)),
            raw=data,
        )
    except KeyError as exc:
        raise ConfigurationError(f"missing config key {exc.args[0]!r}") from None
    cfg.validate()
    return cfg


def load_config(path) -> SystemConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))
