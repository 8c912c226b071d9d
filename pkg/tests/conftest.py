import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mimostream import valuefn
from mimostream.config import config_from_dict

PAPER_DICT = {
    "pairs": 5,
    "tx_antennas": 5,
    "rx_antennas": 2,
    "bandwidth_hz": 1e6,
    "slot_s": 0.01,
    "mcs_zeta": 1.0,
    "playback_rate_bps": 1.5e6,
    "interruption_weight": 20.0,
    "overflow_weight": 20.0,
    "smooth_eta_per_bit": 50.0,
    "q_low_bits": 5e4,
    "q_high_bits": 1.5e5,
    "path_gains": {"mode": "snr", "snr_db": -5.0, "cross_ratio": 0.1},
    "rng_seed": 2024,
}

DUO_DICT = {
    **PAPER_DICT,
    "pairs": 2,
    "tx_antennas": 2,
    "rx_antennas": 1,
    "interruption_weight": 10.0,
    "overflow_weight": 10.0,
    "rng_seed": 11,
}


def paper_dict(**overrides) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in PAPER_DICT.items()}
    out.update(overrides)
    return out


def duo_dict(**overrides) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DUO_DICT.items()}
    out.update(overrides)
    return out


@pytest.fixture(scope="session")
def paper_config():
    """K=5 streaming scenario at the reference operating point."""
    return config_from_dict(paper_dict())


@pytest.fixture(scope="session")
def duo_config():
    """Small K=2 single-stream scenario used by the oracle experiments."""
    return config_from_dict(duo_dict())


@pytest.fixture(scope="session")
def paper_model(paper_config):
    return valuefn.build_value_model(paper_config)


@pytest.fixture(scope="session")
def duo_model(duo_config):
    return valuefn.build_value_model(duo_config)


@pytest.fixture(scope="session")
def paper_flow(paper_model):
    return paper_model.flows[0]


@pytest.fixture
def rng():
    return np.random.default_rng(20240809)
