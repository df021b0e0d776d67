from __future__ import annotations

import copy

import pytest

from qkdn.config import reference_config
from qkdn.network import Network
from qkdn.transport import TraceWriter

ALL_OTP = {"cipher_modes": {"ukms_leg": "OTP", "carrier": "OTP", "akms_peer": "OTP"}}


def with_overrides(cfg: dict, overrides: dict) -> dict:
    cfg = copy.deepcopy(cfg)
    for key, value in overrides.items():
        cfg[key] = {**cfg.get(key, {}), **value} if isinstance(value, dict) else value
    return cfg


@pytest.fixture
def ref_cfg() -> dict:
    return reference_config()


@pytest.fixture
def otp_cfg() -> dict:
    return with_overrides(reference_config(), ALL_OTP)


def make_network(cfg: dict, *, prefill: int = 1 << 18, keep: bool = True, **kw) -> Network:
    trace = TraceWriter(level="full", keep=keep)
    net = Network(cfg, trace=trace, keep_ksa=True, **kw)
    if prefill:
        net.prefill(prefill)
    return net


@pytest.fixture
def net(ref_cfg) -> Network:
    return make_network(ref_cfg)


@pytest.fixture
def otp_net(otp_cfg) -> Network:
    return make_network(otp_cfg)
