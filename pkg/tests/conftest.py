import warnings

import numpy as np
import pytest

from olt import FiberParams, TxConfig, build_tx_waveform
from olt.linksim import Amplifier, LinkSpec, Span


def small_tx_cfg(**kw):
    base = dict(n_symbols=4096, oversampling=2, symbol_rate=64e9, launch_power_dbm=3.0, seed=11)
    base.update(kw)
    return TxConfig(**base)


def short_link(n_spans=2, span_km=10.0, gain_db=None, nf=5.0, **fiber):
    f = dict(alpha_db_per_km=0.2, dispersion_D=17.0, gamma=1.3)
    f.update(fiber)
    spans = []
    for i in range(n_spans):
        els = (Amplifier(f["alpha_db_per_km"] * span_km if gain_db is None else gain_db, nf),) if i else ()
        spans.append(Span(FiberParams(length_km=span_km, **f), els))
    return LinkSpec(tuple(spans))


@pytest.fixture
def tx_cfg():
    return small_tx_cfg()


@pytest.fixture
def tx(tx_cfg):
    return build_tx_waveform(tx_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_short_capture_warning():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*symbols is below.*")
        warnings.filterwarnings("ignore", message="only .* estimates; at least")
        yield
