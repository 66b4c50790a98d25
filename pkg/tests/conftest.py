"""Shared fixtures: tiny panels, catalogs, and frequently used expressions."""

import datetime as dt

import numpy as np
import pytest

from factormine.data import Panel, RvTarget, generate_synthetic
from factormine.expr import FactorExpr, OptionCatalog, Vocabulary, default_catalog

VOCAB = Vocabulary()
VOCAB_POW = Vocabulary(include_pow=True)

ADD = VOCAB.token_for("add")
SUB = VOCAB.token_for("sub")
MUL = VOCAB.token_for("mul")
DIV = VOCAB.token_for("div")
OPEN, HIGH, LOW, CLOSE, VOLUME, VWAP = range(6)


def make_panel(closes, minutes=None, start=dt.date(2024, 1, 2)):
    """Panel from a (days, symbols, minutes) close array; other features
    derived so every bar invariant holds."""
    closes = np.asarray(closes, dtype=float)
    d, s, m = closes.shape
    opens = np.concatenate([closes[:, :, :1], closes[:, :, :-1]], axis=2)
    highs = np.maximum(opens, closes) * 1.001
    lows = np.minimum(opens, closes) * 0.999
    vwaps = (highs + lows) / 2.0
    volumes = np.full_like(closes, 100.0)
    values = np.stack([opens, highs, lows, closes, volumes, vwaps], axis=-1)
    days = tuple(start + dt.timedelta(days=i) for i in range(d))
    symbols = tuple(f"S{i:02d}" for i in range(s))
    return Panel(days, symbols, m, values, np.ones((d, s, m), dtype=bool))


def make_target(panel, values, mask=None):
    values = np.asarray(values, dtype=float)
    if mask is None:
        mask = np.ones(values.shape, dtype=bool)
        mask[-1] = False
    return RvTarget(panel.days, panel.symbols, values, np.asarray(mask, dtype=bool))


@pytest.fixture
def catalog():
    return default_catalog()


@pytest.fixture
def planted_expr():
    # add(open, volume) under the option mixing both at comparable scale
    return FactorExpr((ADD, OPEN, VOLUME), 3)


@pytest.fixture
def small_synth(catalog, planted_expr):
    panel, target = generate_synthetic(
        12, 16, 6, seed=11, planted_formula=planted_expr, catalog=catalog, noise_sd=0.0
    )
    return panel, target


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# A catalog whose options cover the published-style fixture formulas
# (two options share open=0.1, so it is deliberately not column-distinct).
FIXTURE_CATALOG = OptionCatalog(
    options=(
        # open, high, low, close, volume, vwap
        (0.10, 0.20, 0.30, 0.40, 0.18, 0.40),
        (0.10, 0.50, 0.10, 0.20, 0.30, 0.20),
        (0.30, 0.30, 0.09, 0.10, 0.20, 0.30),
        (0.50, 0.40, 0.45, 0.50, 0.40, 0.10),
        (0.09, 0.10, 0.20, 0.09, 0.50, 0.50),
    )
)

# The five reference formulas in the surface syntax (row 4 needs pow).
FIXTURE_FORMULAS = [
    ("(0.1·open)·(0.3·low)-(0.18·volume)/(0.4·vwap)", 0, False),
    ("(0.1·open)-(0.1·low)·(0.5·high)·(0.2·close)", 1, False),
    ("(0.3·open)·(0.09·low)^(0.3·high)-(0.1·close)", 2, True),
    ("(0.18·volume)^(0.4·vwap)", 0, True),
    ("(0.1·open)/(0.3·low)", 0, False),
]
