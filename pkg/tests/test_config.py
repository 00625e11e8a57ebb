from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from wchain.config import (
    ByzantineMode,
    ConstraintViolation,
    ParseError,
    ScenarioConfig,
    TargetPolicy,
    parse_config,
    parse_text,
)


def test_several_assignments_per_line():
    cfg = parse_text("n=4  f=1  seed=42")
    assert (cfg.n, cfg.f, cfg.seed) == (4, 1, 42)
    assert cfg.byzantine_nodes == frozenset()
    assert cfg.byzantine_mode is ByzantineMode.NONE


def test_full_file(tmp_path):
    path = tmp_path / "s.cfg"
    path.write_text(
        "# a faulty run\n"
        "n = 7\nf = 2\nseed = 0x10\n"
        "byzantine_nodes = 1, 5   # two liars\n"
        "byzantine_mode = equivocate\n"
        "arrival_rate = 3/2\n"
        "target_policy = random\n"
    )
    cfg = parse_config(path)
    assert cfg.seed == 16
    assert cfg.byzantine_nodes == frozenset({1, 5})
    assert cfg.honest == frozenset({0, 2, 3, 4, 6})
    assert cfg.arrival_rate == Fraction(3, 2)
    assert cfg.target_policy is TargetPolicy.RANDOM
    assert parse_config(path, {"seed": 3}).seed == 3


@pytest.mark.parametrize("text, field", [
    ("n=5  f=1  seed=0", "n"),
    ("n=4  f=1  seed=0  byzantine_nodes=0,1  byzantine_mode=silent", "byzantine_nodes"),
    ("n=4  f=1  seed=0  byzantine_nodes=4  byzantine_mode=silent", "byzantine_nodes"),
    ("n=4  f=1  seed=0  byzantine_nodes=2", "byzantine_mode"),
    ("n=1  f=0  seed=0", "f"),
    ("n=4  f=1  seed=0  min_delay=5  max_delay=2", "max_delay"),
    ("n=4  f=1", "seed"),
])
def test_constraint_violations(text, field):
    with pytest.raises(ConstraintViolation) as info:
        parse_text(text)
    assert info.value.field == field


@pytest.mark.parametrize("text, line", [
    ("n=4\nf=1\nbogus=3\n", 3),
    ("n=4\n\n# c\nf=1 f=1\n", 4),
    ("n=4\nf\n", 2),
    ("n=x\n", 1),
    ("n=4 f=1 seed=0\nbyzantine_mode=sneaky\n", 2),
    ("n=4 f=1 seed=0\narrival_rate=1/0\n", 2),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as info:
        parse_text(text)
    assert info.value.line == line


def test_missing_file():
    with pytest.raises(OSError):
        parse_config("/nonexistent/scenario.cfg")


@given(
    f=st.integers(1, 5),
    seed=st.integers(0, 2**32),
    rate=st.fractions(min_value=0, max_value=20, max_denominator=16),
    policy=st.sampled_from(TargetPolicy),
    data=st.data(),
)
def test_text_round_trip(f, seed, rate, policy, data):
    n = 3 * f + 1
    byz = data.draw(st.frozensets(st.integers(0, n - 1), max_size=f))
    mode = data.draw(st.sampled_from([m for m in ByzantineMode if (m is ByzantineMode.NONE) != bool(byz)]))
    cfg = ScenarioConfig(n=n, f=f, seed=seed, byzantine_nodes=byz, byzantine_mode=mode,
                         arrival_rate=rate, target_policy=policy)
    assert parse_text(cfg.to_text()) == cfg
