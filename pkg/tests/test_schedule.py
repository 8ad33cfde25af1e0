import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dait import ConfigError, ScheduleParams, lambda_at
from dait.losses import stage1_weights, stage2_weights


@pytest.mark.parametrize(
    "k,b,e,expected",
    [(0.0, 0.3, 0, 0.3), (0.0, 0.3, 57, 0.3), (0.01, 0.0, 0, 0.0), (0.01, 0.0, 150, 1.0)],
)
def test_examples(k, b, e, expected):
    assert lambda_at(ScheduleParams(k=k, b=b), e) == expected


def test_hand_evaluated_point():
    assert lambda_at(ScheduleParams(k=0.005, b=0.1), 20) == pytest.approx(0.2, abs=1e-12)


def test_ramp_default():
    p = ScheduleParams.ramp(30)
    assert lambda_at(p, 0) == 0.0
    assert lambda_at(p, 15) == pytest.approx(0.5)
    assert lambda_at(p, 30) == 1.0
    assert lambda_at(p, 45) == 1.0


def test_rejects_bad_bounds_and_epochs():
    with pytest.raises(ConfigError):
        ScheduleParams(k=0.1, clamp_lo=0.8, clamp_hi=0.2)
    with pytest.raises(ValueError):
        lambda_at(ScheduleParams(k=0.1), -1)
    with pytest.raises(ConfigError):
        ScheduleParams.ramp(0)


finite = dict(allow_nan=False, allow_infinity=False)


@settings(max_examples=300, deadline=None)
@given(
    k=st.floats(-1, 1, **finite),
    b=st.floats(-2, 2, **finite),
    e=st.integers(0, 10_000),
    lo=st.floats(0, 1, **finite),
    width=st.floats(0, 1, **finite),
)
def test_always_clamped(k, b, e, lo, width):
    hi = min(1.0, lo + width)
    value = lambda_at(ScheduleParams(k=k, b=b, clamp_lo=lo, clamp_hi=hi), e)
    assert lo <= value <= hi


@settings(max_examples=300, deadline=None)
@given(k=st.floats(0, 1, **finite), b=st.floats(-1, 1, **finite), e=st.integers(0, 5000), step=st.integers(0, 500))
def test_monotone_for_non_negative_slope(k, b, e, step):
    p = ScheduleParams(k=k, b=b)
    assert lambda_at(p, e) <= lambda_at(p, e + step)


@settings(max_examples=200, deadline=None)
@given(b=st.floats(-1, 2, **finite), e1=st.integers(0, 10_000), e2=st.integers(0, 10_000))
def test_zero_slope_is_constant(b, e1, e2):
    p = ScheduleParams(k=0.0, b=b)
    assert lambda_at(p, e1) == lambda_at(p, e2)


@settings(max_examples=200, deadline=None)
@given(k=st.floats(-1, 1, **finite), b=st.floats(0, 1, **finite))
def test_anchor_at_epoch_zero(k, b):
    assert lambda_at(ScheduleParams(k=k, b=b), 0) == b


@settings(max_examples=200, deadline=None)
@given(lam=st.floats(0, 1, **finite))
def test_weights_sum_to_one(lam):
    assert abs(sum(stage1_weights(lam)) - 1.0) <= 1e-12
    assert abs(sum(stage2_weights(lam)) - 1.0) <= 1e-12
