import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stimtrain.diagnostics import (
    ERFMap,
    accumulate_amplitude,
    amplitude_csv,
    ce_gap_bound,
    compute_erf,
    erf_from_features,
    load_network,
    measure_loafing,
    validate_bound,
)
from stimtrain.errors import InputError
from stimtrain.imgops import split_per_class, synth_dataset
from stimtrain.nncore import DepthMask, NetworkSpec, build_network, model_arrays, model_digest, save_checkpoint
from stimtrain.sampler import SamplingRule
from stimtrain.trainer import evaluate


@pytest.fixture(scope="module")
def data():
    full = synth_dataset(0, num_classes=10, samples_per_class=12, size=8)
    return split_per_class(full, 6)[1]


def test_bound_examples():
    assert ce_gap_bound(0, 0, 2) == pytest.approx(math.log(2), abs=1e-12)
    assert ce_gap_bound(0, 0, 2) == pytest.approx(0.693147, abs=1e-6)
    assert ce_gap_bound(1.0, 0.5, 10) == pytest.approx((0.5 + math.log(10)) * math.e + 1.0)
    with pytest.raises(InputError):
        ce_gap_bound(-0.1, 0, 2)
    with pytest.raises(InputError):
        ce_gap_bound(0, 0, 1)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.integers(2, 1000), st.floats(1e-3, 1))
def test_bound_monotone(e1, e2, n, d):
    b = ce_gap_bound(e1, e2, n)
    assert ce_gap_bound(e1 + d, e2, n) > b
    assert ce_gap_bound(e1, e2 + d, n) > b
    assert ce_gap_bound(e1, e2, n + 1) > b


def test_bound_has_no_counterexample():
    check = validate_bound(10_000, seed=0)
    assert check.trials == 10_000
    assert check.counterexamples == 0
    assert 0 < check.max_ratio <= 1


def test_area_ratio_by_hand():
    erf = ERFMap(np.array([[0.5, 0.3], [0.2, 0.0]]))
    assert erf.area_ratio(0.5) == 0.25
    assert erf.area_ratio(0.8) == 0.5
    assert erf.area_ratio(0.99) == 0.75
    assert erf.area_ratio(1.0) == 0.75
    assert list(erf.area_ratios()) == [0.2, 0.3, 0.5, 0.99]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.floats(0, 1)))
def test_area_ratio_monotone(raw):
    if raw.sum() <= 0:
        raw = np.ones_like(raw)
    erf = ERFMap(raw / raw.sum())
    ratios = [erf.area_ratio(t) for t in np.linspace(0.01, 1.0, 25)]
    assert all(a <= b for a, b in zip(ratios, ratios[1:]))
    assert 0 < ratios[0] and ratios[-1] <= 1


def _conv_stack(n):
    gen = torch.Generator().manual_seed(n)
    convs = []
    for _ in range(n):
        c = torch.nn.Conv2d(2, 2, 3, padding=1, bias=False)
        with torch.no_grad():
            c.weight.copy_(torch.rand(c.weight.shape, generator=gen) + 0.1)
        convs.append(c)
    return torch.nn.Sequential(*convs)


@pytest.mark.parametrize("n, side", [(1, 3), (2, 5)])
def test_erf_support_of_conv_toys(n, side):
    erf = erf_from_features(_conv_stack(n), torch.randn(4, 2, 11, 11))
    assert erf.heat.sum() == pytest.approx(1.0, abs=1e-12)
    support = np.argwhere(erf.support())
    lo, hi = 5 - side // 2, 5 + side // 2
    assert support.min(axis=0).tolist() == [lo, lo]
    assert support.max(axis=0).tolist() == [hi, hi]
    assert len(support) == side * side


def test_erf_is_read_only_and_exports(data):
    model = build_network(NetworkSpec((1, 1), (8, 16)), 0)
    before = model_digest(model)
    erf = compute_erf(model, None, 8, 8, np.random.default_rng(0), data)
    noise = compute_erf(model, DepthMask((1, 1)), 8, 8, np.random.default_rng(0))
    assert model_digest(model) == before
    assert noise.heat.shape == (8, 8)
    assert erf.heat.sum() == pytest.approx(1.0, abs=1e-6)
    pgm = erf.to_pgm().split("\n")
    assert pgm[:3] == ["P2", "8 8", "65535"]
    assert max(int(v) for v in " ".join(pgm[3:]).split()) == 65535
    rows = erf.to_csv().strip().split("\n")
    assert len(rows) == 8 and len(rows[0].split(",")) == 8


def test_amplitude_zero_and_doubling(data):
    model = build_network(NetworkSpec((1, 1), (8, 16)), 0)
    with torch.no_grad():
        model.fc.bias.uniform_(-1, 1)
    base = accumulate_amplitude(model, None, data)
    with torch.no_grad():
        model.fc.weight.mul_(2)
        model.fc.bias.mul_(2)
    doubled = accumulate_amplitude(model, None, data)
    assert doubled.mean_magnitude == 2 * base.mean_magnitude
    assert doubled.top1 == base.top1
    with torch.no_grad():
        model.fc.weight.zero_()
        model.fc.bias.zero_()
    assert accumulate_amplitude(model, None, data).mean_magnitude == 0.0
    text = amplitude_csv({"a": base, "b": doubled})
    assert text.splitlines()[0] == "network,mean_magnitude,top1"
    assert len(text.splitlines()) == 3


def test_loafing_rows(tmp_path, data):
    spec = NetworkSpec((2, 2), (8, 16))
    model = build_network(spec, 0).eval()
    alone = build_network(NetworkSpec((1, 1), (8, 16)), 1)
    path = tmp_path / "alone.stpp"
    save_checkpoint(path, model_arrays(alone), {"spec": alone.spec.to_dict()})
    before = model_digest(model)
    report = measure_loafing(model, SamplingRule((2, 2)), data, {DepthMask((1, 1)): path})
    assert model_digest(model) == before
    assert [str(r.mask) for r in report.rows] == ["1,1", "1,2", "2,1", "2,2"]
    assert report.row((2, 2)).in_ensemble_top1 == evaluate(model, None, data)[0]
    for r in report.rows:
        assert abs(r.in_ensemble_top1 - 0.1) <= 0.15
    shallow = report.row((1, 1))
    assert shallow.standalone_top1 == evaluate(load_network(path), None, data)[0]
    assert shallow.gap == shallow.standalone_top1 - shallow.in_ensemble_top1
    assert report.row((1, 2)).gap is None
    csv_lines = report.to_csv().splitlines()
    assert csv_lines[0] == "mask,in_ensemble_top1,standalone_top1,gap"
    assert csv_lines[2].endswith(",,")
