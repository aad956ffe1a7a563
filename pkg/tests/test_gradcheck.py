from __future__ import annotations

import numpy as np
import pytest

from geolab import cli, gradcheck
from geolab import tensor as tc
from geolab.tensor import _make, as_tensor


@pytest.mark.parametrize("name", sorted(gradcheck.ALL_CHECKS))
def test_check_passes(name):
    assert gradcheck.run_check(gradcheck.ALL_CHECKS[name], trials=5, seed=11) < 1e-4


def test_every_op_kind_has_a_check():
    assert set(tc.OP_KINDS) <= set(gradcheck.ALL_CHECKS)
    for loss in ("point_loss", "rotation_loss", "translation_loss", "camera_loss", "normal_loss", "vg_loss"):
        assert loss in gradcheck.ALL_CHECKS


def test_finite_diff_detects_wrong_gradient():
    def bad_square(x):
        x = as_tensor(x)
        return _make(x.data ** 2, "mul", (x,), lambda g: (g * x.data,))  # missing factor 2

    err = gradcheck.finite_diff_check(lambda t: tc.sum_(bad_square(t)), np.array([1.0, 2.0, 3.0]))
    assert err > 0.5


def _huber_sign_bug(x, delta=1.0):
    x = as_tensor(x)
    r = x.data
    quad = np.abs(r) <= delta
    y = np.where(quad, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    return _make(y, "huber", (x,), lambda g: (g * np.where(quad, r, -delta * np.sign(r)),))


def test_gradcheck_cli_passes(capsys):
    assert cli.main(["gradcheck", "--ops", "huber,arccos", "--trials", "5"]) == 0
    out = capsys.readouterr().out
    lines = [ln.split()[0] for ln in out.splitlines()[1:-1]]
    assert lines == ["huber", "arccos"]


def test_gradcheck_cli_fails_on_huber_sign_bug(monkeypatch, capsys):
    monkeypatch.setattr(tc, "huber", _huber_sign_bug)
    code = cli.main(["gradcheck", "--ops", "huber,translation_loss", "--trials", "5"])
    assert code == 2
    assert capsys.readouterr().out.count("FAIL") == 2


def test_gradcheck_cli_unknown_op():
    assert cli.main(["gradcheck", "--ops", "nope"]) == 1
