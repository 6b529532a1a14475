import zlib

import numpy as np
import pytest

from densebam_gi import tensor as T
from densebam_gi.gradcheck import (ABS_FLOOR, STEP, TOLERANCE, check_gradients, model_suites, op_suites,
                                   relative_error)
from densebam_gi.tensor import Tensor

SUITES = {**op_suites(), **model_suites()}


@pytest.mark.parametrize("name", list(SUITES))
def test_suite_passes(name):
    fn, inputs = SUITES[name](np.random.default_rng(zlib.crc32(name.encode())))
    res = check_gradients(fn, inputs, np.random.default_rng(1), name=name)
    assert res.coords_checked > 0
    assert res.passed, f"{name}: {res.max_rel_error:.3e}"


def test_settings():
    assert (STEP, TOLERANCE, ABS_FLOOR) == (1e-5, 1e-4, 1e-6)
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)


def test_wrong_gradient_is_caught():
    def broken(x):
        # forward is x**2, backward claims 3x
        return T.tsum(T._make(x.data ** 2, (x,), lambda g: (3.0 * g * x.data,)))

    x = Tensor(np.random.default_rng(0).normal(size=4) + 2.0, requires_grad=True)
    res = check_gradients(broken, [x], np.random.default_rng(0))
    assert not res.passed and res.max_rel_error > 0.1


def test_every_suite_checks_a_gradient_path():
    assert {"conv2d", "batch_norm_train", "bam", "coverage_attention", "gi_gru_cell", "decoder_gi_gru",
            "encoder"} <= set(SUITES)
