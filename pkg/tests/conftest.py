import numpy as np


def assert_close(actual, expected, rtol, atol=1e-8, msg=""):
    np.testing.assert_allclose(
        np.asarray(actual), np.asarray(expected), rtol=rtol, atol=atol, err_msg=msg
    )


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
