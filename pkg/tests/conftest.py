import numpy as np
import pytest

from tcr.scm import LinearScm


def chain_scm(coefficients, intervened=None, exo_var=None):
    """Chain X1 -> X2 -> ... -> XN with target XN; every other node intervenable unless told otherwise."""
    c = np.asarray(coefficients, dtype=float)
    n = c.size + 1
    A = np.zeros((n, n))
    A[np.arange(1, n), np.arange(n - 1)] = c
    omega = tuple(range(n - 1)) if intervened is None else tuple(intervened)
    return LinearScm(
        adjacency=A,
        exo_mean=np.zeros(n),
        exo_var=np.ones(n) if exo_var is None else np.asarray(exo_var, dtype=float),
        pi0=(n - 1,),
        omega_set=omega,
        tau0_bar=np.ones(1),
    )


@pytest.fixture
def unit_chain():
    return chain_scm([1.0, 1.0, 1.0])


@pytest.fixture
def mediator_chain():
    # X3 (index 2) sits between the intervened pair and the target and is never intervened.
    return chain_scm([1.0, 1.0, 1.0], intervened=(0, 1))
