from __future__ import annotations

import numpy as np
import pytest

from fractal_sio.cantor import CantorParams, build_similarities, solve_r_for_dimension
from fractal_sio.group import GroupSpace
from fractal_sio.ifs import IFS, SelfSimilarMeasure, separation_report
from fractal_sio.kernels import complex_power

PLANE = GroupSpace.euclidean(2)
TRIANGLE = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0]])


def gasket_ifs() -> IFS:
    # maps x -> v + (x - v)/3 fix the triangle vertices v
    return IFS.from_arrays(PLANE, TRIANGLE * (2.0 / 3.0), 1.0 / 3.0)


def five_square_ifs() -> IFS:
    """Four corner squares plus a central one, all of ratio 1/4.

    The set minus the central cylinder is invariant under the quarter turn
    about the centre, which is the fixed point of map 0, so odd kernels of
    the form z^3 integrate to zero there.
    """
    r = 0.25
    centre = np.array([0.5, 0.5])
    corners = np.array([[0.0, 0.0], [0.75, 0.0], [0.0, 0.75], [0.75, 0.75]])
    tr = np.vstack([centre * (1 - r), corners])
    return IFS.from_arrays(PLANE, tr, r)


def corner_ifs() -> IFS:
    tr = np.array([[0.0, 0.0], [0.75, 0.0], [0.0, 0.75], [0.75, 0.75]])
    return IFS.from_arrays(PLANE, tr, 0.25)


def config_of(ifs: IFS, kernel: dict, **extra) -> dict:
    cfg = ifs.to_config()
    cfg["kernel"] = kernel
    cfg.update(extra)
    return cfg


@pytest.fixture(scope="session")
def gasket():
    ifs = gasket_ifs()
    return ifs, SelfSimilarMeasure(ifs), complex_power(3)


@pytest.fixture(scope="session")
def five_square():
    ifs = five_square_ifs()
    return ifs, SelfSimilarMeasure(ifs), complex_power(3)


@pytest.fixture(scope="session")
def cq():
    """The n=1, N=18 Heisenberg Cantor set of dimension 3, with its measure."""
    r = solve_r_for_dimension(1, 18)["r"]
    params = CantorParams(1, 18, r)
    ifs = build_similarities(params)
    return params, ifs, SelfSimilarMeasure(ifs)


@pytest.fixture(scope="session")
def cq_separation(cq):
    return separation_report(cq[1])
