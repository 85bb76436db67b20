import json

import numpy as np
import pytest

from phgcn.calibration import calibrate_scale, calibration_path, clustered_instance, cosine_rows
from phgcn.permutohedral import lattice_constants


def test_recorded_table_covers_supported_dims():
    record = json.loads(calibration_path().read_text())
    table = record["scale_per_decay"]
    assert sorted(int(k) for k in table) == list(range(1, 9))
    # finer lattices are needed as the dimension grows
    values = [table[str(d)] for d in range(1, 9)]
    assert values == sorted(values)
    assert lattice_constants(4) == (table["4"], record["kappa"])


def test_unknown_dimension():
    with pytest.raises(ValueError):
        lattice_constants(40)


def test_refit_reproduces_recorded_scale():
    recorded, kappa = lattice_constants(4)
    assert calibrate_scale(4, kappa=kappa) == pytest.approx(recorded, abs=2e-3)


@pytest.mark.parametrize("d", [1, 2, 4, 8])
def test_clusters_are_separated(rng, d):
    p, f = clustered_instance(rng, n=300, d=d, clusters=5, std=0.0)
    centers = np.unique(p, axis=0)
    assert len(centers) == 5
    gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1)[np.triu_indices(5, 1)]
    assert gaps.min() >= 1.0
    assert f.shape == (300, 8)


def test_cosine_rows():
    a = np.array([[1.0, 0.0], [1.0, 1.0]])
    b = np.array([[2.0, 0.0], [-1.0, -1.0]])
    np.testing.assert_allclose(cosine_rows(a, b), [1.0, -1.0])
