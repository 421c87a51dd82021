import pytest

from carsa.data import SyntheticSpec, gen_synthetic


@pytest.fixture(scope="session")
def small_synth():
    """A small two-class synthetic dataset shared by read-only tests."""
    spec = SyntheticSpec(n_subjects=8, m=6, m_imp=3, T=16, seed=3)
    dataset, (G0, G1) = gen_synthetic(spec)
    return spec, dataset, G0, G1
