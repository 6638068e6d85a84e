import numpy as np
import pytest

from irisseg import data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def clean_synth_config():
    """Noise-free concentric eyes whose geometry fits the default search bands."""
    return data.SynthConfig(size=(240, 320), pupil_radius=(22.0, 30.0),
                            limbus_radius=(55.0, 85.0), center_jitter=0.04,
                            pupil_offset=0.0, noise_sigma=0.0, seed=77)


@pytest.fixture
def small_eye_config():
    """Tiny 32x40 eyes for fast network tests."""
    return data.SynthConfig(size=(32, 40), pupil_radius=(3.0, 5.0),
                            limbus_radius=(9.0, 13.0), center_jitter=0.03,
                            noise_sigma=2.0, seed=5)
