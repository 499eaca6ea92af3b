import numpy as np
import pytest

from fgad.data import SyntheticSpec, TargetSpec, synth_generate


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(
        n_features=16,
        n_normal_types=2,
        n_anomaly_subtypes=2,
        n_domains=1,
        content_separation=10.0,
        domain_shift_magnitude=3.0,
        noise_sigma=1.0,
        reference_size=200,
        targets=(TargetSpec(160, 0.25),),
        seed=11,
    )


@pytest.fixture(scope="session")
def tiny_bundle(tiny_spec):
    return synth_generate(tiny_spec)


@pytest.fixture(scope="session")
def tiny_detector(tiny_bundle):
    from fgad.detector import LossWeights, train_phase1
    from fgad.nn import MlpSpec, OptimizerConfig, TrainSchedule

    return train_phase1(
        tiny_bundle.reference,
        MlpSpec((16, 24)),
        MlpSpec((24, 16)),
        MlpSpec((16, 32, 1)),
        TrainSchedule(epochs=40, batch_size=64),
        LossWeights(),
        seed=5,
        memory_size=64,
        temperature=0.02,
        optimizer=OptimizerConfig(learning_rate=1e-3, seed=5),
    )


def truth_flags(matrix):
    return np.array([l.startswith("anomaly") for l in matrix.labels])
