"""Shared fixtures and random-input builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from echokit.annotations import AnnotationSet, Contour2D, Mesh3D, MeshFrame, SparseMarker
from echokit.container import Recording, ecg_stream, make_stream
from echokit.geometry import SectorGeometry2D
from echokit.phantom import PhantomConfig, generate_exam, unit_icosphere
from echokit.timing import EcgTrace


@pytest.fixture(scope="session")
def phantom_exam():
    """Default noisy phantom exam shared by read-only tests."""
    return generate_exam(PhantomConfig(seed=11, n_subacquisitions=3))


@pytest.fixture(scope="session")
def clean_exam():
    """Noise-free phantom exam for self-consistency invariants."""
    return generate_exam(PhantomConfig(seed=11, snr_db=None,
                                       n_subacquisitions=3))


def random_geometry(rng: np.random.Generator) -> SectorGeometry2D:
    n_beams = int(rng.integers(8, 96))
    n_samples = int(rng.integers(8, 128))
    span = rng.uniform(0.3, 2.6)
    center = rng.uniform(-0.4, 0.4)  # keep every beam angle inside (-pi, pi)
    sign = 1 if rng.random() < 0.8 else -1
    theta0 = center - sign * span / 2
    return SectorGeometry2D(theta0, sign * span / (n_beams - 1), n_beams,
                            rng.uniform(0.0, 0.02), rng.uniform(2e-4, 1e-3),
                            n_samples)


def random_recording(rng: np.random.Generator) -> Recording:
    """A structurally valid recording with random streams and annotations."""
    geom = random_geometry(rng)
    streams = []
    n_img = int(rng.integers(1, 4))
    for _ in range(n_img):
        modality = str(rng.choice(["bmode2d", "tdi2d", "color2d", "bmode1d",
                                   "pw1d", "cw1d"]))
        t = int(rng.integers(1, 6))
        if modality in ("bmode2d", "tdi2d"):
            shape = (t, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        elif modality == "color2d":
            shape = (t, 2, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        else:
            shape = (t, int(rng.integers(2, 40)))
        if rng.random() < 0.3:
            data = rng.integers(0, 255, shape).astype(np.uint8)
        else:
            data = rng.standard_normal(shape).astype(np.float32)
        ts = np.cumsum(rng.uniform(0.01, 0.2, t))
        nyq = float(rng.uniform(0.1, 1.5)) if modality in ("tdi2d", "color2d",
                                                           "pw1d", "cw1d") else None
        gid = 0 if modality in ("bmode2d", "tdi2d", "color2d") else None
        streams.append(make_stream(modality, data, ts, nyquist_velocity=nyq,
                                   geometry_id=gid))
    n = int(rng.integers(600, 1500))
    trace = EcgTrace(rng.standard_normal(n), 600.0, 0.0)
    streams.append(ecg_stream(trace))

    ann = AnnotationSet()
    if rng.random() < 0.5:
        frames = [rng.uniform(-0.02, 0.08, (int(rng.integers(3, 30)), 2))
                  for _ in range(int(rng.integers(1, 5)))]
        ann.contours.append(Contour2D(frames, "LV", "endo", "A2C"))
    if rng.random() < 0.4:
        sphere = unit_icosphere(1)
        frames = [MeshFrame(sphere.vertices * rng.uniform(0.005, 0.03),
                            sphere.triangles)
                  for _ in range(int(rng.integers(1, 4)))]
        ann.meshes.append(Mesh3D(frames))
    if rng.random() < 0.4:
        ann.markers.append(SparseMarker(
            str(rng.choice(["point", "line", "sample_volume"])),
            rng.uniform(-0.1, 0.1, (2, 2)), "MV E' septal",
            str(rng.choice(["cartesian", "beamspace"]))))
    return Recording(f"rec-{rng.integers(1e6)}", tuple(streams), {0: geom}, ann)
