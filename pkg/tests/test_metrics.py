import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from echokit.container import ExamManifest, Recording, ecg_stream, make_stream
from echokit.errors import ValidationError
from echokit.metrics import (ColorBox, MaskParams, aggregate_folds,
                             alias_distance, dice_score, filter_recording,
                             make_patient_folds, masked_dice_loss,
                             radial_weights, sample_clips, task1_loss,
                             task2_loss, temporal_mean_baseline,
                             turbulence_proxy, valid_velocity_mask,
                             velocity_scale, wrap_velocity)
from echokit.timing import EcgTrace


def brute_alias(a, b, nu, k_range=10):
    return min(abs(a - b + 2.0 * k * nu) for k in range(-k_range, k_range + 1)) / nu


class TestAliasDistance:
    def test_identity(self):
        assert alias_distance(0.37, 0.37, 0.6) == 0.0

    def test_alias_equivalence_at_two_nyquist(self):
        assert alias_distance(0.6, -0.6, 0.6) == pytest.approx(0.0, abs=1e-12)

    def test_derived_example(self):
        # brute force over k in [-10, 10]: 0.9 folds to 0.3, /0.6 = 0.5
        assert alias_distance(0.5, -0.4, 0.6) == pytest.approx(0.5, abs=1e-12)

    def test_rejects_bad_nyquist(self):
        with pytest.raises(ValidationError):
            alias_distance(0.1, 0.2, 0.0)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-8, 8), st.floats(-8, 8), st.floats(0.05, 3.0),
           st.integers(-5, 5))
    def test_brute_force_symmetry_periodicity(self, alpha, beta, nu, k):
        a, b = alpha * nu, beta * nu  # keeps the fold inside the brute window
        d = float(alias_distance(a, b, nu))
        assert abs(d - brute_alias(a, b, nu, 12)) < 1e-12
        assert abs(d - float(alias_distance(b, a, nu))) < 1e-11
        assert abs(d - float(alias_distance(a + 2 * k * nu, b, nu))) < 1e-11
        assert 0.0 <= d <= 1.0
        if abs(a - b) <= nu:
            assert d == pytest.approx(abs(a - b) / nu, abs=1e-12)


class TestTask1:
    def test_zero_on_identical(self):
        x = np.random.default_rng(0).random((3, 4, 4))
        assert task1_loss(x, x, 0.5) == 0.0

    def test_global_alias_shift(self):
        x = np.random.default_rng(1).random((2, 5, 5)) * 0.4
        assert task1_loss(x + 1.0, x, 0.5) == pytest.approx(0.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            task1_loss(np.zeros((2, 2)), np.zeros((3, 2)), 0.5)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            shape = tuple(rng.integers(1, 6, size=3))
            nu = float(rng.uniform(0.1, 1.5))
            a = rng.uniform(-3 * nu, 3 * nu, shape)
            b = rng.uniform(-3 * nu, 3 * nu, shape)
            oracle = float(np.mean([brute_alias(x, y, nu)
                                    for x, y in zip(a.ravel(), b.ravel())]))
            assert task1_loss(a, b, nu) == pytest.approx(oracle, abs=1e-9)


class TestTurbulence:
    def test_constant_frame_is_zero(self):
        assert np.all(turbulence_proxy(np.full((5, 7), 3.3)) == 0.0)

    def test_single_pixel_center_value(self):
        v = np.zeros((5, 5))
        v[2, 2] = 1.0
        out = turbulence_proxy(v)
        assert out[2, 2] == pytest.approx(math.sqrt(8.0) / 9.0, abs=1e-12)

    def test_matches_window_loop(self):
        from echokit.phantom import naive_turbulence

        rng = np.random.default_rng(3)
        v = rng.standard_normal((4, 6, 6))
        assert np.abs(turbulence_proxy(v) - naive_turbulence(v)).max() < 1e-9


class TestValidVelocityMask:
    def test_all_pass(self):
        box = ColorBox(np.ones((4, 4), bool))
        mask, weights = valid_velocity_mask(box, np.ones((4, 4)), np.zeros((4, 4)))
        assert np.all(mask == 1.0)
        assert np.all(weights == 1.0)

    def test_zero_power_floor(self):
        box = ColorBox(np.ones((4, 4), bool))
        mask, weights = valid_velocity_mask(box, np.zeros((4, 4)),
                                            np.zeros((4, 4)))
        assert np.all(mask == 0.0)
        assert np.all(weights == 0.01)

    def test_outside_box_weight(self):
        box = ColorBox.from_ranges((4, 4), (0, 2), (0, 4))
        mask, weights = valid_velocity_mask(box, np.ones((4, 4)), np.zeros((4, 4)))
        assert np.all(weights[:2] == 1.0)
        assert np.all(weights[2:] == 0.01)
        assert np.all(mask[2:] == 0.0)

    def test_truth_table_enumeration(self):
        rng = np.random.default_rng(5)
        params = MaskParams()
        for _ in range(30):
            power = rng.random((4, 4))
            bmode = rng.random((4, 4))
            region = rng.random((4, 4)) < 0.6
            mask, weights = valid_velocity_mask(ColorBox(region), power, bmode,
                                                params)
            for i in range(4):
                for j in range(4):
                    expect = (region[i, j] and power[i, j] >= 0.3
                              and bmode[i, j] <= 0.4)
                    assert mask[i, j] == float(expect)
                    if region[i, j]:
                        assert weights[i, j] == max(mask[i, j], 0.01)
                    else:
                        assert weights[i, j] == 0.01

    def test_monotone_in_thresholds(self):
        rng = np.random.default_rng(8)
        power = rng.random((8, 8))
        bmode = rng.random((8, 8))
        box = ColorBox(np.ones((8, 8), bool))
        base, _ = valid_velocity_mask(box, power, bmode,
                                      MaskParams(tau_power=0.3, tau_bmode=0.4))
        tighter_p, _ = valid_velocity_mask(box, power, bmode,
                                           MaskParams(tau_power=0.5, tau_bmode=0.4))
        tighter_b, _ = valid_velocity_mask(box, power, bmode,
                                           MaskParams(tau_power=0.3, tau_bmode=0.2))
        assert np.all(tighter_p <= base)
        assert np.all(tighter_b <= base)

    def test_strict_switch(self):
        box = ColorBox(np.ones((1, 1), bool))
        power = np.array([[0.3]])
        bmode = np.array([[0.4]])
        closed, _ = valid_velocity_mask(box, power, bmode)
        strict, _ = valid_velocity_mask(box, power, bmode, strict=True)
        assert closed[0, 0] == 1.0 and strict[0, 0] == 0.0


class TestTask2:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(0)
        v, p, s = (rng.random((2, 3, 3)) for _ in range(3))
        mask = np.ones_like(v)
        terms = task2_loss(v, p, s, v, p, s, mask)
        assert terms == (0.0, 0.0, 0.0)

    def test_empty_mask_terms_absent(self):
        rng = np.random.default_rng(1)
        v, p, s = (rng.random((2, 3, 3)) for _ in range(3))
        terms = task2_loss(v, p, s, v + 1, p + 1, s + 1, np.zeros_like(v))
        assert terms.velocity is None and terms.variation is None
        assert terms.power == pytest.approx(1.0)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            shape = (int(rng.integers(1, 4)), int(rng.integers(2, 7)),
                     int(rng.integers(2, 7)))
            arrays = [rng.standard_normal(shape) for _ in range(6)]
            mask = (rng.random(shape) < 0.5).astype(float)
            terms = task2_loss(*arrays, mask)
            pv, pp, ps, tv, tp, ts = arrays
            vs, ss, n = 0.0, 0.0, 0
            pow_sum = 0.0
            for idx in np.ndindex(shape):
                pow_sum += abs(pp[idx] - tp[idx])
                if mask[idx] == 1.0:
                    vs += abs(pv[idx] - tv[idx])
                    ss += abs(ps[idx] - ts[idx])
                    n += 1
            assert terms.power == pytest.approx(pow_sum / mask.size, abs=1e-9)
            if n:
                assert terms.velocity == pytest.approx(vs / n, abs=1e-9)
                assert terms.variation == pytest.approx(ss / n, abs=1e-9)
            else:
                assert terms.velocity is None


def one_hot(labels):
    return np.stack([(labels == c).astype(float) for c in range(3)])


class TestDice:
    def test_one_hot_reference_is_zero_loss(self):
        rng = np.random.default_rng(0)
        ref = rng.integers(0, 3, (2, 6, 6))
        loss = masked_dice_loss(one_hot(ref), ref, np.ones(2, bool))
        assert loss == pytest.approx(0.0, abs=1e-5)

    def test_disjoint_foreground_loss_one(self):
        # both foreground classes present but never overlapping
        ref = np.zeros((1, 4, 4), int)
        ref[0, 0], ref[0, 1] = 1, 2
        pred = np.zeros((1, 4, 4), int)
        pred[0, 2], pred[0, 3] = 1, 2
        loss = masked_dice_loss(one_hot(pred), ref, np.ones(1, bool))
        assert loss == pytest.approx(1.0, abs=1e-4)

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            ref = rng.integers(0, 3, (1, 8, 8))
            raw = rng.random((3, 1, 8, 8)) + 1e-3
            probs = raw / raw.sum(axis=0, keepdims=True)
            loss = masked_dice_loss(probs, ref, np.ones(1, bool))
            dice = []
            for c in (1, 2):
                p = probs[c, 0]
                g = (ref[0] == c).astype(float)
                inter = float((p * g).sum())
                dice.append((2 * inter + 1e-6) / (p.sum() + g.sum() + 1e-6))
            assert loss == pytest.approx(1.0 - np.mean(dice), abs=1e-6)

    def test_padding_frames_ignored(self):
        ref = np.zeros((3, 4, 4), int)
        ref[0, 1:3, 1:3] = 2
        probs = one_hot(ref)
        probs[:, 1:] = 1.0 / 3.0  # garbage on non-annotated frames
        ann = np.array([True, False, False])
        assert masked_dice_loss(probs, ref, ann) == pytest.approx(0.0, abs=1e-5)

    def test_requires_normalized_probs(self):
        ref = np.zeros((1, 2, 2), int)
        with pytest.raises(ValidationError, match="sum to 1"):
            masked_dice_loss(np.full((3, 1, 2, 2), 0.5), ref, np.ones(1, bool))

    def test_requires_annotated_frames(self):
        ref = np.zeros((1, 2, 2), int)
        with pytest.raises(ValidationError, match="annotated"):
            masked_dice_loss(one_hot(ref), ref, np.zeros(1, bool))


class TestDiceScore:
    def test_identical_labels(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 3, (3, 8, 8))
        assert dice_score(labels, labels, np.ones(3, bool)) == 100.0

    def test_disjoint(self):
        a = np.zeros((1, 4, 4), int)
        a[0, :2] = 1
        b = np.zeros((1, 4, 4), int)
        b[0, 2:] = 1
        assert dice_score(a, b, np.ones(1, bool)) == 0.0

    def test_half_overlap(self):
        a = np.zeros((1, 4, 4), int)
        a[0, 0, :4] = 1
        b = np.zeros((1, 4, 4), int)
        b[0, 0, 2:] = 1
        b[0, 1, :2] = 1
        # |A| = |B| = 4, intersection 2 -> 2*2/(4+4) = 50%
        assert dice_score(a, b, np.ones(1, bool)) == pytest.approx(50.0)


class TestRadialWeights:
    def test_endpoints_exact(self):
        w = radial_weights(2)
        assert w[0] == 0.001 and w[-1] == 1.999

    def test_three_point_midpoint(self):
        assert np.allclose(radial_weights(3), [0.001, 1.0, 1.999], atol=1e-15)

    def test_mean_one_within_ulps(self):
        eps = np.finfo(float).eps
        for n in (2, 3, 17, 256, 1001, 4096):
            assert abs(radial_weights(n).mean() - 1.0) <= 8 * eps

    def test_rejects_short(self):
        with pytest.raises(ValidationError):
            radial_weights(1)


class TestBaseline:
    def test_constant_series(self):
        x = np.full((4, 3, 3), 2.5)
        assert np.array_equal(temporal_mean_baseline(x), x)

    def test_two_frames(self):
        x = np.stack([np.zeros((2, 2)), np.full((2, 2), 2.0)])
        out = temporal_mean_baseline(x)
        assert np.all(out == 1.0)

    def test_is_per_pixel_time_mean(self):
        rng = np.random.default_rng(0)
        x = rng.random((5, 4, 4))
        out = temporal_mean_baseline(x)
        assert out.shape == x.shape
        assert np.allclose(out[0], x.mean(axis=0))
        # unique constant-in-time minimizer of the L2 objective
        grad = (out - x).sum(axis=0)
        assert np.abs(grad).max() < 1e-12


class TestVelocityScale:
    def test_value(self):
        assert velocity_scale(0.0005, 30.0) == pytest.approx(0.015)

    def test_linear_in_fps(self):
        assert velocity_scale(0.0005, 60.0) == 2 * velocity_scale(0.0005, 30.0)

    def test_rejects_zero_fps(self):
        with pytest.raises(ValidationError):
            velocity_scale(0.0005, 0.0)


class TestAggregateFolds:
    def test_identical_values(self):
        out = aggregate_folds([2.0] * 5)
        assert out.mean == 2.0 and out.std == 0.0

    def test_sample_std(self):
        out = aggregate_folds([1, 2, 3, 4, 5])
        assert out.mean == 3.0
        assert out.std == pytest.approx(1.5811388300841898, abs=1e-12)

    def test_fold_count_mismatch(self):
        with pytest.raises(ValidationError):
            aggregate_folds([1, 2, 3, 4])


def manifests_for(patients, exams_per=1):
    out = []
    for i, p in enumerate(patients):
        for j in range(exams_per):
            out.append(ExamManifest(f"e{i}-{j}", [f"r{i}-{j}"], patient_key=p))
    return out


class TestPatientFolds:
    def test_even_split(self):
        folds = make_patient_folds(manifests_for([f"p{i}" for i in range(10)]))
        counts = np.bincount(list(folds.values()), minlength=5)
        assert np.all(counts == 2)

    def test_grouping_invariant(self):
        ms = manifests_for([f"p{i}" for i in range(7)], exams_per=3)
        folds = make_patient_folds(ms, seed=3)
        for m in ms:
            assert folds[m.patient_key] == folds[ms[0].patient_key] or \
                m.patient_key != ms[0].patient_key

    def test_deterministic_and_order_invariant(self):
        ms = manifests_for([f"p{i}" for i in range(13)], exams_per=2)
        a = make_patient_folds(ms, seed=9)
        b = make_patient_folds(list(reversed(ms)), seed=9)
        assert a == b
        assert make_patient_folds(ms, seed=10) != a or len(a) < 2

    def test_counts_differ_at_most_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 40))
            folds = make_patient_folds(manifests_for([f"p{i}" for i in range(n)]),
                                       seed=int(rng.integers(1000)))
            counts = np.bincount(list(folds.values()), minlength=5)
            assert counts.max() - counts.min() <= 1

    def test_missing_patient_key(self):
        with pytest.raises(ValidationError, match="patient_key"):
            make_patient_folds([ExamManifest("e", ["r"], patient_key="")])


def fixture_recording(fps=30.0, n_frames=64, nyquist=0.16, doppler="tdi2d",
                      doppler_ratio=1, with_contours=False):
    rng = np.random.default_rng(0)
    from echokit.geometry import SectorGeometry2D

    geom = SectorGeometry2D(-0.5, 1.0 / 15, 16, 0.01, 0.002, 24)
    bt = np.arange(n_frames) / fps
    nd = n_frames * doppler_ratio
    dt = (np.arange(nd) + 0.5) / (fps * doppler_ratio)
    streams = [make_stream("bmode2d", rng.random((n_frames, 16, 24)).astype(np.float32),
                           bt, geometry_id=0)]
    if doppler == "color2d":
        data = rng.random((nd, 2, 16, 24)).astype(np.float32)
    else:
        data = rng.random((nd, 16, 24)).astype(np.float32)
    streams.append(make_stream(doppler, data, dt, nyquist_velocity=nyquist,
                               geometry_id=0))
    streams.append(ecg_stream(EcgTrace(rng.standard_normal(
        int(600 * (n_frames / fps + 0.5))), 600.0)))
    ann = None
    if with_contours:
        from echokit.annotations import AnnotationSet, Contour2D

        square = np.array([[0.0, 0.02], [0.01, 0.02], [0.01, 0.03], [0.0, 0.03]])
        ann = AnnotationSet(contours=[Contour2D([square] * n_frames)])
    from echokit.annotations import AnnotationSet as AS

    return Recording("fixture", tuple(streams), {0: geom}, ann or AS())


class TestFilterRecording:
    def test_tissue_accept(self):
        result = filter_recording(fixture_recording(fps=30.0, n_frames=64), 1)
        assert result.accept, result.reasons

    def test_tissue_fps_reject(self):
        result = filter_recording(fixture_recording(fps=50.0, n_frames=64), 1)
        assert not result.accept
        assert any("FPS out of [26,33]" in r for r in result.reasons)

    def test_short_recording_reject(self):
        result = filter_recording(fixture_recording(fps=30.0, n_frames=20), 1)
        assert any("below 32 frames" in r for r in result.reasons)

    def test_tissue_slack_reject(self):
        rec = fixture_recording(fps=30.0, n_frames=64)
        doppler = rec.streams[1]
        shifted = make_stream("tdi2d", doppler.data,
                              doppler.header.timestamps + 0.4,
                              nyquist_velocity=0.16, geometry_id=0)
        rec2 = Recording(rec.id, (rec.streams[0], shifted, rec.streams[2]),
                         rec.geometries)
        result = filter_recording(rec2, 1)
        assert any("slack" in r for r in result.reasons)

    def test_flow_accept(self):
        rec = fixture_recording(fps=10.0, n_frames=40, nyquist=0.605,
                                doppler="color2d", doppler_ratio=1)
        assert filter_recording(rec, 2).accept

    def test_flow_ratio_reject(self):
        rec = fixture_recording(fps=10.0, n_frames=40, nyquist=0.605,
                                doppler="color2d", doppler_ratio=2)
        result = filter_recording(rec, 2)
        assert any("ratio out of [0.45,1.1]" in r for r in result.reasons)

    def test_flow_nyquist_reject(self):
        rec = fixture_recording(fps=10.0, n_frames=40, nyquist=0.7,
                                doppler="color2d", doppler_ratio=1)
        result = filter_recording(rec, 2)
        assert any("Nyquist out of" in r for r in result.reasons)

    def test_segmentation_requires_contours(self):
        rec = fixture_recording(with_contours=False)
        assert not filter_recording(rec, 3).accept
        rec = fixture_recording(with_contours=True)
        assert filter_recording(rec, 3).accept


class TestSampleClips:
    def test_enumerated(self):
        assert sample_clips(64, 32, 16) == [(0, 32), (16, 48), (32, 64)]

    def test_exact_fit(self):
        assert sample_clips(32, 32, 16) == [(0, 32)]

    def test_too_short(self):
        assert sample_clips(31, 32, 16) == []

    def test_rejects_bad_args(self):
        with pytest.raises(ValidationError):
            sample_clips(10, 0, 1)


def test_wrap_velocity_range():
    rng = np.random.default_rng(0)
    v = rng.uniform(-5, 5, 100)
    w = wrap_velocity(v, 0.6)
    assert np.all(w >= -0.6) and np.all(w < 0.6)
    assert np.allclose(alias_distance(w, v, 0.6), 0.0, atol=1e-9)
