import numpy as np
import pytest

from uncreg import synth
from uncreg.grid import Mask, MeanStdField
from uncreg.synth import Bump, NoiseSpec, SynthSpec


def test_identity_tiny_noise():
    spec = SynthSpec(dims=(8, 8, 8), noise=NoiseSpec("constant", 1e-9, 1e-9))
    d = synth.generate(spec)
    xyz = spec.grid.all_world()
    np.testing.assert_allclose(d.field.mean, xyz, atol=1e-6)


def test_translation_exact():
    spec = SynthSpec(dims=(6, 5, 4), affine=((1, 0, 0, 5), (0, 1, 0, 0), (0, 0, 1, 0)))
    d = synth.generate(spec)
    xyz = spec.grid.all_world()
    assert np.array_equal(d.truth[0], xyz[0] + 5) and np.array_equal(d.truth[1:], xyz[1:])


def test_deterministic():
    spec = SynthSpec(dims=(8, 8, 8), bumps=(Bump((0, 0, 0), 3, (1, 0, 0)),), seed=5)
    a, b = synth.generate(spec), synth.generate(spec)
    assert a.field.mean.tobytes() == b.field.mean.tobytes()
    assert a.subject_seg.labels.tobytes() == b.subject_seg.labels.tobytes()
    c = synth.generate(SynthSpec(dims=(8, 8, 8), bumps=spec.bumps, seed=6))
    assert not np.array_equal(a.field.mean, c.field.mean)


def test_noise_bounds_and_calibration():
    spec = SynthSpec(dims=(24, 24, 24), noise=NoiseSpec("cortex", 0.5, 4.0), seed=3)
    d = synth.generate(spec)
    s = d.mask.gather(d.sigma)
    assert s.min() >= 0.5 and s.max() <= 4.0
    z = d.mask.gather((d.field.mean - d.truth) / d.field.std)
    assert z.size >= 10_000
    assert abs(z.mean()) < 0.05 and abs(z.std() - 1) < 0.03


def test_miscalibration_scales_std():
    spec = SynthSpec(dims=(8, 8, 8), miscalibration=2.0)
    d = synth.generate(spec)
    np.testing.assert_allclose(d.field.std, 2.0 * d.sigma)


def test_subject_seg_is_pullback():
    spec = SynthSpec(dims=(10, 10, 10), affine=((1, 0, 0, 2.0), (0, 1, 0, 0), (0, 0, 1, 0)), atlas_pattern="stripes")
    d = synth.generate(spec)
    assert d.atlas_seg.label_set[0] == 0 and len(d.atlas_seg.label_set) > 2
    # a one-voxel shift along x: subject voxel i takes the atlas label at i+1
    m = d.mask.values
    shifted = np.zeros_like(d.atlas_seg.labels)
    shifted[:-1] = d.atlas_seg.labels[1:]
    np.testing.assert_array_equal(d.subject_seg.labels[m], shifted[m])


def test_spec_validation():
    with pytest.raises(ValueError):
        Bump((0, 0, 0), 0.0, (1, 1, 1))
    with pytest.raises(ValueError):
        NoiseSpec("constant", 0.0, 1.0)
    with pytest.raises(ValueError):
        SynthSpec(atlas_pattern="checker")


class TestErrorField:
    def test_zero_and_offset(self, grid4):
        m = Mask.full(grid4)
        truth = np.zeros((3,) + grid4.dims)
        f = MeanStdField(grid4, truth.copy(), np.ones_like(truth), m)
        assert np.all(synth.error_field(f, truth).values == 0)
        mean = truth.copy()
        mean[:, 1, 2, 3] = (3, 4, 0)
        f = MeanStdField(grid4, mean, np.ones_like(truth), m)
        e = synth.error_field(f, truth).values
        assert e[1, 2, 3] == 25 and e.sum() == 25

    def test_loop_oracle(self, grid4, rng):
        m = Mask(grid4, rng.random(grid4.dims) > 0.5)
        mean = rng.normal(size=(3,) + grid4.dims)
        truth = rng.normal(size=(3,) + grid4.dims)
        e = synth.error_field(MeanStdField(grid4, mean, np.ones_like(mean), m), truth).values
        for idx in np.ndindex(grid4.dims):
            expect = sum((mean[j][idx] - truth[j][idx]) ** 2 for j in range(3)) if m.values[idx] else 0.0
            assert e[idx] == pytest.approx(expect, abs=1e-12)

    def test_shape_mismatch(self, grid4):
        f = MeanStdField(grid4, np.zeros((3, 4, 4, 4)), np.ones((3, 4, 4, 4)), Mask.full(grid4))
        with pytest.raises(ValueError):
            synth.error_field(f, np.zeros((3, 4, 4, 5)))
