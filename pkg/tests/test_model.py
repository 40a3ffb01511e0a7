"""Encoder, conditioning encodings, denoiser probes and the brain-age estimator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tadm3d.errors import ConfigurationError, ContractError, DimensionError, DomainError
from tadm3d.model import (
    TADM,
    ConditioningBundle,
    ModelConfig,
    normalize_age,
    one_hot_status,
    pos_encode,
    predict_age,
)
from tadm3d.tensor_core import Tensor, backward, grad_check, no_grad, ops

SMALL = ModelConfig(extent=8, widths=(4, 8, 8), groups=2, latent_dim=8, cond_dim=16, step_dim=8,
                    delta_dim=8, meta_dim=4)


@pytest.fixture(scope="module")
def model():
    m = TADM(SMALL, seed=3)
    # the output conv starts at zero; give it weights so probes see the whole network
    m.unet.out.weight.data = np.random.default_rng(0).standard_normal(m.unet.out.weight.shape).astype(np.float32) * 0.1
    return m


@pytest.fixture(scope="module")
def volumes():
    return np.random.default_rng(1).uniform(0, 1, (2, 8, 8, 8)).astype(np.float32)


def bundle(vols, delta=(2.0, 4.0), age=(60.0, 70.0), status=(0, 2)):
    return ConditioningBundle.build(vols, np.array(delta), np.array(age), np.array(status))


class TestPosEncode:
    def test_zero(self):
        np.testing.assert_array_equal(pos_encode(0.0, 6), [0, 1, 0, 1, 0, 1])

    def test_hand_evaluated(self):
        np.testing.assert_allclose(pos_encode(1.0, 4), [np.sin(10), np.cos(10), np.sin(0.1), np.cos(0.1)])

    @given(d=st.floats(-15, 15), half=st.integers(1, 32))
    def test_parity(self, d, half):
        a, b = pos_encode(d, 2 * half), pos_encode(-d, 2 * half)
        np.testing.assert_array_equal(a[0::2], -b[0::2])
        np.testing.assert_array_equal(a[1::2], b[1::2])

    def test_injective_on_grid(self):
        grid = np.round(np.arange(-150, 151) / 10.0, 1)
        enc = pos_encode(grid, 32)
        d = np.linalg.norm(enc[:, None] - enc[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() > 1e-3

    def test_batch_shape(self):
        assert pos_encode(np.zeros(5), 8).shape == (5, 8)

    def test_odd_dim(self):
        with pytest.raises(ConfigurationError):
            pos_encode(1.0, 5)


class TestMetadata:
    def test_age_endpoints(self):
        np.testing.assert_allclose(normalize_age([42.0, 95.0]), [0.0, 1.0])

    def test_one_hot(self):
        np.testing.assert_array_equal(one_hot_status("AD"), [[0, 0, 1]])

    def test_unknown_status(self):
        with pytest.raises(DomainError):
            one_hot_status("XYZ")

    def test_distinct_pairs_distinct_embeddings(self, model):
        rng = np.random.default_rng(0)
        ages = np.round(rng.uniform(42, 95, 1000), 2)
        st_ = rng.integers(0, 3, 1000)
        keys = set(zip(ages.tolist(), st_.tolist()))
        with no_grad():
            emb = model.embed.metadata(ages, st_).data
        assert len({tuple(np.round(e, 6)) for e in emb}) == len(keys)


class TestEncoder:
    def test_latent_width(self, model, volumes):
        out = model.encode(volumes)
        assert out.z.shape == (2, SMALL.latent_dim)
        assert [f.shape[2] for f in out.features] == [8, 4, 2]

    def test_identical_inputs(self, model, volumes):
        a, b = model.encode(volumes[:1]), model.encode(volumes[:1].copy())
        np.testing.assert_array_equal(a.z.data, b.z.data)

    def test_extent_mismatch(self, model):
        with pytest.raises(DimensionError, match="extent"):
            model.encode(np.zeros((1, 10, 10, 10), np.float32))

    def test_gradient_through_encoder(self, model, volumes):
        x = Tensor(volumes[:1, None].astype(np.float64), requires_grad=True)
        fn = lambda v: ops.reduce_sum(ops.mul(model.phi(v).z, np.arange(SMALL.latent_dim, dtype=np.float64)))  # noqa: E731
        assert grad_check(fn, [x], max_elements=30) < 1e-3


class TestDenoiser:
    def test_shape(self, model, volumes):
        x = np.random.default_rng(2).standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
        assert model.denoise(x, 5, bundle(volumes)).shape == x.shape

    @pytest.mark.parametrize("field", ["delta", "age", "status", "baseline"])
    def test_depends_on_every_condition(self, model, volumes, field):
        x = np.random.default_rng(2).standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
        cond = bundle(volumes)
        change = {"delta": cond.delta + 5.0, "age": cond.age + 10.0, "status": (cond.status + 1) % 3,
                  "baseline": volumes[::-1].copy()[:, None]}[field]
        with no_grad():
            a = model.denoise(x, 10, cond).data
            b = model.denoise(x, 10, cond.replace(**{field: change})).data
        assert np.linalg.norm(a - b) > 0

    def test_batch_mismatch(self, model, volumes):
        x = np.zeros((3, 1, 8, 8, 8), np.float32)
        with pytest.raises(DimensionError, match="batch"):
            model.denoise(x, 1, bundle(volumes))

    def test_missing_condition(self, model, volumes):
        with pytest.raises(ContractError):
            model.denoise(np.zeros((2, 1, 8, 8, 8), np.float32), 1, bundle(volumes).replace(delta=None))

    def test_gap_limit(self, model, volumes):
        with pytest.raises(DomainError):
            model.denoise(np.zeros((2, 1, 8, 8, 8), np.float32), 1, bundle(volumes, delta=(16.0, 1.0)))

    def test_zero_init_output(self, volumes):
        m = TADM(SMALL, seed=0)
        with no_grad():
            out = m.denoise(np.ones((2, 1, 8, 8, 8), np.float32), 3, bundle(volumes)).data
        assert np.all(out == 0)


class TestBrainAge:
    def test_finite_untrained(self, model, volumes):
        assert np.all(np.isfinite(predict_age(model, volumes)))

    def test_identical_inputs(self, model, volumes):
        a = predict_age(model, np.stack([volumes[0], volumes[0]]))
        assert a[0] == a[1]

    def test_delta_identical_is_zero(self, model, volumes):
        with no_grad():
            assert model.bae_delta(volumes[:1], volumes[:1]).data[0] == 0.0

    @given(seed=st.integers(0, 10 ** 6))
    @settings(max_examples=10, deadline=None)
    def test_delta_antisymmetric(self, model, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0, 1, (2, 3, 8, 8, 8)).astype(np.float32)
        with no_grad():
            assert np.array_equal(model.bae_delta(a, b).data, -model.bae_delta(b, a).data)

    def test_freeze_blocks_gradients(self, volumes):
        m = TADM(SMALL, seed=0)
        m.bae.freeze()
        before = m.bae.checksum()
        x = Tensor(volumes[:, None], requires_grad=True)
        backward(ops.reduce_sum(m.bae_age(x)))
        assert x.grad is not None and np.any(x.grad != 0)
        assert all(p.grad is None for p in m.bae.parameters())
        assert m.bae.frozen and m.bae.checksum() == before

    def test_parameter_namespaces(self, model):
        names = list(model.state())
        prefixes = {n.split(".")[0] + ("." + n.split(".")[1] if n.startswith("bae.") else "") for n in names}
        assert prefixes == {"phi", "unet", "embed", "bae.phi", "bae.psi"}
        assert not set(model.trainable()) & set(model.bae_parameters())

    def test_state_roundtrip(self, model):
        other = TADM(SMALL, seed=99)
        other.load_state(model.state())
        assert other.checksum() == model.checksum()
