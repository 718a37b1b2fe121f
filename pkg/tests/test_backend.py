import subprocess
import sys

import numpy as np
import pytest

from snp.backend import SplitMix64, ToyBackendSpec
from snp.errors import ContractViolation
from snp.routing import ControlFeatureSet

from oracles import euler_scalar, param_checksum_py, splitmix64_py

SEED42_CHECKSUM = "51a7e535a13e8df5b1fb5abc976231f8f7f7d2b116cb20d7614fe5f8ee780cb3"
SEED42_PARAM_COUNT = 43584


def test_splitmix_reference_vectors():
    # published reference outputs of SplitMix64
    assert int(SplitMix64(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF
    assert [int(x) for x in SplitMix64(1234567).next_u64(5)] == [
        6457827717110365317, 3203168211198807973, 9817491932198370423,
        4593380528125082431, 16408922859458223821,
    ]


def test_splitmix_stream_continues():
    r = SplitMix64(99)
    a = np.concatenate([r.next_u64(3), r.next_u64(4)])
    assert [int(x) for x in a] == splitmix64_py(99, 7)


def test_uniform_range():
    u = SplitMix64(5).uniform(10000)
    assert u.min() >= -0.1 and u.max() < 0.1


def test_seed42_checksum(toy):
    assert toy.parameter_block().size == SEED42_PARAM_COUNT
    assert toy.parameter_checksum() == SEED42_CHECKSUM
    assert param_checksum_py(42, SEED42_PARAM_COUNT) == SEED42_CHECKSUM


def test_checksum_stable_across_processes():
    code = "from snp.backend import ToyBackend; print(ToyBackend().parameter_checksum())"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.strip()
    assert out == SEED42_CHECKSUM


def test_declared_layout(toy):
    assert toy.site_count == 13
    assert len(toy.site_resolutions) == 13
    assert toy.site_resolutions[0] == (32, 32) and toy.site_resolutions[12] == (4, 4)
    assert [s for s, b in toy.site_to_decoder_block.items() if b == 4] == [0, 1, 2]
    assert toy.site_to_decoder_block[12] == "mid"
    assert toy.condition_shape == (256, 256)


def test_control_shapes_follow_declaration(small, small_inputs):
    z, depth, pos, _ = small_inputs
    feats = small.control_encode(z, 0, pos, depth)
    assert feats.site_count == small.site_count
    for f, r in zip(feats.features, small.site_resolutions):
        assert f.shape[-2:] == r


def test_zero_control_equals_none(small, small_inputs):
    z, depth, pos, _ = small_inputs
    feats = small.control_encode(z, 3, pos, depth)
    a = small.predict(z, 3, pos, ControlFeatureSet.zeros_like(feats))
    b = small.predict(z, 3, pos, None)
    assert np.array_equal(a, b)


def test_predict_deterministic_and_affine(small, small_inputs):
    z, _, pos, _ = small_inputs
    p1 = small.predict(z, 2, pos)
    assert small.predict(z, 2, pos).tobytes() == p1.tobytes()
    p0 = small.predict(np.zeros_like(z), 2, pos)
    p2 = small.predict(2 * z, 2, pos)
    np.testing.assert_allclose(p2 - p1, p1 - p0, rtol=1e-10, atol=1e-12)


def test_predict_matches_across_processes(toy):
    code = (
        "import numpy as np, hashlib\n"
        "from snp.backend import ToyBackend\n"
        "b = ToyBackend(); z = np.random.default_rng(11).standard_normal((1, 4, 32, 32))\n"
        "print(hashlib.sha256(b.predict(z, 4, b.encode_prompt('cat')).tobytes()).hexdigest())"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.strip()
    z = np.random.default_rng(11).standard_normal((1, 4, 32, 32))
    import hashlib
    assert out == hashlib.sha256(toy.predict(z, 4, toy.encode_prompt("cat")).tobytes()).hexdigest()


def test_different_depths_differ(small, small_inputs):
    z, depth, pos, _ = small_inputs
    a = small.control_encode(z, 0, pos, depth)
    b = small.control_encode(z, 0, pos, 1.0 - depth)
    assert any(not np.array_equal(x, y) for x, y in zip(a.features, b.features))
    c = small.control_encode(z, 0, pos, depth)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.features, c.features))


def _affine_vec(p, name, x):
    # zero embedding, step 0: y = W x + b
    return p[f"{name}.W"] @ x + p[f"{name}.b"]


def test_zero_inputs_closed_form(small):
    """With zero latent, depth, embedding and step, every map is a constant vector."""
    p = small.params
    c = small.latent_shape[0]
    z = np.zeros((1, *small.latent_shape))
    feats = small.control_encode(z, 0, np.zeros(small.spec.emb_dim), np.zeros(small.condition_shape))

    h = _affine_vec(p, "C.in", np.zeros(c)) + _affine_vec(p, "C.hint", np.zeros(1))
    hs = [h]
    for name in ("e0a", "e0b", "d1", "e1a", "e1b", "d2", "e2a", "e2b", "d3", "e3a", "e3b"):
        h = _affine_vec(p, f"C.{name}", h)  # average pooling keeps constants constant
        hs.append(h)
    hs.append(_affine_vec(p, "C.mid", h))
    for site, (vec, f) in enumerate(zip(hs, feats.features)):
        expect = _affine_vec(p, f"C.zero{site}", vec)
        np.testing.assert_allclose(f[0], np.broadcast_to(expect[:, None, None], f.shape[1:]), rtol=1e-12, atol=1e-15)


def test_scheduler_update(small):
    rng = np.random.default_rng(4)
    z = rng.standard_normal((2, *small.latent_shape))
    eps = rng.standard_normal(z.shape)
    assert np.array_equal(small.scheduler_update(z, np.zeros_like(z), 0, 10), z)
    assert np.array_equal(small.scheduler_update(z, eps, 0, 1), z - eps)
    for i, n in [(0, 7), (3, 7), (6, 7), (19, 20)]:
        np.testing.assert_allclose(small.scheduler_update(z, eps, i, n), euler_scalar(z, eps, i, n), rtol=1e-6, atol=1e-12)


def test_shape_contracts(small, small_inputs):
    z, depth, pos, _ = small_inputs
    with pytest.raises(ContractViolation):
        small.predict(z[:, :3], 0, pos)
    with pytest.raises(ContractViolation):
        small.control_encode(z, 0, pos, depth[:-4])
    with pytest.raises(ContractViolation):
        small.scheduler_update(z, z[..., :-1], 0, 5)
    with pytest.raises(ContractViolation):
        ToyBackendSpec(latent_shape=(4, 12, 12))
