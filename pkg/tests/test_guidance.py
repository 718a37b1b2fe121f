import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from snp.errors import BackendError, ContractViolation, NonFiniteLatentError
from snp.guidance import (GuidanceConfig, LatentState, PromptPair, cfg_combine, control_active, initial_latent,
                          sample, snp_step)
from snp.routing import route_features
from snp.wcm import WcmConfig, build_weight_maps

from oracles import cfg_scalar, plain_cfg_loop, vanilla_controlnet_loop

arrays = hnp.arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-1e3, 1e3))


class CountingBackend:
    """Wraps a backend and records which prompt each call used."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = []

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def _tag(self, emb):
        return "pos" if np.array_equal(emb, self.pos) else "neg"

    def control_encode(self, z, i, emb, depth):
        self.calls.append(("control_encode", self._tag(emb)))
        return self.inner.control_encode(z, i, emb, depth)

    def predict(self, z, i, emb, control=None):
        self.calls.append(("predict", self._tag(emb), control))
        return self.inner.predict(z, i, emb, control)


def test_cfg_trivial_values():
    ones, zeros = np.ones((1, 2, 3, 3)), np.zeros((1, 2, 3, 3))
    assert np.all(cfg_combine(ones, zeros, 7.5) == 7.5)


def test_cfg_matches_scalar_loop():
    rng = np.random.default_rng(0)
    pos, neg = rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((2, 4, 8, 8))
    np.testing.assert_allclose(cfg_combine(pos, neg, 3.0), cfg_scalar(pos, neg, 3.0), rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(pos=arrays, neg=arrays, a=st.floats(-50, 50), s=st.floats(0.1, 20))
def test_cfg_identity_and_homogeneity(pos, neg, a, s):
    assert np.array_equal(cfg_combine(pos, neg, 1.0), pos)
    lhs = cfg_combine(a * pos, a * neg, s)
    rhs = a * cfg_combine(pos, neg, s)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-9 * (1 + np.abs(rhs).max()))


def test_cfg_errors():
    with pytest.raises(ContractViolation, match=r"\(1, 2\).*\(2, 1\)"):
        cfg_combine(np.zeros((1, 2)), np.zeros((2, 1)), 2.0)
    with pytest.raises(ContractViolation):
        cfg_combine(np.zeros(3), np.zeros(3), 0.0)


@pytest.mark.parametrize("step,n,lam,expect", [
    (0, 50, 0.3, True), (15, 50, 0.3, False), (19, 50, 0.4, True), (20, 50, 0.4, False),
    (49, 50, 1.0, True), (0, 50, 0.0, False),
])
def test_gate_examples(step, n, lam, expect):
    assert control_active(step, n, lam) is expect


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 200), a=st.floats(0, 1), b=st.floats(0, 1))
def test_gate_monotone(n, a, b):
    lo, hi = min(a, b), max(a, b)
    act_lo = {i for i in range(n) if control_active(i, n, lo)}
    act_hi = {i for i in range(n) if control_active(i, n, hi)}
    assert act_lo <= act_hi
    assert len({i for i in range(n) if control_active(i, n, 1.0)}) == n


def test_gate_contract():
    for args in [(5, 5, 0.3), (-1, 5, 0.3), (0, 5, 1.2), (0, 0, 0.5)]:
        with pytest.raises(ContractViolation):
            control_active(*args)


def _state(z, i=0, n=10):
    return LatentState(z, i, n)


def test_reduces_to_vanilla_controlnet_step(small, small_inputs):
    z, depth, pos, neg = small_inputs
    cfg = GuidanceConfig(scale_s=7.5, lambda_t=1.0, use_negative_control=True, routing_mask=None)
    for i in (0, 4, 9):
        eps = snp_step(_state(z, i), PromptPair(pos, neg), depth, cfg, small)
        e_pos = small.predict(z, i, pos, small.control_encode(z, i, pos, depth))
        e_neg = small.predict(z, i, neg, small.control_encode(z, i, neg, depth))
        assert np.array_equal(eps, e_neg + 7.5 * (e_pos - e_neg))


def test_empty_routing_is_plain_cfg(small, small_inputs):
    z, depth, pos, neg = small_inputs
    for neg_ctl in (True, False):
        cfg = GuidanceConfig(lambda_t=1.0, use_negative_control=neg_ctl, routing_mask=frozenset())
        eps = snp_step(_state(z, 2), PromptPair(pos, neg), depth, cfg, small)
        e_pos, e_neg = small.predict(z, 2, pos), small.predict(z, 2, neg)
        assert np.array_equal(eps, e_neg + 7.5 * (e_pos - e_neg))


def test_dispatch_default_skips_negative_control(small, small_inputs):
    z, depth, pos, neg = small_inputs
    probe = CountingBackend(small)
    probe.pos = pos
    cfg = GuidanceConfig(lambda_t=1.0, use_negative_control=False, routing_mask=frozenset({0, 1, 2, 12}))
    snp_step(_state(z), PromptPair(pos, neg), depth, cfg, probe)
    assert ("control_encode", "neg") not in [c[:2] for c in probe.calls]
    assert [c[:2] for c in probe.calls] == [("control_encode", "pos"), ("predict", "pos"), ("predict", "neg")]
    routed = probe.calls[1][2]
    for i in range(13):
        assert routed[i].any() == (i in {0, 1, 2, 12})
    assert probe.calls[2][2] is None


def test_dispatch_negative_control_on(small, small_inputs):
    z, depth, pos, neg = small_inputs
    probe = CountingBackend(small)
    probe.pos = pos
    snp_step(_state(z), PromptPair(pos, neg), depth, GuidanceConfig(lambda_t=1.0, use_negative_control=True), probe)
    tags = [c[:2] for c in probe.calls]
    assert tags.count(("control_encode", "pos")) == 1 and tags.count(("control_encode", "neg")) == 1


def test_dispatch_gate_inactive(small, small_inputs):
    z, depth, pos, neg = small_inputs
    probe = CountingBackend(small)
    probe.pos = pos
    snp_step(_state(z, 5, 10), PromptPair(pos, neg), depth, GuidanceConfig(lambda_t=0.5, use_negative_control=True), probe)
    assert [c[0] for c in probe.calls] == ["predict", "predict"]
    assert all(c[2] is None for c in probe.calls)


def test_negative_skip_diverges_and_agrees_at_unit_scale(small, small_inputs):
    z, depth, pos, neg = small_inputs
    prompts = PromptPair(pos, neg)
    off = GuidanceConfig(lambda_t=0.2, use_negative_control=False)
    on = GuidanceConfig(lambda_t=0.2, use_negative_control=True)
    a = snp_step(_state(z, 0, 20), prompts, depth, off, small)
    b = snp_step(_state(z, 0, 20), prompts, depth, on, small)
    assert not np.array_equal(a, b)

    ta, tb = [], []
    n = 20
    sample(LatentState(z, 0, n), prompts, depth, off, small, callback=lambda i, x: ta.append(x))
    sample(LatentState(z, 0, n), prompts, depth, on, small, callback=lambda i, x: tb.append(x))
    assert not np.array_equal(ta[0], tb[0])

    # variants differ by (s - 1) times the control-induced change of the negative branch
    feats = route_features(small.control_encode(z, 0, neg, depth), frozenset(range(13)))
    delta_neg = small.predict(z, 0, neg, feats) - small.predict(z, 0, neg)
    np.testing.assert_allclose(a - b, (7.5 - 1) * delta_neg, rtol=1e-9, atol=1e-12)

    pure = small.predict(z, 0, pos, small.control_encode(z, 0, pos, depth))
    for cfg in (off, on):
        unit = GuidanceConfig(scale_s=1.0, lambda_t=cfg.lambda_t, use_negative_control=cfg.use_negative_control)
        assert np.array_equal(snp_step(_state(z, 0, 20), prompts, depth, unit, small), pure)


def test_weights_applied_to_positive_branch(small, small_inputs):
    z, depth, pos, neg = small_inputs
    wcfg = WcmConfig(w_floor=0.2)
    cfg = GuidanceConfig(lambda_t=1.0, routing_mask=frozenset({0, 12}), wcm=wcfg)
    eps = snp_step(_state(z), PromptPair(pos, neg), depth, cfg, small)
    w = build_weight_maps(depth, small.site_resolutions, wcfg, sites={0, 12})
    feats = route_features(small.control_encode(z, 0, pos, depth), {0, 12}, w)
    e_pos, e_neg = small.predict(z, 0, pos, feats), small.predict(z, 0, neg)
    assert np.array_equal(eps, e_neg + 7.5 * (e_pos - e_neg))


def test_single_step_sample(small, small_inputs):
    z, depth, pos, neg = small_inputs
    out = sample(LatentState(z, 0, 1), PromptPair(pos, neg), depth, GuidanceConfig(scale_s=1.0, lambda_t=1.0), small)
    pure = small.predict(z, 0, pos, small.control_encode(z, 0, pos, depth))
    assert np.array_equal(out, z - 1.0 * pure)


def test_sample_deterministic(small, small_inputs):
    _, depth, pos, neg = small_inputs
    cfg = GuidanceConfig(wcm=WcmConfig())
    runs = [sample(initial_latent(5, small.latent_shape, 8), PromptPair(pos, neg), depth, cfg, small) for _ in range(2)]
    assert runs[0].tobytes() == runs[1].tobytes()


def test_sample_matches_vanilla_oracle(small, small_inputs):
    z, depth, pos, neg = small_inputs
    cfg = GuidanceConfig(scale_s=5.0, lambda_t=1.0, use_negative_control=True, routing_mask=frozenset(range(13)))
    out = sample(LatentState(z, 0, 12), PromptPair(pos, neg), depth, cfg, small)
    assert np.array_equal(out, vanilla_controlnet_loop(z, 12, pos, neg, depth, 5.0, small))


@pytest.mark.parametrize("cfg", [GuidanceConfig(lambda_t=0.0, use_negative_control=True),
                                 GuidanceConfig(lambda_t=1.0, routing_mask=frozenset()),
                                 GuidanceConfig(lambda_t=0.7, routing_mask=frozenset(), wcm=WcmConfig())])
def test_degenerate_configs_are_plain_cfg(small, small_inputs, cfg):
    z, depth, pos, neg = small_inputs
    got, ref = [], []
    sample(LatentState(z, 0, 10), PromptPair(pos, neg), depth, cfg, small, callback=lambda i, x: got.append(x))
    plain_cfg_loop(z, 10, pos, neg, cfg.scale_s, small, trace=ref)
    assert all(np.array_equal(a, b) for a, b in zip(got, ref))


def test_output_shape_preserved(small, small_inputs):
    z, depth, pos, neg = small_inputs
    zz = np.concatenate([z, 2 * z])
    eps = snp_step(_state(zz), PromptPair(pos, neg), depth, GuidanceConfig(), small)
    assert eps.shape == zz.shape


class Exploding:
    def __init__(self, inner, at):
        self.inner, self.at = inner, at

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def predict(self, z, i, emb, control=None):
        out = self.inner.predict(z, i, emb, control)
        return out * np.inf if i == self.at else out


class Failing(Exploding):
    def predict(self, z, i, emb, control=None):
        if i == self.at:
            raise RuntimeError("device lost")
        return self.inner.predict(z, i, emb, control)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_aborts_with_step(small, small_inputs):
    z, depth, pos, neg = small_inputs
    with pytest.raises(NonFiniteLatentError) as info:
        sample(LatentState(z, 0, 6), PromptPair(pos, neg), depth, GuidanceConfig(), Exploding(small, 3))
    assert info.value.step_index == 3


def test_backend_failure_carries_step(small, small_inputs):
    z, depth, pos, neg = small_inputs
    with pytest.raises(BackendError, match="step 2"):
        sample(LatentState(z, 0, 6), PromptPair(pos, neg), depth, GuidanceConfig(), Failing(small, 2))


def test_type_contracts(small, small_inputs):
    z, depth, pos, neg = small_inputs
    with pytest.raises(ContractViolation):
        LatentState(z, 3, 3)
    with pytest.raises(ContractViolation):
        LatentState(z[0], 0, 3)
    with pytest.raises(ContractViolation):
        PromptPair(pos, neg[:-1])
    with pytest.raises(ContractViolation):
        GuidanceConfig(lambda_t=1.5)
    with pytest.raises(ContractViolation):
        snp_step(_state(z), PromptPair(pos, neg), depth[:8], GuidanceConfig(), small)
    with pytest.raises(ContractViolation):
        sample(LatentState(z, 1, 3), PromptPair(pos, neg), depth, GuidanceConfig(), small)
