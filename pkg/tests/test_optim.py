import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from reve.optim import (
    NonFiniteGradient,
    OptimConfig,
    ScheduleConfig,
    StableAdamW,
    build_optimizer,
    param_groups,
    scale_lr,
    wsd_lr,
)
from reve.pretrain import REVE
from reve.model import named_config


def twin_params(seed, shapes=((7, 5), (5,), (3, 2, 4))):
    g = torch.Generator().manual_seed(seed)
    a = [torch.nn.Parameter(torch.randn(s, generator=g)) for s in shapes]
    b = [torch.nn.Parameter(p.detach().clone()) for p in a]
    return a, b


def run_pair(seed, steps, lr, wd, clip=1e9, grad_scale=1.0):
    a, b = twin_params(seed)
    ours = StableAdamW(a, lr=lr, weight_decay=wd, clip_threshold=clip)
    ref = torch.optim.AdamW(b, lr=lr, betas=(0.9, 0.95), eps=1e-9, weight_decay=wd, foreach=False, fused=False)
    g = torch.Generator().manual_seed(seed + 1)
    for _ in range(steps):
        for pa, pb in zip(a, b):
            grad = torch.randn(pa.shape, generator=g) * grad_scale
            pa.grad, pb.grad = grad.clone(), grad.clone()
        ours.step()
        ref.step()
    return a, b, ours


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.integers(1, 12), st.sampled_from([1e-4, 1e-3, 3e-2]), st.sampled_from([0.0, 0.01, 0.1]))
def test_bitwise_adamw_when_clip_inactive(seed, steps, lr, wd):
    a, b, _ = run_pair(seed, steps, lr, wd)
    for pa, pb in zip(a, b):
        assert torch.equal(pa, pb)


def test_default_threshold_inactive_matches_adamw():
    # first-step update is sign(g) up to eps, so RMS <= 1 and clip is inactive
    a, b, opt = run_pair(3, 1, 1e-3, 0.01, clip=1.0)
    assert all(torch.equal(pa, pb) for pa, pb in zip(a, b))
    assert all(s["last_rms"] <= 1.0 for s in opt.state.values())


def test_rms_four_quarters_the_rate():
    p = torch.nn.Parameter(torch.zeros(10, dtype=torch.float64))
    opt = StableAdamW([p], lr=0.01, weight_decay=0.0, clip_threshold=1.0)
    bc1, bc2 = 1 - 0.9**2, 1 - 0.95**2
    # choose step-1 moments so that with g = 0 the step-2 update is exactly 4 (up to eps)
    opt.state[p] = {
        "step": torch.tensor(1.0),
        "exp_avg": torch.full_like(p, 4 * bc1 / 0.9),
        "exp_avg_sq": torch.full_like(p, bc2 / 0.95),
    }
    p.grad = torch.zeros_like(p)
    opt.step()
    st_ = opt.state[p]
    assert st_["last_rms"] == pytest.approx(4.0, rel=1e-8)
    assert st_["last_lr"] == pytest.approx(0.01 / 4, rel=1e-8)
    torch.testing.assert_close(p.detach(), torch.full_like(p, -0.01), rtol=1e-8, atol=0)


def test_zero_gradient_no_decay_is_noop():
    p = torch.nn.Parameter(torch.randn(4, 4))
    before = p.detach().clone()
    opt = StableAdamW([p], lr=1.0, weight_decay=0.0)
    for _ in range(3):
        p.grad = torch.zeros_like(p)
        opt.step()
    assert torch.equal(p, before)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_effective_rate_never_exceeds_nominal(seed, clip):
    _, _, opt = run_pair(seed, 4, 1e-3, 0.01, clip=clip, grad_scale=10.0)
    for s in opt.state.values():
        assert 0 < s["last_lr"] <= 1e-3
        assert s["last_lr"] == pytest.approx(1e-3 / max(1.0, s["last_rms"] / clip), rel=1e-12)


def test_non_finite_gradient_aborts():
    p = torch.nn.Parameter(torch.ones(3))
    p.grad = torch.tensor([0.0, float("inf"), 1.0])
    with pytest.raises(NonFiniteGradient):
        StableAdamW([p]).step()


def test_config_validation():
    for bad in (dict(beta1=1.0), dict(beta2=0.0), dict(eps=0.0), dict(clip_threshold=0.0)):
        with pytest.raises(ValueError):
            OptimConfig(**bad)


def test_decay_groups_exclude_gains_biases_and_mask_token():
    m = REVE(named_config("tiny"))
    decay, no_decay = param_groups(m, 0.01)
    names = {id(p): n for n, p in m.named_parameters()}
    assert decay["weight_decay"] == 0.01 and no_decay["weight_decay"] == 0.0
    no_decay_names = {names[id(p)] for p in no_decay["params"]}
    assert "mask_token" in no_decay_names
    assert all(names[id(p)].endswith(("weight",)) for p in decay["params"])
    assert not any("norm" in names[id(p)] for p in decay["params"])
    opt = build_optimizer(m, OptimConfig())
    assert sum(len(g["params"]) for g in opt.param_groups) == len(list(m.parameters()))


# -- schedule --------------------------------------------------------------------------


def test_wsd_endpoints_exact():
    s = ScheduleConfig(steps_per_epoch=1000)
    peak = 2.4e-4
    assert wsd_lr(0, s, peak) == 0.0
    assert wsd_lr(100, s, peak) == peak
    assert wsd_lr(500, s, peak) == peak
    assert wsd_lr(900, s, peak) == peak
    final = wsd_lr(1000, s, peak)
    assert abs(final - 0.01 * peak) <= math.ulp(0.01 * peak)
    assert s.phases() == (100, 800, 100)


@given(st.integers(2, 5000), st.floats(1e-6, 1.0))
def test_warmup_end_is_exactly_peak(spe, peak):
    s = ScheduleConfig(steps_per_epoch=spe)
    assert wsd_lr(s.phases()[0], s, peak) == peak
    final = wsd_lr(spe, s, peak)
    assert abs(final - 0.01 * peak) <= math.ulp(0.01 * peak)


def test_wsd_decay_is_linear():
    s = ScheduleConfig(steps_per_epoch=200)
    lrs = np.array([wsd_lr(k, s, 1.0) for k in range(180, 201)])
    assert np.allclose(np.diff(lrs), -0.99 / 20, atol=1e-14)


def test_wsd_out_of_range():
    s = ScheduleConfig(steps_per_epoch=10)
    for k in (-1, 11):
        with pytest.raises(ValueError):
            wsd_lr(k, s, 1.0)


@pytest.mark.parametrize("bad", [dict(warmup_frac=0.0), dict(stable_frac=1.5), dict(warmup_frac=0.3, stable_frac=0.8), dict(steps_per_epoch=0)])
def test_schedule_validation(bad):
    with pytest.raises(ValueError):
        ScheduleConfig(**bad)


@settings(max_examples=60)
@given(st.integers(1, 400), st.integers(1, 4), st.booleans(), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
def test_wsd_continuous_and_non_negative(spe, epochs, cyclic, wf, sf):
    if (spe if cyclic else spe * epochs) < 2:
        with pytest.raises(ValueError):
            ScheduleConfig(steps_per_epoch=spe, n_epochs=epochs, cyclic=cyclic)
        return
    s = ScheduleConfig(steps_per_epoch=spe, n_epochs=epochs, warmup_frac=wf, stable_frac=sf, cyclic=cyclic)
    warm, stable, decay = s.phases()
    horizon = spe if cyclic else s.total_steps
    assert warm + stable + decay == horizon and min(warm, decay) >= 1 and stable >= 0
    lrs = np.array([wsd_lr(k, s, 1.0) for k in range(s.total_steps + 1)])
    assert (lrs >= 0).all() and (lrs <= 1.0).all()
    jump = np.abs(np.diff(lrs))
    if cyclic:
        # only epoch restarts may jump back up to peak
        restarts = {e * spe for e in range(1, epochs)}
        jump = np.array([j for k, j in enumerate(jump) if k not in restarts])
    bound = 1.0 / min(warm, decay) + 1e-12
    assert jump.size == 0 or jump.max() <= bound
    assert lrs[-1] == pytest.approx(0.01, abs=1e-15)


def test_cyclic_repeats_stable_and_decay():
    s = ScheduleConfig(steps_per_epoch=100, n_epochs=3, cyclic=True)
    lrs = [wsd_lr(k, s, 1.0) for k in range(301)]
    for e in (1, 2, 3):
        assert lrs[e * 100] == pytest.approx(0.01)
    assert lrs[101] == 1.0 and lrs[201] == 1.0
    assert lrs[150] == 1.0 and lrs[250] == 1.0
    assert lrs[1:11] == pytest.approx([k / 10 for k in range(1, 11)])


# -- width scaling ---------------------------------------------------------------------


def test_scale_lr_values():
    assert scale_lr(512) == 2.4e-4
    assert scale_lr(1250) == pytest.approx(1.075e-4, rel=2e-3)
    assert scale_lr(256) == pytest.approx(4.48e-4, rel=2e-3)
    # independent evaluation of the power law
    assert scale_lr(1250) == pytest.approx(2.4e-4 * math.exp(-0.9 * math.log(1250 / 512)), rel=1e-14)
    with pytest.raises(ValueError):
        scale_lr(0)


@given(st.integers(1, 100_000), st.integers(1, 100_000))
def test_scale_lr_monotone(a, b):
    if a < b:
        assert scale_lr(a) > scale_lr(b)
