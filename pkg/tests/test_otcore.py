import math

import numpy as np
import pytest
import torch

from clotvc import otcore
from clotvc.otcore import SinkhornConfig, chunk_embedding, cosine_cost, disc_ot_loss, ot_distance, sinkhorn_plan

import checks
from oracles import exact_ot


def unit(deg):
    r = math.radians(deg)
    return [math.cos(r), math.sin(r)]


def test_chunking_examples():
    chunks = chunk_embedding(torch.arange(1.0, 9.0))
    assert chunks.tolist() == [[1, 2], [3, 4], [5, 6], [7, 8]]
    e = torch.randn(40)
    assert torch.equal(chunk_embedding(e).reshape(-1), e)
    with pytest.raises(ValueError):
        chunk_embedding(torch.arange(10.0))


def test_cosine_cost_examples():
    a = torch.tensor([[1.0, 2.0], [1.0, 0.0], [3.0, -1.0]], dtype=torch.float64)
    b = torch.tensor([[1.0, 2.0], [0.0, 5.0], [-3.0, 1.0]], dtype=torch.float64)
    C = cosine_cost(a, b)
    assert C[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert C[1, 1] == pytest.approx(1.0, abs=1e-12)
    assert C[2, 2] == pytest.approx(2.0, abs=1e-12)
    assert torch.allclose(cosine_cost(b, a), C.T)
    assert C.min() >= 0 and C.max() <= 2
    with pytest.raises(ValueError):
        cosine_cost(torch.ones(4, 3), torch.ones(4, 2))


def test_cosine_cost_survives_zero_vector():
    C = cosine_cost(torch.zeros(4, 3), torch.randn(4, 3))
    assert torch.all(torch.isfinite(C))


def test_plan_constant_cost_is_uniform():
    plan = sinkhorn_plan(np.full((4, 4), 0.7))
    np.testing.assert_allclose(plan.M, 1 / 16, atol=1e-12)
    assert plan.converged


def test_plan_two_by_two_identity():
    plan = sinkhorn_plan(np.array([[0.0, 1.0], [1.0, 0.0]]), SinkhornConfig(reg=0.01))
    np.testing.assert_allclose(plan.M, [[0.5, 0.0], [0.0, 0.5]], atol=1e-3)


def test_plan_random_within_two_percent_of_exact():
    rng = np.random.default_rng(0)
    for _ in range(50):
        C = rng.uniform(0, 2, (4, 4))
        v = np.sum(sinkhorn_plan(C, SinkhornConfig(reg=0.01)).M * C)
        ex = exact_ot(C)
        assert abs(v - ex) <= max(0.02 * ex, 1e-4)


def test_plan_is_deterministic_and_feasible():
    C = np.random.default_rng(1).uniform(0, 2, (4, 4))
    a, b = sinkhorn_plan(C), sinkhorn_plan(C)
    assert np.array_equal(a.M, b.M)
    assert np.all(a.M >= 0)
    np.testing.assert_allclose(a.M.sum(0), 0.25, atol=1e-6)
    np.testing.assert_allclose(a.M.sum(1), 0.25, atol=1e-6)


def test_plan_rejects_non_finite_cost():
    with pytest.raises(ValueError):
        sinkhorn_plan(np.array([[0.0, np.nan], [1.0, 0.0]]))


def test_transport_cost_non_increasing_as_reg_shrinks():
    rng = np.random.default_rng(2)
    regs = [1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01]
    for _ in range(30):
        C = rng.uniform(0, 2, (4, 4))
        vals = [np.sum(sinkhorn_plan(C, SinkhornConfig(reg=r)).M * C) for r in regs]
        assert all(b <= a + 1e-6 for a, b in zip(vals, vals[1:]))


def test_config_validation():
    for bad in (dict(reg=0), dict(max_iters=0), dict(relaxation=2.5), dict(grad_mode="x")):
        with pytest.raises(ValueError):
            SinkhornConfig(**bad)


def test_ot_distance_examples():
    cfg = SinkhornConfig(reg=0.01)
    eye = torch.eye(4, dtype=torch.float64)
    assert abs(float(ot_distance(eye, eye, cfg))) <= 1e-2
    u = torch.randn(1, 6, dtype=torch.float64)
    assert float(ot_distance(u.repeat(4, 1), -u.repeat(4, 1))) == pytest.approx(2.0, abs=1e-9)
    A, B = torch.randn(4, 6, dtype=torch.float64), torch.randn(4, 6, dtype=torch.float64)
    assert float(ot_distance(A, B)) == pytest.approx(float(ot_distance(B, A)), abs=1e-6)
    assert float(ot_distance(A, B)) >= -1e-6


def test_ot_distance_gradient_skips_plan():
    A = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
    B = torch.randn(4, 5, dtype=torch.float64)
    ot_distance(A, B).backward()
    M = torch.as_tensor(sinkhorn_plan(cosine_cost(A, B)).M)
    A2 = A.detach().clone().requires_grad_(True)
    torch.sum(M * cosine_cost(A2, B)).backward()
    assert torch.allclose(A.grad, A2.grad, atol=1e-12)


def test_stats_and_dump(tmp_path):
    stats = otcore.SinkhornStats()
    A, B = torch.randn(4, 5), torch.randn(4, 5)
    ot_distance(A, B, stats=stats, dump_path=tmp_path / "d.jsonl")
    assert stats.calls == 1 and stats.iterations >= 1
    assert len((tmp_path / "d.jsonl").read_text().splitlines()) == 1


def test_unrolled_mode_matches_fixed_value():
    A, B = torch.randn(4, 5, dtype=torch.float64), torch.randn(4, 5, dtype=torch.float64)
    fixed = float(ot_distance(A, B, SinkhornConfig(reg=0.1)))
    unrolled = float(ot_distance(A, B, SinkhornConfig(reg=0.1, grad_mode="unrolled")))
    assert unrolled == pytest.approx(fixed, abs=1e-5)


@pytest.mark.parametrize("form", otcore.LOSS_FORMS)
def test_identical_batches_cancel(form):
    X = torch.randn(4, 7, dtype=torch.float64)
    assert abs(float(disc_ot_loss(X, X, X, X, form=form))) <= 1e-6


@pytest.mark.parametrize("form", otcore.LOSS_FORMS)
def test_loss_scale_invariant(form):
    g = torch.Generator().manual_seed(3)
    X, X2, Y, Y2 = (torch.randn(4, 7, dtype=torch.float64, generator=g) for _ in range(4))
    base = float(disc_ot_loss(X, X2, Y, Y2, form=form))
    scaled = float(disc_ot_loss(3.7 * X, 3.7 * X2, 3.7 * Y, 3.7 * Y2, form=form))
    assert abs(base - scaled) < 1e-6


def toy_angle_batches():
    dt = torch.float64
    X = torch.tensor([unit(0), unit(90)], dtype=dt)
    X2 = torch.tensor([unit(90), unit(0)], dtype=dt)
    Y = torch.tensor([unit(45), unit(135)], dtype=dt)
    Y2 = torch.tensor([unit(135), unit(45)], dtype=dt)
    return X, X2, Y, Y2


def test_toy_angle_example_matches_exact_composition():
    X, X2, Y, Y2 = toy_angle_batches()
    W = lambda a, b: exact_ot(cosine_cost(a, b).numpy())  # noqa: E731
    hand = {
        "as_written": W(X, X2) + W(X, Y2) + W(X2, Y) + W(X2, Y2) - 2 * W(X, X2) - 2 * W(Y, Y2),
        "symmetric": W(X, Y) + W(X, Y2) + W(X2, Y) + W(X2, Y2) - 2 * W(X, X2) - 2 * W(Y, Y2),
    }
    # every real/generated pair is optimally matched at 45 degrees
    assert hand["as_written"] == pytest.approx(3 * (1 - math.sqrt(0.5)), abs=1e-12)
    cfg = SinkhornConfig(reg=0.01)
    for form, value in hand.items():
        assert float(disc_ot_loss(X, X2, Y, Y2, cfg, form)) == pytest.approx(value, abs=1e-4)


def test_unknown_form_rejected():
    X = torch.randn(4, 3)
    with pytest.raises(ValueError):
        disc_ot_loss(X, X, X, X, form="other")


@pytest.mark.parametrize("form", otcore.LOSS_FORMS)
def test_disc_loss_gradient_finite_differences(form):
    assert checks.disc_loss_fd_error(form, seed=5) <= 1e-3
