import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvseg.core import Tensor, default_dtype, grad_check
from mvseg.errors import ConfigError, ContractError, NumericError, ShapeError
from mvseg.losses import (
    ContrastiveConfig,
    contrastive_loss,
    contrastive_terms,
    dice_loss,
    info_nce,
    total_loss,
)

ORTHO_TAU1 = 0.31326168751822286  # -log(e / (e + 1))


def info_nce_loop(v, u, tau):
    """Row-by-row evaluation in plain Python floats."""
    total = 0.0
    for i in range(len(v)):
        sims = [np.dot(v[i], u[k]) / (np.linalg.norm(v[i]) * np.linalg.norm(u[k])) / tau for k in range(len(u))]
        total += -sims[i] + math.log(sum(math.exp(s) for s in sims))
    return total / len(v)


class TestDice:
    def test_perfect_overlap(self):
        g = np.zeros((1, 1, 4, 4), np.float32)
        g[..., :2, :] = 1
        assert dice_loss(Tensor(g), g).item() < 1e-6

    def test_disjoint(self):
        g = np.zeros((1, 1, 4, 4), np.float32)
        g[..., :2, :] = 1
        assert dice_loss(Tensor(1 - g), g, eps=0.0).item() == pytest.approx(1.0)

    def test_uniform_half_on_four_ones(self):
        # sum(p g) = 2, sum p = 8, sum g = 4
        g = np.zeros((4, 4), np.float32)
        g[0] = 1
        assert dice_loss(Tensor(np.full((4, 4), 0.5, np.float32)), g).item() == pytest.approx(2 / 3, abs=1e-6)

    def test_uniform_half_on_half_ones(self):
        g = np.zeros((4, 4), np.float32)
        g[:2] = 1
        assert dice_loss(Tensor(np.full((4, 4), 0.5, np.float32)), g).item() == pytest.approx(0.5, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))

    def test_range_and_monotone(self):
        rng = np.random.default_rng(0)
        g = (rng.random((8, 8)) > 0.5).astype(np.float32)
        p = rng.random((8, 8)).astype(np.float32)
        base = dice_loss(Tensor(p), g).item()
        assert 0.0 <= base <= 1.0
        # move mass from background to foreground at fixed total mass
        fg, bg = np.flatnonzero(g.ravel()), np.flatnonzero(g.ravel() == 0)
        q = p.ravel().copy()
        delta = 0.5 * min(q[bg[0]], 1 - q[fg[0]])
        q[bg[0]] -= delta
        q[fg[0]] += delta
        assert dice_loss(Tensor(q.reshape(8, 8)), g).item() < base


class TestInfoNCE:
    def test_single_pair_is_zero(self):
        v = np.array([[0.3, -1.2, 2.0]])
        assert info_nce(v, v * 4.0).item() == 0.0

    @pytest.mark.parametrize("n", [2, 4, 8])
    def test_identical_embeddings(self, n):
        e = np.tile(np.array([[0.2, 0.5, -0.1, 0.7]], np.float32), (n, 1))
        assert info_nce(e, e, 0.07).item() == pytest.approx(math.log(n), abs=1e-6)

    def test_orthogonal_pair(self):
        e = np.eye(2)
        assert info_nce(e, e, 1.0).item() == pytest.approx(ORTHO_TAU1, abs=1e-6)

    def test_matches_loop(self):
        rng = np.random.default_rng(3)
        v, u = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
        with default_dtype(np.float64):
            got = info_nce(v, u, 0.1).item()
        assert got == pytest.approx(info_nce_loop(v, u, 0.1), rel=1e-10)

    def test_zero_norm(self):
        v = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(NumericError):
            info_nce(v, np.eye(2))

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(ConfigError):
            info_nce(np.eye(2), np.eye(2), tau)

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 2**31),
        n=st.integers(1, 6),
        scale=st.floats(0.01, 100.0),
    )
    def test_scale_and_permutation_invariance(self, seed, n, scale):
        rng = np.random.default_rng(seed)
        v, u = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
        with default_dtype(np.float64):
            base = info_nce(v, u, 0.5).item()
            perm = rng.permutation(n)
            assert base >= 0.0
            assert info_nce(v * scale, u * scale, 0.5).item() == pytest.approx(base, rel=1e-9, abs=1e-12)
            assert info_nce(v[perm], u[perm], 0.5).item() == pytest.approx(base, rel=1e-9, abs=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        v = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        u = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        assert grad_check(lambda: info_nce(v, u, 0.3), [v, u]) < 1e-2


def _views(e):
    return {"axial": e, "sagittal": e, "coronal": e}


class TestContrastive:
    def test_identical_everything(self):
        e = np.ones((4, 3), np.float32)
        assert contrastive_loss(_views(e)).item() == pytest.approx(4 * math.log(4), abs=1e-5)

    def test_single_patient(self):
        assert contrastive_loss(_views(np.array([[1.0, 2.0]]))).item() == 0.0

    def test_orthogonal_shared(self):
        assert contrastive_loss(_views(np.eye(2)), 1.0).item() == pytest.approx(4 * ORTHO_TAU1, abs=1e-6)

    def test_sum_of_four_terms(self):
        rng = np.random.default_rng(5)
        emb = {k: rng.normal(size=(6, 8)) for k in ("axial", "sagittal", "coronal")}
        with default_dtype(np.float64):
            terms = contrastive_terms(emb, 0.07)
            assert set(terms) == {("axial", "sagittal"), ("axial", "coronal"), ("sagittal", "axial"), ("coronal", "axial")}
            total = contrastive_loss(emb, 0.07).item()
        assert total == pytest.approx(sum(t.item() for t in terms.values()), abs=1e-7)

    def test_no_sagittal_coronal_term(self):
        # changing only how sagittal relates to coronal cannot matter
        rng = np.random.default_rng(6)
        ax = rng.normal(size=(3, 4))
        sag = rng.normal(size=(3, 4))
        cor = rng.normal(size=(3, 4))
        with default_dtype(np.float64):
            terms = contrastive_terms({"axial": ax, "sagittal": sag, "coronal": cor})
        assert ("sagittal", "coronal") not in terms and ("coronal", "sagittal") not in terms

    def test_missing_view(self):
        e = np.eye(3)
        with pytest.raises(ContractError):
            contrastive_loss({"axial": e, "sagittal": e})

    def test_partial_two_view(self):
        rng = np.random.default_rng(7)
        ax, sag = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        with default_dtype(np.float64):
            got = contrastive_loss({"axial": ax, "sagittal": sag}, 0.2, allow_partial=True).item()
            want = info_nce(ax, sag, 0.2).item() + info_nce(sag, ax, 0.2).item()
        assert got == pytest.approx(want, abs=1e-12)

    def test_misaligned_rows(self):
        with pytest.raises(ShapeError):
            contrastive_loss({"axial": np.eye(3), "sagittal": np.eye(2), "coronal": np.eye(3)})

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        emb = {k: Tensor(rng.normal(size=(3, 4)), requires_grad=True) for k in ("axial", "sagittal", "coronal")}
        assert grad_check(lambda: contrastive_loss(emb, 0.5), list(emb.values())) < 1e-2


class TestTotal:
    def test_alpha_one_is_dice(self):
        assert total_loss(Tensor(0.4), Tensor(2.0), 1.0).item() == pytest.approx(0.4)
        assert total_loss(Tensor(0.4), None, 1.0).item() == pytest.approx(0.4)

    def test_alpha_zero_is_contrastive(self):
        assert total_loss(Tensor(0.4), Tensor(2.0), 0.0).item() == pytest.approx(2.0)

    def test_mixture(self):
        assert total_loss(Tensor(0.4), Tensor(2.0), 0.25).item() == pytest.approx(1.6, abs=1e-6)

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_bad_alpha(self, alpha):
        with pytest.raises(ConfigError):
            total_loss(Tensor(0.4), Tensor(2.0), alpha)

    def test_missing_contrastive_term(self):
        with pytest.raises(ContractError):
            total_loss(Tensor(0.4), None, 0.5)

    @pytest.mark.parametrize("kw", [{"temperature": 0.0}, {"alpha": 1.2}, {"dice_eps": -1.0}])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            ContrastiveConfig(**kw)
