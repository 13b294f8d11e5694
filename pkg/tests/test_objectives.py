import math

import numpy as np
import pytest
import torch

from scob.objectives import (
    BatchMemberLoss,
    LossConfig,
    ProjectionSet,
    gradcheck,
    supcon_loss,
    token_loss,
    total_loss,
)
from scob.model import Projector
from scob.rng import stream


def supcon_reference(z: np.ndarray, labels: np.ndarray, tau: float) -> float:
    """Naive loop transcription of the contrastive definition; the oracle the
    vectorized implementation is checked against."""
    n = len(labels)
    sim = z @ z.T
    total = 0.0
    for j in range(n):
        positives = [p for p in range(n) if p != j and labels[p] == labels[j]]
        if not positives:
            continue
        denom = 0.0
        for a in range(n):
            if a != j:
                denom += math.exp(sim[j, a] / tau)
        inner = 0.0
        for p in positives:
            inner += math.log(math.exp(sim[j, p] / tau) / denom)
        total += -inner / len(positives)
    return total


def random_projection_set(rng, n, classes, dim=8, dtype=torch.float64) -> ProjectionSet:
    z = torch.tensor(rng.normal(size=(n, dim)), dtype=dtype)
    z = torch.nn.functional.normalize(z, dim=-1)
    labels = torch.tensor(rng.integers(0, classes, size=n), dtype=torch.int64)
    return ProjectionSet(z, labels)


class TestTokenLoss:
    def test_uniform_logits(self):
        logits = torch.zeros(3, 10)
        targets = torch.tensor([1, 5, 9])
        w = torch.ones(3)
        expected = 3 * math.log(10)
        assert float(token_loss(logits, targets, w)) == pytest.approx(expected, abs=1e-6)

    def test_fully_masked_is_zero(self):
        logits = torch.randn(4, 7)
        targets = torch.tensor([0, 1, 2, 3])
        assert float(token_loss(logits, targets, torch.zeros(4))) == 0.0

    def test_near_one_hot(self):
        # logits put 10 on the target and 0 elsewhere
        targets = torch.tensor([2, 0])
        logits = torch.zeros(2, 4, dtype=torch.float64)
        logits[0, 2] = 10.0
        logits[1, 0] = 10.0
        expected = 2 * (math.log(math.exp(10) + 3) - 10)
        got = float(token_loss(logits, targets, torch.ones(2, dtype=torch.float64)))
        assert got == pytest.approx(expected, rel=1e-9)

    def test_weights_of_one_bitwise_equals_unweighted(self):
        rng = stream(31)
        for _ in range(100):
            n = int(rng.integers(1, 12))
            v = int(rng.integers(2, 30))
            logits = torch.tensor(rng.normal(size=(n, v)), dtype=torch.float32)
            targets = torch.tensor(rng.integers(0, v, size=n), dtype=torch.int64)
            weighted = token_loss(logits, targets, torch.ones(n, dtype=torch.float32))
            plain = token_loss(logits, targets)
            assert float(weighted) == float(plain)  # bitwise

    def test_stable_for_extreme_logits(self):
        logits = torch.tensor([[1000.0, -1000.0], [-1000.0, 1000.0]])
        out = token_loss(logits, torch.tensor([1, 0]), torch.ones(2))
        assert torch.isfinite(out)

    def test_bad_target_rejected(self):
        with pytest.raises(ValueError):
            token_loss(torch.zeros(1, 3), torch.tensor([3]), torch.ones(1))


class TestSupconLoss:
    def test_all_labels_distinct_gives_zero(self):
        rng = stream(1)
        proj = random_projection_set(rng, 6, classes=1000)
        proj.labels = torch.arange(6)
        assert float(supcon_loss(proj, tau=0.07)) == 0.0

    def test_hand_computed_three_vectors(self):
        z = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        labels = torch.tensor([0, 0, 1])
        expected = 2 * math.log(1 + math.exp(-1))  # anchors 1 and 2; anchor 3 skipped
        got = float(supcon_loss(ProjectionSet(z, labels), tau=1.0))
        assert got == pytest.approx(expected, abs=1e-9)

    def test_permutation_invariance(self):
        rng = stream(2)
        for _ in range(20):
            proj = random_projection_set(rng, 12, classes=3)
            perm = torch.tensor(rng.permutation(12))
            shuffled = ProjectionSet(proj.z[perm], proj.labels[perm])
            a = float(supcon_loss(proj, tau=0.07))
            b = float(supcon_loss(shuffled, tau=0.07))
            assert a == pytest.approx(b, abs=1e-10)

    def test_rotation_invariance(self):
        rng = stream(3)
        for _ in range(10):
            proj = random_projection_set(rng, 10, classes=3, dim=6)
            q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
            rotated = ProjectionSet(proj.z @ torch.tensor(q, dtype=torch.float64), proj.labels)
            a = float(supcon_loss(proj, tau=0.07))
            b = float(supcon_loss(rotated, tau=0.07))
            assert a == pytest.approx(b, abs=1e-10)

    def test_matches_reference_loops(self):
        rng = stream(4)
        for _ in range(30):
            n = int(rng.integers(2, 24))
            proj = random_projection_set(rng, n, classes=int(rng.integers(1, 6)))
            fast = float(supcon_loss(proj, tau=0.07))
            slow = supcon_reference(proj.z.numpy(), proj.labels.numpy(), tau=0.07)
            assert fast == pytest.approx(slow, abs=1e-10)

    def test_tighter_positive_pair_lowers_loss(self):
        # anchor pair at angle theta; third vector fixed far away
        def loss_at(theta):
            z = torch.tensor(
                [
                    [1.0, 0.0],
                    [math.cos(theta), math.sin(theta)],
                    [-1.0, 0.0],
                ],
                dtype=torch.float64,
            )
            return float(supcon_loss(ProjectionSet(z, torch.tensor([0, 0, 1])), tau=0.5))

        losses = [loss_at(t) for t in (1.2, 0.8, 0.4, 0.1)]
        assert losses == sorted(losses, reverse=True)

    def test_single_projection_warns_and_returns_zero(self):
        proj = ProjectionSet(torch.ones(1, 4), torch.tensor([0]))
        with pytest.warns(UserWarning):
            out = supcon_loss(proj, tau=0.07)
        assert float(out) == 0.0


class TestTotalLoss:
    def _members(self, rng, count, with_proj=True):
        members = []
        for _ in range(count):
            n = int(rng.integers(2, 10))
            v = 12
            logits = torch.tensor(rng.normal(size=(n, v)), dtype=torch.float64)
            targets = torch.tensor(rng.integers(0, v, size=n), dtype=torch.int64)
            weights = torch.tensor(rng.integers(0, 2, size=n), dtype=torch.float64)
            proj = random_projection_set(rng, int(rng.integers(2, 8)), classes=3) if with_proj else None
            members.append(BatchMemberLoss(logits, targets, weights, proj))
        return members

    def test_lambda_zero_equals_mean_token(self):
        rng = stream(5)
        members = self._members(rng, 4)
        out = total_loss(members, LossConfig(lam=0.0))
        expected = sum(
            float(token_loss(m.logits, m.target_ids, m.weights)) for m in members
        ) / len(members)
        assert float(out.total) == pytest.approx(expected, abs=1e-12)
        assert float(out.supcon) == 0.0

    def test_single_member_all_masked_equals_supcon(self):
        rng = stream(6)
        members = self._members(rng, 1)
        members[0].weights = torch.zeros_like(members[0].weights)
        out = total_loss(members, LossConfig(lam=1.0, tau=0.07))
        expected = float(supcon_loss(members[0].projections, tau=0.07))
        assert float(out.total) == pytest.approx(expected, abs=1e-12)

    def test_recomposition(self):
        rng = stream(7)
        members = self._members(rng, 4)
        cfg = LossConfig(lam=0.5, tau=0.07)
        out = total_loss(members, cfg)
        token_term = sum(
            float(token_loss(m.logits, m.target_ids, m.weights)) for m in members
        ) / len(members)
        pooled = ProjectionSet.cat([m.projections for m in members])
        supcon_term = float(supcon_loss(pooled, tau=0.07))
        assert float(out.total) == pytest.approx(token_term + 0.5 * supcon_term, abs=1e-12)


class TestGradcheck:
    def test_token_loss_gradient(self):
        rng = stream(8)
        for _ in range(5):
            logits = torch.tensor(rng.normal(size=(4, 7)), dtype=torch.float64)
            targets = torch.tensor(rng.integers(0, 7, size=4), dtype=torch.int64)
            weights = torch.tensor(rng.integers(0, 2, size=4), dtype=torch.float64)
            err = gradcheck(lambda lg: token_loss(lg, targets, weights), [logits])
            assert err < 1e-6

    def test_supcon_through_projector_normalization(self):
        rng = stream(9)
        torch.manual_seed(0)
        projector = Projector(6, 8, 8).double()
        labels = torch.tensor(rng.integers(0, 3, size=6), dtype=torch.int64)

        def fn(h):
            z = torch.nn.functional.normalize(projector(h), dim=-1)
            return supcon_loss(ProjectionSet(z, labels), tau=0.07)

        h = torch.tensor(rng.normal(size=(6, 6)), dtype=torch.float64)
        assert gradcheck(fn, [h]) < 1e-5

    def test_constant_function(self):
        x = torch.zeros(3, dtype=torch.float64)
        assert gradcheck(lambda t: (t * 0.0).sum(), [x]) == 0.0
