import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from forgeloc.backbone import BranchFeatureSet
from forgeloc.heads import (
    ClassProbPyramid,
    LocalizationHead,
    MaskPyramid,
    ProgressiveHeads,
    StageClassifier,
    condition_features,
    condition_logits,
)
from forgeloc.hierarchy import DEFAULT_HIERARCHY

from oracles import (
    attention_pairwise,
    condition_features_scalar,
    condition_logits_scalar,
    finite_difference_check,
    softmax_scalar,
)

torch.manual_seed(0)
H = DEFAULT_HIERARCHY


def _branches(batch=2, size=16, channels=4, dtype=torch.float32):
    return BranchFeatureSet(*[
        torch.randn(batch, channels * 2 ** b, size // 2 ** b, size // 2 ** b, dtype=dtype)
        for b in range(4)
    ])


class TestLocalize:
    def test_pixel_probabilities_sum_to_one(self):
        head = LocalizationHead(4)
        mask = head(torch.randn(2, 4, 8, 8))
        assert (mask.sum(dim=1) - 1).abs().max() < 1e-6

    def test_resolution_preserved(self):
        head = LocalizationHead(4)
        assert head(torch.randn(1, 4, 12, 12)).shape == (1, 2, 12, 12)

    def test_attention_subblock_matches_oracle(self):
        head = LocalizationHead(2).double()
        x = torch.rand(1, 2, 4, 4, dtype=torch.float64)
        with torch.no_grad():
            q = head.attention.query(x).reshape(1, -1, 16)[0].T.numpy()
            k = head.attention.key(x).reshape(1, -1, 16)[0].T.numpy()
            v = head.attention.value(x).reshape(1, -1, 16)[0].T.numpy()
            got = head.attention(x).reshape(-1, 16).T.numpy()
        assert np.abs(got - attention_pairwise(q, k, v)).max() < 1e-6


class TestConditionFeatures:
    def test_zero_prior_is_identity_scaling(self):
        head = LocalizationHead(4).double()
        feat = torch.rand(1, 4, 8, 8, dtype=torch.float64)
        prior = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
        prior[:, 0] = 1.0  # all-real prior: forged channel 0
        out = head(condition_features(prior, feat))
        assert torch.allclose(out, head(feat), atol=1e-12)

    def test_full_prior_scales_by_1_5(self):
        feat = torch.rand(1, 4, 8, 8, dtype=torch.float64)
        prior = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
        prior[:, 1] = 1.0
        out = condition_features(prior, feat)
        assert torch.allclose(out, 1.5 * feat, atol=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            prior_np = rng.random((2, 4, 4))
            prior_np = prior_np / prior_np.sum(axis=0, keepdims=True)
            feat_np = rng.random((2, 8, 8))
            prior = torch.from_numpy(prior_np)[None]
            feat = torch.from_numpy(feat_np)[None]
            got = condition_features(prior, feat)[0].numpy()
            expected = condition_features_scalar(prior_np, feat_np)
            assert np.abs(got - expected).max() < 1e-9

    def test_finer_prior_rejected(self):
        feat = torch.rand(1, 4, 4, 4)
        prior = torch.rand(1, 2, 8, 8)
        with pytest.raises(ValueError):
            condition_features(prior, feat)

    def test_gradient(self):
        head = LocalizationHead(2).double()
        feat = torch.rand(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        prior = torch.softmax(torch.randn(1, 2, 2, 2, dtype=torch.float64), dim=1)
        prior.requires_grad_(True)
        probe = torch.randn(1, 2, 4, 4, dtype=torch.float64)

        def f():
            return (head(condition_features(prior, feat)) * probe).sum()

        finite_difference_check(f, [feat, prior] + list(head.parameters()), rel_tol=1e-4)


class TestClassify:
    def test_zero_init_gives_uniform(self):
        clf = StageClassifier(4, 5)
        torch.nn.init.zeros_(clf.linear.weight)
        torch.nn.init.zeros_(clf.linear.bias)
        _, probs = clf(torch.randn(3, 4, 6, 6))
        assert torch.allclose(probs, torch.full((3, 5), 0.2), atol=1e-7)

    def test_probs_sum_to_one(self):
        clf = StageClassifier(4, 8)
        _, probs = clf(torch.randn(3, 4, 6, 6))
        assert torch.allclose(probs.sum(dim=-1), torch.ones(3), atol=1e-6)

    def test_gradient(self):
        clf = StageClassifier(3, 4).double()
        x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        probe = torch.randn(2, 4, dtype=torch.float64)

        def f():
            logits, _ = clf(x)
            return (logits * probe).sum()

        finite_difference_check(f, list(clf.parameters()), rel_tol=1e-4)


class TestConditionLogits:
    def test_uniform_prior_zero_logits_uniform(self):
        logits = torch.zeros(1, 3)
        prev = torch.full((1, 2), 0.5)
        exp = torch.tensor(H.expansions[0], dtype=torch.float64)
        probs = condition_logits(logits.double(), prev.double(), exp)
        assert torch.allclose(probs, torch.full((1, 3), 1 / 3, dtype=torch.float64), atol=1e-9)

    def test_arithmetic_example(self):
        # two fine classes with distinct parents; prior (1,0) doubles the first logit
        logits = torch.tensor([[1.0, 2.0]])
        prev = torch.tensor([[1.0, 0.0]])
        expansion = torch.eye(2)
        probs = condition_logits(logits, prev, expansion)
        assert torch.allclose(probs, torch.tensor([[0.5, 0.5]]), atol=1e-7)

    def test_matches_scalar_oracle_all_stages(self):
        rng = np.random.default_rng(11)
        for t in range(3):
            parents = H.parents[t]
            k_next, k_prev = len(parents), len(H.stage_names[t])
            exp = torch.tensor(H.expansions[t], dtype=torch.float64)
            for _ in range(35):
                logits = rng.standard_normal((1, k_next))
                prev = softmax_scalar(rng.standard_normal(k_prev))
                got = condition_logits(torch.from_numpy(logits),
                                       torch.from_numpy(prev[None]), exp)[0].numpy()
                expected = condition_logits_scalar(logits[0], prev, parents)
                assert np.abs(got - expected).max() < 1e-9

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            condition_logits(torch.zeros(1, 4), torch.zeros(1, 2),
                             torch.tensor(H.expansions[0], dtype=torch.float64))

    @given(seed=st.integers(0, 500))
    @settings(max_examples=40, deadline=None)
    def test_one_hot_parent_mass_monotone_for_positive_logits(self, seed):
        # positive distinct logits: conditioning on a one-hot parent strictly
        # increases the children's post-softmax mass
        rng = np.random.default_rng(seed)
        t = rng.integers(0, 3)
        parents = H.parents[t]
        k_next, k_prev = len(parents), len(H.stage_names[t])
        logits = rng.uniform(0.1, 3.0, size=k_next)
        logits += rng.permutation(k_next) * 1e-3  # enforce distinctness
        parent = int(rng.integers(0, k_prev))
        children = [i for i, p in enumerate(parents) if p == parent]
        if not children or len(children) == k_next:
            return
        prev = np.zeros(k_prev)
        prev[parent] = 1.0
        exp = torch.tensor(H.expansions[t], dtype=torch.float64)
        conditioned = condition_logits(torch.from_numpy(logits[None]),
                                       torch.from_numpy(prev[None]), exp)[0].numpy()
        unconditioned = softmax_scalar(logits)
        assert conditioned[children].sum() > unconditioned[children].sum()

    def test_gradient(self):
        exp = torch.tensor(H.expansions[2], dtype=torch.float64)
        logits = torch.randn(2, 8, dtype=torch.float64, requires_grad=True)
        prev = torch.softmax(torch.randn(2, 5, dtype=torch.float64), dim=-1)
        prev.requires_grad_(True)
        probe = torch.randn(2, 8, dtype=torch.float64)

        def f():
            return (condition_logits(logits, prev, exp) * probe).sum()

        finite_difference_check(f, [logits, prev], rel_tol=1e-4)


class TestProgressive:
    def test_pyramid_shapes(self):
        heads = ProgressiveHeads([4, 8, 16, 32], H)
        masks, probs = heads(_branches(size=16, channels=4))
        assert [tuple(m.shape[2:]) for m in masks.masks] == [(2, 2), (4, 4), (8, 8), (16, 16)]
        assert [p.shape[-1] for p in probs.probs] == [2, 3, 5, 8]
        masks.validate()
        probs.validate(H.stage_sizes)

    def test_composition_matches_manual_stages(self):
        heads = ProgressiveHeads([4, 8, 16, 32], H).double()
        b = _branches(size=16, channels=4, dtype=torch.float64)
        masks, probs = heads(b)

        feats = list(reversed(b.as_list()))
        mask = heads.localizers[0](feats[0])
        logits, p = heads.classifiers[0](feats[0])
        assert (masks.masks[0] - mask).abs().max() < 1e-12
        for t in range(1, 4):
            mask = heads.localizers[t](condition_features(mask, feats[t]))
            logits, _ = heads.classifiers[t](feats[t])
            p = condition_logits(logits, p, heads.expansion(t - 1))
            assert (masks.masks[t] - mask).abs().max() < 1e-9
            assert (probs.probs[t] - p).abs().max() < 1e-9

    def test_detach_prior_blocks_gradients_through_stage1(self):
        heads = ProgressiveHeads([4, 8, 16, 32], H, detach_prior=True)
        b = _branches(size=16, channels=4)
        masks, probs = heads(b)
        loss = probs.probs[3].sum() + masks.masks[3].sum()
        loss.backward()
        # stage-1 classifier receives no gradient from later stages
        assert heads.classifiers[0].linear.weight.grad is None \
            or heads.classifiers[0].linear.weight.grad.abs().max() == 0

    def test_gradients_flow_to_all_stages_by_default(self):
        heads = ProgressiveHeads([4, 8, 16, 32], H, detach_prior=False)
        b = _branches(size=16, channels=4)
        masks, probs = heads(b)
        (probs.probs[3].sum() + masks.masks[3].sum()).backward()
        assert heads.classifiers[0].linear.weight.grad.abs().max() > 0
        assert heads.localizers[0].proj.weight.grad.abs().max() > 0
