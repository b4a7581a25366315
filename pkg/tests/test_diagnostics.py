"""Tests for evaluation metrics, pair dominance, and confidence reports."""

import math

import numpy as np
import pytest
import torch

from daplkit.diagnostics import (
    EVAL_MODES,
    confidence_report,
    disentanglement_report,
    evaluate,
    predict_classes,
)
from daplkit.encoders import DTYPE, TextEncoder, TokenTable
from daplkit.prompts import PromptBank, PromptConfig, PromptMode, all_prompt_features


def make_bank(k=3, e=8, d=8, seed=0, mode=PromptMode.UNIFIED_DSC):
    names = [f"class_{i}" for i in range(k)]
    table = TokenTable.for_classes(names, embed_dim=e, seed=seed)
    text_enc = TextEncoder(embed_dim=e, feature_dim=d, max_seq_len=64, seed=seed + 1)
    m2 = 2 if mode in (PromptMode.UNIFIED_DSC, PromptMode.CLASS_SPECIFIC_DSC) else 0
    cfg = PromptConfig(mode=mode, m1=3, m2=m2, k=k, embed_dim=e)
    bank = PromptBank.from_table(cfg, table, names, seed=seed + 2)
    return bank, text_enc


class TestPredictClasses:
    def test_probe_on_prompt_feature_recovers_its_class(self):
        bank, text_enc = make_bank()
        pf = all_prompt_features(bank, text_enc)
        k = bank.cfg.k
        for mode in EVAL_MODES:
            for col in range(2 * k):
                preds = predict_classes(bank, text_enc, pf[col : col + 1], 0.05, mode)
                if mode == "target_only" and col < k:
                    continue  # source prompts are out of scope for this mode
                assert int(preds[0]) == col % k, (mode, col)

    def test_unknown_mode_rejected(self):
        bank, text_enc = make_bank()
        with pytest.raises(ValueError):
            predict_classes(bank, text_enc, torch.ones(1, 8, dtype=DTYPE), 0.1, "bogus")

    def test_mod_k_and_marginal_agree_when_domain_blocks_match(self):
        """Without domain-specific context the 2K grid repeats its rows, so
        reducing by mod K or by marginalizing must coincide."""
        bank, text_enc = make_bank(mode=PromptMode.UNIFIED)
        rng = np.random.default_rng(0)
        feats = torch.tensor(rng.normal(size=(20, 8)), dtype=DTYPE)
        a = predict_classes(bank, text_enc, feats, 0.2, "mod_k")
        b = predict_classes(bank, text_enc, feats, 0.2, "marginal")
        c = predict_classes(bank, text_enc, feats, 0.2, "target_only")
        assert torch.equal(a, b)
        assert torch.equal(a, c)


class TestEvaluate:
    def test_perfect_predictor(self):
        bank, text_enc = make_bank()
        pf = all_prompt_features(bank, text_enc)
        k = bank.cfg.k
        feats = pf[k:]  # one probe per class, sitting on the target prompts
        labels = torch.arange(k)
        res = evaluate(bank, text_enc, feats, labels, 0.05, "target_only")
        assert res.per_class == [1.0] * k
        assert res.macro == 1.0
        assert res.micro == 1.0

    def test_constant_predictor_macro(self):
        """Probes all on one prompt: that class scores 1, the rest 0."""
        bank, text_enc = make_bank(k=4)
        pf = all_prompt_features(bank, text_enc)
        feats = pf[4:5].repeat(8, 1)  # always predicts target class 0
        labels = torch.arange(8) % 4
        res = evaluate(bank, text_enc, feats, labels, 0.05, "target_only")
        assert res.per_class[0] == 1.0
        assert res.per_class[1:] == [0.0, 0.0, 0.0]
        assert res.macro == pytest.approx(0.25)
        assert res.micro == pytest.approx(0.25)

    def test_absent_class_warns_and_is_excluded(self):
        bank, text_enc = make_bank(k=3)
        pf = all_prompt_features(bank, text_enc)
        feats = pf[3:5]  # classes 0 and 1 only
        labels = torch.tensor([0, 1])
        with pytest.warns(UserWarning, match="class 2"):
            res = evaluate(bank, text_enc, feats, labels, 0.05, "target_only")
        assert math.isnan(res.per_class[2])
        assert res.macro == pytest.approx(1.0)

    def test_macro_equals_micro_when_balanced(self):
        bank, text_enc = make_bank(k=2)
        rng = np.random.default_rng(5)
        feats = torch.tensor(rng.normal(size=(40, 8)), dtype=DTYPE)
        labels = torch.tensor([0, 1] * 20)
        res = evaluate(bank, text_enc, feats, labels, 0.2, "marginal")
        assert res.micro == pytest.approx(
            0.5 * (res.per_class[0] + res.per_class[1]), abs=1e-12
        )
        assert res.macro == pytest.approx(res.micro, abs=1e-12)


class TestDisentanglementReport:
    def test_probe_on_prompt_is_dominant_with_positive_margin(self):
        bank, text_enc = make_bank()
        pf = all_prompt_features(bank, text_enc)
        k = bank.cfg.k
        probes = pf.clone()
        domains = torch.tensor([0] * k + [1] * k)
        classes = torch.arange(2 * k) % k
        rep = disentanglement_report(bank, text_enc, probes, domains, classes)
        assert rep.dominance_fraction == 1.0
        assert bool(rep.dominant.all())
        assert float(rep.positive_margins.min()) > 0.0
        assert rep.sims.shape == (2 * k, 2 * k)

    def test_mislabeled_probe_is_not_dominant(self):
        bank, text_enc = make_bank()
        pf = all_prompt_features(bank, text_enc)
        probes = pf[0:1]  # truly (source, class 0)
        rep = disentanglement_report(
            bank, text_enc, probes, torch.tensor([1]), torch.tensor([0])
        )
        assert rep.dominance_fraction == 0.0
        assert float(rep.positive_margins[0]) < 0.0

    def test_dominance_invariant_under_probe_rescaling(self):
        bank, text_enc = make_bank()
        rng = np.random.default_rng(9)
        probes = torch.tensor(rng.normal(size=(15, 8)), dtype=DTYPE)
        domains = torch.tensor(rng.integers(0, 2, size=15))
        classes = torch.tensor(rng.integers(0, 3, size=15))
        r1 = disentanglement_report(bank, text_enc, probes, domains, classes)
        r2 = disentanglement_report(bank, text_enc, probes * 37.5, domains, classes)
        assert torch.equal(r1.dominant, r2.dominant)
        torch.testing.assert_close(r1.sims, r2.sims, rtol=1e-12, atol=1e-12)

    def test_dominance_fraction_counts_exactly(self):
        bank, text_enc = make_bank(k=2)
        pf = all_prompt_features(bank, text_enc)
        probes = torch.cat([pf[0:1], pf[0:1]])
        domains = torch.tensor([0, 1])  # second probe mislabeled
        classes = torch.tensor([0, 0])
        rep = disentanglement_report(bank, text_enc, probes, domains, classes)
        assert rep.dominance_fraction == 0.5


class TestConfidenceReport:
    def test_single_variant_matches_direct_computation(self):
        from daplkit.head import class_probabilities, marginalize_to_classes

        bank, text_enc = make_bank()
        rng = np.random.default_rng(3)
        feats = torch.tensor(rng.normal(size=(6, 8)), dtype=DTYPE)
        labels = torch.tensor([0, 1, 2, 0, 1, 2])
        rep = confidence_report({"only": bank}, text_enc, feats, labels, 0.2)
        assert rep.variant_names == ["only"]
        pf = all_prompt_features(bank, text_enc)
        probs = marginalize_to_classes(class_probabilities(feats, pf, 0.2))
        want = probs[torch.arange(6), labels]
        torch.testing.assert_close(rep.confidences[0], want, rtol=1e-12, atol=1e-14)

    def test_mean_confidence_is_row_mean(self):
        bank, text_enc = make_bank()
        bank2, _ = make_bank(seed=11)
        rng = np.random.default_rng(4)
        feats = torch.tensor(rng.normal(size=(5, 8)), dtype=DTYPE)
        labels = torch.zeros(5, dtype=torch.long)
        rep = confidence_report({"a": bank, "b": bank2}, text_enc, feats, labels, 0.2)
        means = rep.mean_confidence()
        assert set(means) == {"a", "b"}
        assert means["a"] == pytest.approx(float(rep.confidences[0].mean()))
        assert means["b"] == pytest.approx(float(rep.confidences[1].mean()))

    def test_probe_on_true_prompt_has_high_confidence(self):
        bank, text_enc = make_bank()
        pf = all_prompt_features(bank, text_enc)
        feats = pf[3:4]  # (target, class 0)
        rep = confidence_report(
            {"x": bank}, text_enc, feats, torch.tensor([0]), 0.02
        )
        assert float(rep.confidences[0, 0]) > 0.99

    def test_empty_variants_rejected(self):
        _, text_enc = make_bank()
        with pytest.raises(ValueError):
            confidence_report({}, text_enc, torch.ones(1, 8, dtype=DTYPE), torch.tensor([0]), 0.1)
