from dataclasses import replace

import numpy as np
import pytest

from dummy_forcing import (
    ConfigError,
    Session,
    SessionConfig,
    PlantedSpec,
    ToyModelSpec,
    build_toy_model,
    generate_session,
    global_scores,
    planted_stream,
    stability_perturb,
    top_n_current,
    core_set_ratio,
)
from dummy_forcing import rng
from dummy_forcing.container import array_digest
from dummy_forcing.scenario import cycle_labels

from conftest import planted_setup

# Self-recorded goldens from the first verified run (seed 2024 toy model).
GOLDEN_WQ0 = "49dcb86cd4a1f9952375882cb2f10d260737661885f4d001f4e559741d7af244"
GOLDEN_FORWARD = "98a48ffd4b32c12d83f9956b09005738b7f3db0c5d07043e0478483f6bb2747c"


def golden_spec():
    return ToyModelSpec(
        num_layers=2, num_heads=4, head_dim=8, HW=16, denoise_steps=2, seed=2024
    )


class TestPortableRng:
    def test_counter_stream_is_reproducible(self):
        a = rng.uniform(123, 100)
        b = rng.uniform(123, 100)
        np.testing.assert_array_equal(a, b)
        assert (a >= 0).all() and (a < 1).all()

    def test_offset_slices_the_same_stream(self):
        whole = rng.uniform(9, 10)
        tail = rng.uniform(9, 6, offset=4)
        np.testing.assert_array_equal(whole[4:], tail)

    def test_derive_separates_purposes(self):
        assert rng.derive(5, "weights") != rng.derive(5, "frames")
        assert rng.derive(5, "weights", 0) != rng.derive(5, "weights", 1)

    def test_frozen_first_values(self):
        # documented first outputs of stream seed 0 (portability anchor)
        np.testing.assert_allclose(
            rng.uniform(0, 4),
            [
                0.8833108082136426,
                0.43152799704850997,
                0.026433771592597743,
                0.9708819781538285,
            ],
            rtol=0,
            atol=0,
        )


class TestToyModel:
    def test_same_seed_same_weights(self):
        m1 = build_toy_model(golden_spec())
        m2 = build_toy_model(golden_spec())
        assert array_digest(m1.weights[0]["q"]) == array_digest(m2.weights[0]["q"])
        assert array_digest(m1.weights[0]["q"]) == GOLDEN_WQ0

    def test_weight_scale_zero_means_uniform_attention(self):
        spec = replace(golden_spec(), weight_scale=0.0)
        model = build_toy_model(spec)
        x = model.frame_input(0, 0)
        q, k, v = model.qkv(0, x, 0, 0)
        assert not q.any() and not k.any()

    def test_forward_golden_digest(self):
        cfg = SessionConfig(
            num_layers=2,
            num_heads=4,
            head_dim=8,
            HW=16,
            window_len=3,
            ar_steps=1,
            denoise_steps=2,
        )
        frames, report = generate_session(build_toy_model(golden_spec()), cfg)
        assert array_digest(*frames) == GOLDEN_FORWARD
        assert report.output_digest == GOLDEN_FORWARD

    def test_denoise_steps_perturb_the_input(self):
        model = build_toy_model(golden_spec())
        assert not np.array_equal(model.frame_input(0, 0), model.frame_input(0, 1))

    def test_spec_round_trips_through_dict(self):
        spec = golden_spec()
        assert ToyModelSpec.from_dict(spec.to_dict()) == spec


class TestPlantedStream:
    def test_label_length_must_match_heads(self):
        config, spec = planted_setup(0, margin=1.0)
        bad = replace(spec, labels=spec.labels[:-1])
        with pytest.raises(ConfigError):
            planted_stream(bad, config)

    def test_stream_bytes_fixed_by_spec(self):
        config, spec = planted_setup(0, margin=1.0)
        m1 = planted_stream(spec, config)
        m2 = planted_stream(spec, config)
        q1, k1, v1 = m1.qkv(0, None, 2, 1)
        q2, k2, v2 = m2.qkv(0, None, 2, 1)
        assert array_digest(q1, k1, v1) == array_digest(q2, k2, v2)

    def test_margin_pushes_mass_to_labeled_region(self):
        config, spec = planted_setup(2, margin=10.0, shuffle=False)
        session = Session(planted_stream(spec, config), config, "baseline")
        table = global_scores(session)
        col = {"sink": 0, "neighbor": 1, "current": 2}
        for flat, label in enumerate(spec.labels):
            row = table.scores[flat]
            assert row[col[label]] > 0.99, (flat, label, row)

    def test_zero_margin_has_no_label_signal(self):
        config, spec = planted_setup(3, margin=0.0)
        session = Session(planted_stream(spec, config), config, "baseline")
        table = global_scores(session)
        col = {"sink": 0, "neighbor": 1, "current": 2}
        dominant = table.scores.argmax(axis=1)
        hits = sum(
            dominant[i] == col[lb] for i, lb in enumerate(spec.labels)
        )
        # ~chance alignment; far from full recovery
        assert hits < len(spec.labels) * 0.8

    def test_margin_controlled_gap(self):
        config, spec = planted_setup(4, margin=3.0, shuffle=False)
        session = Session(planted_stream(spec, config), config, "baseline")
        table = global_scores(session)
        col = {"sink": 0, "neighbor": 1, "current": 2}
        for flat, label in enumerate(spec.labels):
            row = table.scores[flat]
            others = [row[c] for k, c in col.items() if k != label]
            assert row[col[label]] > max(others) + 0.2

    def test_spec_round_trips_through_dict(self):
        _, spec = planted_setup(5, margin=1.5)
        assert PlantedSpec.from_dict(spec.to_dict()) == spec

    def test_cycle_labels_counts(self):
        labels = cycle_labels({"sink": 2, "neighbor": 1, "current": 3})
        assert labels == ("sink", "sink", "neighbor", "current", "current", "current")


class TestStabilityPerturb:
    def _sets(self, margin, strength, seed, conditions=5, n=6):
        config, spec = planted_setup(seed, margin=margin)
        sets = []
        for variant in range(conditions):
            perturbed = stability_perturb(spec, "prompt_seed", strength, variant)
            session = Session(planted_stream(perturbed, config), config, "baseline")
            sets.append(top_n_current(global_scores(session), n))
        return sets

    def test_zero_strength_is_perfectly_stable(self):
        assert core_set_ratio(self._sets(margin=0.0, strength=0.0, seed=0)) == 1.0

    def test_strong_noise_destroys_stability(self):
        # measured: ratio 0.0-0.17 over 10 seeds at margin 0, strength 2
        ratios = [
            core_set_ratio(self._sets(margin=0.0, strength=2.0, seed=s))
            for s in range(3)
        ]
        assert max(ratios) < 0.5

    def test_moderate_noise_sits_between_extremes(self):
        # measured at margin 2, strength 2: ratios 0.17-0.67 across seeds
        ratios = [
            core_set_ratio(self._sets(margin=2.0, strength=2.0, seed=s))
            for s in range(5)
        ]
        mean = float(np.mean(ratios))
        assert 0.05 < mean < 0.95

    def test_unknown_condition_rejected(self):
        _, spec = planted_setup(0, margin=1.0)
        with pytest.raises(ConfigError):
            stability_perturb(spec, "weather", 1.0)
