from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vblora import adapter_store
from vblora.accounting import count_vblora_trainable
from vblora.core import merge_weight
from vblora.harness import (
    AdapterConfig,
    FootprintFormatError,
    FootprintLog,
    PermutationCopyTask,
    TinyTransformerSpec,
    TrainConfig,
    TrainingDivergedError,
    build_model,
    footprint_density,
    grad_check,
    linear_schedule,
    quartile_new_selections,
    randomize_adapters,
    train,
    usage_histogram,
)
from vblora.variants import SelectionPolicy

TINY = TinyTransformerSpec(layers=1, hidden=8, heads=2, vocab=8, seq_len=4, seed=0)


def tiny_model(kind="topk", modules="all", dtype=torch.float32, h=6, k=2, seed=0, **policy):
    adapter = AdapterConfig(h=h, b=4, r=2, policy=SelectionPolicy(kind=kind, k=k, **policy),
                            adapted_modules=modules, seed=seed)
    return build_model(TINY, adapter, dtype=dtype)


class TestModel:
    def test_parameter_census_matches_accounting(self):
        model = tiny_model()
        census = model.trainable_census()
        expected = count_vblora_trainable(model.geometry(), 6, 4, 2).trainable_params
        assert census["trainable"] == expected == census["bank"] + census["logits"]
        assert census["base_trainable"] == 0

    def test_base_weights_are_buffers(self):
        model = tiny_model()
        names = {n for n, _ in model.named_parameters()}
        assert all(not n.startswith("base_") for n in names)

    def test_qv_adapts_two_modules(self):
        assert {e.module for e in tiny_model(modules="qv").entries} == {"q", "v"}

    def test_indivisible_model(self):
        with pytest.raises(ValueError):
            build_model(TinyTransformerSpec(hidden=10, heads=2), AdapterConfig(b=4))

    def test_adapters_off_is_the_base_model(self):
        model = tiny_model()
        tokens, _ = PermutationCopyTask(8, 4).batch(np.random.default_rng(0), 3)
        with torch.no_grad():
            randomize_adapters(model, 1)
            on = model(tokens, train=False)
            off = model(tokens, train=False, adapters=False)
        assert not torch.allclose(on, off)

    def test_forward_matches_merged_weights(self):
        model = tiny_model(dtype=torch.float64)
        randomize_adapters(model, 2, bank_scale=0.3)
        tokens, _ = PermutationCopyTask(8, 4).batch(np.random.default_rng(1), 2)
        with torch.no_grad():
            y = model(tokens, train=False)
        factors = adapter_store.reconstruct(model.export())
        merged = tiny_model(dtype=torch.float64)
        with torch.no_grad():
            for (layer, module), f in factors.items():
                buf = merged.base_weight(f"{layer}.{module}")
                buf.copy_(torch.from_numpy(merge_weight(buf.numpy(), f)))
            y_merged = merged(tokens, adapters=False)
        # the exported adapter stores float32 bank and weights
        torch.testing.assert_close(y, y_merged, rtol=1e-4, atol=1e-4)

    def test_export_roundtrip(self):
        model = tiny_model()
        randomize_adapters(model, 3)
        adapter = model.export({"seed": 3})
        back = adapter_store.deserialize(adapter_store.serialize(adapter))
        assert adapter_store.adapters_equal(adapter, back)
        assert len(adapter.manifest) == 12


class TestSchedule:
    def test_warmup_then_linear_decay(self):
        f = linear_schedule(100, 0.06)
        assert f(0) == pytest.approx(1 / 6)
        assert f(5) == pytest.approx(1.0)
        assert f(6) == pytest.approx(1.0)
        assert f(53) == pytest.approx(0.5)
        assert f(100) == 0.0


class TestTraining:
    def test_training_reduces_loss_and_freezes_base(self):
        model = tiny_model()
        result = train(model, PermutationCopyTask(8, 4), TrainConfig(steps=30, batch_size=8, lr_bank=1e-2,
                                                                      lr_logits=1e-1))
        assert result.final_loss < result.initial_loss
        assert result.base_checksum_before == result.base_checksum_after
        assert len(result.losses) == 30
        assert len(result.footprint.steps) == 31

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            model = tiny_model(kind="noisy_topk")
            r = train(model, PermutationCopyTask(8, 4), TrainConfig(steps=10, batch_size=4))
            runs.append((r.losses, model.export().bank.tobytes(), r.footprint.to_bytes()))
        assert runs[0] == runs[1]

    def test_divergence_is_reported(self):
        model = tiny_model()
        with torch.no_grad():
            model.bank.fill_(float("nan"))
        with pytest.raises(TrainingDivergedError) as exc:
            train(model, PermutationCopyTask(8, 4), TrainConfig(steps=3, batch_size=2))
        assert exc.value.step == 1

    def test_metrics_csv(self, tmp_path):
        model = tiny_model()
        r = train(model, PermutationCopyTask(8, 4), TrainConfig(steps=4, batch_size=2))
        r.write_metrics(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "step,loss,new_selections"
        assert len(lines) == 6


class TestGradCheck:
    @pytest.mark.parametrize("kind,extra", [
        ("topk", {}), ("select_all", {}), ("gs", {}), ("noisy_topk", {"noise_scale": 0.0}),
    ])
    def test_kinds_pass(self, kind, extra):
        model = tiny_model(kind=kind, modules="qv", dtype=torch.float64, **extra)
        randomize_adapters(model, 5, bank_scale=0.1)
        rep = grad_check(model, PermutationCopyTask(8, 4), tolerance=1e-6, eps=1e-5)
        assert rep.ok, rep.failures[:5]
        assert rep.unselected_max_analytic == 0.0

    def test_needs_float64(self):
        with pytest.raises(ValueError):
            grad_check(tiny_model(), PermutationCopyTask(8, 4))

    def test_straight_through_is_rejected(self):
        with pytest.raises(ValueError):
            grad_check(tiny_model(kind="st_gs", dtype=torch.float64), PermutationCopyTask(8, 4))


class TestFootprint:
    def _log(self):
        log = FootprintLog(h=5, k=2)
        log.record(0, np.array([[0, 1], [2, 3]]))
        log.record(1, np.array([[0, 1], [2, 4]]))
        log.record(2, np.array([[1, 0], [2, 3]]))
        log.record(3, np.array([[4, 0], [2, 3]]))
        return log

    def test_new_selection_counts(self):
        log = self._log()
        assert log.new_selections == [4, 1, 0, 1]
        assert log.changed_subvectors() == 2
        assert footprint_density(log, 2) == [5, 1]
        assert footprint_density(log, 2, include_initial=False) == [1, 1]

    def test_quartiles_exclude_initialization(self):
        log = FootprintLog(h=4, k=1)
        for step, row in enumerate([0, 1, 1, 1, 2]):
            log.record(step, np.array([[row]]))
        assert quartile_new_selections(log) == (1, 1)

    def test_histogram(self):
        assert usage_histogram(self._log()).tolist() == [1, 0, 1, 1, 1]
        with pytest.raises(ValueError):
            usage_histogram(np.array([[0, 1]]))

    def test_bytes_roundtrip(self):
        log = self._log()
        back = FootprintLog.from_bytes(log.to_bytes())
        assert back.steps == log.steps
        assert back.new_selections == log.new_selections
        assert np.array_equal(back.selection_sets(), log.selection_sets())

    @settings(max_examples=50, deadline=None)
    @given(position=st.integers(0, 1000))
    def test_corruption_detected(self, position):
        data = bytearray(self._log().to_bytes())
        data[position % len(data)] ^= 0x10
        with pytest.raises(FootprintFormatError):
            FootprintLog.from_bytes(bytes(data))

    def test_csv(self, tmp_path):
        self._log().write_csv(tmp_path / "f.csv")
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "step,subvector,indices"
        assert lines[1] == "0,0,0 1"


class TestTask:
    def test_targets_follow_permutation(self):
        task = PermutationCopyTask(8, 5, seed=1)
        tokens, targets = task.batch(np.random.default_rng(0), 4)
        assert torch.equal(tokens[:, 1:], targets[:, :-1])
