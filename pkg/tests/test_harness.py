"""Continual-run harness tests.

The fast three-task configuration from conftest is fully learnable, so
the routed run is expected to hit exact scores; the two ablation
baselines are expected to fail in their characteristic ways.
"""

import dataclasses

import numpy as np
import pytest

from adaroute.config import with_order
from adaroute.encoder import AdapterBank, LayeredEncoder
from adaroute.expansion import expand, mean_pool, separability_probe
from adaroute.harness import (
    AccuracyMatrix,
    RoutingAccuracyTrace,
    build_pipeline,
    compute_bwt,
    compute_op,
    run_bp_router_baseline,
    run_continual,
    run_equivalence_suite,
    run_inference,
    run_single_adapter_baseline,
    run_sweep,
    evaluate_bank,
    task_features,
)
from adaroute.router import init_state
from adaroute.tasks import generate_task_stream, generic_prompts


@pytest.fixture(scope="module")
def fast_run(fast_stream, fast_config):
    return run_continual(fast_stream, fast_config)


@pytest.fixture(scope="module")
def generalist_run(fast_stream, fast_config):
    cfg = dataclasses.replace(fast_config, generalist_route=True)
    return cfg, run_continual(fast_stream, cfg)


class ReplayAudit:
    """Duck-typed stream wrapper recording every split access."""

    def __init__(self, stream):
        self._stream = stream
        self.calls = []

    @property
    def spec(self):
        return self._stream.spec

    def training_data(self, task_id):
        self.calls.append(("train", task_id))
        return self._stream.training_data(task_id)

    def router_data(self, task_id):
        self.calls.append(("router", task_id))
        return self._stream.router_data(task_id)

    def eval_data(self, task_id):
        self.calls.append(("eval", task_id))
        return self._stream.eval_data(task_id)


class TestAccuracyMatrix:
    def test_set_get_has(self):
        m = AccuracyMatrix(3)
        m.set(0, 1, 0.5)
        assert m.get(0, 1) == 0.5
        assert m.has(0, 1) and not m.has(0, 0)

    def test_absent_cells_are_absent_not_zero(self):
        m = AccuracyMatrix(2)
        with pytest.raises(KeyError):
            m.get(0, 0)

    def test_triangle_enforced(self):
        m = AccuracyMatrix(3)
        with pytest.raises(ValueError, match="lower triangle"):
            m.set(2, 1, 0.5)
        with pytest.raises(ValueError, match="lower triangle"):
            m.set(0, 3, 0.5)
        with pytest.raises(ValueError, match="lower triangle"):
            m.set(-1, 1, 0.5)

    def test_range_and_duplicates(self):
        m = AccuracyMatrix(2)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            m.set(0, 0, 1.5)
        m.set(0, 0, 1.0)
        with pytest.raises(ValueError, match="already recorded"):
            m.set(0, 0, 0.5)

    def test_final_column_reports_missing_phases(self):
        m = AccuracyMatrix(3)
        m.set(0, 2, 1.0)
        m.set(2, 2, 1.0)
        with pytest.raises(ValueError, match=r"missing phases \[1\]"):
            m.final_column()

    def test_cells_round_trip(self):
        m = AccuracyMatrix(3)
        m.set(0, 0, 0.25)
        m.set(0, 2, 0.75)
        m.set(1, 1, 1.0)
        back = AccuracyMatrix.from_cells(3, m.to_cells())
        assert back.to_cells() == m.to_cells()


class TestMetrics:
    def make(self, cells, k):
        m = AccuracyMatrix(k)
        for i, t, v in cells:
            m.set(i, t, v)
        return m

    def test_two_phase_hand_example(self):
        m = self.make([(0, 0, 0.8), (0, 1, 0.6), (1, 1, 0.7)], 2)
        assert compute_op(m) == pytest.approx(0.65)
        assert compute_bwt(m) == pytest.approx(-0.2)

    def test_three_phase_hand_example(self):
        m = self.make(
            [
                (0, 0, 1.0), (1, 1, 0.9), (2, 2, 0.8),
                (0, 2, 0.7), (1, 2, 0.6),
            ],
            3,
        )
        assert compute_op(m) == pytest.approx((0.7 + 0.6 + 0.8) / 3)
        assert compute_bwt(m) == pytest.approx(((0.7 - 1.0) + (0.6 - 0.9)) / 2)

    def test_no_forgetting_means_zero(self):
        m = self.make([(0, 0, 0.9), (0, 1, 0.9), (1, 1, 0.4)], 2)
        assert compute_bwt(m) == 0.0

    def test_single_phase(self):
        m = self.make([(0, 0, 0.5)], 1)
        assert compute_op(m) == 0.5
        with pytest.raises(ValueError, match="at least 2 phases"):
            compute_bwt(m)

    def test_missing_diagonal_is_an_error_not_a_crash(self):
        # a resumed run records no cells before its start phase
        m = self.make([(0, 2, 1.0), (1, 1, 1.0), (1, 2, 1.0), (2, 2, 1.0)], 3)
        assert compute_op(m) == 1.0
        with pytest.raises(ValueError, match=r"missing phases \[0\]"):
            compute_bwt(m)

    def test_trace_averages(self):
        trace = RoutingAccuracyTrace()
        trace.append(0, {0: 1.0})
        trace.append(1, {0: 1.0, 1: 0.5})
        assert trace.averages == [1.0, 0.75]
        assert trace.records[1]["per_task"] == {0: 1.0, 1: 0.5}


class TestTaskFeatures:
    def test_matches_per_prompt_route(self, fast_stream, fast_config):
        encoder = LayeredEncoder.from_config(fast_config.encoder)
        pipeline = build_pipeline(fast_config)
        prompts = fast_stream.eval_data(0).prompts[:4]
        batched = task_features(encoder, pipeline, prompts)
        rows = np.stack(
            [
                expand(pipeline, mean_pool(encoder.forward_lower(p)))
                for p in prompts
            ]
        )
        np.testing.assert_allclose(batched, rows, atol=1e-12)

    def test_shape_and_validation(self, fast_stream, fast_config):
        encoder = LayeredEncoder.from_config(fast_config.encoder)
        pipeline = build_pipeline(fast_config)
        out = task_features(encoder, pipeline, fast_stream.eval_data(1).prompts)
        assert out.shape == (
            fast_stream.eval_data(1).count,
            fast_config.pipeline.expansion,
        )
        with pytest.raises(ValueError, match=r"\(n, T\)"):
            task_features(encoder, pipeline, np.array([1, 2, 3]))

    def test_separated_tasks_are_linearly_separable(self, fast_stream, fast_config):
        # full-separation alphabets must make expanded features separable,
        # otherwise the analytic router has no chance
        encoder = LayeredEncoder.from_config(fast_config.encoder)
        pipeline = build_pipeline(fast_config)
        feats = [
            task_features(encoder, pipeline, fast_stream.eval_data(t).prompts)
            for t in range(fast_stream.spec.num_tasks)
        ]
        assert separability_probe(feats, lam=fast_config.pipeline.lam) >= 0.99


class TestContinualRun:
    def test_learnable_stream_scores_exactly(self, fast_run, fast_stream):
        k = fast_stream.spec.num_tasks
        assert len(fast_run.matrix.to_cells()) == k * (k + 1) // 2
        assert compute_op(fast_run.matrix) == 1.0
        assert compute_bwt(fast_run.matrix) == 0.0
        assert fast_run.trace.averages == [1.0] * k

    def test_perfect_routing_forces_zero_forgetting(self, fast_run, fast_stream):
        # frozen per-task adapters: if every eval prompt routes to its own
        # task in every phase, cell (i, t) cannot depend on t
        k = fast_stream.spec.num_tasks
        assert all(
            r["per_task"][tid] == 1.0
            for r in fast_run.trace.records
            for tid in r["per_task"]
        )
        for i in range(k):
            first = fast_run.matrix.get(i, i)
            for t in range(i, k):
                assert fast_run.matrix.get(i, t) == first

    def test_deterministic(self, fast_stream, fast_config, fast_run):
        again = run_continual(fast_stream, fast_config)
        assert again.matrix.to_cells() == fast_run.matrix.to_cells()
        assert again.state.W.tobytes() == fast_run.state.W.tobytes()

    def test_no_replay(self, fast_stream, fast_config):
        audit = ReplayAudit(fast_stream)
        run_continual(audit, fast_config)
        order = fast_config.task_order()
        train_calls = [c for c in audit.calls if c[0] == "train"]
        router_calls = [c for c in audit.calls if c[0] == "router"]
        eval_calls = [c for c in audit.calls if c[0] == "eval"]
        # each task's training and router-fit splits are read exactly once,
        # during that task's own phase, and never again
        assert train_calls == [("train", tid) for tid in order]
        assert router_calls == [("router", tid) for tid in order]
        # eval splits are fetched once each and cached
        assert sorted(eval_calls) == [("eval", tid) for tid in sorted(order)]

    def test_task_order_does_not_change_the_outcome(self, fast_stream, fast_config, fast_run):
        for order in ((2, 0, 1), (1, 2, 0)):
            res = run_continual(fast_stream, with_order(fast_config, order))
            assert res.order == order
            assert round(compute_op(res.matrix), 4) == round(
                compute_op(fast_run.matrix), 4
            )
            assert round(compute_bwt(res.matrix), 4) == round(
                compute_bwt(fast_run.matrix), 4
            )
            assert float(np.abs(res.state.W - fast_run.state.W).max()) < 1e-8

    def test_phase_callback_sees_growing_state(self, fast_stream, fast_config):
        seen = []
        run_continual(
            fast_stream,
            fast_config,
            phase_callback=lambda done, state, bank: seen.append(
                (done, state.task_count, len(bank))
            ),
        )
        assert [s[0] for s in seen] == [1, 2, 3]
        assert [s[2] for s in seen] == [1, 2, 3]
        assert seen[-1][1] == fast_stream.spec.num_tasks

    def test_resume_argument_validation(self, fast_stream, fast_config):
        with pytest.raises(ValueError, match="needs state and bank"):
            run_continual(fast_stream, fast_config, start_phase=1)
        with pytest.raises(ValueError, match="both state and bank"):
            run_continual(
                fast_stream,
                fast_config,
                start_phase=1,
                state=init_state(fast_config.pipeline.expansion, 1.0),
            )
        with pytest.raises(ValueError, match="start_phase"):
            run_continual(
                fast_stream,
                fast_config,
                start_phase=9,
                state=init_state(fast_config.pipeline.expansion, 1.0),
                bank=AdapterBank(),
            )

    def test_stream_and_config_must_agree_on_task_count(self, fast_config):
        small = dataclasses.replace(fast_config.stream, num_tasks=2)
        mismatched = generate_task_stream(small, 0)
        with pytest.raises(ValueError, match="order length"):
            run_continual(mismatched, fast_config)


class TestGeneralistRoute:
    def test_extra_class_without_an_adapter(self, generalist_run, fast_stream):
        cfg, res = generalist_run
        k = fast_stream.spec.num_tasks
        assert res.generalist_id == k
        assert res.state.task_count == k + 1
        assert k not in res.bank

    def test_task_scores_unchanged(self, generalist_run):
        _, res = generalist_run
        assert compute_op(res.matrix) == 1.0
        assert compute_bwt(res.matrix) == 0.0

    def test_generic_prompts_fall_back_to_the_bare_encoder(
        self, generalist_run, fast_stream, fast_config
    ):
        cfg, res = generalist_run
        encoder = LayeredEncoder.from_config(cfg.encoder)
        pipeline = build_pipeline(cfg)
        prompts = generic_prompts(fast_stream.spec, fast_config.stream_seed, 5)
        for row in prompts:
            tokens, decision = run_inference(
                encoder, pipeline, res.state.W, res.bank, row, max_len=cfg.max_len
            )
            assert decision.selected == res.generalist_id
            np.testing.assert_array_equal(
                tokens, encoder.generate(row, None, cfg.max_len)
            )


class TestInference:
    def test_reroute_each_token_agrees_on_stable_tasks(
        self, fast_run, fast_stream, fast_config
    ):
        encoder = LayeredEncoder.from_config(fast_config.encoder)
        pipeline = build_pipeline(fast_config)
        prompt = fast_stream.eval_data(1).prompts[0]
        once, d_once = run_inference(
            encoder, pipeline, fast_run.state.W, fast_run.bank, prompt
        )
        per_token, d_per = run_inference(
            encoder,
            pipeline,
            fast_run.state.W,
            fast_run.bank,
            prompt,
            reroute_each_token=True,
        )
        assert d_once.selected == d_per.selected == 1
        np.testing.assert_array_equal(once, per_token)

    def test_unknown_selection_uses_the_bare_encoder(self, fast_config, fast_stream):
        encoder = LayeredEncoder.from_config(fast_config.encoder)
        pipeline = build_pipeline(fast_config)
        weights = np.zeros((fast_config.pipeline.expansion, 2))
        prompt = fast_stream.eval_data(0).prompts[0]
        tokens, decision = run_inference(
            encoder, pipeline, weights, AdapterBank(), prompt
        )
        assert decision.selected == 0
        np.testing.assert_array_equal(tokens, encoder.generate(prompt, None, 4))

    def test_evaluate_bank_scores_everything(self, fast_run, fast_stream, fast_config):
        per_task = evaluate_bank(
            fast_stream, fast_config, fast_run.state, fast_run.bank
        )
        assert sorted(per_task) == [0, 1, 2]
        for scores in per_task.values():
            assert scores == {"score": 1.0, "routing_accuracy": 1.0}


class TestBaselines:
    def test_gradient_router_forgets(self, fast_stream, fast_config):
        trace = run_bp_router_baseline(fast_stream, fast_config)
        avgs = trace.averages
        # trained on the newest phase only, it routes everything to the
        # newest class: average accuracy decays as 1 / phases seen
        assert avgs[0] == 1.0
        assert all(b < a for a, b in zip(avgs, avgs[1:]))
        assert avgs[-1] == pytest.approx(1 / fast_stream.spec.num_tasks)

    def test_shared_adapter_forgets(self, fast_stream, fast_config):
        matrix = run_single_adapter_baseline(fast_stream, fast_config)
        k = fast_stream.spec.num_tasks
        for i in range(k):
            assert matrix.get(i, i) == 1.0  # learns each task when trained on it
        assert compute_bwt(matrix) < -0.05

    def test_routed_run_beats_both(self, fast_run, fast_stream, fast_config):
        assert compute_bwt(fast_run.matrix) == 0.0
        single = run_single_adapter_baseline(fast_stream, fast_config)
        assert compute_bwt(fast_run.matrix) > compute_bwt(single)


class TestSweep:
    def test_grid_of_runs(self, fast_config):
        results = run_sweep(fast_config, split_layers=(1, 2), expansions=(64,))
        assert set(results) == {(1, 64), (2, 64)}
        for op, bwt in results.values():
            assert 0.0 <= op <= 1.0
            assert bwt is not None


class TestEquivalenceSuite:
    def test_small_suite_passes(self):
        out = run_equivalence_suite(trials=5, seed=1)
        assert out["passed"]
        assert out["trials"] == 5
        for key in ("joint_recursive", "recursive_direct", "chunking"):
            assert 0.0 <= out[key] <= out["tol"]
