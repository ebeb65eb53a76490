import json
import random

import pytest

from demian.composite_runner import (
    EXAMPLE_SUITE,
    CompositeEpisodeResult,
    CompositeTaskSpec,
    ConstantDoneFlag,
    PhaseOutcome,
    PhaseSpec,
    PromptEvent,
    PromptMode,
    ScriptedDoneFlag,
    ScriptedEnv,
    aggregate_composite,
    build_scripted_env,
    load_suite,
    resolve_predicate,
    run_composite_episode,
    run_suite,
    save_suite,
    spec_from_dict,
    spec_to_dict,
)


def make_spec(phase_preds, task_id="CoffeeStub"):
    """phase_preds: list of (lenient, strict) predicate ids."""
    phases = tuple(
        PhaseSpec(
            atomic_instruction=f"Do subtask {i + 1}.",
            lenient_trigger=lenient,
            strict_checker=strict,
        )
        for i, (lenient, strict) in enumerate(phase_preds)
    )
    return CompositeTaskSpec(
        task_id=task_id,
        composite_description="Do subtask 1, then subtask 2, then subtask 3.",
        phases=phases,
    )


def deterministic_env(spec):
    return build_scripted_env(spec, episode_seed=0)


THREE_PHASE = make_spec([
    ("step>=90", "step>=100"),
    ("step>=230", "step>=250"),
    ("never", "step>=380"),
])


class TestSpecs:
    def test_mode_from_cli(self):
        assert PromptMode.from_cli("dynamic-gt") is PromptMode.DYNAMIC_GT
        assert PromptMode.from_cli("fix") is PromptMode.FIX
        with pytest.raises(ValueError):
            PromptMode.from_cli("static")

    def test_phase_validation(self):
        with pytest.raises(ValueError):
            PhaseSpec("", "always", "always")
        with pytest.raises(ValueError):
            PhaseSpec("Do it.", "", "always")

    def test_spec_needs_two_phases(self):
        with pytest.raises(ValueError, match=">= 2 phases"):
            make_spec([("always", "always")])

    def test_outcome_consistency(self):
        with pytest.raises(ValueError):
            PhaseOutcome(phase_index=1, reached=True, reached_step=None)
        with pytest.raises(ValueError):
            PhaseOutcome(phase_index=1, reached=False, reached_step=5)


class TestPredicates:
    def test_fixed_forms(self):
        rng = random.Random(0)
        assert resolve_predicate("always", rng)(1)
        assert not resolve_predicate("never", rng)(10**9)
        ge = resolve_predicate("step>=40", rng)
        assert not ge(39) and ge(40) and ge(41)
        win = resolve_predicate("window:120-400", rng)
        assert not win(119) and win(120) and win(400) and not win(401)

    def test_prob_form_resolves_once(self):
        sure = resolve_predicate("prob:1.0@50", random.Random(1))
        assert not sure(49) and sure(50)
        never = resolve_predicate("prob:0.0@50", random.Random(1))
        assert not never(50) and not never(10**6)

    def test_prob_rate_matches_p(self):
        hits = 0
        for seed in range(2000):
            pred = resolve_predicate("prob:0.7@10", random.Random(seed))
            hits += pred(10)
        assert abs(hits / 2000 - 0.7) < 0.03

    def test_bad_forms(self):
        rng = random.Random(0)
        for bad in ("sometimes", "window:5", "window:9-3", "prob:0.5", "prob:1.5@3", "step>=x"):
            with pytest.raises(ValueError):
                resolve_predicate(bad, rng)

    def test_env_rejects_unknown_id(self):
        env = ScriptedEnv(predicates={"always": lambda s: True})
        with pytest.raises(ValueError, match="registry"):
            env.check("never", 1)

    def test_shared_id_resolves_once_per_episode(self):
        spec = make_spec([("prob:0.5@10", "prob:0.5@10"), ("never", "never")])
        for seed in range(50):
            env = build_scripted_env(spec, seed)
            # Four predicate slots, two unique ids, one resolution each.
            assert len(env.predicates) == 2
            first = env.check("prob:0.5@10", 10)
            assert all(env.check("prob:0.5@10", 10) == first for _ in range(20))

    def test_env_resolution_deterministic(self):
        spec = make_spec([("prob:0.5@10", "prob:0.5@20"), ("prob:0.5@30", "prob:0.5@40")])
        # Same seed, same firing pattern.
        probe = lambda env: tuple(env.check(p, 10**6) for p in sorted(env.predicates))
        assert probe(build_scripted_env(spec, 9)) == probe(build_scripted_env(spec, 9))


class TestEpisode:
    def test_three_phase_walkthrough(self):
        env = deterministic_env(THREE_PHASE)
        result = run_composite_episode(
            THREE_PHASE, PromptMode.DYNAMIC_GT, env, ConstantDoneFlag(1.0), max_steps=1200
        )
        assert [o.reached_step for o in result.phase_outcomes] == [100, 250, 380]
        assert result.full_success
        # Prompt swaps land on the chunk start after each lenient trigger.
        assert [(e.step, e.phase_index) for e in result.prompt_history] == [
            (1, 1),
            (97, 2),
            (233, 3),
        ]
        assert result.prompt_history[0].prompt == "Do subtask 1."

    def test_swap_waits_for_chunk_start(self):
        spec = make_spec([("step>=100", "never"), ("never", "never")])
        result = run_composite_episode(
            spec, PromptMode.DYNAMIC_GT, deterministic_env(spec), ConstantDoneFlag(1.0),
            max_steps=120,
        )
        assert [(e.step, e.phase_index) for e in result.prompt_history] == [(1, 1), (105, 2)]
        assert not result.full_success

    def test_advancement_needs_done_flag_and_trigger(self):
        spec = make_spec([("step>=10", "never"), ("never", "never")])
        flat = run_composite_episode(
            spec, PromptMode.DYNAMIC_GT, deterministic_env(spec), ConstantDoneFlag(0.0),
            max_steps=100,
        )
        assert [e.phase_index for e in flat.prompt_history] == [1]
        # Done flag above threshold but trigger never fires: same stall.
        spec2 = make_spec([("never", "never"), ("never", "never")])
        stalled = run_composite_episode(
            spec2, PromptMode.DYNAMIC_GT, deterministic_env(spec2), ConstantDoneFlag(1.0),
            max_steps=100,
        )
        assert [e.phase_index for e in stalled.prompt_history] == [1]

    def test_done_flag_threshold_is_strict(self):
        spec = make_spec([("always", "never"), ("never", "never")])
        at = run_composite_episode(
            spec, PromptMode.DYNAMIC_GT, deterministic_env(spec), ConstantDoneFlag(0.5),
            max_steps=40, done_threshold=0.5,
        )
        assert [e.phase_index for e in at.prompt_history] == [1]
        above = run_composite_episode(
            spec, PromptMode.DYNAMIC_GT, deterministic_env(spec), ConstantDoneFlag(0.51),
            max_steps=40, done_threshold=0.5,
        )
        assert [e.phase_index for e in above.prompt_history] == [1, 2]

    def test_one_advancement_per_step(self):
        spec = make_spec([("always", "never"), ("always", "never"), ("never", "never")])
        policy = ScriptedDoneFlag(lambda s: 1.0 if s == 1 else 0.0)
        result = run_composite_episode(
            spec, PromptMode.DYNAMIC_GT, deterministic_env(spec), policy, max_steps=64
        )
        # Only step 1 clears the threshold, so only one advance happens.
        assert [(e.step, e.phase_index) for e in result.prompt_history] == [(1, 1), (9, 2)]

    def test_milestones_ignore_prompts(self):
        spec = make_spec([("never", "step>=10"), ("never", "step>=20")])
        result = run_composite_episode(
            spec, PromptMode.DYNAMIC_GT, deterministic_env(spec), ConstantDoneFlag(0.0),
            max_steps=64,
        )
        assert [o.reached_step for o in result.phase_outcomes] == [10, 20]
        assert result.full_success

    def test_same_step_can_clear_multiple_milestones(self):
        spec = make_spec([("never", "always"), ("never", "always")])
        result = run_composite_episode(
            spec, PromptMode.DYNAMIC_GT, deterministic_env(spec), ConstantDoneFlag(1.0),
            max_steps=64,
        )
        assert [o.reached_step for o in result.phase_outcomes] == [1, 1]

    def test_fix_mode_records_one_prompt(self):
        env = deterministic_env(THREE_PHASE)
        result = run_composite_episode(
            THREE_PHASE, PromptMode.FIX, env, ConstantDoneFlag(1.0), max_steps=1200
        )
        assert len(result.prompt_history) == 1
        ev = result.prompt_history[0]
        assert ev == PromptEvent(step=1, phase_index=None, prompt=THREE_PHASE.composite_description)
        assert result.full_success

    def test_instructor_called_once_per_phase(self):
        calls = []

        def instructor(text):
            calls.append(text)
            return f"Focus: {text}"

        spec = make_spec([("step>=50", "never"), ("never", "never")])
        result = run_composite_episode(
            spec,
            PromptMode.DYNAMIC_INSTRUCTOR,
            deterministic_env(spec),
            ConstantDoneFlag(1.0),
            max_steps=200,
            instructor=instructor,
        )
        assert calls == ["Do subtask 1.", "Do subtask 2."]
        assert [e.prompt for e in result.prompt_history] == [
            "Focus: Do subtask 1.",
            "Focus: Do subtask 2.",
        ]

    def test_instructor_required(self):
        with pytest.raises(ValueError, match="instructor"):
            run_composite_episode(
                THREE_PHASE,
                PromptMode.DYNAMIC_INSTRUCTOR,
                deterministic_env(THREE_PHASE),
                ConstantDoneFlag(1.0),
            )

    def test_missing_predicate_rejected(self):
        env = ScriptedEnv(predicates={"always": lambda s: True})
        with pytest.raises(ValueError, match="registry"):
            run_composite_episode(
                THREE_PHASE, PromptMode.FIX, env, ConstantDoneFlag(1.0)
            )

    def test_argument_validation(self):
        env = deterministic_env(THREE_PHASE)
        with pytest.raises(ValueError):
            run_composite_episode(
                THREE_PHASE, PromptMode.FIX, env, ConstantDoneFlag(1.0), done_threshold=1.0
            )
        with pytest.raises(ValueError):
            run_composite_episode(
                THREE_PHASE, PromptMode.FIX, env, ConstantDoneFlag(1.0), max_steps=0
            )

    def test_monotone_depth_properties(self):
        for seed in range(60):
            for spec in EXAMPLE_SUITE:
                env = build_scripted_env(spec, seed)
                result = run_composite_episode(
                    spec, PromptMode.DYNAMIC_GT, env, ConstantDoneFlag(1.0), max_steps=600
                )
                flags = [o.reached for o in result.phase_outcomes]
                # Reached milestones form a prefix with nondecreasing steps.
                assert flags == sorted(flags, reverse=True)
                steps = [o.reached_step for o in result.phase_outcomes if o.reached]
                assert steps == sorted(steps)
                assert result.full_success == result.phase_outcomes[-1].reached
                phase_seq = [e.phase_index for e in result.prompt_history]
                assert phase_seq == sorted(phase_seq)


class TestSuite:
    def test_run_suite_shape_and_determinism(self):
        results = run_suite(EXAMPLE_SUITE, PromptMode.DYNAMIC_GT, episodes=5, base_seed=3)
        assert set(results) == {(s.task_id, PromptMode.DYNAMIC_GT) for s in EXAMPLE_SUITE}
        assert all(len(v) == 5 for v in results.values())
        again = run_suite(EXAMPLE_SUITE, PromptMode.DYNAMIC_GT, episodes=5, base_seed=3)
        assert again == results

    def test_milestones_shared_across_modes(self):
        # Environments are seeded independently of mode, and milestone checks
        # never consult the prompt, so per-episode outcomes pair up exactly.
        fix = run_suite(EXAMPLE_SUITE, PromptMode.FIX, episodes=8, base_seed=11)
        dyn = run_suite(EXAMPLE_SUITE, PromptMode.DYNAMIC_GT, episodes=8, base_seed=11)
        for spec in EXAMPLE_SUITE:
            a = fix[(spec.task_id, PromptMode.FIX)]
            b = dyn[(spec.task_id, PromptMode.DYNAMIC_GT)]
            assert [r.phase_outcomes for r in a] == [r.phase_outcomes for r in b]

    def test_validation(self):
        with pytest.raises(ValueError):
            run_suite(EXAMPLE_SUITE, PromptMode.FIX, episodes=0)
        with pytest.raises(ValueError):
            run_suite([], PromptMode.FIX)


def stub_result(task_id, mode, reached_flags, step=10):
    outcomes = []
    for i, flag in enumerate(reached_flags):
        outcomes.append(
            PhaseOutcome(
                phase_index=i + 1,
                reached=flag,
                reached_step=step + i if flag else None,
            )
        )
    return CompositeEpisodeResult(
        task_id=task_id,
        mode=mode,
        phase_outcomes=tuple(outcomes),
        full_success=reached_flags[-1],
        prompt_history=(PromptEvent(step=1, phase_index=None, prompt="p"),),
    )


class TestAggregate:
    def test_unweighted_task_mean(self):
        mode = PromptMode.DYNAMIC_GT
        results = {
            ("A", mode): [
                stub_result("A", mode, [True, True]),
                stub_result("A", mode, [True, False]),
            ],
            ("B", mode): [
                stub_result("B", mode, [False, False]),
                stub_result("B", mode, [False, False]),
            ],
        }
        rates = aggregate_composite(results)[mode]
        assert rates.phase1 == 0.5  # mean(1.0, 0.0)
        assert rates.phase2 == 0.25
        assert rates.full_task == 0.25
        assert rates.to_dict() == {"phase1": 0.5, "phase2": 0.25, "full_task": 0.25}

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValueError):
            aggregate_composite({})
        results = {
            ("A", PromptMode.FIX): [stub_result("A", PromptMode.FIX, [True, True])],
            ("B", PromptMode.DYNAMIC_GT): [
                stub_result("B", PromptMode.DYNAMIC_GT, [True, True])
            ],
        }
        with pytest.raises(ValueError, match="empty cell"):
            aggregate_composite(results)

    def test_full_rates_from_run_suite(self):
        results = run_suite(EXAMPLE_SUITE, PromptMode.DYNAMIC_GT, episodes=10, base_seed=1)
        rates = aggregate_composite(results)[PromptMode.DYNAMIC_GT]
        assert 0.0 <= rates.full_task <= rates.phase1 <= 1.0


class TestSuiteFiles:
    def test_spec_dict_round_trip(self):
        d = spec_to_dict(THREE_PHASE)
        assert spec_from_dict(d) == THREE_PHASE

    def test_unknown_keys_rejected(self):
        d = spec_to_dict(THREE_PHASE)
        d["extra"] = 1
        with pytest.raises(ValueError):
            spec_from_dict(d)
        d2 = spec_to_dict(THREE_PHASE)
        d2["phases"][0]["bonus"] = 1
        with pytest.raises(ValueError):
            spec_from_dict(d2)

    def test_suite_file_round_trip(self, tmp_path):
        path = tmp_path / "suite.json"
        save_suite(EXAMPLE_SUITE, path)
        assert load_suite(path) == list(EXAMPLE_SUITE)
        doc = json.loads(path.read_text())
        assert set(doc) == {"tasks"}

    def test_duplicate_task_ids_rejected(self, tmp_path):
        path = tmp_path / "suite.json"
        save_suite([THREE_PHASE, THREE_PHASE], path)
        with pytest.raises(ValueError, match="duplicate"):
            load_suite(path)

    def test_example_suite_shape(self):
        assert len(EXAMPLE_SUITE) == 3
        assert all(len(s.phases) >= 2 for s in EXAMPLE_SUITE)
        ids = [s.task_id for s in EXAMPLE_SUITE]
        assert len(set(ids)) == 3
