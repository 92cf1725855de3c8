import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arca import pipeline
from arca.embed import OfflineHashingEmbedder
from arca.errors import (
    BudgetTooSmall,
    ConfigError,
    DataError,
    MissingResolution,
    ProviderUnavailable,
    UnparseableVerdict,
)
from arca.kb import KnowledgeBase
from arca.logproc import RuleBasedExtractor
from arca.pipeline import (
    Candidate,
    IncidentQuery,
    TriageSet,
    TriageStage,
    answer_incident,
    assemble_judge_prompt,
    build_knowledge_base,
    generate_plan,
    judge,
    judge_offline,
    parse_judge_reply,
    prepare_query,
    refine_with_telemetry,
    triage,
)
from arca.providers import ChatResult
from arca.telemetry import TelemetrySeries


def make_series(scale):
    return tuple(
        TelemetrySeries(
            counter_id=name,
            samples=tuple((float(t), base + scale * t) for t in range(25)),
        )
        for name, base in (("cpu_util", 20.0), ("mem_util", 50.0))
    )


def make_kb(n=10, dim=512, with_telemetry=True):
    ex = RuleBasedExtractor()
    em = OfflineHashingEmbedder(dim, seed=0)
    kb = KnowledgeBase(embedding_dimension=dim)
    for i in range(n):
        kb.ingest_ticket(
            f"bug-{i:03d}",
            description=f"incident {i}: shard {i} degraded",
            resolution=f"rebalanced shard {i}",
            raw_log=(
                f"2024-01-01T00:00:00Z ERROR app: shard {i} overloaded fault-{i}\n"
                f"2024-01-01T00:00:01Z WARN app: queue depth {i * 17}\n"
            ),
            telemetry_series=list(make_series(0.5 + i)) if with_telemetry else None,
            extractor=ex,
            embedder=em,
        )
    kb.build_index(seed=0)
    return kb, ex, em


def query_for(i=0, telemetry=True):
    return IncidentQuery(
        description="new incident",
        raw_log=(
            f"2024-01-01T00:00:00Z ERROR app: shard {i} overloaded fault-{i}\n"
            f"2024-01-01T00:00:01Z WARN app: queue depth 999\n"
        ),
        telemetry_series=make_series(0.5 + i) if telemetry else None,
    )


class ScriptedProvider:
    remote = True

    def __init__(self, replies, tag="scripted"):
        self.replies = list(replies)
        self.tag = tag
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return ChatResult(text=reply, tokens_in=100, tokens_out=20)


class TestTriage:
    def test_returns_log_only_stage_in_order(self):
        kb, ex, em = make_kb()
        ts = triage(kb, query_for(3), 5, extractor=ex, embedder=em)
        assert ts.stage is TriageStage.LOG_ONLY
        assert len(ts) == 5
        scores = [c.log_score for c in ts]
        assert scores == sorted(scores, reverse=True)

    def test_no_duplicate_ids(self):
        kb, ex, em = make_kb()
        ts = triage(kb, query_for(1), 10, extractor=ex, embedder=em)
        assert len(set(ts.bug_ids())) == len(ts)

    def test_raw_query_needs_components(self):
        kb, _, _ = make_kb()
        with pytest.raises(ConfigError):
            triage(kb, query_for(0), 5)

    def test_prepared_query_searches_directly(self):
        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(2), extractor=ex, embedder=em)
        ts = triage(kb, prepared, 5)
        assert len(ts) == 5


class TestRefine:
    def test_cardinality_is_ceil(self):
        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(4), extractor=ex, embedder=em)
        first = triage(kb, prepared, 10)
        for retain in (0.1, 0.25, 0.5, 0.8, 1.0):
            refined = refine_with_telemetry(
                kb, first, prepared.telemetry_vector, retain
            )
            assert len(refined) == math.ceil(retain * len(first))
            assert refined.stage is TriageStage.REFINED

    @given(
        n=st.integers(min_value=1, max_value=40),
        retain=st.floats(
            min_value=0.01, max_value=1.0, allow_nan=False, exclude_min=False
        ),
    )
    @settings(max_examples=80, deadline=None)
    def test_cardinality_property(self, n, retain):
        kb, ex, em = self._kb40()
        prepared = prepare_query(query_for(0), extractor=ex, embedder=em)
        first = triage(kb, prepared, n)
        refined = refine_with_telemetry(kb, first, prepared.telemetry_vector, retain)
        assert len(refined) == math.ceil(retain * len(first))

    _cache = {}

    @classmethod
    def _kb40(cls):
        if "kb" not in cls._cache:
            cls._cache["kb"] = make_kb(40)
        return cls._cache["kb"]

    def test_refined_subset_of_first_round(self):
        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(4), extractor=ex, embedder=em)
        first = triage(kb, prepared, 8)
        refined = refine_with_telemetry(kb, first, prepared.telemetry_vector, 0.5)
        assert set(refined.bug_ids()) <= set(first.bug_ids())

    def test_sorted_by_telemetry_scored_above_unscored(self):
        kb, ex, em = make_kb(n=8)
        # Strip telemetry from two stored tickets.
        kb.telemetry.pop("bug-001")
        kb.telemetry.pop("bug-002")
        kb.stats = None
        prepared = prepare_query(query_for(3), extractor=ex, embedder=em)
        first = triage(kb, prepared, 8)
        refined = refine_with_telemetry(kb, first, prepared.telemetry_vector, 1.0)
        scores = [c.telemetry_score for c in refined]
        seen_none = False
        prev = math.inf
        for s in scores:
            if s is None:
                seen_none = True
            else:
                assert not seen_none, "scored candidate after unscored one"
                assert s <= prev + 1e-12
                prev = s

    def test_query_without_telemetry_skips(self, caplog):
        import logging

        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(1, telemetry=False), extractor=ex, embedder=em)
        first = triage(kb, prepared, 6)
        with caplog.at_level(logging.INFO, logger="arca.pipeline"):
            refined = refine_with_telemetry(kb, first, prepared.telemetry_vector, 0.5)
        assert refined is first
        assert refined.stage is TriageStage.LOG_ONLY
        assert any("skipped" in r.message for r in caplog.records)

    def test_kb_without_telemetry_skips(self):
        kb, ex, em = make_kb(with_telemetry=False)
        prepared = prepare_query(query_for(1), extractor=ex, embedder=em)
        first = triage(kb, prepared, 6)
        refined = refine_with_telemetry(kb, first, prepared.telemetry_vector, 0.5)
        assert refined is first

    def test_bad_retain_rejected(self):
        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(1), extractor=ex, embedder=em)
        first = triage(kb, prepared, 6)
        for bad in (0.0, -0.5, 1.5):
            with pytest.raises(ConfigError):
                refine_with_telemetry(kb, first, prepared.telemetry_vector, bad)

    def test_accepts_raw_series(self):
        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(2), extractor=ex, embedder=em)
        first = triage(kb, prepared, 6)
        a = refine_with_telemetry(kb, first, prepared.telemetry_vector, 0.5)
        b = refine_with_telemetry(kb, first, list(make_series(2.5)), 0.5)
        assert a.bug_ids() == b.bug_ids()


class TestAssemble:
    def test_prompt_contains_numbered_candidates(self):
        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(0), extractor=ex, embedder=em)
        first = triage(kb, prepared, 4)
        bundle = assemble_judge_prompt(prepared, first, kb)
        assert "Candidate 1 " in bundle.text
        assert "Candidate 4 " in bundle.text
        assert bundle.included_count == 4
        assert bundle.token_estimate <= bundle.token_budget

    def test_budget_drops_tail_candidates(self):
        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(0), extractor=ex, embedder=em)
        first = triage(kb, prepared, 10)
        full = assemble_judge_prompt(prepared, first, kb, token_budget=30000)
        tight_budget = full.token_estimate - 50
        tight = assemble_judge_prompt(prepared, first, kb, token_budget=tight_budget)
        assert tight.included_count < full.included_count
        assert tight.candidate_ids == full.candidate_ids[: tight.included_count]
        assert tight.token_estimate <= tight_budget

    def test_budget_too_small(self):
        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(0), extractor=ex, embedder=em)
        first = triage(kb, prepared, 5)
        with pytest.raises(BudgetTooSmall):
            assemble_judge_prompt(prepared, first, kb, token_budget=10)

    def test_empty_candidates_rejected(self):
        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(0), extractor=ex, embedder=em)
        with pytest.raises(DataError):
            assemble_judge_prompt(prepared, [], kb)

    def test_unknown_candidate_rejected(self):
        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(0), extractor=ex, embedder=em)
        with pytest.raises(DataError):
            assemble_judge_prompt(
                prepared, [Candidate(bug_id="ghost", log_score=1.0)], kb
            )


class TestOfflineJudge:
    def test_picks_highest_mean(self):
        cands = [
            Candidate("a", log_score=0.9, telemetry_score=0.1),  # mean 0.5
            Candidate("b", log_score=0.6, telemetry_score=0.8),  # mean 0.7
            Candidate("c", log_score=0.4, telemetry_score=0.5),  # mean 0.45
        ]
        verdict = judge_offline(cands)
        assert verdict.chosen == "b"
        assert verdict.candidate_index == 1
        assert verdict.candidates_considered == 3

    def test_rationale_walks_the_scores(self):
        cands = [
            Candidate("a", log_score=0.9, telemetry_score=0.1),
            Candidate("b", log_score=0.6, telemetry_score=0.8),
        ]
        verdict = judge_offline(cands)
        assert "Candidate 1" in verdict.rationale
        assert "Candidate 2" in verdict.rationale
        assert "0.9000" in verdict.rationale
        assert verdict.rationale.strip().endswith(
            "the closest prior incident is b."
        )

    def test_log_only_mode(self):
        cands = [
            Candidate("a", log_score=0.9, telemetry_score=0.0),
            Candidate("b", log_score=0.5, telemetry_score=1.0),
        ]
        verdict = judge_offline(cands, use_telemetry=False)
        assert verdict.chosen == "a"
        assert "log" in verdict.provider_tag

    def test_missing_telemetry_uses_log_alone(self):
        cands = [
            Candidate("a", log_score=0.4, telemetry_score=None),
            Candidate("b", log_score=0.5, telemetry_score=0.1),  # mean 0.3
        ]
        assert judge_offline(cands).chosen == "a"

    def test_tie_keeps_rank_order(self):
        cands = [
            Candidate("z-first", log_score=0.5, telemetry_score=0.5),
            Candidate("a-second", log_score=0.5, telemetry_score=0.5),
        ]
        assert judge_offline(cands).chosen == "z-first"

    def test_no_modalities_rejected(self):
        with pytest.raises(ConfigError):
            judge_offline([Candidate("a", 0.5)], use_log=False, use_telemetry=False)

    def test_no_candidates_rejected(self):
        with pytest.raises(DataError):
            judge_offline([])


class TestParseReply:
    def test_parses_final_line(self):
        assert parse_judge_reply("thinking...\nANSWER: 2\n", 3) == 1

    def test_whitespace_tolerated(self):
        assert parse_judge_reply("ANSWER:   3   \n\n", 3) == 2

    @pytest.mark.parametrize(
        "reply",
        [
            "",
            "no answer here",
            "ANSWER: zero",
            "ANSWER: 2 maybe",
            "ANSWER: 0",
            "ANSWER: 4",
            "ANSWER: 2\ntrailing prose after the answer",
        ],
    )
    def test_rejects_malformed(self, reply):
        with pytest.raises(UnparseableVerdict):
            parse_judge_reply(reply, 3)


class TestRemoteJudge:
    def _fixture(self):
        kb, ex, em = make_kb()
        prepared = prepare_query(query_for(0), extractor=ex, embedder=em)
        first = triage(kb, prepared, 3)
        bundle = assemble_judge_prompt(prepared, first, kb)
        return kb, first, bundle

    def test_remote_verdict_used(self):
        kb, first, bundle = self._fixture()
        provider = ScriptedProvider(["Candidate 2 matches best.\nANSWER: 2"])
        calls = []
        verdict = judge(first, bundle, provider, calls)
        assert verdict.chosen == first.candidates[1].bug_id
        assert verdict.provider_tag == "scripted"
        assert not verdict.fallback
        assert verdict.rationale.startswith("Candidate 2 matches best.")
        assert len(calls) == 1 and calls[0].remote

    def test_retry_once_then_success(self):
        kb, first, bundle = self._fixture()
        provider = ScriptedProvider(["no parseable verdict", "ANSWER: 1"])
        verdict = judge(first, bundle, provider)
        assert verdict.chosen == first.candidates[0].bug_id
        assert len(provider.prompts) == 2
        assert "ANSWER: <candidate number>" in provider.prompts[1]

    def test_two_failures_fall_back_offline(self):
        kb, first, bundle = self._fixture()
        provider = ScriptedProvider(["garbled", "still garbled"])
        verdict = judge(first, bundle, provider)
        assert verdict.fallback
        assert "unusable" in verdict.note
        assert verdict.chosen in first

    def test_provider_error_falls_back(self):
        kb, first, bundle = self._fixture()
        provider = ScriptedProvider([ProviderUnavailable("down")])
        verdict = judge(first, bundle, provider)
        assert verdict.fallback
        assert "provider failed" in verdict.note

    def test_bundle_mismatch_rejected(self):
        kb, first, bundle = self._fixture()
        provider = ScriptedProvider(["ANSWER: 1"])
        with pytest.raises(DataError):
            judge(list(first)[:-1], bundle, provider)

    def test_remote_needs_bundle(self):
        kb, first, _ = self._fixture()
        with pytest.raises(ConfigError):
            judge(first, None, ScriptedProvider(["ANSWER: 1"]))


class TestPlan:
    def _verdict(self, kb, ex, em):
        prepared = prepare_query(query_for(1), extractor=ex, embedder=em)
        first = triage(kb, prepared, 3)
        return prepared, judge_offline(first)

    def test_offline_template(self):
        kb, ex, em = make_kb()
        prepared, verdict = self._verdict(kb, ex, em)
        plan = generate_plan(prepared, verdict, kb)
        assert plan.source_bug == verdict.chosen
        assert f"Closest prior incident {verdict.chosen}" in plan.plan_text
        resolution = kb.descriptions[verdict.chosen].resolution_text
        assert resolution in plan.plan_text

    def test_missing_resolution(self):
        kb, ex, em = make_kb()
        prepared, verdict = self._verdict(kb, ex, em)
        record = kb.descriptions[verdict.chosen]
        import dataclasses

        kb.descriptions[verdict.chosen] = dataclasses.replace(
            record, resolution_text=""
        )
        with pytest.raises(MissingResolution):
            generate_plan(prepared, verdict, kb)

    def test_remote_plan_records_provenance(self):
        kb, ex, em = make_kb()
        prepared, verdict = self._verdict(kb, ex, em)
        provider = ScriptedProvider(["1. restart\n2. watch dashboards"])
        calls = []
        plan = generate_plan(prepared, verdict, kb, provider, calls)
        assert plan.plan_text.startswith("1. restart")
        assert plan.provider_tag == "scripted"
        assert len(plan.provenance) == 1
        assert plan.provenance[0].stage == "plan"
        assert calls == [plan.provenance[0]]


class TestAnswerIncident:
    def test_end_to_end_offline(self):
        kb, ex, em = make_kb()
        answer = answer_incident(
            kb, query_for(5), extractor=ex, embedder=em, K=8, retain_fraction=0.8
        )
        assert answer.verdict.chosen in answer.triage
        assert answer.plan.source_bug == answer.verdict.chosen
        assert answer.triage.stage is TriageStage.REFINED
        assert not answer.refinement_skipped
        assert len(answer.first_round) == 8
        assert len(answer.triage) == math.ceil(0.8 * 8)
        assert answer.prompt.token_estimate <= answer.prompt.token_budget
        assert answer.query_digest

    def test_stage_timings_all_positive(self):
        kb, ex, em = make_kb()
        answer = answer_incident(kb, query_for(2), extractor=ex, embedder=em, K=5)
        expected = {"prepare", "first_round", "refine", "assemble", "judge", "plan"}
        assert set(answer.stage_seconds) == expected
        assert all(v > 0.0 for v in answer.stage_seconds.values())

    def test_deterministic_offline(self):
        kb, ex, em = make_kb()
        a = answer_incident(kb, query_for(3), extractor=ex, embedder=em, K=6)
        b = answer_incident(kb, query_for(3), extractor=ex, embedder=em, K=6)
        assert a.verdict.chosen == b.verdict.chosen
        assert a.plan.plan_text == b.plan.plan_text
        assert [c.bug_id for c in a.triage] == [c.bug_id for c in b.triage]
        assert [c.log_score for c in a.first_round] == [
            c.log_score for c in b.first_round
        ]

    def test_query_without_telemetry_sets_skip_flag(self):
        kb, ex, em = make_kb()
        answer = answer_incident(
            kb, query_for(1, telemetry=False), extractor=ex, embedder=em, K=5
        )
        assert answer.refinement_skipped
        assert answer.triage.stage is TriageStage.LOG_ONLY
        assert len(answer.triage) == 5

    def test_cost_arithmetic(self):
        kb, ex, em = make_kb()
        judge_p = ScriptedProvider(["ANSWER: 1"], tag="judge-model")
        plan_p = ScriptedProvider(["do the thing"], tag="plan-model")
        prices = {"judge-model": (2e-6, 4e-6), "plan-model": (1e-6, 3e-6)}
        answer = answer_incident(
            kb,
            query_for(2),
            extractor=ex,
            embedder=em,
            K=5,
            judge_provider=judge_p,
            plan_provider=plan_p,
            prices=prices,
        )
        want = 0.0
        for call in answer.cost.calls:
            pin, pout = prices.get(call.provider_tag, (0.0, 0.0))
            want += call.tokens_in * pin + call.tokens_out * pout
        assert answer.cost.estimated_cost == pytest.approx(want)
        assert answer.cost.remote_calls == 2
        assert answer.cost.tokens_in >= 200  # two scripted calls at 100 each
        assert answer.plan.provenance == tuple(answer.cost.calls)

    def test_config_path(self):
        from arca.config import ArcaConfig

        kb, ex, em = make_kb()
        cfg = ArcaConfig()
        cfg.embedding.dimension = 512
        cfg.pipeline.k = 6
        cfg.validate()
        answer = answer_incident(kb, query_for(4), cfg)
        assert len(answer.first_round) == 6
        explicit = answer_incident(
            kb, query_for(4), extractor=ex, embedder=em, K=6,
            nprobe=None, retain_fraction=0.8,
        )
        assert answer.verdict.chosen == explicit.verdict.chosen

    def test_needs_extractor_and_embedder(self):
        kb, _, _ = make_kb()
        with pytest.raises(ConfigError):
            answer_incident(kb, query_for(0))

    def test_exception_carries_stage(self):
        kb, ex, em = make_kb()
        try:
            answer_incident(
                kb, query_for(0), extractor=ex, embedder=em, K=5, token_budget=5
            )
        except BudgetTooSmall as exc:
            assert exc.stage == "assemble"
        else:
            pytest.fail("expected BudgetTooSmall")


class TestBuildKnowledgeBase:
    def test_builds_with_index(self, small_corpus, extractor, embedder):
        kb = build_knowledge_base(
            small_corpus[:16], extractor=extractor, embedder=embedder
        )
        assert len(kb) == 16
        assert kb.index is not None
        assert not kb.index_stale
        some = small_corpus[0]
        assert kb.descriptions[some.bug_id].labels == some.labels
