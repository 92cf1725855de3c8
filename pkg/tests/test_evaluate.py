"""Evaluation harness: corpus splitting, accuracy metrics, ablations,
log-clustering detection scores.

The knn tie-handling test plants an exact similarity structure: unit
vectors are built by Cholesky-factoring a hand-chosen Gram matrix, so
every pairwise score (and thus every neighbor ranking and vote) is
known in advance and the expected confusion counts can be computed by
hand.
"""
from __future__ import annotations

import json

import numpy as np
import pytest

from arca.config import ArcaConfig
from arca.errors import (
    ConfigError,
    DataError,
    DegenerateLabels,
    InfeasibleSplit,
)
from arca.evaluate import (
    ClusteringReport,
    QueryOutcome,
    build_modality_fixture,
    eval_log_clustering,
    eval_modalities,
    eval_system,
    eval_triage,
    run_eval,
    split_corpus,
    system_run,
    triage_outcomes,
)
from arca.pipeline import build_knowledge_base


@pytest.fixture(scope="module")
def split(small_corpus):
    return split_corpus(small_corpus, build_n=48, test_n=16, seed=0)


@pytest.fixture(scope="module")
def eval_kb(split, extractor, embedder):
    build, _ = split
    return build_knowledge_base(build, extractor=extractor, embedder=embedder, seed=0)


class TestSplitCorpus:
    def test_sizes_disjoint_and_sorted(self, split):
        build, test = split
        assert len(build) == 48
        assert len(test) == 16
        build_ids = [t.bug_id for t in build]
        test_ids = [t.bug_id for t in test]
        assert not set(build_ids) & set(test_ids)
        assert build_ids == sorted(build_ids)
        assert test_ids == sorted(test_ids)

    def test_every_test_twin_lands_in_build(self, split):
        build, test = split
        build_ids = {t.bug_id for t in build}
        for ticket in test:
            assert ticket.labels["closest_bug_id"] in build_ids

    def test_deterministic_under_seed(self, small_corpus):
        a = split_corpus(small_corpus, 40, 12, seed=5)
        b = split_corpus(small_corpus, 40, 12, seed=5)
        assert [t.bug_id for t in a[0]] == [t.bug_id for t in b[0]]
        assert [t.bug_id for t in a[1]] == [t.bug_id for t in b[1]]
        c = split_corpus(small_corpus, 40, 12, seed=6)
        assert [t.bug_id for t in a[1]] != [t.bug_id for t in c[1]]

    def test_duplicate_ids_rejected(self, small_corpus):
        with pytest.raises(InfeasibleSplit):
            split_corpus(small_corpus + [small_corpus[0]], 10, 4)

    @pytest.mark.parametrize(
        "build_n,test_n",
        [
            (-1, 4),  # negative build
            (10, 0),  # no queries
            (60, 10),  # more tickets than exist
            (31, 33),  # more pairs than exist
            (5, 10),  # twins cannot fit in the build set
        ],
    )
    def test_infeasible_requests(self, small_corpus, build_n, test_n):
        with pytest.raises(InfeasibleSplit):
            split_corpus(small_corpus, build_n, test_n)


class TestTriageAndSystem:
    def test_outcomes_align_with_queries(self, eval_kb, split, extractor, embedder):
        _, test = split
        outcomes = triage_outcomes(
            eval_kb, test, K=16, extractor=extractor, embedder=embedder
        )
        assert [o.bug_id for o in outcomes] == [t.bug_id for t in test]
        for outcome, ticket in zip(outcomes, test):
            assert outcome.expected == ticket.labels["closest_bug_id"]
            assert isinstance(outcome.retrieved, bool)

    def test_full_k_and_full_retention_recall_everything(
        self, eval_kb, split, extractor, embedder
    ):
        _, test = split
        accuracy = eval_triage(
            eval_kb,
            test,
            K=len(eval_kb),
            extractor=extractor,
            embedder=embedder,
            nprobe=eval_kb.require_index().n_clusters,
            retain_fraction=1.0,
        )
        assert accuracy == 1.0

    def test_system_never_beats_triage(self, eval_kb, split, extractor, embedder):
        _, test = split
        kwargs = dict(extractor=extractor, embedder=embedder)
        triage = eval_triage(eval_kb, test, K=16, **kwargs)
        system = eval_system(eval_kb, test, K=16, **kwargs)
        assert 0.0 <= system <= triage <= 1.0

    def test_system_run_carries_bookkeeping(self, eval_kb, split, extractor, embedder):
        _, test = split
        run = system_run(
            eval_kb, test[:4], K=16, extractor=extractor, embedder=embedder
        )
        assert len(run.outcomes) == 4
        assert all(o.chosen is not None for o in run.outcomes)
        assert run.remote_calls == 0
        assert run.mean_cost == 0.0
        assert run.mean_time > 0.0
        assert set(run.stage_seconds) == {
            "prepare",
            "first_round",
            "refine",
            "assemble",
            "judge",
            "plan",
        }

    def test_offline_repeats_collapse_to_one_pass(
        self, eval_kb, split, extractor, embedder
    ):
        _, test = split
        kwargs = dict(extractor=extractor, embedder=embedder)
        once = eval_system(eval_kb, test[:6], K=16, repeats=1, **kwargs)
        thrice = eval_system(eval_kb, test[:6], K=16, repeats=3, **kwargs)
        assert once == thrice

    def test_bad_repeats_rejected(self, eval_kb, split, extractor, embedder):
        _, test = split
        with pytest.raises(ConfigError):
            eval_system(
                eval_kb, test, K=16, repeats=0, extractor=extractor, embedder=embedder
            )

    def test_no_queries_rejected(self, eval_kb, extractor, embedder):
        with pytest.raises(DataError):
            triage_outcomes(eval_kb, [], K=16, extractor=extractor, embedder=embedder)

    def test_dimension_mismatch_rejected(self, eval_kb, split, extractor):
        from arca.embed import OfflineHashingEmbedder

        _, test = split
        with pytest.raises(ConfigError):
            eval_triage(
                eval_kb,
                test,
                K=16,
                extractor=extractor,
                embedder=OfflineHashingEmbedder(256, seed=0),
            )


@pytest.fixture(scope="module")
def report(eval_kb, split, extractor, embedder):
    _, test = split
    config = ArcaConfig()
    config.pipeline.k = 8
    config.eval.ks = [4, 16]
    return run_eval(
        eval_kb, test, config=config, extractor=extractor, embedder=embedder
    )


class TestRunEval:
    def test_rows_cover_requested_and_headline_ks(self, report):
        assert [row.k for row in report.per_k] == [4, 8, 16]

    def test_headline_matches_configured_k_row(self, report):
        row = next(r for r in report.per_k if r.k == 8)
        assert report.triage_accuracy == row.triage_accuracy
        assert report.system_accuracy == row.system_accuracy

    def test_wider_first_round_never_hurts_triage(self, report):
        accs = [row.triage_accuracy for row in report.per_k]
        assert all(b >= a for a, b in zip(accs, accs[1:]))

    def test_report_serializes_to_json(self, report):
        payload = json.loads(json.dumps(report.to_dict()))
        assert payload["n_queries"] == 16
        assert payload["repeats"] == 1
        assert len(payload["per_k"]) == 3
        assert payload["triage_accuracy"] == report.triage_accuracy

    def test_table_is_human_readable(self, report):
        table = report.table()
        assert "triage" in table
        assert "system" in table
        for row in report.per_k:
            assert f"{row.k}" in table


@pytest.fixture(scope="module")
def fixture_report(extractor, embedder):
    build, queries = build_modality_fixture()
    kb = build_knowledge_base(build, extractor=extractor, embedder=embedder, seed=0)
    return eval_modalities(kb, queries, extractor=extractor, embedder=embedder)


class TestModalities:
    def test_fixture_shape(self):
        build, queries = build_modality_fixture()
        assert len(build) == 24
        assert len(queries) == 12
        build_ids = {t.bug_id for t in build}
        for query in queries:
            assert query.labels["closest_bug_id"] in build_ids
        again = build_modality_fixture()
        assert [t.bug_id for t in again[0]] == [t.bug_id for t in build]
        assert again[0][0].raw_log == build[0].raw_log

    def test_row_order_and_lookup(self, fixture_report):
        assert [row.mode for row in fixture_report.rows] == [
            "telemetry_only",
            "log_only",
            "combined",
        ]
        for row in fixture_report.rows:
            assert fixture_report.accuracy(row.mode) == row.accuracy
        with pytest.raises(KeyError):
            fixture_report.accuracy("hologram_only")

    def test_fixture_separates_the_modalities(self, fixture_report):
        telemetry = fixture_report.accuracy("telemetry_only")
        log = fixture_report.accuracy("log_only")
        combined = fixture_report.accuracy("combined")
        assert combined > log
        assert telemetry < log
        # Pinned values: the fixture is engineered so each signal alone
        # is ambiguous and only the combination resolves every query.
        assert combined == 1.0
        assert log == 0.5
        assert telemetry == 0.25

    def test_to_dict_round_trip(self, fixture_report):
        payload = json.loads(json.dumps(fixture_report.to_dict()))
        assert list(payload) == ["telemetry_only", "log_only", "combined"]
        for mode, entry in payload.items():
            assert entry["accuracy"] == fixture_report.accuracy(mode)


def _marker_log(word: str) -> str:
    return f"2024-01-01T00:00:00Z ERROR svc: {word} failed\n"


class _PlantedEmbedder:
    """Returns a fixed unit vector per marker word, realizing an exact,
    hand-chosen cosine-similarity matrix."""

    remote = False
    tag = "planted"

    def __init__(self, words, gram):
        self.words = list(words)
        self.vectors = np.linalg.cholesky(np.asarray(gram, dtype=np.float64))
        self.dimension = self.vectors.shape[1]

    def embed_text(self, text: str) -> np.ndarray:
        for i, word in enumerate(self.words):
            if word in text:
                return self.vectors[i].copy()
        raise AssertionError(f"unexpected text {text!r}")


class TestLogClustering:
    def test_perfect_separation_on_simulator_logs(self, small_corpus):
        logs = [
            (t.raw_log, t.labels["fault_category"])
            for t in small_corpus
            if t.labels["run_index"] == 0 and t.labels["config_id"] < 3
        ]
        assert len(logs) == 12
        report = eval_log_clustering(logs, k_neighbors=3)
        # All four labels are equally frequent; the default positive
        # label breaks the tie lexicographically.
        assert report.positive_label == "cpu_overload"
        assert report.f1 == 1.0
        assert report.precision == 1.0
        assert report.recall == 1.0
        assert (
            report.true_positive
            + report.false_positive
            + report.false_negative
            + report.true_negative
            == report.n_items
            == 12
        )

    def test_metric_identities_hold(self, small_corpus):
        logs = [
            (t.raw_log, t.labels["fault_category"])
            for t in small_corpus
            if t.labels["config_id"] < 2
        ]
        for k in (1, 2, 5):
            report = eval_log_clustering(logs, k_neighbors=k, positive_label="net_delay")
            tp, fp, fn = report.true_positive, report.false_positive, report.false_negative
            expected_p = tp / (tp + fp) if tp + fp else 0.0
            expected_r = tp / (tp + fn) if tp + fn else 0.0
            assert report.precision == pytest.approx(expected_p)
            assert report.recall == pytest.approx(expected_r)
            if report.precision + report.recall:
                assert report.f1 == pytest.approx(
                    2
                    * report.precision
                    * report.recall
                    / (report.precision + report.recall)
                )
            else:
                assert report.f1 == 0.0

    def test_vote_ties_go_to_the_nearest_voter(self):
        # Gram matrix chosen so that with k=2 every item's two voters
        # disagree; the nearest voter then decides. Expected confusion,
        # worked by hand from the similarities: tp=1 fp=1 fn=1 tn=1.
        words = ["markeralpha", "markerbeta", "markergamma", "markerdelta"]
        gram = [
            [1.0, 0.8, 0.6, 0.0],
            [0.8, 1.0, 0.2, 0.3],
            [0.6, 0.2, 1.0, 0.0],
            [0.0, 0.3, 0.0, 1.0],
        ]
        labeled = [
            (_marker_log(words[0]), "a"),
            (_marker_log(words[1]), "b"),
            (_marker_log(words[2]), "a"),
            (_marker_log(words[3]), "b"),
        ]
        report = eval_log_clustering(
            labeled, k_neighbors=2, embedder=_PlantedEmbedder(words, gram)
        )
        assert report.positive_label == "a"  # 2-2 frequency tie, lexicographic
        assert (
            report.true_positive,
            report.false_positive,
            report.false_negative,
            report.true_negative,
        ) == (1, 1, 1, 1)
        assert report.f1 == pytest.approx(0.5)

    def test_least_frequent_label_is_the_default_positive(self):
        words = ["markeralpha", "markerbeta", "markergamma"]
        gram = np.eye(3).tolist()
        labeled = [
            (_marker_log(words[0]), "common"),
            (_marker_log(words[1]), "common"),
            (_marker_log(words[2]), "rare"),
        ]
        report = eval_log_clustering(
            labeled, k_neighbors=1, embedder=_PlantedEmbedder(words, gram)
        )
        assert report.positive_label == "rare"

    def test_degenerate_inputs_rejected(self, small_corpus):
        one = [(small_corpus[0].raw_log, "x")]
        with pytest.raises(DegenerateLabels):
            eval_log_clustering(one)
        same = [(t.raw_log, "x") for t in small_corpus[:4]]
        with pytest.raises(DegenerateLabels):
            eval_log_clustering(same)
        # A slice straddling two category blocks carries two labels.
        mixed = [(t.raw_log, t.labels["fault_category"]) for t in small_corpus[12:20]]
        assert len({label for _, label in mixed}) == 2
        with pytest.raises(DegenerateLabels):
            eval_log_clustering(mixed, positive_label="ghost")
        with pytest.raises(ConfigError):
            eval_log_clustering(mixed, k_neighbors=0)

    def test_report_to_dict_is_complete(self, small_corpus):
        logs = [
            (t.raw_log, t.labels["fault_category"]) for t in small_corpus[12:20]
        ]
        report = eval_log_clustering(logs, k_neighbors=1)
        payload = report.to_dict()
        for key in (
            "f1",
            "precision",
            "recall",
            "true_positive",
            "false_positive",
            "false_negative",
            "true_negative",
            "positive_label",
            "n_items",
        ):
            assert key in payload
        assert isinstance(ClusteringReport(**payload), ClusteringReport)
