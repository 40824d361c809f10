"""Text-metric tests against the brute-force oracles, plus judge-based
cas/usr behavior on scripted judges."""

from __future__ import annotations

import random

import pytest

from mocot.backend import ChatMessage, ScriptedMockBackend, canonical_request_key
from mocot.errors import JudgeParseError
from mocot.metrics import (
    CasRecord,
    EvalReport,
    SampleRow,
    accuracy,
    aggregate,
    bleu4,
    cas,
    rouge_l,
    select_counterfactual,
    tokenize,
    usr,
)
from mocot.prompts import load_prompt
from mockscripts import make_instance
from oracles import oracle_bleu4, oracle_rouge_l

# (candidate, reference) pairs with oracle values frozen below in the asserts.
METRIC_PAIRS = [
    ("the cat sat on the mat", "the cat sat on a mat"),
    ("a quick brown fox jumps over the lazy dog", "the quick brown fox jumped over a lazy dog"),
    ("the ladder made of people shows exploitation", "a ladder made of people symbolizes exploitation of workers"),
    ("warnings can contradict themselves and confuse readers", "the warnings contradict themselves, confusing careful readers"),
    ("he climbs over others to succeed", "success built on the pain of others"),
    ("two panels contrast hope and despair", "the two panels contrast hope with despair"),
    ("the cartoon mocks empty promises of progress", "this cartoon mocks the empty promise of progress"),
    ("a b d", "a b c d"),
    ("identical sentence with enough tokens here", "identical sentence with enough tokens here"),
    ("completely unrelated words appear", "different tokens entirely present"),
    ("the meme shows a cat pretending to work at a keyboard", "a cat pretends to work on the keyboard in the meme"),
    ("short", "short"),
]

# Oracle values computed by tests/oracles.py before the implementation existed.
FROZEN = [
    (0.537284965911771, 0.8333333333333334),
    (0.0, 0.6666666666666666),
    (0.32668286409255015, 0.6250000000000001),
    (0.0, 0.5714285714285714),
    (0.0, 0.15384615384615383),
    (0.4548019047027907, 0.7692307692307692),
    (0.0, 0.6666666666666666),
    (0.0, 0.8571428571428571),
    (1.0, 1.0),
    (0.0, 0.0),
    (0.0, 0.45454545454545453),
    (0.0, 1.0),
]


def test_tokenize_strips_punctuation_and_lowercases():
    assert tokenize("The cat, (smugly) sat!") == ["the", "cat", "smugly", "sat"]
    assert tokenize("  ") == []


@pytest.mark.parametrize("pair,frozen", list(zip(METRIC_PAIRS, FROZEN)))
def test_metrics_match_oracle(pair, frozen):
    candidate, reference = pair
    assert bleu4(candidate, reference) == pytest.approx(frozen[0], abs=1e-9)
    assert rouge_l(candidate, reference) == pytest.approx(frozen[1], abs=1e-9)
    # and the live oracle agrees with its own frozen value
    assert oracle_bleu4(candidate, reference) == pytest.approx(frozen[0], abs=1e-12)
    assert oracle_rouge_l(candidate, reference) == pytest.approx(frozen[1], abs=1e-12)


def test_rouge_l_lcs_case():
    # LCS("a b d", "a b c d") = 3 -> P = 1, R = 3/4, F1 = 6/7
    assert rouge_l("a b d", "a b c d") == pytest.approx(6 / 7, abs=1e-12)


def test_identity_and_bounds_properties():
    rng = random.Random(9)
    words = ["sign", "cat", "ladder", "panel", "joke", "symbol", "story", "reads"]
    for _ in range(50):
        sentence = " ".join(rng.choices(words, k=rng.randint(4, 9)))
        assert bleu4(sentence, sentence) == pytest.approx(1.0)
        assert rouge_l(sentence, sentence) == pytest.approx(1.0)
        other = " ".join(rng.choices(words, k=rng.randint(4, 9)))
        assert 0.0 <= bleu4(sentence, other) <= 1.0
        assert 0.0 <= rouge_l(sentence, other) <= 1.0
        # whitespace invariance
        assert bleu4("  " + sentence + " \n", other) == bleu4(sentence, other)
        assert rouge_l(sentence + "\t", other) == rouge_l(sentence, other)


def test_rouge_recall_precision_symmetry():
    # recall of (c, r) equals precision of (r, c): both are LCS / len(r)
    c, r = "a b d e", "a b c d"
    lcs_cr = rouge_l(c, r)
    # derive components directly
    from mocot.metrics import _lcs_length

    lcs = _lcs_length(tokenize(c), tokenize(r))
    assert lcs / len(tokenize(r)) == pytest.approx(_lcs_length(tokenize(r), tokenize(c)) / len(tokenize(r)))
    assert lcs_cr > 0


def test_bleu_disjoint_tokens_zero():
    assert bleu4("alpha beta gamma delta", "one two three four") == 0.0


def test_accuracy():
    assert accuracy(["A", "B"], ["A", "B"]) == 1.0
    assert accuracy(["A", "B"], ["A", "C"]) == 0.5
    assert accuracy(["(a)", "b."], ["A", "B"]) == 1.0
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy(["A"], ["A", "B"])


# --- counterfactual selection ---------------------------------------------------------

def test_counterfactual_next_label_cyclic():
    options = ("A", "B", "C", "D")
    assert select_counterfactual("B", options) == "C"
    assert select_counterfactual("D", options) == "A"


def test_counterfactual_seeded_random_deterministic():
    options = ("A", "B", "C", "D")
    picks = {select_counterfactual("B", options, "seeded-random", random.Random(5)) for _ in range(3)}
    again = select_counterfactual("B", options, "seeded-random", random.Random(5))
    assert all(p != "B" for p in picks)
    assert again in options and again != "B"
    assert select_counterfactual("B", options, "seeded-random", random.Random(5)) == again


def test_counterfactual_single_option_error():
    with pytest.raises(ValueError):
        select_counterfactual("A", ("A",))


# --- judge-backed metrics ----------------------------------------------------------------

def judge_backend_for(instance, rationale, judgments, usr_payload=None):
    """Script the judge: one entry per (claimed label -> judgment payload)."""
    from mocot.metrics import _judge_user_message

    entries = []
    for claimed, payload in judgments.items():
        messages = [
            ChatMessage.text("system", load_prompt("judge_cas")),
            _judge_user_message(instance, f"Claimed answer: {claimed}\nRationale: {rationale}"),
        ]
        entries.append(
            {"key": canonical_request_key(messages), "response": payload, "finish_reason": "stop"}
        )
    if usr_payload is not None:
        messages = [
            ChatMessage.text("system", load_prompt("judge_usr")),
            _judge_user_message(instance, f"Rationale: {rationale}"),
        ]
        entries.append(
            {"key": canonical_request_key(messages), "response": usr_payload, "finish_reason": "stop"}
        )
    return ScriptedMockBackend(entries)


def entailment_payload(entails, confidence=0.9, support=("span",), counter=()):
    import json

    return json.dumps(
        {
            "entails": entails,
            "confidence": confidence,
            "support_spans": list(support),
            "counter_spans": list(counter),
        }
    )


@pytest.mark.parametrize(
    "e_plus,e_minus,expected",
    [(1, 0, 1), (1, 1, 0), (0, 0, 0), (0, 1, 0)],
)
def test_cas_conjunction_rule(e_plus, e_minus, expected):
    instance = make_instance()
    rationale = "the sign contradicts itself"
    judge = judge_backend_for(
        instance,
        rationale,
        {"B": entailment_payload(e_plus), "C": entailment_payload(e_minus)},
    )
    record = cas(instance, "B", rationale, judge)
    assert record.counterfactual == "C"
    assert record.cas == expected
    assert (record.entails_predicted, record.entails_counterfactual) == (e_plus, e_minus)


def test_cas_record_invariant_enforced():
    with pytest.raises(ValueError):
        CasRecord("C", 1, 0, 0, 0.5, (), ())


def test_cas_judge_parse_failure_raises():
    instance = make_instance()
    rationale = "r"
    judge = judge_backend_for(instance, rationale, {"B": "not json at all"})
    with pytest.raises(JudgeParseError):
        cas(instance, "B", rationale, judge)


def usr_payload(flags, texts=None, judge_usr=None, pad_from=None):
    import json

    claims = []
    for i, flag in enumerate(flags, start=1):
        text = texts[i - 1] if texts else f"claim {i}"
        claims.append({"id": i, "t": text, "u": flag})
    payload = {"claims": claims}
    payload["USR"] = judge_usr if judge_usr is not None else sum(flags) / 5
    return json.dumps(payload)


def test_usr_formula():
    instance = make_instance()
    judge = judge_backend_for(instance, "r", {}, usr_payload([1, 0, 0, 1, 0]))
    result = usr(instance, "r", judge)
    assert result.usr == pytest.approx(0.4)
    assert len(result.claims) == 5
    assert not result.disagreement


def test_usr_all_grounded():
    instance = make_instance()
    judge = judge_backend_for(instance, "r", {}, usr_payload([0, 0, 0, 0, 0]))
    assert usr(instance, "r", judge).usr == 0.0


def test_usr_padding_and_unpadded_mode():
    import json

    instance = make_instance()
    payload = json.dumps(
        {
            "claims": [
                {"id": 1, "t": "a man stands", "u": 1},
                {"id": 2, "t": "a sign exists", "u": 0},
                {"id": 3, "t": "grass is green", "u": 0},
                {"id": 4, "t": "<NONE>", "u": 0},
                {"id": 5, "t": "<NONE>", "u": 0},
            ],
            "USR": 0.2,
        }
    )
    judge = judge_backend_for(instance, "r", {}, payload)
    result = usr(instance, "r", judge)
    assert result.usr == pytest.approx(0.2)
    assert result.usr_unpadded == pytest.approx(1 / 3)


def test_usr_pads_short_claim_lists():
    instance = make_instance()
    judge = judge_backend_for(instance, "r", {}, usr_payload([1, 0, 0]))
    result = usr(instance, "r", judge)
    assert len(result.claims) == 5
    assert result.usr == pytest.approx(0.2)


def test_usr_recomputes_and_flags_disagreement(caplog):
    instance = make_instance()
    judge = judge_backend_for(instance, "r", {}, usr_payload([1, 1, 0, 0, 0], judge_usr=0.8))
    result = usr(instance, "r", judge)
    assert result.usr == pytest.approx(0.4)  # recomputed, judge's 0.8 ignored
    assert result.judge_usr == pytest.approx(0.8)
    assert result.disagreement


def test_usr_rejects_six_claims():
    instance = make_instance()
    judge = judge_backend_for(instance, "r", {}, usr_payload([0] * 6))
    with pytest.raises(JudgeParseError):
        usr(instance, "r", judge)


def test_usr_rejects_flagged_padding():
    import json

    instance = make_instance()
    payload = json.dumps(
        {"claims": [{"id": 1, "t": "<NONE>", "u": 1}] + [{"id": i, "t": "c", "u": 0} for i in range(2, 6)]}
    )
    judge = judge_backend_for(instance, "r", {}, payload)
    with pytest.raises(JudgeParseError):
        usr(instance, "r", judge)


def test_usr_quantization_over_fuzzed_fixtures():
    rng = random.Random(123)
    allowed = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}
    for i in range(200):
        instance = make_instance(f"fz{i}")
        n_real = rng.randint(1, 5)
        flags = [rng.randint(0, 1) for _ in range(n_real)]
        judge = judge_backend_for(instance, "r", {}, usr_payload(flags))
        result = usr(instance, "r", judge)
        assert result.usr in allowed


# --- aggregation -----------------------------------------------------------------------

def rows_fixture():
    return [
        SampleRow("1", "A", correct=True, cas=1, usr=0.2),
        SampleRow("2", "B", correct=False, cas=0, usr=0.4),
    ]


def test_aggregate_means():
    report = aggregate(rows_fixture())
    assert report.aggregates["accuracy"] == pytest.approx(0.5)
    assert report.aggregates["cas"] == pytest.approx(0.5)
    assert report.aggregates["usr"] == pytest.approx(0.3)


def test_aggregate_exclusion_counting():
    rows = rows_fixture() + [SampleRow("3", "C", correct=True, cas=None, usr=None)]
    report = aggregate(rows)
    assert report.excluded["cas"] == 1
    assert report.excluded["usr"] == 1
    assert report.aggregates["cas"] == pytest.approx(0.5)
    # exclusion accounting: excluded + aggregated = total
    assert report.excluded["cas"] + 2 == len(rows)


def test_aggregate_consistency_check():
    report = aggregate(rows_fixture())
    report.verify_consistency()
    tampered = EvalReport(report.rows, {**report.aggregates, "cas": 0.9}, report.excluded)
    with pytest.raises(Exception):
        tampered.verify_consistency()


def test_aggregate_empty_and_all_excluded():
    with pytest.raises(ValueError):
        aggregate([])
    from mocot.errors import MocotError

    with pytest.raises(MocotError):
        aggregate([SampleRow("1", None)])
