from __future__ import annotations

import json
import random

import pytest

from recipebench.dataset import EvalSet
from recipebench.judge import (
    AuthenticationError,
    IngredientSetPair,
    JudgeConfig,
    JudgeFailure,
    JudgeVerdict,
    MissingCredentialError,
    ResponseCache,
    RetryPolicy,
    SeasoningLexicon,
    VerdictError,
    build_judge_prompt,
    counts_from_verdict,
    default_lexicon,
    judge_offline,
    judge_remote,
    outcome_from_obj,
    outcome_to_obj,
    parse_verdict,
    read_outcomes,
    sample_audit,
    write_outcomes,
)
from recipebench.textnorm import IngredientNormalizer

from .conftest import make_recipe
from .judge_server import (
    MALFORMED,
    OK,
    RATE_LIMITED,
    UNAUTHORIZED,
    MockJudgeServer,
    make_verdict_content,
)


def pair(sample_id="s1", generated=(), truth=()):
    return IngredientSetPair.from_lists(sample_id, list(generated), list(truth))


@pytest.fixture()
def judge_template(templates):
    return templates.judge_prompt


def _remote_config(endpoint, cache_dir=None, **overrides):
    defaults = dict(
        endpoint=endpoint,
        model="mock-judge",
        max_parallel=4,
        retry=RetryPolicy(max_attempts=4, backoff_base=0.01, backoff_factor=2.0),
        cache_dir=str(cache_dir) if cache_dir else None,
        credential_env="MOCK_JUDGE_KEY",
        timeout=10.0,
    )
    defaults.update(overrides)
    return JudgeConfig(**defaults)


# ---------------------------------------------------------------------------
# IngredientSetPair
# ---------------------------------------------------------------------------

def test_pair_trims_and_dedupes():
    made = pair(generated=[" 豚肉 ", "豚肉", "", "ごはん"], truth=["塩", "塩", "塩"])
    assert made.generated == ("豚肉", "ごはん")
    assert made.truth == ("塩",)
    assert made.generated_duplicates == 1
    assert made.truth_duplicates == 2


# ---------------------------------------------------------------------------
# Prompt construction
# ---------------------------------------------------------------------------

def test_prompt_contains_all_items_verbatim(judge_template):
    made = pair(generated=["豚肉", "ごはん"], truth=["塩", "砂糖", "みりん"])
    prompt = build_judge_prompt(made, judge_template)
    for item in made.generated + made.truth:
        assert item in prompt


def test_prompt_deterministic(judge_template):
    made = pair(generated=["豚肉"], truth=["塩"])
    assert build_judge_prompt(made, judge_template) == build_judge_prompt(
        made, judge_template
    )


def test_prompt_empty_list_marker(judge_template):
    made = pair(generated=[], truth=["塩"])
    prompt = build_judge_prompt(made, judge_template, "(none)")
    assert "(none)" in prompt


# ---------------------------------------------------------------------------
# parse_verdict
# ---------------------------------------------------------------------------

def well_formed_response():
    return json.dumps(
        {
            "common": [
                {"generated": "豚肉", "truth": "豚肉", "seasoning": False},
                {"generated": "ごはん", "truth": "ごはん", "seasoning": False},
            ],
            "only_generated": [],
            "only_truth": [{"item": "塩", "seasoning": True}],
        },
        ensure_ascii=False,
    )


def test_parse_verdict_well_formed():
    made = pair(generated=["豚肉", "ごはん"], truth=["ごはん", "豚肉", "塩"])
    verdict = parse_verdict(well_formed_response(), made)
    assert len(verdict.matched) == 2
    assert [i.item for i in verdict.truth_only] == ["塩"]
    assert verdict.repairs == ()


def test_parse_verdict_fenced():
    made = pair(generated=["豚肉", "ごはん"], truth=["ごはん", "豚肉", "塩"])
    fenced = parse_verdict("```json\n" + well_formed_response() + "\n```", made)
    plain = parse_verdict(well_formed_response(), made)
    # Identical parse; raw_response keeps the original (fenced) text.
    assert (fenced.matched, fenced.generated_only, fenced.truth_only) == (
        plain.matched, plain.generated_only, plain.truth_only,
    )


def test_parse_verdict_repairs_omitted_truth_item():
    made = pair(generated=["豚肉", "ごはん"], truth=["ごはん", "豚肉", "塩"])
    response = json.dumps(
        {
            "common": [
                {"generated": "豚肉", "truth": "豚肉", "seasoning": False},
                {"generated": "ごはん", "truth": "ごはん", "seasoning": False},
            ],
            "only_generated": [],
            "only_truth": [],
        },
        ensure_ascii=False,
    )
    verdict = parse_verdict(response, made)
    assert [i.item for i in verdict.truth_only] == ["塩"]
    assert verdict.truth_only[0].seasoning is True  # from the lexicon
    assert any("塩" in r for r in verdict.repairs)


def test_parse_verdict_fuzzy_containment_unique():
    made = pair(generated=["豚バラ肉"], truth=[])
    response = json.dumps(
        {"common": [], "only_generated": [{"item": "豚バラ", "seasoning": False}],
         "only_truth": []},
        ensure_ascii=False,
    )
    verdict = parse_verdict(response, made)
    assert verdict.generated_only[0].item == "豚バラ肉"
    assert any("fuzzy" in r for r in verdict.repairs)


def test_parse_verdict_ambiguous_fuzzy_is_an_error():
    made = pair(generated=["黒豚バラ肉", "豚バラ肉の味付け"], truth=[])
    response = json.dumps(
        {"common": [], "only_generated": [{"item": "豚バラ肉", "seasoning": False}],
         "only_truth": []},
        ensure_ascii=False,
    )
    with pytest.raises(VerdictError):
        parse_verdict(response, made)


def test_parse_verdict_hallucinated_item_is_an_error():
    made = pair(generated=["豚肉"], truth=["塩"])
    response = json.dumps(
        {"common": [], "only_generated": [{"item": "UFO", "seasoning": False}],
         "only_truth": [{"item": "塩", "seasoning": True}]},
        ensure_ascii=False,
    )
    with pytest.raises(VerdictError):
        parse_verdict(response, made)


def test_parse_verdict_double_claim_is_an_error():
    made = pair(generated=["豚肉"], truth=["豚肉"])
    response = json.dumps(
        {
            "common": [{"generated": "豚肉", "truth": "豚肉", "seasoning": False}],
            "only_generated": [{"item": "豚肉", "seasoning": False}],
            "only_truth": [],
        },
        ensure_ascii=False,
    )
    with pytest.raises(VerdictError):
        parse_verdict(response, made)


def test_parse_verdict_unparseable_json():
    made = pair(generated=["豚肉"], truth=["塩"])
    with pytest.raises(VerdictError) as excinfo:
        parse_verdict("ここにJSONはありません", made)
    assert excinfo.value.raw_response == "ここにJSONはありません"


def test_parse_verdict_partition_identities_always_hold():
    rng = random.Random(17)
    vocabulary = ["豚肉", "牛肉", "ごはん", "塩", "砂糖", "にんじん", "卵"]
    for _ in range(50):
        generated = rng.sample(vocabulary, rng.randint(0, 4))
        truth = rng.sample(vocabulary, rng.randint(0, 4))
        made = pair(generated=generated, truth=truth)
        prompt_response = make_verdict_content(
            build_judge_prompt(made, default_template())
        )
        verdict = parse_verdict(prompt_response, made)
        assert len(verdict.matched) + len(verdict.generated_only) == len(made.generated)
        assert len(verdict.matched) + len(verdict.truth_only) == len(made.truth)


def default_template():
    from recipebench.config import load_templates

    return load_templates().judge_prompt


# ---------------------------------------------------------------------------
# judge_offline
# ---------------------------------------------------------------------------

def test_offline_example_with_seasoning():
    made = pair(generated=["豚肉", "ごはん"], truth=["ごはん", "豚肉", "塩"])
    verdict = judge_offline(made)
    assert len(verdict.matched) == 2
    assert verdict.generated_only == ()
    assert [(i.item, i.seasoning) for i in verdict.truth_only] == [("塩", True)]


def test_offline_identity():
    made = pair(generated=["豚肉", "塩"], truth=["豚肉", "塩"])
    verdict = judge_offline(made)
    assert verdict.generated_only == () and verdict.truth_only == ()


def test_offline_katakana_fold():
    made = pair(generated=["ゴハン"], truth=["ごはん"])
    verdict = judge_offline(made)
    assert len(verdict.matched) == 1
    assert verdict.matched[0].generated == "ゴハン"
    assert verdict.matched[0].truth == "ごはん"


def test_offline_synonym_table():
    made = pair(generated=["白米"], truth=["ごはん"])
    verdict = judge_offline(made)
    assert len(verdict.matched) == 1


def test_offline_swap_property():
    rng = random.Random(3)
    vocabulary = ["豚肉", "牛肉", "ごはん", "白米", "塩", "しお", "卵", "玉子", "ゴハン"]
    for _ in range(50):
        generated = rng.sample(vocabulary, rng.randint(0, 5))
        truth = rng.sample(vocabulary, rng.randint(0, 5))
        forward = judge_offline(pair(generated=generated, truth=truth))
        backward = judge_offline(pair(generated=truth, truth=generated))
        assert sorted((m.truth, m.generated) for m in forward.matched) == sorted(
            (m.generated, m.truth) for m in backward.matched
        )
        assert [i.item for i in forward.generated_only] == [
            i.item for i in backward.truth_only
        ]
        assert [i.item for i in forward.truth_only] == [
            i.item for i in backward.generated_only
        ]


def test_offline_is_pure():
    made = pair(generated=["豚肉"], truth=["塩"])
    assert judge_offline(made) == judge_offline(made)


def test_counts_from_verdict_scopes():
    made = pair(generated=["豚肉", "塩"], truth=["豚肉", "砂糖"])
    verdict = judge_offline(made)
    all_counts, seasoning, non_seasoning = counts_from_verdict(verdict)
    assert (all_counts.tp, all_counts.fp, all_counts.fn) == (1, 1, 1)
    assert (seasoning.tp, seasoning.fp, seasoning.fn) == (0, 1, 1)
    assert (non_seasoning.tp, non_seasoning.fp, non_seasoning.fn) == (1, 0, 0)


def test_custom_lexicon_and_normalizer():
    normalizer = IngredientNormalizer(synonyms={"えっぐ": "卵"})
    lexicon = SeasoningLexicon.from_words(["スパイス"], normalizer)
    made = pair(generated=["エッグ"], truth=["卵", "スパイス"])
    verdict = judge_offline(made, normalizer, lexicon)
    assert len(verdict.matched) == 1
    assert verdict.truth_only[0].seasoning is True


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------

def test_cache_round_trip(tmp_path):
    cache = ResponseCache(tmp_path / "cache")
    assert cache.get("prompt", "model") is None
    cache.put("prompt", "model", "response-text")
    assert cache.get("prompt", "model") == "response-text"
    assert cache.get("prompt", "other-model") is None


def test_cache_soundness(tmp_path):
    made = pair(generated=["豚肉"], truth=["豚肉", "塩"])
    response = make_verdict_content(build_judge_prompt(made, default_template()))
    cache = ResponseCache(tmp_path / "cache")
    cache.put("p", "m", response)
    direct = parse_verdict(response, made)
    from_cache = parse_verdict(cache.get("p", "m"), made)
    assert direct == from_cache


# ---------------------------------------------------------------------------
# judge_remote against the mock server
# ---------------------------------------------------------------------------

def _pairs(n):
    vocabulary = ["豚肉", "牛肉", "ごはん", "塩", "砂糖", "にんじん", "卵", "味噌"]
    rng = random.Random(99)
    return [
        pair(
            sample_id=f"s{i}",
            generated=rng.sample(vocabulary, rng.randint(0, 4)),
            truth=rng.sample(vocabulary, rng.randint(1, 4)),
        )
        for i in range(n)
    ]


def test_remote_requires_credential(monkeypatch, judge_template):
    monkeypatch.delenv("MOCK_JUDGE_KEY", raising=False)
    config = _remote_config("http://127.0.0.1:9/never")
    with pytest.raises(MissingCredentialError):
        judge_remote(_pairs(1), config, judge_template)


def test_remote_happy_path(monkeypatch, judge_template):
    monkeypatch.setenv("MOCK_JUDGE_KEY", "k")
    with MockJudgeServer() as server:
        config = _remote_config(server.endpoint)
        outcomes = judge_remote(_pairs(5), config, judge_template)
    assert len(outcomes) == 5
    assert all(isinstance(o, JudgeVerdict) for o in outcomes)
    assert [o.sample_id for o in outcomes] == [f"s{i}" for i in range(5)]
    assert all(o.source == "remote" for o in outcomes)


def test_remote_cache_warm_start(monkeypatch, tmp_path, judge_template):
    monkeypatch.setenv("MOCK_JUDGE_KEY", "k")
    pairs = _pairs(3)
    with MockJudgeServer() as server:
        config = _remote_config(server.endpoint, cache_dir=tmp_path / "cache")
        first = judge_remote(pairs[:1], config, judge_template)
        assert server.request_count == 1
        outcomes = judge_remote(pairs, config, judge_template)
        # Cache warm for one pair: exactly two new network requests.
        assert server.request_count == 3
    assert outcomes[0].source == "cache"
    assert outcomes[0].matched == first[0].matched
    assert {o.source for o in outcomes[1:]} == {"remote"}


def test_remote_retries_on_429_then_succeeds(monkeypatch, judge_template):
    monkeypatch.setenv("MOCK_JUDGE_KEY", "k")
    behavior = lambda n: RATE_LIMITED if n <= 2 else OK
    with MockJudgeServer(behavior) as server:
        config = _remote_config(server.endpoint)
        outcomes = judge_remote(_pairs(1), config, judge_template)
        assert server.request_count == 3
    verdict = outcomes[0]
    assert isinstance(verdict, JudgeVerdict)
    assert verdict.attempts == 3


def test_remote_exhausted_retries_returns_failure(monkeypatch, judge_template):
    monkeypatch.setenv("MOCK_JUDGE_KEY", "k")
    with MockJudgeServer(lambda n: MALFORMED) as server:
        config = _remote_config(server.endpoint)
        outcomes = judge_remote(_pairs(2), config, judge_template)
    assert all(isinstance(o, JudgeFailure) for o in outcomes)
    assert all(o.attempts == 4 for o in outcomes)


def test_remote_auth_failure_raises(monkeypatch, judge_template):
    monkeypatch.setenv("MOCK_JUDGE_KEY", "k")
    with MockJudgeServer(lambda n: UNAUTHORIZED) as server:
        config = _remote_config(server.endpoint)
        with pytest.raises(AuthenticationError):
            judge_remote(_pairs(1), config, judge_template)


def test_remote_flaky_server_loses_nothing(monkeypatch, judge_template):
    monkeypatch.setenv("MOCK_JUDGE_KEY", "k")
    rng = random.Random(5)

    def behavior(n):
        roll = rng.random()
        if roll < 0.1:
            return RATE_LIMITED
        if roll < 0.15:
            return MALFORMED
        return OK

    pairs = _pairs(60)
    with MockJudgeServer(behavior) as server:
        config = _remote_config(server.endpoint, max_parallel=8)
        outcomes = judge_remote(pairs, config, judge_template)
    assert len(outcomes) == len(pairs)
    assert [o.sample_id for o in outcomes] == [p.sample_id for p in pairs]
    by_id = {p.sample_id: p for p in pairs}
    for outcome in outcomes:
        if isinstance(outcome, JudgeVerdict):
            made = by_id[outcome.sample_id]
            verdict_generated = sorted(
                [m.generated for m in outcome.matched]
                + [i.item for i in outcome.generated_only]
            )
            assert verdict_generated == sorted(made.generated)


# ---------------------------------------------------------------------------
# Audit sampling
# ---------------------------------------------------------------------------

def _evalset_with_verdicts(rng, categories=5, per_category=4):
    samples = []
    verdicts = []
    counter = 0
    for c in range(categories):
        for _ in range(per_category):
            recipe = make_recipe(rng, f"a{counter:03d}")
            recipe = type(recipe)(
                **{**recipe.__dict__, "eval_category": f"カテゴリ{c:02d}"}
            )
            samples.append(recipe)
            verdicts.append(judge_offline(pair(
                sample_id=recipe.id,
                generated=["豚肉"],
                truth=["豚肉", "塩"],
            )))
            counter += 1
    evalset = EvalSet(tuple(samples), {}, per_category, 0)
    return evalset, verdicts


def test_audit_balanced_counts(rng):
    evalset, verdicts = _evalset_with_verdicts(rng)
    sheet = sample_audit(verdicts, evalset, per_category=2, seed=1)
    assert len(sheet) == 10
    by_category = {}
    for entry in sheet.entries:
        by_category[entry.category] = by_category.get(entry.category, 0) + 1
    assert all(count == 2 for count in by_category.values())


def test_audit_deterministic_and_clamped(rng):
    evalset, verdicts = _evalset_with_verdicts(rng, categories=2, per_category=1)
    first = sample_audit(verdicts, evalset, per_category=5, seed=3)
    second = sample_audit(verdicts, evalset, per_category=5, seed=3)
    assert [e.sample_id for e in first.entries] == [e.sample_id for e in second.entries]
    assert len(first) == 2  # one verdict available per category


def test_audit_sheet_lists_items(rng):
    evalset, verdicts = _evalset_with_verdicts(rng, categories=1, per_category=1)
    sheet = sample_audit(verdicts, evalset, per_category=1, seed=0)
    markdown = sheet.to_markdown()
    assert "豚肉" in markdown and "塩" in markdown
    assert "truth-only" in markdown


# ---------------------------------------------------------------------------
# Outcome serialization
# ---------------------------------------------------------------------------

def test_outcome_jsonl_round_trip(tmp_path):
    verdict = judge_offline(pair(generated=["豚肉"], truth=["豚肉", "塩"]))
    failure = JudgeFailure("s9", "gave up", 4, raw_response="junk")
    path = tmp_path / "outcomes.jsonl"
    assert write_outcomes([verdict, failure], path) == 2
    loaded = read_outcomes(path)
    assert loaded[0] == verdict
    assert loaded[1] == failure


def test_outcome_objs_are_json_safe():
    verdict = judge_offline(pair(generated=["ゴハン"], truth=["ごはん"]))
    obj = outcome_to_obj(verdict)
    assert outcome_from_obj(json.loads(json.dumps(obj, ensure_ascii=False))) == verdict
