import json
import threading

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tableqg import prompts
from tableqg.cache import GenerationCache, cache_key
from tableqg.providers import ChatCompletionProvider, HeuristicMockProvider, ProviderError, ScriptedProvider
from tableqg.qgen import (
    FULL_PIPELINE,
    QUESTIONS_ONLY,
    AugmentedTable,
    ExhaustedRetries,
    GenResult,
    ParseFailure,
    RepresentationStrategy as RS,
    RetryPolicy,
    StrategyMismatch,
    augment,
    augment_corpus,
    build_prompt,
    extract_json_object,
    generate,
    generate_description,
    parse_json_strict,
    render_for_embedding,
    validate_count,
)
from tableqg.tables import Table, select_top_rows, to_markdown


def pt_of(rows, title=None, id="t"):
    return select_top_rows(Table(id, rows, title=title), 10)


DEPT = pt_of([["a", "b"], ["1", "2"]], title="dept")
FOUR = pt_of([["h1", "h2", "h3", "h4"], ["1", "2", "3", "4"]])


def reply(headers, questions):
    return json.dumps({"headers": headers, "questions": questions})


class TestPrompt:
    def test_full_pipeline_anchors(self):
        p = build_prompt(DEPT, FULL_PIPELINE)
        assert "Extract Header Names" in p
        assert "Strictly JSON format" in p
        assert p.endswith("Input Table:\n" + to_markdown(DEPT))

    def test_questions_only_anchors(self):
        p = build_prompt(DEPT, QUESTIONS_ONLY)
        assert "(Numerical, List, Count, Select)" in p
        assert "Extract Header Names" not in p
        assert '{ "questions": ["question1", "question2","..."]\n' in p

    def test_title_flag(self):
        assert "\ndept\n| a | b |" in build_prompt(DEPT, include_title=True)
        assert "dept" not in build_prompt(DEPT, include_title=False)

    def test_slot_filled_once(self):
        p = build_prompt(DEPT)
        assert prompts.TABLE_SLOT not in p
        assert '{ "headers": ["header1", "header2", "..."], "questions": ["question1", "question2", "..."] }' in p

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            build_prompt(DEPT, "bogus")


class TestParse:
    def test_whole(self):
        obj, stage = extract_json_object('{"questions": ["q"]}')
        assert stage == "whole" and obj == {"questions": ["q"]}

    def test_fenced(self):
        raw = 'Here you go:\n```json\n{"headers": ["a"], "questions": ["q1"]}\n```\nthanks'
        res = parse_json_strict(raw)
        assert res.headers == ("a",) and res.questions == ("q1",)
        assert extract_json_object(raw)[1] == "fenced"

    def test_substring_with_braces_in_strings(self):
        raw = 'Sure! {"headers": ["a}"], "questions": ["what is {x}?"]} Hope it helps.'
        obj, stage = extract_json_object(raw)
        assert stage == "substring"
        assert obj["questions"] == ["what is {x}?"]

    def test_skips_non_parsing_braces(self):
        raw = 'note {not json} then {"questions": ["q"]}'
        assert extract_json_object(raw) == ({"questions": ["q"]}, "substring")

    def test_not_a_list(self):
        with pytest.raises(ParseFailure) as info:
            parse_json_strict('{"headers": ["a"], "questions": "not a list"}')
        assert info.value.stage == "whole"

    def test_no_json(self):
        with pytest.raises(ParseFailure):
            parse_json_strict("I cannot help with that.")

    def test_headers_required_only_in_full_mode(self):
        with pytest.raises(ParseFailure):
            parse_json_strict('{"questions": ["q"]}', FULL_PIPELINE)
        assert parse_json_strict('{"questions": ["q"]}', QUESTIONS_ONLY).headers == ()

    def test_duplicates_and_blanks_dropped(self):
        res = parse_json_strict(reply(["a"], ["q", " q ", "", "r"]))
        assert res.questions == ("q", "r")


class TestCountRule:
    @pytest.mark.parametrize(
        "h, j, ok",
        [(0, 0, True), (1, 0, False), (1, 1, True), (4, 1, False), (4, 2, True), (5, 2, False), (5, 3, True)],
    )
    def test_examples(self, h, j, ok):
        assert validate_count(h, ["q"] * j) is ok

    def test_negative(self):
        with pytest.raises(ValueError):
            validate_count(-1, [])


class TestGenerate:
    def test_four_headers_three_questions(self):
        prov = ScriptedProvider([reply(["h1", "h2", "h3", "h4"], ["q1", "q2", "q3"])])
        res = generate(FOUR, prov)
        assert res.questions == ("q1", "q2", "q3")
        assert res.attempts == 1 and not res.under_provisioned
        assert prov.calls == 1

    def test_malformed_three_times(self):
        prov = ScriptedProvider(["nope"])
        with pytest.raises(ExhaustedRetries) as info:
            generate(FOUR, prov, policy=RetryPolicy(3))
        assert prov.calls == 3
        assert info.value.attempts == 3 and info.value.last_raw == "nope"

    def test_recovers_after_bad_reply(self):
        prov = ScriptedProvider(["garbage", reply(["h1"], ["q"])])
        res = generate(FOUR, prov)
        assert res.attempts == 2 and prov.calls == 2

    def test_under_provisioned_kept(self):
        prov = ScriptedProvider([reply(["h1", "h2", "h3", "h4"], ["q1"])])
        res = generate(FOUR, prov, policy=RetryPolicy(2))
        assert prov.calls == 2
        assert res.under_provisioned and res.questions == ("q1",)

    def test_thin_then_good(self):
        prov = ScriptedProvider([reply(["h1", "h2", "h3", "h4"], ["q1"]), reply(["h1", "h2"], ["q1"])])
        res = generate(FOUR, prov)
        assert not res.under_provisioned and res.attempts == 2

    @given(st.integers(1, 6))
    def test_call_bound(self, n):
        prov = ScriptedProvider(["x"])
        with pytest.raises(ExhaustedRetries):
            generate(FOUR, prov, policy=RetryPolicy(n))
        assert prov.calls == n

    def test_same_prompt_on_retry(self):
        prov = ScriptedProvider(["x", reply(["a"], ["q"])])
        generate(DEPT, prov)
        assert prov.prompts[0] == prov.prompts[1]


class TestCache:
    def test_hit_skips_provider(self, tmp_path):
        cache = GenerationCache(tmp_path)
        prov = ScriptedProvider([reply(["a", "b"], ["q"])])
        first = generate(DEPT, prov, cache=cache)
        second = generate(DEPT, prov, cache=cache)
        assert prov.calls == 1
        assert second.cached and second.attempts == 0
        assert second.questions == first.questions and second.raw == first.raw

    def test_key_depends_on_model_and_prompt(self):
        assert cache_key("m", "p") != cache_key("n", "p")
        assert cache_key("m", "p") != cache_key("m", "q")
        assert cache_key("m", "p") == cache_key("m", "p")

    def test_title_flag_changes_key(self, tmp_path):
        cache = GenerationCache(tmp_path)
        prov = ScriptedProvider([reply(["a"], ["q"])])
        generate(DEPT, prov, include_title=True, cache=cache)
        generate(DEPT, prov, include_title=False, cache=cache)
        assert prov.calls == 2

    def test_write_once(self, tmp_path):
        cache = GenerationCache(tmp_path)
        assert cache.put("ab" * 32, "first")
        assert not cache.put("ab" * 32, "second")
        assert cache.get("ab" * 32) == "first"

    def test_concurrent_writers(self, tmp_path):
        cache = GenerationCache(tmp_path)
        key = cache_key("m", "p")
        results = []
        barrier = threading.Barrier(8)

        def write(i):
            barrier.wait()
            results.append(cache.put(key, f"reply {i}"))

        threads = [threading.Thread(target=write, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results.count(True) == 1
        assert cache.get(key) in {f"reply {i}" for i in range(8)}
        assert not [p for p in tmp_path.rglob(".tmp-*")]

    def test_failures_not_cached(self, tmp_path):
        cache = GenerationCache(tmp_path)
        with pytest.raises(ExhaustedRetries):
            generate(DEPT, ScriptedProvider(["x"]), cache=cache)
        assert not list(tmp_path.rglob("*.txt"))


class TestDescription:
    def test_passthrough(self):
        prov = ScriptedProvider(['{"description": "  Staff per dept.  "}'])
        assert generate_description(DEPT, prov) == "Staff per dept."
        assert '"description"' in prov.prompts[0]

    def test_empty_fails(self):
        with pytest.raises(ExhaustedRetries):
            generate_description(DEPT, ScriptedProvider(['{"description": ""}']), RetryPolicy(2))


GEN = GenResult(headers=("a", "b"), questions=("q1", "q2", "q1"), raw="")


class TestAugment:
    def test_pt_needs_nothing(self):
        at = augment(DEPT, None, "pT")
        assert at.questions == () and at.headers is None

    def test_qgpt_dedups_questions(self):
        at = augment(DEPT, GEN, RS.QGPT)
        assert at.questions == ("q1", "q2") and at.headers == ("a", "b")

    def test_header_only(self):
        at = augment(DEPT, GEN, "header-only")
        assert at.questions == () and at.headers == ("a", "b")

    def test_mismatches(self):
        with pytest.raises(StrategyMismatch):
            augment(DEPT, None, "QGpT")
        with pytest.raises(StrategyMismatch):
            augment(DEPT, GEN, "desc-only")
        with pytest.raises(StrategyMismatch):
            augment(DEPT, GenResult((), ("q",), ""), "pT+header")

    def test_corpus_pt_without_provider(self):
        out, stats = augment_corpus([DEPT], "pT", None)
        assert stats.provider_calls == 0 and out[0].strategy is RS.PT

    def test_corpus_needs_provider(self):
        with pytest.raises(StrategyMismatch):
            augment_corpus([DEPT], "QGpT", None)

    def test_corpus_headers_need_full_mode(self):
        with pytest.raises(StrategyMismatch):
            augment_corpus([DEPT], "header-only", HeuristicMockProvider(), mode=QUESTIONS_ONLY)

    def test_corpus_stats(self, tmp_path):
        tables = [pt_of([["a", "b"], [str(i), "x"]], id=f"t{i}") for i in range(5)]
        cache = GenerationCache(tmp_path)
        out, stats = augment_corpus(tables, "QGpT", HeuristicMockProvider(), cache=cache)
        assert [a.id for a in out] == [f"t{i}" for i in range(5)]
        assert stats.provider_calls == 5 and stats.cached == 0
        _, warm = augment_corpus(tables, "QGpT", HeuristicMockProvider(), cache=cache)
        assert warm.provider_calls == 0 and warm.cached == 5

    def test_corpus_description_calls_counted(self):
        _, stats = augment_corpus([DEPT], "pT+desc", HeuristicMockProvider())
        assert stats.provider_calls == 1


class TestRender:
    def test_qgpt_golden(self, fixtures_dir):
        at = AugmentedTable(DEPT, RS.QGPT, questions=("q1", "q2"))
        assert render_for_embedding(at) == (fixtures_dir / "golden" / "qgpt.txt").read_text()

    def test_qg_only_titled_golden(self, fixtures_dir):
        at = AugmentedTable(DEPT, RS.QG_ONLY, questions=("q1", "q2"))
        assert render_for_embedding(at, include_title=True) == (fixtures_dir / "golden" / "qg_only_titled.txt").read_text()

    def test_pt_is_markdown(self):
        assert render_for_embedding(AugmentedTable(DEPT, RS.PT)) == to_markdown(DEPT)

    def test_header_variants(self):
        at = AugmentedTable(DEPT, RS.PT_PLUS_HEADER, headers=("a", "b"))
        assert render_for_embedding(at).endswith("\n\na\nb")
        assert render_for_embedding(AugmentedTable(DEPT, RS.HEADER_ONLY, headers=("a", "b"))) == "a\nb"

    def test_qgpt_with_headers(self):
        at = AugmentedTable(DEPT, RS.QGPT, questions=("q1",), headers=("a", "b"))
        assert render_for_embedding(at, include_headers=True).endswith("\n\na\nb\n\nq1")

    def test_description(self):
        at = AugmentedTable(DEPT, RS.DESC_ONLY, description="About depts.")
        assert render_for_embedding(at) == "About depts."

    @given(st.lists(st.text(alphabet="abc xyz?", min_size=1, max_size=10), max_size=5), st.booleans())
    def test_table_prefix_preserved(self, questions, titled):
        at = AugmentedTable(DEPT, RS.QGPT, questions=tuple(questions))
        assert render_for_embedding(at, titled).startswith(to_markdown(DEPT, titled))


class TestChatProvider:
    def test_request_shape_and_auth(self, monkeypatch):
        monkeypatch.setenv("TQ_TEST_KEY", "sekret")
        seen = []

        def handler(request):
            seen.append(request)
            return httpx.Response(200, json={"choices": [{"message": {"content": "hi"}}]})

        p = ChatCompletionProvider("m1", base_url="http://llm.local/v1/", api_key_env="TQ_TEST_KEY", transport=httpx.MockTransport(handler))
        assert p.complete("prompt text") == "hi"
        req = seen[0]
        assert str(req.url) == "http://llm.local/v1/chat/completions"
        assert req.headers["authorization"] == "Bearer sekret"
        body = json.loads(req.content)
        assert body == {"model": "m1", "messages": [{"role": "user", "content": "prompt text"}], "temperature": 0.2}

    def test_5xx_retried_once(self, monkeypatch):
        monkeypatch.setattr("tableqg.providers.time.sleep", lambda s: None)
        codes = iter([503, 200])

        def handler(request):
            code = next(codes)
            return httpx.Response(code, json={"choices": [{"message": {"content": "ok"}}]})

        p = ChatCompletionProvider("m", base_url="http://x", transport=httpx.MockTransport(handler))
        assert p.complete("p") == "ok"

    def test_persistent_5xx(self, monkeypatch):
        monkeypatch.setattr("tableqg.providers.time.sleep", lambda s: None)
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(500)

        p = ChatCompletionProvider("m", base_url="http://x", transport=httpx.MockTransport(handler))
        with pytest.raises(ProviderError):
            p.complete("p")
        assert len(calls) == 2

    def test_auth_failure(self):
        p = ChatCompletionProvider("m", base_url="http://x", transport=httpx.MockTransport(lambda r: httpx.Response(401)))
        with pytest.raises(ProviderError, match="authentication"):
            p.complete("p")


class TestMockProvider:
    def test_meets_count_rule(self):
        res = generate(FOUR, HeuristicMockProvider())
        assert res.headers == ("h1", "h2", "h3", "h4")
        assert len(res.questions) == 2 and not res.under_provisioned

    def test_questions_only(self):
        res = generate(FOUR, HeuristicMockProvider(), mode=QUESTIONS_ONLY)
        assert res.questions and res.headers == ()
