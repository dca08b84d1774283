import pytest
from hypothesis import given, strategies as st

from memsifter.backends import BackendPolicy, KeywordProxyBackend, ScriptedChatBackend
from memsifter.errors import (
    FormatError,
    InvalidArgument,
    MissingRankingError,
    TemplateError,
)
from memsifter.prefilter import prefilter
from memsifter.ranker import (
    PromptTemplate,
    RankingResult,
    build_prompt,
    default_template,
    parse_ranking,
    rank,
)
from memsifter.store import MemoryBank, Session, Turn

EXAMPLE_OUTPUT = "<think>x</think><ranking>27,13,34,5,12,8,21,45,6,19</ranking>"
EXAMPLE_IDS = (27, 13, 34, 5, 12, 8, 21, 45, 6, 19)
FAST = BackendPolicy(max_retries=2, backoff_base_ms=1, max_concurrency=2, timeout_ms=1000)


def bank_of(n):
    return MemoryBank(
        sessions=tuple(Session(id=i, turns=(Turn("user", f"topic {i}"),)) for i in range(n))
    )


def identity_filter(bank):
    return prefilter("q", bank, 10**9, None)


class TestTemplate:
    def test_missing_placeholder_rejected(self):
        with pytest.raises(TemplateError):
            PromptTemplate(body="{HISTORY} {CONTEXT}")

    def test_duplicate_placeholder_rejected(self):
        with pytest.raises(TemplateError):
            PromptTemplate(body="{HISTORY} {CONTEXT} {TOP_K} {TOP_K}")

    def test_substitution(self):
        template = PromptTemplate(body="{HISTORY}|{CONTEXT}|{TOP_K}")
        text = build_prompt("q", identity_filter(bank_of(1)), template, top_k=10)
        assert text.endswith("|q|10")
        assert "<session 0>" in text

    def test_default_template_names_top_10(self):
        text = build_prompt("q", identity_filter(bank_of(1)), default_template(), top_k=10)
        assert "output the top 10 most relevant sessions" in text

    def test_deterministic(self):
        f = identity_filter(bank_of(3))
        assert build_prompt("q", f, None, 10) == build_prompt("q", f, None, 10)

    def test_history_in_bank_order(self):
        f = identity_filter(bank_of(3))
        text = build_prompt("q", f, PromptTemplate(body="{HISTORY}~{CONTEXT}~{TOP_K}"), 10)
        assert text.index("<session 0>") < text.index("<session 1>") < text.index("<session 2>")

    def test_placeholder_in_query_not_reexpanded(self):
        f = identity_filter(bank_of(1))
        text = build_prompt("{TOP_K}", f, PromptTemplate(body="{HISTORY}|{CONTEXT}|{TOP_K}"), 7)
        assert text.endswith("|{TOP_K}|7")


class TestParseRanking:
    def test_documented_example_output(self):
        result = parse_ranking(EXAMPLE_OUTPUT, set(EXAMPLE_IDS), top_k=10)
        assert result.ranked_ids == EXAMPLE_IDS
        assert result.repairs == ()
        assert result.rationale == "x"

    def test_dedupe_keeps_first(self):
        result = parse_ranking("<ranking>3,3,1</ranking>", {1, 2, 3}, top_k=3)
        assert result.ranked_ids == (3, 1)
        assert result.repairs == ("deduped",)

    def test_no_block_raises(self):
        with pytest.raises(MissingRankingError):
            parse_ranking("no tags here", {1}, top_k=3)

    def test_last_blocks_win(self):
        raw = "<think>a</think><ranking>1</ranking><think>b</think><ranking>2</ranking>"
        result = parse_ranking(raw, {1, 2}, top_k=3)
        assert result.ranked_ids == (2,)
        assert result.rationale == "b"

    def test_drops_invalid_and_non_numeric(self):
        raw = "<ranking>5,none,2,99</ranking>"
        result = parse_ranking(raw, {2, 5}, top_k=5)
        assert result.ranked_ids == (5, 2)
        assert "padded_none" in result.repairs

    def test_whitespace_trim_recorded(self):
        result = parse_ranking("<ranking>1, 2</ranking>", {1, 2}, top_k=5)
        assert result.ranked_ids == (1, 2)
        assert "whitespace_normalized" in result.repairs

    def test_truncates_to_top_k(self):
        result = parse_ranking("<ranking>1,2,3</ranking>", {1, 2, 3}, top_k=2)
        assert result.ranked_ids == (1, 2)
        assert "truncated" in result.repairs

    def test_strict_mode_rejects_repairs(self):
        with pytest.raises(FormatError) as err:
            parse_ranking("<ranking>3,3,1</ranking>", {1, 2, 3}, top_k=3, strict=True)
        assert err.value.repairs == ["deduped"]

    def test_strict_mode_accepts_clean_output(self):
        result = parse_ranking(EXAMPLE_OUTPUT, set(EXAMPLE_IDS), top_k=10, strict=True)
        assert result.ranked_ids == EXAMPLE_IDS

    def test_empty_valid_ids_rejected(self):
        with pytest.raises(InvalidArgument):
            parse_ranking(EXAMPLE_OUTPUT, set(), top_k=3)

    def test_missing_think_block_means_empty_rationale(self):
        result = parse_ranking("<ranking>1</ranking>", {1}, top_k=3)
        assert result.rationale == ""

    def test_lenient_parse_idempotent(self):
        first = parse_ranking("<ranking>4,4,junk,1, 3</ranking>", {1, 3, 4}, top_k=10)
        reserialized = "<ranking>" + ",".join(map(str, first.ranked_ids)) + "</ranking>"
        second = parse_ranking(reserialized, {1, 3, 4}, top_k=10)
        assert second.ranked_ids == first.ranked_ids
        assert second.repairs == ()

    @given(st.text(alphabet="0123456789,<>rankingthi/ \n", max_size=120))
    def test_fuzz_invariants(self, raw):
        valid = frozenset(range(8))
        try:
            result = parse_ranking(raw, valid, top_k=5)
        except MissingRankingError:
            return
        assert len(set(result.ranked_ids)) == len(result.ranked_ids)
        assert set(result.ranked_ids) <= valid
        assert len(result.ranked_ids) <= 5


class TestRankingResultInvariants:
    def test_duplicates_rejected(self):
        with pytest.raises(InvalidArgument):
            RankingResult(rationale="", ranked_ids=(1, 1), raw_output="")

    def test_out_of_set_rejected(self):
        with pytest.raises(InvalidArgument):
            RankingResult(rationale="", ranked_ids=(9,), raw_output="", valid_ids=frozenset({1}))


class TestRank:
    def test_scripted_example_output(self):
        bank = bank_of(50)
        proxy = ScriptedChatBackend([EXAMPLE_OUTPUT], policy=FAST)
        result = rank("q", bank, proxy, top_k=10)
        assert result.ranked_ids == EXAMPLE_IDS

    def test_keyword_mock_puts_gold_first(self):
        sessions = (
            Session(id=0, turns=(Turn("user", "gardening tips for tomatoes"),)),
            Session(id=1, turns=(Turn("user", "booking flights to oslo in may"),)),
            Session(id=2, turns=(Turn("user", "tax filing deadline reminders"),)),
        )
        bank = MemoryBank(sessions=sessions)
        result = rank("when is my flight to oslo", bank, KeywordProxyBackend(policy=FAST), top_k=3)
        assert result.ranked_ids[0] == 1

    def test_garbage_twice_exhausts_retry(self):
        proxy = ScriptedChatBackend(["garbage", "still garbage"], policy=FAST)
        with pytest.raises(MissingRankingError):
            rank("q", bank_of(2), proxy, top_k=2)
        assert len(proxy.calls) == 2

    def test_missing_block_retried_once_then_succeeds(self):
        proxy = ScriptedChatBackend(["garbage", "<ranking>1,0</ranking>"], policy=FAST)
        result = rank("q", bank_of(2), proxy, top_k=2)
        assert result.ranked_ids == (1, 0)

    def test_never_returns_prefilter_dropped_ids(self):
        sessions = tuple(
            Session(id=i, turns=(Turn("user", ("relevant words " if i == 0 else "afar ") * 10),))
            for i in range(4)
        )
        bank = MemoryBank(sessions=sessions)
        budget = bank.sessions[0].token_count  # room for one session only
        proxy = ScriptedChatBackend(["<ranking>3,2,1,0</ranking>"], policy=FAST)

        from memsifter.backends import KeywordEmbeddingBackend

        result = rank(
            "relevant words", bank, proxy, embedder=KeywordEmbeddingBackend(), budget_tokens=budget, top_k=4
        )
        assert set(result.ranked_ids) <= {0}
