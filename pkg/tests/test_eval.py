"""Alignment report aggregation and the pairwise judge client."""

import json

import pytest

from quantalign.decode import DecodeParams
from quantalign.errors import ExternalServiceError
from quantalign.evaluate import (
    AlignmentReport,
    JudgeConfig,
    combine_position_swapped,
    judge_many,
    pairwise_judge,
    read_alignment_rows,
    alignment_report,
    tally_verdicts,
    write_alignment_csv,
    write_verdicts_csv,
)
from quantalign.quant import QuantSpec, fake_quant_forward


def chat_response(text):
    return json.dumps({"choices": [{"message": {"content": text}}]})


def scripted_transport(responses):
    """Returns each response in turn; raises entries that are exceptions."""
    queue = list(responses)
    calls = []

    def transport(payload):
        calls.append(payload)
        item = queue.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    transport.calls = calls
    return transport


class TestCombineRule:
    def test_consistent_winner_wins(self):
        # Second judgment is normalized to original identity by the caller;
        # here we exercise the rule directly.
        assert combine_position_swapped("A", "A", "modified") == "win"
        assert combine_position_swapped("B", "B", "modified") == "lose"

    def test_position_flip_is_tie(self):
        assert combine_position_swapped("A", "B", "modified") == "tie"
        assert combine_position_swapped("B", "A", "modified") == "tie"

    def test_modified_rule_lets_single_decision_win(self):
        assert combine_position_swapped("A", "C", "modified") == "win"
        assert combine_position_swapped("C", "B", "modified") == "lose"
        assert combine_position_swapped("C", "C", "modified") == "tie"

    def test_original_rule_ties_anything_inconsistent(self):
        assert combine_position_swapped("A", "A", "original") == "win"
        assert combine_position_swapped("A", "C", "original") == "tie"
        assert combine_position_swapped("C", "C", "original") == "tie"
        assert combine_position_swapped("A", "B", "original") == "tie"


class TestPairwiseJudge:
    def test_consistent_answer_a_wins(self, tmp_path):
        # First query says A; swapped query says B, which is answer A again.
        config = JudgeConfig(endpoint_url="mock://", transcript_path=str(tmp_path / "t.jsonl"))
        transport = scripted_transport([chat_response("A"), chat_response("B")])
        verdict = pairwise_judge(config, "prompt", "ans a", "ans b", transport=transport)
        assert verdict.verdict == "win"
        assert verdict.requests_made == 2
        assert len(transport.calls) == 2

    def test_position_dependent_winner_is_tie(self):
        # Both queries pick whatever sits in position A: a position bias.
        config = JudgeConfig(endpoint_url="mock://")
        transport = scripted_transport([chat_response("A"), chat_response("A")])
        verdict = pairwise_judge(config, "p", "a", "b", transport=transport)
        assert verdict.verdict == "tie"

    def test_never_judges_from_one_query(self):
        config = JudgeConfig(endpoint_url="mock://")
        transport = scripted_transport([chat_response("A"), chat_response("B")])
        verdict = pairwise_judge(config, "p", "a", "b", transport=transport)
        assert verdict.requests_made == 2

    def test_unparseable_response_is_explicit_error(self):
        config = JudgeConfig(endpoint_url="mock://")
        transport = scripted_transport([chat_response("A"), chat_response("maybe?")])
        verdict = pairwise_judge(config, "p", "a", "b", transport=transport)
        assert verdict.verdict == "error"

    def test_retries_with_backoff_then_succeeds(self):
        import urllib.error

        config = JudgeConfig(endpoint_url="mock://", backoff_base=0.0)
        transport = scripted_transport(
            [
                urllib.error.URLError("down"),
                chat_response("A"),
                chat_response("B"),
            ]
        )
        verdict = pairwise_judge(config, "p", "a", "b", transport=transport)
        assert verdict.verdict == "win"
        assert len(transport.calls) == 3

    def test_exhausted_retries_raise_external_error(self):
        import urllib.error

        config = JudgeConfig(endpoint_url="mock://", backoff_base=0.0, max_retries=3)
        transport = scripted_transport([urllib.error.URLError("down")] * 3)
        with pytest.raises(ExternalServiceError):
            pairwise_judge(config, "p", "a", "b", transport=transport)

    def test_transcript_records_all_traffic(self, tmp_path):
        path = tmp_path / "transcript.jsonl"
        config = JudgeConfig(endpoint_url="mock://", transcript_path=str(path))
        transport = scripted_transport([chat_response("A"), chat_response("B")])
        pairwise_judge(config, "p", "a", "b", prompt_id=7, transport=transport)
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert len(lines) == 2
        assert all(l["prompt_id"] == 7 for l in lines)
        assert all("request" in l and "response" in l for l in lines)


class TestJudgeMany:
    def test_tally_accounts_for_every_prompt(self):
        config = JudgeConfig(endpoint_url="mock://")
        script = [
            chat_response("A"), chat_response("B"),   # win
            chat_response("A"), chat_response("A"),   # tie (position flip)
            chat_response("B"), chat_response("A"),   # lose
            chat_response("C"), chat_response("huh"), # parse error
        ]
        transport = scripted_transport(script)
        verdicts = judge_many(config, [("p", "a", "b")] * 4, transport=transport)
        tally = tally_verdicts(verdicts)
        assert tally == {"win": 1, "tie": 1, "lose": 1, "error": 1}
        assert sum(tally.values()) == 4

    def test_verdicts_csv(self, tmp_path):
        config = JudgeConfig(endpoint_url="mock://")
        transport = scripted_transport([chat_response("A"), chat_response("B")])
        verdicts = judge_many(config, [("p", "a", "b")], transport=transport)
        path = tmp_path / "verdicts.csv"
        write_verdicts_csv(verdicts, path)
        assert "prompt_id,verdict" in path.read_text().splitlines()[0]


class TestAlignmentReport:
    def test_candidate_equal_to_baseline(self, micro_model, micro_corpus):
        params = DecodeParams(max_new_tokens=15)
        report = alignment_report(
            micro_model, micro_model, micro_corpus.prompt_pool[:6], params,
            ppl_tokens=micro_corpus.val_tokens[:300],
        )
        assert report.mean_rougeL == pytest.approx(1.0)
        assert report.flip_rate == 0.0
        assert report.ppl > 1.0

    def test_quantized_candidate_scores_below_one(self, micro_model, micro_corpus):
        view = fake_quant_forward(micro_model.with_role("quantized_latent"), QuantSpec(bits=4))
        params = DecodeParams(max_new_tokens=15)
        report = alignment_report(micro_model, view, micro_corpus.prompt_pool[:12], params)
        assert 0.0 < report.flip_rate <= 1.0
        assert report.mean_rougeL < 1.0

    def test_aggregates_recomputable_from_csv(self, micro_model, micro_corpus, tmp_path):
        view = fake_quant_forward(micro_model.with_role("quantized_latent"), QuantSpec(bits=4))
        params = DecodeParams(max_new_tokens=12)
        report = alignment_report(micro_model, view, micro_corpus.prompt_pool[:8], params)
        path = tmp_path / "alignment.csv"
        write_alignment_csv(report, path)
        rows = read_alignment_rows(path)
        assert len(rows) == len(report.rows)
        mean_rougeL = sum(r.rougeL_vs_fp for r in rows) / len(rows)
        flip = sum(1 for r in rows if r.flip_present) / len(rows)
        assert mean_rougeL == pytest.approx(report.mean_rougeL, abs=1e-9)
        assert flip == pytest.approx(report.flip_rate, abs=1e-12)
