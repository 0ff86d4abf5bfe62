import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import perturbed_params
from vlmdesk import numerics as nx
from vlmdesk import tasks
from vlmdesk.model import ModelConfig, init_params
from vlmdesk.tasks import Mode

DESK = ModelConfig.desk()


@pytest.fixture
def params():
    return perturbed_params(DESK, 0, std=0.05)


def feats(m, seed=0):
    return np.random.default_rng(seed).normal(size=(m, DESK.d_video_feat))


def words(n, seed=0):
    return np.random.default_rng(seed).integers(DESK.first_word_id, DESK.vocab_size, n)


# --- retrieval ---------------------------------------------------------------------


@pytest.mark.parametrize("include_sep", [False, True])
def test_joint_and_split_encodings_agree(params, include_sep):
    for s in range(3):
        j = tasks.retrieval_encode(feats(2 + s, s), words(3 + 2 * s, s), params, Mode.JOINT, include_sep)
        sp = tasks.retrieval_encode(feats(2 + s, s), words(3 + 2 * s, s), params, Mode.SPLIT, include_sep)
        np.testing.assert_allclose(j.video, sp.video, atol=1e-10)
        np.testing.assert_allclose(j.text, sp.text, atol=1e-10)


def test_retrieval_encode_needs_both_modalities(params):
    with pytest.raises(ValueError, match="both"):
        tasks.retrieval_encode(feats(2), [], params)


def test_pooling_excludes_specials(params):
    seq = tasks.text_only_sequence(words(4), params)
    h = tasks.encode_isolated([seq], params)[0]
    pooled = tasks.pooled_texts([words(4)], params).data[0]
    np.testing.assert_allclose(pooled, h.data[seq.text_positions].mean(0), atol=1e-12)
    with_sep = tasks.pooled_texts([words(4)], params, include_sep=True).data[0]
    np.testing.assert_allclose(with_sep, h.data[np.append(seq.text_positions, seq.sep2)].mean(0), atol=1e-12)


def test_similarity_orientation(params):
    fs = [feats(3, i) for i in range(4)]
    ts = [words(5, i) for i in range(3)]
    sim = tasks.retrieval_similarity(fs, ts, params, batch_size=2)
    assert sim.shape == (3, 4)
    v = tasks.retrieval_encode(fs[1], ts[2], params)
    assert sim[2, 1] == pytest.approx(v.text @ v.video, abs=1e-10)


def test_recall_examples():
    sim = np.array([[0.9, 0.1, 0.0], [0.5, 0.5, 0.1], [0.2, 0.3, 0.1]])
    assert list(tasks.ground_truth_ranks(sim, [0, 1, 2])) == [1, 2, 3]
    m = tasks.recall_metrics(sim, [0, 1, 2])
    assert m == {"R@1": pytest.approx(1 / 3), "R@5": 1.0, "R@10": 1.0, "MedianR": 2.0}
    # even query count takes the lower median
    assert tasks.recall_metrics(np.eye(4)[[0, 1, 2, 3]] * -1 + 1, [0, 1, 2, 3])["MedianR"] == 4.0
    with pytest.raises(ValueError):
        tasks.recall_metrics(sim, [0, 3, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 15), st.integers(0, 10 ** 6), st.booleans())
def test_ranks_match_stable_sort(q, c, seed, ties):
    rng = np.random.default_rng(seed)
    sim = rng.integers(0, 3, (q, c)).astype(float) if ties else rng.normal(size=(q, c))
    gt = rng.integers(0, c, q)
    np.testing.assert_array_equal(tasks.ground_truth_ranks(sim, gt), oracles.sorted_ranks(sim, gt))
    assert tasks.recall_metrics(sim, gt) == pytest.approx(oracles.recall(sim, gt))


# --- segmentation ------------------------------------------------------------------


def test_window_offsets():
    assert tasks.window_offsets(10, 4, 3) == [(0, 4), (3, 7), (6, 10)]
    assert tasks.window_offsets(11, 4, 3) == [(0, 4), (3, 7), (6, 10), (9, 11)]
    assert tasks.window_offsets(3, 8, 4) == [(0, 3)]
    assert tasks.window_offsets(8, 4, 4) == [(0, 4), (4, 8)]
    with pytest.raises(ValueError):
        tasks.window_offsets(0, 4, 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 10), st.integers(1, 10), st.integers(0, 10 ** 6))
def test_window_average_matches_accumulation(n, window, step, seed):
    step = min(step, window)
    wins = tasks.window_offsets(n, window, step)
    assert wins[0][0] == 0 and wins[-1][1] == n
    rng = np.random.default_rng(seed)
    logits = [rng.normal(size=(e - s, 3)) for s, e in wins]
    out = tasks.average_window_logits(n, wins, logits)
    np.testing.assert_allclose(out.logits, oracles.window_average(n, wins, logits), atol=1e-12)
    assert np.all(out.coverage >= 1)


def test_uncovered_frames_are_an_error():
    with pytest.raises(ValueError, match="not covered"):
        tasks.average_window_logits(5, [(0, 3)], [np.zeros((3, 2))])


def test_segment_video_shapes(params):
    with pytest.raises(ValueError, match="segmentation head"):
        tasks.segment_video(feats(20), params, 8, 4)
    tasks.add_segmentation_head(params, 5)
    out = tasks.segment_video(feats(20), params, 8, 4)
    assert out.logits.shape == (20, 5) and out.labels.shape == (20,)
    assert list(out.coverage[:5]) == [1, 1, 1, 1, 2]
    # a video no longer than the window is one forward, covered once
    one = tasks.segment_video(feats(20)[:8], params, 8, 4)
    assert np.all(one.coverage == 1)
    with nx.no_grad():
        direct = tasks.frame_logits([feats(20)[:8]], params)[0].data
    np.testing.assert_allclose(one.logits, direct, atol=1e-12)


def test_segmentation_loss_gradient():
    p = perturbed_params(ModelConfig.desk(n_layers=1, d_model=16), 1)
    tasks.add_segmentation_head(p, 3, seed=1)
    rng = np.random.default_rng(0)
    fs = [rng.normal(size=(4, 16)), rng.normal(size=(3, 16))]
    labels = [np.array([0, 1, 1, 2]), np.array([2, 2, 0])]
    err = nx.finite_difference_check(lambda: tasks.segmentation_loss(fs, labels, p), p.tensors, 30, rng)
    assert err < 1e-4


# --- localization and QA -------------------------------------------------------------


def test_localization_rows_are_distributions(params):
    probs = tasks.localize_steps(feats(6), [words(3, 1), words(2, 2), words(4, 3)], params)
    assert probs.shape == (6, 3)
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-12)
    loss = tasks.localization_loss(feats(6), [words(3, 1), words(2, 2)], np.array([0, 1, 1, 0, 0, 1]), params)
    assert loss.data > 0
    with pytest.raises(ValueError):
        tasks.step_logits(feats(6), [], params)


def test_answer_scoring(params):
    answers = [words(3, i) for i in range(4)]
    scores, best = tasks.score_answers(feats(4), answers, params)
    assert scores.shape == (4,) and best == int(np.argmax(scores))
    v = tasks.retrieval_encode(feats(4), answers[2], params)
    assert scores[2] == pytest.approx(v.text @ v.video, abs=1e-10)
    lp = -tasks.qa_loss(feats(4), answers, 2, params).data
    assert lp == pytest.approx(scores[2] - np.log(np.exp(scores).sum()), abs=1e-10)


# --- captioning ----------------------------------------------------------------------


def test_caption_sequence_layout(params):
    toks = tasks._tokens(feats(3), params)
    seq = tasks.caption_sequence(toks, [20, 21], params)
    assert list(seq.text_ids) == [DESK.dummy_text_id, 20, 21]


def test_caption_loss_targets_shift_by_one(params):
    toks = tasks._tokens(feats(3), params)
    cap = [20, 21, 22]
    full = tasks.caption_full_logits(feats(3), cap, params)
    ref = np.mean([-(full[i][t] - np.log(np.exp(full[i]).sum())) for i, t in enumerate(cap + [DESK.sep_id])])
    assert tasks.caption_loss([toks], [cap], params).data == pytest.approx(ref, abs=1e-10)


def test_incremental_logits_match_full_forward(params):
    hyp, steps = tasks.greedy_decode(feats(4), params, 6, return_logits=True)
    full = tasks.caption_full_logits(feats(4), hyp, params)
    n = len(steps)
    np.testing.assert_allclose(steps, full[:n], atol=1e-9)


def test_decode_never_emits_specials(params):
    p = init_params(DESK, 3)
    p["mlm_bias"].data[[DESK.mask_id, DESK.cls_id, DESK.pad_id]] = 100.0
    out = tasks.greedy_decode(feats(2), p, 5)
    assert len(out) == 5 and not set(out) & {DESK.pad_id, DESK.cls_id, DESK.mask_id, DESK.dummy_text_id}
    p["mlm_bias"].data[DESK.sep_id] = 200.0
    assert tasks.greedy_decode(feats(2), p, 5) == []
    with pytest.raises(ValueError):
        tasks.greedy_decode(feats(2), p, 0)


def test_decode_respects_sequence_budget():
    p = init_params(DESK, 3)
    p["mlm_bias"].data[7] = 100.0
    out = tasks.greedy_decode(feats(8), p, 100)
    assert out == [7] * (DESK.max_len - 8 - 4)


def test_bleu_examples():
    ref = [1, 2, 3, 4, 5, 6]
    assert tasks.bleu_n(ref, ref, 4) == pytest.approx(1.0)
    assert tasks.bleu_n([], ref, 4) == 0.0
    assert tasks.bleu_n([9, 9, 9], ref, 1) == 0.0
    # 3-token hypothesis, all n-grams match: brevity penalty only
    assert tasks.bleu_n([1, 2, 3], ref, 3) == pytest.approx(np.exp(1 - 6 / 3))
    # clipped unigram precision 2/4, bigram 1/3; no brevity penalty
    assert tasks.bleu_n([1, 1, 2, 7], [1, 2, 5, 6], 2) == pytest.approx(np.sqrt(0.5 * (1 / 3)))


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_bleu_agrees_with_nltk():
    nltk = pytest.importorskip("nltk.translate.bleu_score")
    rng = np.random.default_rng(0)
    for _ in range(50):
        ref = list(rng.integers(0, 6, rng.integers(4, 12)))
        hyp = list(rng.integers(0, 6, rng.integers(4, 12)))
        for n in (3, 4):
            want = nltk.sentence_bleu([ref], hyp, weights=[1 / n] * n)
            assert tasks.bleu_n(hyp, ref, n) == pytest.approx(want, abs=1e-12)
