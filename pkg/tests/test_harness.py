import numpy as np
import pytest

from lnprobe.analysis import DetectionConfig, detect_outliers
from lnprobe.data import chunk_ids, load_corpus, mask_sequence, maskable_positions, pad_batch
from lnprobe.encoder import EncoderConfig, WordTokenizer, init_params, mini_schema
from lnprobe.errors import LnprobeError
from lnprobe.harness import (
    EvalConfig,
    anisotropy_check,
    compare_plans,
    comparison_csv,
    embedding_heatmap,
    evaluate,
    evaluate_plan,
    heatmap_tsv,
    masked_params,
    sweep_dims,
    sweep_layer_ranges,
    sweep_tsv,
)
from lnprobe.masking import BaselineSpec, MaskPlan, PlanEntry, apply_mask


TINY = EncoderConfig(num_layers=2, hidden_dim=16, num_heads=2, ff_dim=32,
                     vocab_size=32, max_seq_len=16)


def toy_sequences(n=12, length=10, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(5, TINY.vocab_size, size=length) for _ in range(n)]


class TestCorpus:
    def test_chunking_covers_all_tokens(self):
        ids = list(range(5, 605))  # 600 body tokens
        chunks = chunk_ids(ids, max_seq_len=256)
        assert len(chunks) == 3
        for c in chunks:
            assert c[0] == 2 and c[-1] == 3  # [CLS] ... [SEP]
            assert len(c) <= 256
        body = [t for c in chunks for t in c[1:-1]]
        assert body == ids

    def test_load_corpus_end_to_end(self, tmp_path):
        text = "the cat sat on the mat.\n\nthe dog slept."
        path = tmp_path / "corpus.txt"
        path.write_text(text)
        tok = WordTokenizer.train([text], max_vocab=64)
        seqs = load_corpus(path, tok, max_seq_len=16)
        assert len(seqs) == 2
        assert all(s[0] == 2 and s[-1] == 3 for s in seqs)

    def test_empty_corpus_rejected(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("\n\n  \n")
        tok = WordTokenizer.train(["a b c"], max_vocab=16)
        with pytest.raises(LnprobeError):
            load_corpus(path, tok, max_seq_len=16)

    def test_retokenization_is_deterministic(self, tmp_path):
        text = "repeated words repeated words and more words."
        path = tmp_path / "c.txt"
        path.write_text(text)
        tok = WordTokenizer.train([text], max_vocab=64)
        a = load_corpus(path, tok, max_seq_len=16)
        b = load_corpus(path, tok, max_seq_len=16)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestMasking:
    def test_mask_count_is_ceil_of_fraction(self):
        ids = np.array([2] + [10] * 20 + [3])  # 20 eligible
        masked, labels = mask_sequence(ids, 0.15, np.random.default_rng(0))
        assert (labels >= 0).sum() == 3  # ceil(0.15 * 20)
        assert np.all(masked[labels >= 0] == 4)  # [MASK]
        restored = masked.copy()
        restored[labels >= 0] = labels[labels >= 0]
        assert np.array_equal(restored, ids)

    def test_specials_never_masked(self):
        ids = np.array([2, 0, 1, 3, 4, 10, 11])
        assert list(maskable_positions(ids)) == [5, 6]

    def test_pad_batch_shapes(self):
        ids = [np.array([2, 10, 3]), np.array([2, 10, 11, 12, 3])]
        labels = [np.array([-1, 10, -1]), np.array([-1, -1, 11, -1, -1])]
        bids, blab, attn = pad_batch(ids, labels)
        assert bids.shape == blab.shape == attn.shape == (2, 5)
        assert bids[0, 3] == 0 and blab[0, 3] == -1 and attn[0, 3] == 0
        assert attn[1].sum() == 5


class TestEvaluate:
    def test_deterministic_and_batch_independent(self):
        params = init_params(TINY, seed=0)
        seqs = toy_sequences()
        a = evaluate(params, seqs, EvalConfig(seed=0, batch_size=16))
        b = evaluate(params, seqs, EvalConfig(seed=0, batch_size=3))
        assert a.cross_entropy == b.cross_entropy
        assert a.masked_token_count == b.masked_token_count

    def test_uniform_model_scores_log_vocab(self):
        params = init_params(TINY, seed=0)
        params.tensors["mlm.weight"][:] = 0
        params.tensors["mlm.bias"][:] = 0
        res = evaluate(params, toy_sequences(), EvalConfig(seed=0))
        assert res.cross_entropy == pytest.approx(np.log(TINY.vocab_size), abs=1e-9)

    def test_out_of_vocab_corpus_rejected(self):
        params = init_params(TINY, seed=0)
        with pytest.raises(LnprobeError, match="vocab"):
            evaluate(params, [np.array([2, 99, 3])], EvalConfig(seed=0))

    def test_empty_corpus_rejected(self):
        params = init_params(TINY, seed=0)
        with pytest.raises(LnprobeError):
            evaluate(params, [], EvalConfig(seed=0))


class TestSweep:
    def test_sweep_covers_every_dim_and_matches_compare(self):
        params = init_params(TINY, seed=1)
        seqs = toy_sequences(n=6)
        schema = mini_schema(TINY)
        config = EvalConfig(seed=0)
        sweep = sweep_dims(params, schema, seqs, config)
        assert len(sweep.per_dim) == TINY.hidden_dim
        # a singleton comparison of dim 5 must agree exactly with its sweep entry
        plan = MaskPlan(entries=(PlanEntry("output_ln", tuple(range(TINY.num_layers)),
                                           (5,), "ln_pair"),), provenance="manual")
        rows = compare_plans(params, schema, seqs, [("dim5", plan)], config)
        assert rows[0].result.cross_entropy == sweep.per_dim[5].cross_entropy

    def test_baseline_equals_unmasked_eval(self):
        params = init_params(TINY, seed=1)
        seqs = toy_sequences(n=6)
        sweep = sweep_dims(params, mini_schema(TINY), seqs, EvalConfig(seed=0))
        direct = evaluate(params, seqs, EvalConfig(seed=0))
        assert sweep.baseline.cross_entropy == direct.cross_entropy

    def test_sweep_tsv_layout(self, tmp_path):
        params = init_params(TINY, seed=1)
        sweep = sweep_dims(params, mini_schema(TINY), toy_sequences(n=4), EvalConfig(seed=0))
        path = tmp_path / "sweep.tsv"
        sweep_tsv(sweep, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "dim\tcross_entropy"
        assert lines[1].startswith("-1\t")
        assert len(lines) == 2 + TINY.hidden_dim


class TestComparisons:
    def test_empty_plan_equals_baseline(self):
        params = init_params(TINY, seed=2)
        seqs = toy_sequences(n=6)
        schema = mini_schema(TINY)
        config = EvalConfig(seed=0)
        empty = MaskPlan(entries=(), provenance="manual")
        rows = compare_plans(params, schema, seqs, [("none", empty)], config)
        assert rows[0].result.cross_entropy == evaluate(params, seqs, config).cross_entropy
        assert rows[0].result.modified_weight_count == 0

    def test_random_baseline_reproducible_with_spread(self):
        params = init_params(TINY, seed=2)
        seqs = toy_sequences(n=4)
        schema = mini_schema(TINY)
        config = EvalConfig(seed=0, num_random_runs=5)
        spec = BaselineSpec(kind="random_dims", n=2, exclude=frozenset({3}), seed=11)
        a = compare_plans(params, schema, seqs, [("rand", spec)], config)
        b = compare_plans(params, schema, seqs, [("rand", spec)], config)
        assert a[0].result.cross_entropy == b[0].result.cross_entropy
        assert a[0].result.ce_std == b[0].result.ce_std
        assert a[0].result.num_runs == 5
        assert a[0].result.ce_std >= 0.0

    def test_comparison_csv_layout(self, tmp_path):
        params = init_params(TINY, seed=2)
        seqs = toy_sequences(n=4)
        schema = mini_schema(TINY)
        rows = compare_plans(params, schema, seqs,
                             [("none", MaskPlan(entries=(), provenance="manual"))],
                             EvalConfig(seed=0))
        path = tmp_path / "cmp.csv"
        comparison_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "plan,modified_weights,cross_entropy,ce_std,num_runs"
        assert lines[1].startswith("none,0,")


def doctored_params_with_outliers(dims, layers=None):
    """Plant large gamma/beta values so detection finds exactly `dims`."""
    params = init_params(TINY, seed=3)
    layers = range(TINY.num_layers) if layers is None else layers
    for layer in layers:
        for d in dims:
            params.tensors[f"layer.{layer}.ln.gamma"][d] = 9.0
            params.tensors[f"layer.{layer}.ln.beta"][d] = 9.0
    # break the degenerate init (std 0 elsewhere in beta)
    rng = np.random.default_rng(0)
    for layer in range(TINY.num_layers):
        params.tensors[f"layer.{layer}.ln.beta"] += rng.normal(0, 0.05, TINY.hidden_dim).astype(np.float32)
        params.tensors[f"layer.{layer}.ln.gamma"] += rng.normal(0, 0.05, TINY.hidden_dim).astype(np.float32)
    return params


class TestLayerRanges:
    def test_full_range_equals_plain_outlier_mask(self):
        params = doctored_params_with_outliers([5])
        schema = mini_schema(TINY)
        report = detect_outliers(params.to_checkpoint(), schema)
        assert report.outlier_dims == [5]
        seqs = toy_sequences(n=4)
        config = EvalConfig(seed=0)
        rows = sweep_layer_ranges(params, schema, seqs, report,
                                  [[], [0], list(range(TINY.num_layers))], config)
        assert rows[0].result.cross_entropy == evaluate(params, seqs, config).cross_entropy
        from lnprobe.masking import plan_outlier_mask
        full = evaluate_plan(params, schema, seqs, plan_outlier_mask(report), config)
        assert rows[2].result.cross_entropy == full.cross_entropy
        assert rows[2].result.modified_weight_count == 2 * TINY.num_layers


class TestHeatmap:
    def test_single_token_one_row_per_layer(self):
        params = init_params(TINY, seed=4)
        result = embedding_heatmap(params, np.array([7]), dims_to_mark=[5, 2])
        assert len(result.matrices) == TINY.num_layers
        for mat in result.matrices:
            assert mat.shape == (1, TINY.hidden_dim)
        assert result.marked_dims == [2, 5]

    def test_masked_columns_are_zero(self):
        params = init_params(TINY, seed=4)
        schema = mini_schema(TINY)
        plan = MaskPlan(entries=(PlanEntry("output_ln", tuple(range(TINY.num_layers)),
                                           (5,), "ln_pair"),), provenance="manual")
        masked = masked_params(params, schema, plan)
        result = embedding_heatmap(masked, np.array([7, 8, 9]))
        for mat in result.matrices:
            assert np.all(mat[:, 5] == 0.0)

    def test_tsv_layout(self, tmp_path):
        params = init_params(TINY, seed=4)
        result = embedding_heatmap(params, np.array([7, 8]))
        path = tmp_path / "heat.tsv"
        heatmap_tsv(result, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "layer\ttoken\tdim\tvalue"
        assert len(lines) == 1 + TINY.num_layers * 2 * TINY.hidden_dim


class TestAnisotropy:
    def test_planted_spike_scores_one_masked_scores_zero(self):
        params = init_params(TINY, seed=3)
        # a large final-layer shift at dim 5 makes every token abnormal there
        params.tensors[f"layer.{TINY.num_layers - 1}.ln.beta"][5] = 9.0
        seqs = toy_sequences(n=4)
        report = anisotropy_check(params, seqs, dims=[5], k_sigma=2.5)
        assert report.fraction_abnormal[5] > 0.9
        plan = MaskPlan(entries=(PlanEntry("output_ln", (TINY.num_layers - 1,),
                                           (5,), "ln_pair"),), provenance="manual")
        masked = masked_params(params, mini_schema(TINY), plan)
        after = anisotropy_check(masked, seqs, dims=[5], k_sigma=2.5)
        assert after.fraction_abnormal[5] < report.fraction_abnormal[5]
        assert after.fraction_abnormal[5] < 0.1

    def test_dim_out_of_range_rejected(self):
        params = init_params(TINY, seed=0)
        with pytest.raises(LnprobeError):
            anisotropy_check(params, toy_sequences(n=1), dims=[99])

    def test_token_count_accumulates(self):
        params = init_params(TINY, seed=0)
        seqs = [np.array([6, 7, 8]), np.array([9, 10])]
        report = anisotropy_check(params, seqs, dims=[0])
        assert report.token_count == 5
