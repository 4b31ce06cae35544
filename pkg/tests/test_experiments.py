import numpy as np
import pytest

from vqkv.codebook import Codebook, codebook_similarity, load_codebook
from vqkv.experiments import (
    offdiag_energy,
    run_ablation_grid,
    run_attention_mse,
    run_codebook_similarity,
    run_experiment,
    run_h_dump,
    run_recall_sweep,
    run_serve_sim,
)
from vqkv.io import ExperimentConfig, read_matrix_csv, write_keydump
from vqkv.numerics import SeededRng
from vqkv.synthetic import make_head_model, query_covariance, spread_positions


def metrics(rows, label=""):
    return {r.metric: r.value for r in rows if r.label == label}


SMALL = dict(head_dim=8, context_length=512, calib_tokens=512, codebook_size=16, max_iters=10, clusters=8)


class TestSynthetic:
    def test_covariance_condition(self):
        cov = query_covariance(16, condition=100.0)
        eig = np.linalg.eigvalsh(cov)
        assert eig[-1] / eig[0] == pytest.approx(100.0)

    def test_covariance_correlation(self):
        cov = query_covariance(4, correlation=0.5)
        assert cov[0, 1] == 0.5 and cov[2, 2] == 1.0

    def test_bad_correlation(self):
        with pytest.raises(ValueError):
            query_covariance(4, correlation=-0.5)

    def test_rotation_preserves_spectrum(self):
        a = query_covariance(8, 50.0)
        b = query_covariance(8, 50.0, rotate=True, rng=SeededRng(1))
        np.testing.assert_allclose(np.linalg.eigvalsh(a), np.linalg.eigvalsh(b), rtol=1e-12)

    def test_duplicates_respect_gap(self):
        model = make_head_model(SeededRng(0), 4, key_noise=1.0)
        keys = model.keys(np.random.default_rng(0), 400, duplicate_fraction=0.05, min_gap=100)
        assert keys.shape == (400, 4)

    def test_spread_positions(self):
        p = spread_positions(np.random.default_rng(0), 100, 1000)
        assert len(np.unique(p)) == 100 and p.min() >= 0 and p.max() < 1000
        assert (np.diff(p) > 0).all()
        with pytest.raises(ValueError):
            spread_positions(np.random.default_rng(0), 10, 5)


class TestCodebookSimilarity:
    def test_identical_samples(self):
        cfg = ExperimentConfig(experiment="codebook_similarity", independent_samples=False, **SMALL)
        m = metrics(run_codebook_similarity(cfg))
        assert m["mean_sim_pre_pe"] == pytest.approx(1.0, abs=1e-12)
        assert m["mean_sim_post_pe"] == pytest.approx(1.0, abs=1e-12)

    def test_single_cluster_means(self):
        model = make_head_model(SeededRng(2), 8, clusters=1, key_noise=0.3)
        a = model.keys(np.random.default_rng(0), 2000).mean(axis=0, keepdims=True)
        b = model.keys(np.random.default_rng(1), 2000).mean(axis=0, keepdims=True)
        assert codebook_similarity(Codebook(a), Codebook(b)) == pytest.approx(1.0, abs=1e-3)

    def test_keydump_source(self, tmp_path):
        keys = np.random.default_rng(3).standard_normal((256, 8))
        write_keydump(keys, tmp_path / "a.bin")
        cfg = ExperimentConfig(
            experiment="codebook_similarity", source="keydump", keydump_path=str(tmp_path / "a.bin"), **SMALL
        )
        assert metrics(run_codebook_similarity(cfg))["mean_sim_pre_pe"] == pytest.approx(1.0, abs=1e-12)

    def test_too_small(self):
        cfg = ExperimentConfig(experiment="codebook_similarity", **{**SMALL, "context_length": 8})
        with pytest.raises(ValueError):
            run_codebook_similarity(cfg)


class TestHDump:
    def test_isotropic(self):
        cfg = ExperimentConfig(
            experiment="h_dump", rope_mode="none", head_dim=8, context_length=100_000,
            query_condition=1.0, query_rotate=False,
        )
        assert metrics(run_h_dump(cfg), "head=0")["offdiag_energy"] < 0.02

    def test_correlated(self):
        cfg = ExperimentConfig(
            experiment="h_dump", rope_mode="none", head_dim=8, context_length=100_000,
            query_condition=1.0, query_correlation=0.5, query_rotate=False,
        )
        m = metrics(run_h_dump(cfg), "head=0")
        expected = offdiag_energy(query_covariance(8, correlation=0.5))
        assert m["generating_offdiag_energy"] == pytest.approx(expected)
        assert abs(m["offdiag_energy"] - expected) <= 0.1 * expected

    def test_anisotropic_flag_and_files(self, tmp_path):
        cfg = ExperimentConfig(experiment="h_dump", head_dim=8, heads=2, context_length=2000)
        rows = run_h_dump(cfg, tmp_path)
        assert metrics(rows, "head=1")["not_scaled_identity"] == 1.0
        h = read_matrix_csv(tmp_path / "h_head1.csv")
        assert h.shape == (8, 8)
        np.testing.assert_allclose(h, h.T, rtol=1e-6)


class TestAttentionMse:
    def test_identity_h_matches_conventional(self):
        cfg = ExperimentConfig(experiment="attention_mse", rope_mode="none", h_mode="identity", n_seeds=2, **SMALL)
        m = metrics(run_attention_mse(cfg))
        assert abs(m["mean_mse_query_aware"] - m["mean_mse_conventional"]) <= 1e-9

    def test_lossless(self):
        cfg = ExperimentConfig(
            experiment="attention_mse", rope_mode="none",
            **{**SMALL, "context_length": 16, "codebook_size": 16},
        )
        m = metrics(run_attention_mse(cfg))
        assert m["mean_mse_conventional"] == 0.0
        # query-aware codewords pass through C_z L^{-1}, so they match the keys up to round-off
        assert m["mean_mse_query_aware"] < 1e-20

    def test_anisotropic_direction(self):
        cfg = ExperimentConfig(
            experiment="attention_mse", rope_mode="none", n_seeds=4, query_condition=100.0,
            **{**SMALL, "context_length": 2048, "codebook_size": 32},
        )
        m = metrics(run_attention_mse(cfg))
        assert m["mean_mse_query_aware"] < m["mean_mse_conventional"]


class TestAblation:
    def test_full_selection_is_exact(self):
        cfg = ExperimentConfig(
            experiment="ablation_grid", topk_fraction=1.0, decode_steps=3, window=8,
            **{**SMALL, "context_length": 256, "calib_tokens": 256},
        )
        m = metrics(run_ablation_grid(cfg))
        for name in ("baseline", "wrope", "qavq", "full"):
            assert m[f"{name}/max_output_error"] <= 1e-12
            assert m[f"{name}/mean_recall"] == 1.0

    def test_config_hash_on_rows(self):
        cfg = ExperimentConfig(experiment="ablation_grid", decode_steps=1, window=8, **SMALL)
        rows = run_ablation_grid(cfg)
        assert {r.config_hash for r in rows} == {cfg.config_hash()}


class TestRecallSweep:
    def test_rows_per_size(self):
        cfg = ExperimentConfig(experiment="recall_sweep", decode_steps=2, window=8, sweep_sizes=(4, 16), **SMALL)
        m = metrics(run_recall_sweep(cfg))
        assert set(m) == {"mean_recall@L=4", "mean_recall@L=16"}
        assert all(0.0 <= v <= 1.0 for v in m.values())


class TestServeSim:
    def test_full_fraction(self):
        cfg = ExperimentConfig(experiment="serve_sim", heads=2, decode_steps=2, topk_fraction=1.0, **SMALL)
        m = metrics(run_serve_sim(cfg))
        assert m["cumulative_sparsity"] == 1.0

    def test_accounting(self, tmp_path):
        cfg = ExperimentConfig(experiment="serve_sim", heads=2, decode_steps=3, **SMALL)
        rows = run_serve_sim(cfg, tmp_path)
        m = metrics(rows)
        assert m["aux_mem_ratio"] == 2 / (8 * 2)
        assert m["transfer_events"] == 2 * 3
        n_total = sum(512 + s + 1 for s in range(3))
        assert m["full_equiv_bytes"] == 2 * 2 * n_total * 8 * 2
        assert len((tmp_path / "serve_sim_ledger.jsonl").read_text().splitlines()) == 3

    def test_reproducible(self):
        cfg = ExperimentConfig(experiment="serve_sim", heads=2, decode_steps=2, workers=3, **SMALL)
        strip = lambda rows: [(r.metric, r.value, r.label) for r in rows]  # noqa: E731
        assert strip(run_serve_sim(cfg)) == strip(run_serve_sim(cfg.replace(workers=1)))

    def test_codebook_dir(self, tmp_path):
        train = ExperimentConfig(experiment="train_codebook", heads=2, **SMALL)
        run_experiment(train, tmp_path / "cb")
        assert load_codebook(tmp_path / "cb" / "head1.kvqc").size == 16
        cfg = ExperimentConfig(experiment="serve_sim", heads=2, decode_steps=1, codebook_dir=str(tmp_path / "cb"), **SMALL)
        assert metrics(run_serve_sim(cfg))["aux_mem_ratio"] == 0.125

    def test_missing_codebooks(self, tmp_path):
        cfg = ExperimentConfig(experiment="serve_sim", heads=2, codebook_dir=str(tmp_path), **SMALL)
        with pytest.raises(FileNotFoundError):
            run_serve_sim(cfg)


class TestQuantize:
    def test_indices_file(self, tmp_path):
        run_experiment(ExperimentConfig(experiment="train_codebook", heads=2, **SMALL), tmp_path / "cb")
        cfg = ExperimentConfig(experiment="quantize", heads=2, codebook_dir=str(tmp_path / "cb"), **SMALL)
        rows = run_experiment(cfg, tmp_path / "q")
        table = np.loadtxt(tmp_path / "q" / "indices.csv", delimiter=",", skiprows=1, dtype=int)
        assert table.shape == (512, 3)
        assert table[:, 1:].max() < 16
        assert metrics(rows, "head=0")["tokens"] == 512

    def test_needs_codebook_dir(self):
        with pytest.raises(ValueError):
            run_experiment(ExperimentConfig(experiment="quantize", **SMALL))
