"""Experiment drivers: each takes an :class:`ExperimentConfig` and returns report rows.

All randomness is derived from ``(cfg.seed + i, head, purpose)`` so a run is
fully determined by its config. Drivers that produce files take an
``out_dir``; nothing touches global state.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import exact_attention, recall_at_k
from .codebook import (
    Codebook,
    TrainConfig,
    attention_mse,
    codebook_similarity,
    estimate_h,
    load_codebook,
    quantization_objective,
    quantize,
    save_codebook,
    train_conventional,
    train_query_aware,
)
from .io import ExperimentConfig, ReportRow, read_keydump, write_matrix_csv, write_reports
from .numerics import SeededRng
from .offload import AccessLedger, TieredKvStore, decode_step
from .rope import RopeConfig, apply_rotation, post_pe_keys, query_scores
from .synthetic import HeadModel, make_head_model, spread_positions

log = logging.getLogger(__name__)

# stream tags for SeededRng.child(head, tag)
_CALIB, _EVAL, _SAMPLE_A, _SAMPLE_B, _TRAIN = 1, 2, 3, 4, 5

ABLATION_CONFIGS = {
    "baseline": ("standard", "conventional"),
    "wrope": ("windowed", "conventional"),
    "qavq": ("standard", "query_aware"),
    "full": ("windowed", "query_aware"),
}


def _seeds(cfg: ExperimentConfig):
    return [cfg.seed + i for i in range(cfg.n_seeds)]


def _gen(seed: int, head: int, tag: int) -> np.random.Generator:
    return SeededRng(seed).child(head, tag).generator()


def _head_model(cfg: ExperimentConfig, seed: int, head: int) -> HeadModel:
    return make_head_model(
        SeededRng(seed).child(head),
        cfg.head_dim,
        clusters=cfg.clusters,
        center_scale=cfg.center_scale,
        key_noise=cfg.key_noise,
        query_condition=cfg.query_condition,
        query_correlation=cfg.query_correlation,
        query_rotate=cfg.query_rotate,
    )


def _post_pe_queries(queries, positions, rope: RopeConfig | None):
    if rope is None:
        return np.asarray(queries, dtype=np.float64)
    if rope.windowed:
        return apply_rotation(queries, rope.bridge_offset, rope)
    return apply_rotation(queries, positions, rope)


def _train(cfg, keys_pe, queries_pe, kind, seed, head, size=None) -> Codebook:
    tc = TrainConfig(
        codebook_size=size or cfg.codebook_size,
        max_iters=cfg.max_iters,
        rng=SeededRng(seed).child(head, _TRAIN),
        h_regularization_eps=cfg.h_eps,
    )
    if kind == "conventional":
        return train_conventional(keys_pe, tc)
    if cfg.h_mode == "identity":
        h = np.eye(keys_pe.shape[1])
    else:
        h = estimate_h(queries_pe, cfg.h_eps)
    return train_query_aware(keys_pe, h, tc)


def _row(cfg, metric, value, units="", label=""):
    return ReportRow(cfg.experiment, cfg.config_hash(), metric, float(value), units, label)


def _calibration(cfg, model, seed, head, keydump=None):
    """Pre-PE calibration keys and queries (positions ``0..m-1``)."""
    gen = _gen(seed, head, _CALIB)
    keys = keydump if keydump is not None else model.keys(gen, cfg.calib_tokens)
    queries = model.queries(gen, len(keys))
    return keys, queries


def _calibrated_codebook(cfg, model, seed, head, mode, kind, size=None, keydump=None):
    keys, queries = _calibration(cfg, model, seed, head, keydump)
    rope = cfg.rope(mode)
    pos = np.arange(len(keys))
    return _train(cfg, post_pe_keys(keys, pos, rope), _post_pe_queries(queries, pos, rope), kind, seed, head, size)


# --------------------------------------------------------------------------
# inter-sample codebook similarity, pre-PE vs post-PE
# --------------------------------------------------------------------------

def run_codebook_similarity(cfg: ExperimentConfig) -> list[ReportRow]:
    rope = cfg.rope("standard")
    rows, pre_all, post_all = [], [], []
    for seed in _seeds(cfg):
        for head in range(cfg.heads):
            if cfg.source == "keydump":
                samples = [read_keydump(cfg.keydump_path), read_keydump(cfg.keydump_path_b or cfg.keydump_path)]
                positions = [np.arange(len(s)) for s in samples]
            else:
                model = _head_model(cfg, seed, head)
                tags = (_SAMPLE_A, _SAMPLE_B if cfg.independent_samples else _SAMPLE_A)
                samples, positions = [], []
                for tag in tags:
                    gen = _gen(seed, head, tag)
                    samples.append(model.keys(gen, cfg.context_length, cfg.duplicate_fraction))
                    positions.append(spread_positions(gen, cfg.context_length, cfg.position_span))
            for s in samples:
                if len(s) < cfg.codebook_size:
                    raise ValueError(f"sample of {len(s)} tokens is too small for {cfg.codebook_size} codewords")
            tc = TrainConfig(cfg.codebook_size, cfg.max_iters, rng=SeededRng(seed).child(head, _TRAIN))
            pre = [train_conventional(s, tc) for s in samples]
            post = [train_conventional(apply_rotation(s, p, rope), tc) for s, p in zip(samples, positions)]
            sim_pre = codebook_similarity(*pre)
            sim_post = codebook_similarity(*post)
            pre_all.append(sim_pre)
            post_all.append(sim_post)
            label = f"seed={seed},head={head}"
            rows += [_row(cfg, "sim_pre_pe", sim_pre, "cosine", label), _row(cfg, "sim_post_pe", sim_post, "cosine", label)]
    rows += [
        _row(cfg, "mean_sim_pre_pe", np.mean(pre_all), "cosine"),
        _row(cfg, "mean_sim_post_pe", np.mean(post_all), "cosine"),
        _row(cfg, "mean_sim_gap", np.mean(pre_all) - np.mean(post_all), "cosine"),
    ]
    return rows


# --------------------------------------------------------------------------
# query second-moment matrices
# --------------------------------------------------------------------------

def offdiag_energy(m) -> float:
    """Share of squared Frobenius mass that lies off the diagonal."""
    m = np.asarray(m, dtype=np.float64)
    total = np.sum(m * m)
    return float((total - np.sum(np.diag(m) ** 2)) / total)


def run_h_dump(cfg: ExperimentConfig, out_dir=None) -> list[ReportRow]:
    rope = cfg.rope()
    rows = []
    for head in range(cfg.heads):
        model = _head_model(cfg, cfg.seed, head)
        queries = model.queries(_gen(cfg.seed, head, _CALIB), cfg.context_length)
        h = estimate_h(_post_pe_queries(queries, np.arange(len(queries)), rope), eps=0.0)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_matrix_csv(h, Path(out_dir) / f"h_head{head}.csv")
        ratio = offdiag_energy(h)
        eig = np.linalg.eigvalsh(h)
        label = f"head={head}"
        rows += [
            _row(cfg, "offdiag_energy", ratio, "fraction", label),
            _row(cfg, "generating_offdiag_energy", offdiag_energy(model.query_cov), "fraction", label),
            _row(cfg, "condition_number", eig[-1] / eig[0], "", label),
            _row(cfg, "not_scaled_identity", float(ratio > 0), "flag", label),
        ]
    return rows


# --------------------------------------------------------------------------
# attention-score MSE, conventional vs query-aware
# --------------------------------------------------------------------------

def run_attention_mse(cfg: ExperimentConfig) -> list[ReportRow]:
    rope = cfg.rope()
    rows, conv, qa = [], [], []
    for seed in _seeds(cfg):
        for head in range(cfg.heads):
            model = _head_model(cfg, seed, head)
            gen = _gen(seed, head, _CALIB)
            keys = model.keys(gen, cfg.context_length, cfg.duplicate_fraction)
            train_q = model.queries(gen, cfg.calib_tokens)
            eval_q = model.queries(_gen(seed, head, _EVAL), cfg.calib_tokens)
            pos_k = np.arange(len(keys))
            pos_q = np.arange(len(train_q)) % len(keys)
            keys_pe = post_pe_keys(keys, pos_k, rope)
            train_pe = _post_pe_queries(train_q, pos_q, rope)
            eval_pe = _post_pe_queries(eval_q, pos_q, rope)
            m_conv = attention_mse(eval_pe, keys_pe, _train(cfg, keys_pe, train_pe, "conventional", seed, head))
            m_qa = attention_mse(eval_pe, keys_pe, _train(cfg, keys_pe, train_pe, "query_aware", seed, head))
            conv.append(m_conv)
            qa.append(m_qa)
            label = f"seed={seed},head={head}"
            rows += [
                _row(cfg, "mse_conventional", m_conv, "score^2", label),
                _row(cfg, "mse_query_aware", m_qa, "score^2", label),
            ]
    wins = int(np.sum(np.array(qa) < np.array(conv)))
    rows += [
        _row(cfg, "mean_mse_conventional", np.mean(conv), "score^2"),
        _row(cfg, "mean_mse_query_aware", np.mean(qa), "score^2"),
        _row(cfg, "qa_wins", wins, "count"),
        _row(cfg, "runs", len(qa), "count"),
    ]
    return rows


# --------------------------------------------------------------------------
# end-to-end decode traces: ablation grid and codebook-size sweep
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _Trace:
    model: HeadModel
    prefill_keys: np.ndarray
    prefill_values: np.ndarray
    step_keys: np.ndarray
    step_values: np.ndarray
    step_queries: np.ndarray


def _make_trace(cfg, seed, head) -> _Trace:
    model = _head_model(cfg, seed, head)
    gen = _gen(seed, head, _EVAL)
    n, t = cfg.context_length, cfg.decode_steps
    keys = model.keys(gen, n, cfg.duplicate_fraction, min_gap=4 * cfg.window)
    values = model.values(gen, n)
    return _Trace(model, keys, values, model.keys(gen, t), model.values(gen, t), model.queries(gen, t))


def _evaluate_trace(cfg, trace, seed, head, mode, kind, size=None, workers=1):
    rope = cfg.rope(mode)
    cb = _calibrated_codebook(cfg, trace.model, seed, head, mode, kind, size)
    store = TieredKvStore([cb], rope, cfg.element_width, cfg.index_width)
    store.extend(trace.prefill_keys[None], trace.prefill_values[None])
    policy = cfg.policy()
    recalls, errors, rel_errors = [], [], []
    for k, v, q in zip(trace.step_keys, trace.step_values, trace.step_queries):
        store.append_token(k[None], v[None])
        n = len(store)
        report = decode_step(store, q[None], policy, workers=workers)
        # Reference path: full-cache read outside the metered decode path.
        all_k, all_v = store.gather(0, np.arange(n))
        exact = query_scores(q, n - 1, all_k, rope)
        recalls.append(recall_at_k(report.selections[0].approx_scores, exact, policy.topk_count(n)))
        ref = exact_attention(q, all_k, all_v, rope)
        err = float(np.linalg.norm(report.outputs[0] - ref))
        errors.append(err)
        rel_errors.append(err / max(float(np.linalg.norm(ref)), 1e-300))
    return recalls, errors, rel_errors


def run_ablation_grid(cfg: ExperimentConfig) -> list[ReportRow]:
    rows = []
    summary = {name: ([], [], []) for name in ABLATION_CONFIGS}
    for seed in _seeds(cfg):
        for head in range(cfg.heads):
            trace = _make_trace(cfg, seed, head)
            label = f"seed={seed},head={head}"
            for name, (mode, kind) in ABLATION_CONFIGS.items():
                rec, err, rel = _evaluate_trace(cfg, trace, seed, head, mode, kind, workers=cfg.workers)
                summary[name][0].append(np.mean(rec))
                summary[name][1].append(np.mean(err))
                summary[name][2].append(np.max(err))
                rows += [
                    _row(cfg, f"{name}/recall", np.mean(rec), "fraction", label),
                    _row(cfg, f"{name}/output_error", np.mean(err), "l2", label),
                    _row(cfg, f"{name}/rel_output_error", np.mean(rel), "fraction", label),
                ]
    for name, (rec, err, mx) in summary.items():
        rows += [
            _row(cfg, f"{name}/mean_recall", np.mean(rec), "fraction"),
            _row(cfg, f"{name}/mean_output_error", np.mean(err), "l2"),
            _row(cfg, f"{name}/max_output_error", np.max(mx), "l2"),
        ]
    return rows


def run_recall_sweep(cfg: ExperimentConfig) -> list[ReportRow]:
    rows = []
    per_size = {s: [] for s in cfg.sweep_sizes}
    for seed in _seeds(cfg):
        for head in range(cfg.heads):
            trace = _make_trace(cfg, seed, head)
            for size in cfg.sweep_sizes:
                rec, _, _ = _evaluate_trace(cfg, trace, seed, head, cfg.rope_mode, cfg.vq_kind, size)
                per_size[size].append(np.mean(rec))
                rows.append(_row(cfg, f"recall@L={size}", np.mean(rec), "fraction", f"seed={seed},head={head}"))
    rows += [_row(cfg, f"mean_recall@L={s}", np.mean(v), "fraction") for s, v in per_size.items()]
    return rows


# --------------------------------------------------------------------------
# multi-step decode over the tiered store
# --------------------------------------------------------------------------

def _load_head_codebooks(directory, heads) -> list[Codebook]:
    paths = sorted(Path(directory).glob("head*.kvqc"), key=lambda p: int(p.stem[4:]))
    if len(paths) < heads:
        raise FileNotFoundError(f"{directory}: need {heads} head*.kvqc files, found {len(paths)}")
    return [load_codebook(p) for p in paths[:heads]]


def run_serve_sim(cfg: ExperimentConfig, out_dir=None) -> list[ReportRow]:
    seed = cfg.seed
    rope = cfg.rope()
    models = [_head_model(cfg, seed, h) for h in range(cfg.heads)]
    if cfg.codebook_dir:
        codebooks = _load_head_codebooks(cfg.codebook_dir, cfg.heads)
    else:
        codebooks = [
            _calibrated_codebook(cfg, m, seed, h, cfg.rope_mode, cfg.vq_kind) for h, m in enumerate(models)
        ]
    store = TieredKvStore(codebooks, rope, cfg.element_width, cfg.index_width)
    gens = [_gen(seed, h, _EVAL) for h in range(cfg.heads)]
    store.extend(
        np.stack([m.keys(g, cfg.context_length, cfg.duplicate_fraction) for m, g in zip(models, gens)]),
        np.stack([m.values(g, cfg.context_length) for m, g in zip(models, gens)]),
    )
    ledger = AccessLedger()
    policy = cfg.policy()
    rows, snapshots = [], []
    for step in range(cfg.decode_steps):
        store.append_token(
            np.stack([m.keys(g, 1)[0] for m, g in zip(models, gens)]),
            np.stack([m.values(g, 1)[0] for m, g in zip(models, gens)]),
        )
        queries = np.stack([m.queries(g, 1)[0] for m, g in zip(models, gens)])
        report = decode_step(store, queries, policy, ledger, workers=cfg.workers)
        label = f"step={step}"
        rows += [
            _row(cfg, "sparsity_ratio", report.sparsity_ratio, "fraction", label),
            _row(cfg, "mean_selected", np.mean(report.selected_counts), "tokens", label),
            _row(cfg, "context_length", len(store), "tokens", label),
        ]
        snapshots.append({"step": step, **ledger.snapshot()})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with (Path(out_dir) / "serve_sim_ledger.jsonl").open("a") as fh:
            for snap in snapshots:
                fh.write(json.dumps(snap, sort_keys=True) + "\n")
    snap = ledger.snapshot()
    rows += [
        _row(cfg, "aux_mem_ratio", snap["aux_mem"], "fraction"),
        _row(cfg, "cumulative_sparsity", snap["sparsity"], "fraction"),
        _row(cfg, "slow_bytes", snap["slow_bytes"], "bytes"),
        _row(cfg, "fast_bytes", snap["fast_bytes"], "bytes"),
        _row(cfg, "full_equiv_bytes", snap["full_equiv_bytes"], "bytes"),
        _row(cfg, "transfer_events", ledger.transfer_events, "count"),
    ]
    return rows


# --------------------------------------------------------------------------
# codebook files
# --------------------------------------------------------------------------

def run_train_codebook(cfg: ExperimentConfig, out_dir=None) -> list[ReportRow]:
    rows = []
    keydump = read_keydump(cfg.keydump_path) if cfg.source == "keydump" else None
    if keydump is not None and keydump.shape[1] != cfg.head_dim:
        raise ValueError(f"key dump has dim {keydump.shape[1]}, config says {cfg.head_dim}")
    for head in range(cfg.heads):
        model = _head_model(cfg, cfg.seed, head)
        cb = _calibrated_codebook(cfg, model, cfg.seed, head, cfg.rope_mode, cfg.vq_kind, keydump=keydump)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_codebook(cb, Path(out_dir) / f"head{head}.kvqc")
        label = f"head={head}"
        rows += [
            _row(cfg, "final_objective", cb.history[-1], "key^2" if cb.kind.value == "conventional" else "score^2", label),
            _row(cfg, "lloyd_assignments", len(cb.history), "count", label),
            _row(cfg, "codebook_size", cb.size, "codewords", label),
        ]
    return rows


def run_quantize(cfg: ExperimentConfig, out_dir=None) -> list[ReportRow]:
    if not cfg.codebook_dir:
        raise ValueError("quantize needs codebook_dir")
    rope = cfg.rope()
    heads = 1 if cfg.source == "keydump" else cfg.heads
    codebooks = _load_head_codebooks(cfg.codebook_dir, heads)
    rows, columns = [], []
    for head, cb in enumerate(codebooks):
        if cfg.source == "keydump":
            keys = read_keydump(cfg.keydump_path)
        else:
            keys = _head_model(cfg, cfg.seed, head).keys(_gen(cfg.seed, head, _EVAL), cfg.context_length)
        keys_pe = post_pe_keys(keys, np.arange(len(keys)), rope)
        idx = quantize(keys_pe, cb)
        columns.append(idx)
        label = f"head={head}"
        rows += [
            _row(cfg, "tokens", len(idx), "count", label),
            _row(cfg, "distinct_codewords", len(np.unique(idx)), "count", label),
            _row(cfg, "objective", quantization_objective(keys_pe, cb), "", label),
        ]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        table = np.column_stack([np.arange(len(columns[0]))] + columns)
        header = ",".join(["token"] + [f"head{h}" for h in range(len(columns))])
        np.savetxt(Path(out_dir) / "indices.csv", table, fmt="%d", delimiter=",", header=header, comments="")
    return rows


_DRIVERS = {
    "codebook_similarity": lambda cfg, out: run_codebook_similarity(cfg),
    "h_dump": run_h_dump,
    "attention_mse": lambda cfg, out: run_attention_mse(cfg),
    "recall_sweep": lambda cfg, out: run_recall_sweep(cfg),
    "ablation_grid": lambda cfg, out: run_ablation_grid(cfg),
    "serve_sim": run_serve_sim,
    "train_codebook": run_train_codebook,
    "quantize": run_quantize,
}


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> list[ReportRow]:
    """Run ``cfg.experiment``; with ``out_dir`` also append CSV/JSONL reports there."""
    rows = _DRIVERS[cfg.experiment](cfg, out_dir)
    if out_dir is not None:
        write_reports(rows, out_dir, cfg.experiment)
    return rows
