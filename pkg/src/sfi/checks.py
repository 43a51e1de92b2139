"""Randomized trials comparing production code against :mod:`sfi.oracle`.

Each ``check_*`` function returns an :class:`~sfi.oracle.OracleReport`.
Trial counts default to the release-suite sizes; tests and the CLI may pass
smaller ones for quick runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import replace
from typing import Callable

import numpy as np

from . import oracle
from .attention import KvStore, ModelSpec, build_toy_model, prefill, reorganize_compact, sparse_attention_step
from .core import CacheLimits, ScoreDistribution, SelectorConfig, TriggerConfig
from .oracle import OracleReport
from .scheduler import run_request
from .selector import evidence_matrix, fuse, lambda_star, refine_cross_head, refine_soft_nms, select_top_k


def _timed(fn: Callable[..., OracleReport]) -> Callable[..., OracleReport]:
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        rep = fn(*args, **kwargs)
        rep.seconds = time.perf_counter() - t0
        return rep

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _dirichlet(rng, n: int) -> np.ndarray:
    conc = rng.choice([0.1, 0.5, 1.0, 5.0])
    p = rng.dirichlet(np.full(n, conc))
    p = np.maximum(p, 1e-300)
    return p / p.sum()


def _interior_pair(rng, n: int, clip: float) -> tuple[np.ndarray, np.ndarray]:
    """(f, r) whose unclipped ratio lands strictly inside (0, clip).

    r moves from uniform (ratio > 0 for non-uniform f) toward a point mass on
    argmax f (ratio < 0); bisection on the blend hits the target ratio.
    """
    f = _dirichlet(rng, n)
    u = np.full(n, 1.0 / n)
    e = np.zeros(n)
    e[int(np.argmax(f))] = 1.0
    target = rng.uniform(0.1, 0.9) * clip

    def ratio(b):
        r = (1 - b) * u + b * e
        d = f - r
        return (f @ f - f @ r) / (d @ d)

    lo, hi = 0.0, 1.0
    if not ratio(lo) > target > ratio(hi):
        return f, u
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if ratio(mid) > target:
            lo = mid
        else:
            hi = mid
    r = (1 - lo) * u + lo * e
    return f, r / r.sum()


@_timed
def check_lambda_closed_form(trials: int = 1000, seed: int = 0, step: float = 1e-5, tol: float = 2e-5) -> OracleReport:
    """Closed-form lambda* against the dense grid minimizer of ||s||^2."""
    rng = np.random.default_rng(seed)
    rep = OracleReport("lambda_closed_form")
    for i in range(trials):
        n = int(rng.integers(8, 513))
        clip = 0.02 if rng.random() < 0.5 else float(rng.uniform(0.001, 0.05))
        if i % 2:
            f, r = _interior_pair(rng, n, clip)
        else:
            f, r = _dirichlet(rng, n), _dirichlet(rng, n)
        lam = float(lambda_star(f, r, clip, 1e-8))
        grid = oracle.lambda_grid_min(f, r, clip, step)
        err = abs(lam - grid)
        s_star = (1 - lam) * f + lam * r
        s_grid = (1 - grid) * f + grid * r
        # the closed form must be at least as good as the best grid point
        worse = s_star @ s_star > s_grid @ s_grid * (1 + 1e-12)
        rep.record(err, err / max(clip, 1e-12), err > tol or worse,
                   lambda: {"n": n, "clip": clip, "lambda_star": lam, "grid": grid, "f": f, "r": r})
    return rep


@_timed
def check_kl_minimizer(trials: int = 200, perturbations: int = 100, seed: int = 1) -> OracleReport:
    """The interpolated s beats random simplex perturbations on the weighted reverse-KL objective."""
    rng = np.random.default_rng(seed)
    rep = OracleReport("kl_minimizer")
    cfg = SelectorConfig()
    for _ in range(trials):
        n = int(rng.integers(8, 513))
        f, r = _dirichlet(rng, n), _dirichlet(rng, n)
        cfg_t = replace(cfg, lambda_clip=float(rng.choice([0.02, rng.uniform(0, 1)])))
        fused = fuse(ScoreDistribution(np.arange(1, n + 1), f), ScoreDistribution(np.arange(1, n + 1), r), cfg_t)
        lam, s = fused.lambda_star, fused.fused.mass
        base = oracle.kl_objective(f, r, s, lam)
        sigma = rng.uniform(1e-3, 0.5, size=perturbations)
        noise = np.exp(sigma[:, None] * rng.standard_normal((perturbations, n)))
        pert = s[None, :] * noise
        pert /= pert.sum(axis=1, keepdims=True)
        vals = np.array([oracle.kl_objective(f, r, p, lam) for p in pert])
        margin = float(np.min(vals - base))
        rep.record(max(0.0, -margin), max(0.0, -margin) / max(abs(base), 1e-300), margin <= 0,
                   lambda: {"n": n, "lambda": lam, "objective": base, "best_perturbed": float(vals.min())})
    return rep


@_timed
def check_am_gm(trials: int = 100_000, seed: int = 2, n: int = 16) -> OracleReport:
    """Pointwise (1-l) f + l r >= f^(1-l) r^l for the fused output."""
    rng = np.random.default_rng(seed)
    rep = OracleReport("am_gm_dominance")
    chunk = 10_000
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        f = rng.dirichlet(np.ones(n), size=m)
        r = rng.dirichlet(np.full(n, 0.3), size=m)
        clip = rng.uniform(0, 1, size=m)
        lam = lambda_star(f, r, clip, 1e-8)
        s = (1 - lam)[:, None] * f + lam[:, None] * r
        geo = f ** (1 - lam)[:, None] * r ** lam[:, None]
        gap = s - geo
        # equality holds at lam = 0 and wherever f = r; allow float rounding there
        bad = gap < -1e-12 * np.maximum(s, geo)
        viol_rows = np.flatnonzero(bad.any(axis=1))
        worst = float(max(0.0, -gap.min()))
        rep.trials += m
        rep.violations += int(viol_rows.size)
        rep.max_abs_error = max(rep.max_abs_error, worst)
        if viol_rows.size and not rep.worst_case:
            i = int(viol_rows[0])
            rep.worst_case = {"f": f[i], "r": r[i], "lambda": float(lam[i])}
        done += m
    return rep


def _softmax_reference(row) -> list[float]:
    m = max(row)
    e = [math.exp(x - m) for x in row]
    total = math.fsum(e)
    return [x / total for x in e]


@_timed
def check_w1_evidence(trials: int = 100, seed: int = 3, tol: float = 1e-12) -> OracleReport:
    """Single-row windows reproduce the softmax row for any alpha."""
    rng = np.random.default_rng(seed)
    rep = OracleReport("w1_evidence")
    for _ in range(trials):
        n = int(rng.integers(1, 300))
        H = int(rng.integers(1, 4))
        alpha = float(rng.uniform(0.05, 1.0))
        logits = rng.normal(0, rng.uniform(0.1, 10), size=(H, 1, n))
        f = evidence_matrix(logits, alpha)
        err = max(max(abs(a - b) for a, b in zip(f[h], _softmax_reference(logits[h, 0].tolist()))) for h in range(H))
        rep.record(err, err, err > tol, lambda: {"alpha": alpha, "logits": logits})
    return rep


@_timed
def check_top_k(trials: int = 500, seed: int = 4, max_n: int = 12, max_k: int = 6) -> OracleReport:
    """select_top_k against subset enumeration for every k <= max_k."""
    rng = np.random.default_rng(seed)
    rep = OracleReport("top_k_exhaustive")
    for i in range(trials):
        n = int(rng.integers(0, max_n + 1))
        if i % 2:
            scores = rng.integers(-3, 4, size=n).astype(np.float64)  # many ties
        else:
            scores = rng.normal(size=n)
        for k in range(0, max_k + 1):
            got = tuple(int(x) for x in select_top_k(scores, k))
            want = oracle.exhaustive_top_k(scores.tolist(), k)
            rep.record(0.0, 0.0, got != want, lambda: {"scores": scores, "k": k, "got": got, "want": want})
    return rep


def _random_sparse_case(rng, spec: ModelSpec):
    L = int(rng.integers(2, 129))
    model = build_toy_model(spec, seed=int(rng.integers(2**31)))
    prompt = rng.integers(0, spec.vocab_size, size=L).tolist()
    n_sink = int(rng.integers(0, min(4, L - 1) + 1))
    n_recent = int(rng.integers(1, L - n_sink + 1))
    recent_start = L - n_recent + 1
    sink = np.arange(1, n_sink + 1)
    pool = np.arange(n_sink + 1, recent_start)
    selected = []
    for _ in range(spec.n_layers):
        heads = []
        for _ in range(spec.n_kv_heads):
            k = int(rng.integers(0, pool.size + 1))
            heads.append(np.sort(rng.choice(pool, size=k, replace=False)) if k else np.empty(0, np.int64))
        selected.append(heads)
    return model, prompt, sink, recent_start, selected


@_timed
def check_sparse_attention(trials: int = 200, seed: int = 5, tol: float = 1e-6) -> OracleReport:
    """Fast-step logits against the quadratic masked reference."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec(n_layers=2, n_query_heads=4, n_kv_heads=2, head_dim=16, vocab_size=32, max_positions=256)
    rep = OracleReport("sparse_attention")
    for _ in range(trials):
        model, prompt, sink, recent_start, selected = _random_sparse_case(rng, spec)
        L = len(prompt)
        store = KvStore.for_model(spec, capacity=L)
        prefill(model, store, prompt[:-1])
        for layer in range(spec.n_layers):
            reorganize_compact(store, layer, selected[layer], sink)
        got = sparse_attention_step(model, store, prompt[-1], recent_start).logits_vocab
        recent = np.arange(recent_start, L + 1)
        mask = [[np.union1d(np.union1d(sink, sel), recent) for sel in layer] for layer in selected]
        want = oracle.masked_attention_reference(model, prompt, mask)["logits"]
        abs_err = float(np.max(np.abs(got - want)))
        rel = abs_err / float(np.max(np.abs(want)))
        rep.record(abs_err, rel, rel > tol,
                   lambda: {"L": L, "recent_start": recent_start, "sink": sink, "selected": selected})
    return rep


@_timed
def check_trigger_replay(runs: int = 20, seed: int = 6) -> OracleReport:
    """Logged slow/fast labels against an independent replay of the trigger rule."""
    rng = np.random.default_rng(seed)
    rep = OracleReport("trigger_replay")
    spec = ModelSpec(vocab_size=16, max_positions=512)
    for i in range(runs):
        model = build_toy_model(spec, seed=int(rng.integers(2**31)))
        trig_ids = frozenset(int(x) for x in rng.choice(spec.vocab_size, size=int(rng.integers(1, 5)), replace=False))
        trig = TriggerConfig(trigger_tokens=trig_ids, t_max=int(rng.integers(1, 12)), window_decode=int(rng.integers(1, 4)))
        limits = CacheLimits(n_sink=2, n_recent=8, k_budget=int(rng.integers(0, 16)))
        prompt = rng.integers(0, spec.vocab_size, size=int(rng.integers(4, 64))).tolist()
        res = run_request(prompt, limits, trig, SelectorConfig(k_budget=limits.k_budget), model, max_new=96)
        got = [rec.type for rec in res.log]
        want = oracle.replay_step_types(res.tokens, trig.trigger_tokens, trig.t_max)
        mismatches = sum(a != b for a, b in zip(got, want)) + abs(len(got) - len(want))
        rep.record(mismatches, 0.0, mismatches > 0,
                   lambda: {"run": i, "tokens": res.tokens, "got": got, "want": want, "t_max": trig.t_max})
    return rep


@_timed
def check_refinement(trials: int = 10_000, seed: int = 7) -> OracleReport:
    """Soft-NMS and cross-head invariants on random score fields."""
    rng = np.random.default_rng(seed)
    rep = OracleReport("refinement_invariants")
    for _ in range(trials):
        H = int(rng.integers(1, 5))
        n = int(rng.integers(1, 40))
        radius = int(rng.integers(0, 5))
        cfg = SelectorConfig(alpha_soft=float(rng.uniform(0, 2)), alpha_cross=float(rng.uniform(0, 1)),
                             temperature=float(rng.uniform(0.1, 3)), nms_radius=radius)
        z = rng.normal(scale=rng.uniform(0.1, 5), size=(H, n))
        if rng.random() < 0.3:
            z = np.round(z)  # plateaus
        nms = refine_soft_nms(z, cfg)
        cross = refine_cross_head(nms, cfg)
        problems = []
        if np.any(nms > z):
            problems.append("nms increased a score")
        for h in range(H):
            row = z[h].tolist()
            for j in range(n):
                lo, hi = max(0, j - radius), min(n, j + radius + 1)
                others = row[lo:j] + row[j + 1 : hi]
                if all(row[j] > o for o in others) and nms[h, j] != z[h, j]:
                    problems.append(f"strict local max moved at head {h} index {j}")
            ref_m = oracle.neighborhood_max_loop(row, radius)
            ref = [a - cfg.alpha_soft * max(m - a, 0.0) for a, m in zip(row, ref_m)]
            if max(abs(a - b) for a, b in zip(ref, nms[h])) > 1e-12 * (1 + max(abs(x) for x in row)):
                problems.append("nms disagrees with loop reference")
        if np.any(cross > nms):
            problems.append("cross-head adjustment positive")
        if not np.array_equal(refine_cross_head(nms[:1], cfg), nms[:1]):
            problems.append("H=1 adjustment nonzero")
        if not np.array_equal(refine_cross_head(nms, replace(cfg, alpha_cross=0.0)), nms):
            problems.append("alpha_cross=0 adjustment nonzero")
        rep.record(0.0, 0.0, bool(problems), lambda: {"z": z, "cfg": repr(cfg), "problems": problems})
    return rep


SUITE = {
    "lambda_closed_form": check_lambda_closed_form,
    "kl_minimizer": check_kl_minimizer,
    "am_gm_dominance": check_am_gm,
    "w1_evidence": check_w1_evidence,
    "top_k_exhaustive": check_top_k,
    "sparse_attention": check_sparse_attention,
    "trigger_replay": check_trigger_replay,
    "refinement_invariants": check_refinement,
}

QUICK = {
    "lambda_closed_form": {"trials": 50},
    "kl_minimizer": {"trials": 20},
    "am_gm_dominance": {"trials": 5000},
    "w1_evidence": {"trials": 20},
    "top_k_exhaustive": {"trials": 50},
    "sparse_attention": {"trials": 10},
    "trigger_replay": {"runs": 4},
    "refinement_invariants": {"trials": 500},
}


def run_oracle_suite(quick: bool = False, seed: int | None = None, names=None) -> list[OracleReport]:
    reports = []
    for name, fn in SUITE.items():
        if names and name not in names:
            continue
        kwargs = dict(QUICK[name]) if quick else {}
        if seed is not None:
            kwargs["seed"] = seed
        reports.append(fn(**kwargs))
    return reports
