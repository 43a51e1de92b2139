"""Brute-force verifiers.

Nothing here imports the selector, scheduler or attention kernels for the
arithmetic it checks: grid searches evaluate ``||s||^2`` point by point,
Top-K is checked by subset enumeration with exact rational sums, and the
attention reference rebuilds the whole forward pass with its own norm,
rotary (complex multiplication) and explicit -inf masking.

The ``check_*`` functions drive randomized trials against the production
code and return :class:`OracleReport` records.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import SFIError


@dataclass
class OracleReport:
    name: str
    trials: int = 0
    max_abs_error: float = 0.0
    max_rel_error: float = 0.0
    violations: int = 0
    worst_case: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def record(self, abs_err: float, rel_err: float, violated: bool, case: Callable[[], dict]) -> None:
        self.trials += 1
        if violated:
            self.violations += 1
        worse = rel_err > self.max_rel_error or (violated and self.violations == 1)
        self.max_abs_error = max(self.max_abs_error, float(abs_err))
        self.max_rel_error = max(self.max_rel_error, float(rel_err))
        if worse:
            self.worst_case = case()

    def to_json(self) -> str:
        return json.dumps(asdict(self) | {"passed": self.passed}, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    return str(o)


class OracleError(SFIError):
    code = "oracle"


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def _kl(a: np.ndarray, s: np.ndarray) -> float:
    pos = a > 0
    if np.any(s[pos] <= 0):
        return math.inf
    return float(np.sum(a[pos] * (np.log(a[pos]) - np.log(s[pos]))))


def kl_objective(f, r, s, lam: float) -> float:
    """(1 - lam) KL(f||s) + lam KL(r||s), with 0 log 0 = 0 and +inf where s misses mass."""
    f = np.asarray(getattr(f, "mass", f), dtype=np.float64)
    r = np.asarray(getattr(r, "mass", r), dtype=np.float64)
    s = np.asarray(getattr(s, "mass", s), dtype=np.float64)
    terms = []
    if lam < 1:
        terms.append((1.0 - lam) * _kl(f, s))
    if lam > 0:
        terms.append(lam * _kl(r, s))
    return float(sum(terms))


def lambda_grid_min(f, r, lambda_clip: float, step: float = 1e-5) -> float:
    """First grid point of ``{0, step, 2 step, ..., lambda_clip}`` minimizing ||(1-l) f + l r||^2."""
    if step <= 0:
        raise OracleError("grid step must be > 0", step=step)
    f = np.asarray(getattr(f, "mass", f), dtype=np.float64)
    r = np.asarray(getattr(r, "mass", r), dtype=np.float64)
    n = int(math.floor(lambda_clip / step + 1e-9))
    grid = np.arange(n + 1, dtype=np.float64) * step
    if grid[-1] < lambda_clip:
        grid = np.append(grid, lambda_clip)
    best_val, best_lam = math.inf, 0.0
    for chunk in np.array_split(grid, max(1, grid.size * f.size // 2_000_000 + 1)):
        s = (1.0 - chunk)[:, None] * f[None, :] + chunk[:, None] * r[None, :]
        vals = np.sum(s * s, axis=1)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best_lam = float(vals[i]), float(chunk[i])
    return best_lam


def geometric_mixture(f, r, lam: float) -> np.ndarray:
    """Forward-KL fusion: s proportional to f^(1-lam) r^lam."""
    f = np.asarray(getattr(f, "mass", f), dtype=np.float64)
    r = np.asarray(getattr(r, "mass", r), dtype=np.float64)
    if lam == 0:
        return f / f.sum()
    if lam == 1:
        return r / r.sum()
    g = f ** (1.0 - lam) * r**lam
    total = g.sum()
    if total <= 0:
        raise OracleError("geometric mixture vanishes everywhere")
    return g / total


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


def exhaustive_top_k(scores: Sequence[float], k: int) -> tuple[int, ...]:
    """Best-total k-subset by enumeration; ties go to the lexicographically smallest tuple."""
    scores = [Fraction(float(x)) for x in scores]
    n = len(scores)
    if n > 20:
        raise OracleError("exhaustive_top_k is for |scores| <= 20", n=n)
    k = max(0, min(k, n))
    best, best_sum = (), None
    for combo in itertools.combinations(range(n), k):  # lexicographic order
        total = sum((scores[i] for i in combo), Fraction(0))
        if best_sum is None or total > best_sum:
            best, best_sum = combo, total
    return best


def neighborhood_max_loop(z: Sequence[float], radius: int) -> list[float]:
    n = len(z)
    return [max(z[max(0, j - radius) : min(n, j + radius + 1)]) for j in range(n)]


# ---------------------------------------------------------------------------
# trigger policy
# ---------------------------------------------------------------------------


def replay_step_types(tokens: Sequence[int], trigger_tokens, t_max: int) -> list[str]:
    """Slow/fast labels implied by an emitted token stream.

    Step 0 is slow; step t >= 1 is slow iff token t-1 is a trigger or
    ``t_max`` steps have passed since the last slow step.
    """
    trig = set(trigger_tokens)
    out, last_slow = [], 0
    for t in range(len(tokens)):
        slow = t == 0 or tokens[t - 1] in trig or t - last_slow >= t_max
        if slow:
            last_slow = t
        out.append("slow" if slow else "fast")
    return out


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _rope_complex(x: np.ndarray, pos: int, base: float) -> np.ndarray:
    half = x.shape[-1] // 2
    theta = pos * base ** (-np.arange(half) / half)
    z = (x[..., :half] + 1j * x[..., half:]) * np.exp(1j * theta)
    return np.concatenate([z.real, z.imag], axis=-1)


def masked_attention_reference(
    model,
    prompt: Sequence[int],
    mask: Sequence[Sequence[Sequence[int]]] | None = None,
    kv_dtype=np.float32,
) -> dict:
    """Quadratic forward pass over ``prompt``.

    Every position attends causally to all earlier positions except the last
    one, which attends only to ``mask[layer][kv_head]`` (1-based positions).
    Keys and values are rounded through ``kv_dtype`` to match cache storage.
    Returns ``{"logits": ..., "attn": [per-layer (Hq, d) outputs at the last position]}``.
    """
    spec, W = model.spec, model.weights
    L = len(prompt)
    Hq, H, d = spec.n_query_heads, spec.n_kv_heads, spec.head_dim
    G = Hq // H

    def rms(v, g):
        return v / math.sqrt(float(np.dot(v, v)) / v.size + 1e-6) * g.astype(np.float64)

    xs = [W["embed"][t].astype(np.float64) for t in prompt]
    last_attn = []
    for layer in range(spec.n_layers):
        p = f"l{layer}."
        qs, ks, vs = [], [], []
        for i, x in enumerate(xs):
            h = rms(x, W[p + "attn_norm"])
            q = (h @ W[p + "wq"].astype(np.float64)).reshape(Hq, d)
            k = (h @ W[p + "wk"].astype(np.float64)).reshape(H, d)
            v = (h @ W[p + "wv"].astype(np.float64)).reshape(H, d)
            qs.append(_rope_complex(q, i + 1, spec.rope_base))
            ks.append(_rope_complex(k, i + 1, spec.rope_base).astype(kv_dtype).astype(np.float64))
            vs.append(v.astype(kv_dtype).astype(np.float64))
        K = np.stack(ks, axis=1)  # (H, L, d)
        V = np.stack(vs, axis=1)
        new_xs = []
        for i, x in enumerate(xs):
            heads = np.empty((Hq, d))
            for qh in range(Hq):
                kv = qh // G
                logits = np.full(L, -np.inf)
                if i == L - 1 and mask is not None:
                    visible = np.asarray(sorted(mask[layer][kv]), dtype=np.int64) - 1
                else:
                    visible = np.arange(i + 1)
                logits[visible] = K[kv, visible] @ qs[i][qh] / math.sqrt(d)
                w = np.exp(logits - logits.max())
                heads[qh] = (w / w.sum()) @ V[kv]
            if i == L - 1:
                last_attn.append(heads.copy())
            y = x + heads.reshape(-1) @ W[p + "wo"].astype(np.float64)
            h2 = rms(y, W[p + "mlp_norm"])
            gate = h2 @ W[p + "w_gate"].astype(np.float64)
            up = h2 @ W[p + "w_up"].astype(np.float64)
            silu = gate / (1.0 + np.exp(-gate))
            new_xs.append(y + (silu * up) @ W[p + "w_down"].astype(np.float64))
        xs = new_xs
    final = rms(xs[-1], W["final_norm"]) @ W["lm_head"].astype(np.float64)
    return {"logits": final, "attn": last_attn}
