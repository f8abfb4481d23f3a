"""Quick invariant checks, run by ``intquant selftest``.

Each check compares the library against a slow reference written with
Python integers (or plain float math) and returns ``(name, ok, detail)``.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from intquant import fixedpoint as fp
from intquant.converter import convert, verify_correspondence
from intquant.kernels import gemm_accumulate
from intquant.quantization import normalize_multiplier


def _round_half_away_shift(x: int, n: int) -> int:
    q = Fraction(x, 1 << n)
    r = math.floor(abs(q) + Fraction(1, 2))
    return r if q >= 0 else -r


def check_rounding_shift(cases: int = 20000, seed: int = 0):
    rng = np.random.default_rng(seed)
    x = rng.integers(fp.INT32_MIN, fp.INT32_MAX, cases, endpoint=True)
    n = rng.integers(0, 32, cases)
    got = fp.rounding_divide_by_pot(x, n)
    bad = sum(int(g) != _round_half_away_shift(int(a), int(b)) for g, a, b in zip(got, x, n))
    ok = bad == 0 and fp.rounding_divide_by_pot(-12, 3) == -2
    return "rounding_divide_by_pot", ok, f"{bad} mismatches over {cases}"


def check_srdhm(cases: int = 20000, seed: int = 1):
    rng = np.random.default_rng(seed)
    a = rng.integers(fp.INT32_MIN, fp.INT32_MAX, cases, endpoint=True)
    b = rng.integers(fp.INT32_MIN, fp.INT32_MAX, cases, endpoint=True)
    got = fp.saturating_rounding_doubling_high_mul(a, b)
    bad = 0
    for g, x, y in zip(got, a, b):
        x, y = int(x), int(y)
        want = fp.INT32_MAX if x == y == fp.INT32_MIN else (x * y + (1 << 30)) >> 31
        bad += int(g) != want
    return "saturating_rounding_doubling_high_mul", bad == 0, f"{bad} mismatches over {cases}"


def check_multipliers(cases: int = 20000, seed: int = 2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for m in rng.uniform(1e-9, 1.0, cases):
        q = normalize_multiplier(float(m))
        worst = max(worst, abs(q.to_float() - m) / m)
    return "normalize_multiplier", bool(worst <= 2.0**-30), f"max relative error {worst:.3e}"


def check_factoring(trials: int = 100, seed: int = 3):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(trials):
        m, k, n = (int(v) for v in rng.integers(1, 17, 3))
        z1, z2 = (int(v) for v in rng.choice([0, 128, 255], 2))
        lhs = rng.integers(0, 256, (m, k))
        rhs = rng.integers(0, 256, (k, n))
        naive = [
            [sum((int(lhs[i, j]) - z1) * (int(rhs[j, c]) - z2) for j in range(k)) for c in range(n)]
            for i in range(m)
        ]
        bad += not np.array_equal(gemm_accumulate(lhs, z1, rhs, z2), np.array(naive))
    return "zero_point_factoring", bad == 0, f"{bad} mismatches over {trials} products"


def check_tanh_logistic(cases: int = 20000, seed: int = 4):
    rng = np.random.default_rng(seed)
    raw = rng.integers(fp.INT32_MIN + 1, fp.INT32_MAX, cases, endpoint=True)
    x, xn = fp.FixedQ(raw, 5), fp.FixedQ(-raw, 5)
    t, tn = fp.fixed_tanh(x), fp.fixed_tanh(xn)
    s, sn = fp.fixed_logistic(x), fp.fixed_logistic(xn)
    bad = int(np.sum(t.raw != -tn.raw) + np.sum(np.abs(s.raw + sn.raw - (1 << 31)) > 1))
    v = x.to_float()
    err = float(max(np.max(np.abs(t.to_float() - np.tanh(v))), np.max(np.abs(s.to_float() - 1 / (1 + np.exp(-v))))))
    ok = bad == 0 and err <= 2.0**-8
    return "fixed_tanh_logistic", ok, f"{bad} symmetry failures, max error {err:.3e}"


def check_correspondence(seed: int = 5):
    from intquant.simtrain.data import make_blobs
    from intquant.simtrain.trainer import TrainConfig, mlp_spec, train

    ds = make_blobs(300, seed=seed)
    res = train(mlp_spec((8,), 2), ds, TrainConfig(steps=60, quant_delay_steps=20, eval_interval=60, seed=seed))
    rep = verify_correspondence(res.graph, convert(res.graph), ds.features())
    ok = rep.max_divergence <= 1 and rep.argmax_agreement >= 0.99
    return "float_integer_correspondence", ok, f"max divergence {rep.max_divergence}, argmax {rep.argmax_agreement:.4f}"


CHECKS = (
    check_rounding_shift,
    check_srdhm,
    check_multipliers,
    check_factoring,
    check_tanh_logistic,
    check_correspondence,
)


def run_selftest() -> list[tuple[str, bool, str]]:
    return [c() for c in CHECKS]
