"""Property and oracle suites backing the ``verify`` command.

Each suite returns CheckResult rows; a check passes when its max error is
under its threshold (or the property holds exactly). The oracles here are
deliberately independent re-implementations: brute-force greedy FPS,
a double-loop Chamfer, a per-query attention evaluation.

All gradient checks run at 64-bit with central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import blocks
from . import geometry
from . import model as model_mod
from . import tensor as T
from . import training
from .model import ModelConfig
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    max_err: float
    threshold: float
    passed: bool
    detail: str = ""


@dataclass
class SuiteReport:
    name: str
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]


def toy_config() -> ModelConfig:
    """A 32-point model small enough for end-to-end finite differences."""
    return ModelConfig(n_input=32, embed_width=8, gdp_ratios=(2, 2, 2),
                       code_width=32, seed_points=8, seed_width=8,
                       seed_cloud=16, feat_width=8, heads=2)


# ---------------------------------------------------------------------------
# Independent oracles


def fps_bruteforce(pts: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection, recomputing all distances every step."""
    n = pts.shape[0]
    sel = [start]
    for _ in range(1, k):
        d = ((pts[:, None, :] - pts[None, sel, :]) ** 2).sum(axis=-1).min(axis=1)
        d[sel] = -1.0
        sel.append(int(np.argmax(d)))
    return np.asarray(sel, dtype=np.int64)


def chamfer_bruteforce(p: np.ndarray, s: np.ndarray, variant: str) -> float:
    """Double-loop Chamfer distance over raw coordinate differences."""
    acc_p = 0.0
    for i in range(p.shape[0]):
        best = min(float(((p[i] - s[j]) ** 2).sum()) for j in range(s.shape[0]))
        acc_p += math.sqrt(best) if variant == "l1" else best
    acc_s = 0.0
    for j in range(s.shape[0]):
        best = min(float(((s[j] - p[i]) ** 2).sum()) for i in range(p.shape[0]))
        acc_s += math.sqrt(best) if variant == "l1" else best
    return acc_p / p.shape[0] + acc_s / s.shape[0]


def multi_head_reference(q_in: np.ndarray, kv_in: np.ndarray, w_q, w_kv, w_out,
                         heads: int) -> np.ndarray:
    """Per-query, per-head attention evaluated with explicit loops."""
    q = q_in @ w_q
    kv = kv_in @ w_kv
    c = q.shape[1]
    d = c // heads
    out = np.zeros((q.shape[0], c))
    for h in range(heads):
        qh = q[:, h * d:(h + 1) * d]
        kh = kv[:, h * d:(h + 1) * d]
        for i in range(q.shape[0]):
            logits = np.array([qh[i] @ kh[j] for j in range(kh.shape[0])]) / math.sqrt(d)
            logits -= logits.max()
            w = np.exp(logits)
            w /= w.sum()
            out[i, h * d:(h + 1) * d] = sum(w[j] * kh[j] for j in range(kh.shape[0]))
    return out @ w_out


def softmax_highprec(row) -> np.ndarray:
    """Row softmax via arbitrary-precision exponentials (mpmath)."""
    import mpmath
    mpmath.mp.dps = 50
    es = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
    total = sum(es)
    return np.array([float(e / total) for e in es])


# ---------------------------------------------------------------------------
# Gradient suite


def _scalarized(op, rng):
    """Wrap a tensor->tensor op into a scalar function via a fixed projection."""
    cache = {}

    def f(x):
        y = op(x)
        if y.data.ndim == 0:
            return y
        key = y.data.shape
        if key not in cache:
            if y.data.ndim == 1:
                cache[key] = Tensor(rng.normal(size=(1, y.data.shape[0])))
            else:
                cache[key] = (Tensor(rng.normal(size=(1, y.data.shape[0]))),
                              Tensor(rng.normal(size=(y.data.shape[1], 1))))
        w = cache[key]
        if y.data.ndim == 1:
            return T.sum_all(T.matmul(w, T.reshape(y, (y.data.shape[0], 1))))
        u, v = w
        return T.sum_all(T.matmul(T.matmul(u, y), v))

    return f


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


def grads_suite(seed: int = 0, trials: int = 100) -> SuiteReport:
    report = SuiteReport(name="grads")
    rng = np.random.default_rng([seed, 0x6AD])
    tol = 1e-4

    def check(name, err, threshold=tol, detail=""):
        report.checks.append(CheckResult(name, float(err), threshold,
                                         float(err) < threshold, detail))

    def sweep(name, trial_fn, n_trials=trials):
        worst = 0.0
        for _ in range(n_trials):
            worst = max(worst, trial_fn())
        check(name, worst, detail=f"{n_trials} randomized trials")

    def matmul_trial():
        a, b = _rand(rng, 7, 5), _rand(rng, 5, 3)
        return max(T.grad_check(_scalarized(lambda t: T.matmul(t, b), rng), a),
                   T.grad_check(_scalarized(lambda t: T.matmul(a, t), rng), b))

    def layer_norm_trial():
        x, g, b = _rand(rng, 4, 8), _rand(rng, 8), _rand(rng, 8)
        return max(T.grad_check(_scalarized(lambda t: T.layer_norm(t, g, b), rng), x),
                   T.grad_check(_scalarized(lambda t: T.layer_norm(x, t, b), rng), g),
                   T.grad_check(_scalarized(lambda t: T.layer_norm(x, g, t), rng), b))

    def affine_trial():
        x, w, b = _rand(rng, 4, 3), _rand(rng, 3, 5), _rand(rng, 5)
        return max(T.grad_check(_scalarized(lambda t: T.affine(t, w, b), rng), x),
                   T.grad_check(_scalarized(lambda t: T.affine(x, t, b), rng), w),
                   T.grad_check(_scalarized(lambda t: T.affine(x, w, t), rng), b))

    def pairwise_trial():
        a, b = _rand(rng, 5, 3), _rand(rng, 4, 3)
        return max(
            T.grad_check(_scalarized(lambda t: geometry.pairwise_sq_dist(t, b), rng), a),
            T.grad_check(_scalarized(lambda t: geometry.pairwise_sq_dist(a, t), rng), b))

    def chamfer_trial(variant):
        p, s = _rand(rng, 6, 3), _rand(rng, 7, 3)
        return max(T.grad_check(lambda t: geometry.chamfer(t, s, variant), p),
                   T.grad_check(lambda t: geometry.chamfer(p, t, variant), s))

    sweep("matmul", matmul_trial)
    sweep("softmax_rows", lambda: T.grad_check(
        _scalarized(T.softmax_rows, rng), _rand(rng, 4, 6)))
    sweep("layer_norm", layer_norm_trial, n_trials=max(trials // 2, 10))
    sweep("relu", lambda: T.grad_check(_scalarized(T.relu, rng), _rand(rng, 5, 4)))
    sweep("add", lambda: T.grad_check(
        _scalarized(lambda t: T.add(t, _rand(rng, 3, 4)), rng), _rand(rng, 3, 4)))
    sweep("scale", lambda: T.grad_check(
        _scalarized(lambda t: T.scale(t, 2.5), rng), _rand(rng, 3, 4)))
    sweep("transpose", lambda: T.grad_check(
        _scalarized(T.transpose, rng), _rand(rng, 3, 4)))
    sweep("reshape", lambda: T.grad_check(
        _scalarized(lambda t: T.reshape(t, (2, 6)), rng), _rand(rng, 3, 4)))
    sweep("concat_cols", lambda: T.grad_check(
        _scalarized(lambda t: T.concat_cols([t, _rand(rng, 3, 4)]), rng), _rand(rng, 3, 2)))
    sweep("concat_rows", lambda: T.grad_check(
        _scalarized(lambda t: T.concat_rows([t, _rand(rng, 4, 3)]), rng), _rand(rng, 2, 3)))
    sweep("col_slice", lambda: T.grad_check(
        _scalarized(lambda t: T.col_slice(t, 1, 4), rng), _rand(rng, 4, 6)))
    sweep("tile_rows", lambda: T.grad_check(
        _scalarized(lambda t: T.tile_rows(t, 3), rng), _rand(rng, 3, 4)))
    sweep("max_over_rows", lambda: T.grad_check(
        _scalarized(T.max_over_rows, rng), _rand(rng, 5, 4)))
    sweep("sum_all", lambda: T.grad_check(T.sum_all, _rand(rng, 4, 3)))
    sweep("affine", affine_trial, n_trials=max(trials // 2, 10))
    sweep("gather_rows", lambda: T.grad_check(
        _scalarized(lambda t: geometry.gather_rows(t, np.array([2, 0, 5, 2])), rng),
        _rand(rng, 6, 4)))
    sweep("pairwise_sq_dist", pairwise_trial)
    sweep("chamfer_l1", lambda: chamfer_trial("l1"))
    sweep("chamfer_l2", lambda: chamfer_trial("l2"))
    check("chamfer_l2_vs_fixed_cloud", max(
        T.grad_check(lambda t: geometry.chamfer(
            t, Tensor(rng.normal(size=(10, 3))), "l2"), _rand(rng, 16, 3))
        for _ in range(5)), threshold=1e-5)

    # block-level spot checks
    def block_trial():
        attn = blocks.make_attention_params(6, 6, 6, 2, rng, dtype=np.float64)
        ffn_p = blocks.make_ffn_params(6, rng, dtype=np.float64)
        x = _rand(rng, 4, 6)
        kv = _rand(rng, 5, 6)
        errs = [
            T.grad_check(_scalarized(lambda xx: blocks.ffn(xx, ffn_p), rng), x),
            T.grad_check(_scalarized(lambda xx: blocks.multi_head(xx, kv, attn), rng), x),
            T.grad_check(_scalarized(lambda xx: blocks.multi_head(x, xx, attn), rng), kv),
            T.grad_check(_scalarized(lambda ww: blocks.multi_head(x, kv, attn), rng), attn.w_q),
            T.grad_check(_scalarized(lambda xx: blocks.sfa(xx, 1, attn, ffn_p), rng), x),
        ]
        coords = rng.normal(size=(4, 3))
        errs.append(T.grad_check(
            _scalarized(lambda xx: blocks.gdp(xx, coords, 2, attn, ffn_p)[0], rng), x))
        return max(errs)

    sweep("attention_blocks", block_trial, n_trials=10)

    # end-to-end: full loss on the 32-point toy model
    cfg = toy_config()
    params = model_mod.init_params(cfg, seed=seed, dtype=np.float64)
    e2e_rng = np.random.default_rng([seed, 0xE2E])
    partial = e2e_rng.uniform(-1, 1, size=(cfg.n_input, 3))
    gt = e2e_rng.uniform(-1, 1, size=(cfg.predicted_sizes()[2], 3))
    subsets = training.ground_truth_subsets(gt, cfg.predicted_sizes())

    def loss_fn(_):
        preds = model_mod.forward(partial, params, cfg)
        return training.multi_scale_loss(preds, gt, "l2", subsets=subsets)

    e2e_targets = ["encoder.embed.w1", "encoder.gdp1.w_q", "encoder.sfa2.w_kv",
                   "seed.coord.w2", "gen1.f2.b1", "gen2.coord.w2",
                   "encoder.gdp3.norm_gain"]
    err = max(T.grad_check(loss_fn, params[name]) for name in e2e_targets)
    check("end_to_end_toy_loss", err, detail=f"{len(e2e_targets)} parameter tensors")
    return report


# ---------------------------------------------------------------------------
# FPS suite


def fps_suite(seed: int = 0, instances: int = 100) -> SuiteReport:
    report = SuiteReport(name="fps")
    rng = np.random.default_rng([seed, 0xF5])
    mismatches = 0
    prefix_breaks = 0
    for _ in range(instances):
        n = int(rng.integers(4, 257))
        k = int(rng.integers(1, min(n, 64) + 1))
        start = int(rng.integers(0, n))
        pts = rng.uniform(-1, 1, size=(n, 3))
        got = geometry.fps(pts, k, start=start).indices
        want = fps_bruteforce(pts, k, start=start)
        if not np.array_equal(got, want):
            mismatches += 1
        if k < n:
            longer = geometry.fps(pts, k + 1, start=start).indices
            if not np.array_equal(longer[:k], got):
                prefix_breaks += 1
    report.checks.append(CheckResult(
        "fps_oracle_equivalence", float(mismatches), 1.0, mismatches == 0,
        f"{instances} random instances"))
    report.checks.append(CheckResult(
        "fps_prefix_property", float(prefix_breaks), 1.0, prefix_breaks == 0,
        f"{instances} random instances"))
    exhaustive_bad = 0
    for _ in range(10):
        n = int(rng.integers(2, 40))
        pts = rng.uniform(-1, 1, size=(n, 3))
        idx = geometry.fps(pts, n).indices
        if sorted(idx.tolist()) != list(range(n)):
            exhaustive_bad += 1
    report.checks.append(CheckResult(
        "fps_exhaustion_permutation", float(exhaustive_bad), 1.0, exhaustive_bad == 0))
    return report


# ---------------------------------------------------------------------------
# Chamfer suite


def cd_suite(seed: int = 0, instances: int = 100) -> SuiteReport:
    report = SuiteReport(name="cd")
    rng = np.random.default_rng([seed, 0xCD])
    tol = 1e-10
    worst = {"symmetry": 0.0, "identity_zero": 0.0, "permutation": 0.0,
             "homogeneity_l1": 0.0, "homogeneity_l2": 0.0, "nonneg": 0.0,
             "oracle": 0.0}
    for _ in range(instances):
        n = int(rng.integers(2, 24))
        m = int(rng.integers(2, 24))
        p = Tensor(rng.uniform(-1, 1, size=(n, 3)))
        s = Tensor(rng.uniform(-1, 1, size=(m, 3)))
        alpha = float(rng.uniform(0.5, 2.0))
        for variant in ("l1", "l2"):
            d = float(geometry.chamfer(p, s, variant).data)
            worst["nonneg"] = max(worst["nonneg"], -d)
            worst["symmetry"] = max(worst["symmetry"], abs(
                d - float(geometry.chamfer(s, p, variant).data)))
            worst["identity_zero"] = max(worst["identity_zero"], abs(
                float(geometry.chamfer(p, p, variant).data)))
            pp = Tensor(p.data[rng.permutation(n)])
            ss = Tensor(s.data[rng.permutation(m)])
            worst["permutation"] = max(worst["permutation"], abs(
                d - float(geometry.chamfer(pp, ss, variant).data)))
            scaled = float(geometry.chamfer(
                Tensor(alpha * p.data), Tensor(alpha * s.data), variant).data)
            expect = d * (alpha if variant == "l1" else alpha * alpha)
            worst[f"homogeneity_{variant}"] = max(
                worst[f"homogeneity_{variant}"],
                abs(scaled - expect) / max(1.0, abs(expect)))
            worst["oracle"] = max(worst["oracle"], abs(
                d - chamfer_bruteforce(p.data, s.data, variant)))
    for name, err in worst.items():
        report.checks.append(CheckResult(
            f"chamfer_{name}", float(err), tol, err < tol, f"{instances} random instances"))
    return report


# ---------------------------------------------------------------------------
# Shape-contract suite


def shapes_suite(seed: int = 0) -> SuiteReport:
    report = SuiteReport(name="shapes")
    rng = np.random.default_rng([seed, 0x54])

    block_bad = []
    for n, c, d, u, heads in ((8, 4, 4, 1, 2), (16, 8, 2, 2, 4), (12, 4, 1, 3, 2)):
        attn = blocks.make_attention_params(c, c, c, heads, rng, dtype=np.float64)
        ffn_p = blocks.make_ffn_params(c, rng, dtype=np.float64)
        x = Tensor(rng.normal(size=(n, c)))
        coords = rng.normal(size=(n, 3))
        out, coords_out = blocks.gdp(x, coords, d, attn, ffn_p)
        if out.data.shape != (n // d, 2 * c) or coords_out.shape != (n // d, 3):
            block_bad.append(f"gdp({n},{c},d={d}) -> {out.data.shape}")
        attn_u = blocks.make_attention_params(c, c, u * c, heads, rng, dtype=np.float64)
        ffn_u = blocks.make_ffn_params(u * c, rng, dtype=np.float64)
        out_u = blocks.sfa(x, u, attn_u, ffn_u)
        if out_u.data.shape != (n, u * c):
            block_bad.append(f"sfa({n},{c},u={u}) -> {out_u.data.shape}")
    report.checks.append(CheckResult(
        "block_shape_contracts", float(len(block_bad)), 1.0, not block_bad,
        "; ".join(block_bad)))

    cascades = (
        ("desk", ModelConfig.desk(), (512, 1024, 2048)),
        ("completion3d", ModelConfig.completion3d(), (512, 1024, 2048)),
        ("pcn", ModelConfig.pcn(), (512, 2048, 16384)),
    )
    for name, cfg, want in cascades:
        if cfg.predicted_sizes() != want:
            report.checks.append(CheckResult(
                f"cascade_{name}", 1.0, 1.0, False,
                f"config arithmetic gives {cfg.predicted_sizes()}, want {want}"))
            continue
        params = model_mod.init_params(cfg, seed=seed, dtype=np.float32)
        partial = rng.uniform(-1, 1, size=(cfg.n_input, 3)).astype(np.float32)
        preds = model_mod.forward(partial, params, cfg)
        got = tuple(p.data.shape[0] for p in preds)
        widths_ok = all(p.data.shape[1] == 3 for p in preds)
        finite = all(np.all(np.isfinite(p.data)) for p in preds)
        ok = got == want and widths_ok and finite
        report.checks.append(CheckResult(
            f"cascade_{name}", 0.0 if ok else 1.0, 1.0, ok,
            f"|P0|,|P1|,|P2| = {got}, want {want}"))
    return report


SUITES = {
    "grads": grads_suite,
    "fps": fps_suite,
    "cd": cd_suite,
    "shapes": shapes_suite,
}


def run_suites(names, seed: int = 0) -> list:
    if "all" in names:
        names = list(SUITES)
    reports = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
        reports.append(SUITES[name](seed=seed))
    return reports
