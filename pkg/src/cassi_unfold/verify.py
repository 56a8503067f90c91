"""Self-checking property suite behind the command line.

Every load-bearing identity is re-derived here with dense linear algebra
or explicit loops, independently of the fast implementations, and the
worst observed error is reported per property group.  A deliberate
fault switch flips the sign of the projection residual so the negative
path of any harness driving this suite can be exercised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DiffTensor, ParamStore, grad_check, ops
from .autodiff.primitives import primitive_kinds
from .cassi import Mask, SensingOperator, build_explicit_phi
from .denoiser import HstConfig, hs_msa, hst_denoise, init_hst_weights, \
    padded_shape
from .unfolding import closed_form_oracle, linear_projection

__all__ = ["PropertyResult", "run_suite", "format_report", "suite_passed"]


@dataclass
class PropertyResult:
    name: str
    passed: bool
    worst: float
    instances: int
    tolerance: float
    failing_seed: int | None = None
    note: str = ""


def _random_operator(seed: int):
    rng = np.random.default_rng(seed)
    h = int(rng.integers(2, 9))
    w = int(rng.integers(2, 9))
    bands = int(rng.integers(1, 5))
    d = int(rng.integers(0, 3))
    op = SensingOperator(Mask(rng.uniform(0, 1, (h, w))), bands, d)
    return rng, op


# ------------------------------------------------------- linear algebra

def check_gram_diagonality(seed: int, instances: int = 100):
    worst, bad = 0.0, None
    for i in range(instances):
        _, op = _random_operator(seed + i)
        gram = (build_explicit_phi(op) @ build_explicit_phi(op).T).toarray()
        off = gram - np.diag(np.diag(gram))
        err = float(np.abs(off).max())
        if err > worst:
            worst, bad = err, seed + i
    passed = worst == 0.0
    return PropertyResult("gram-diagonality", passed, worst, instances,
                          0.0, None if passed else bad)


def _dense_pieces(op, mu):
    phi = build_explicit_phi(op).toarray()
    n, m = phi.shape
    inv_direct = np.linalg.inv(phi.T @ phi + mu * np.eye(m))
    mid = np.linalg.inv(np.eye(n) + phi @ phi.T / mu)
    return phi, inv_direct, mid


def check_inversion_identity(seed: int, instances: int = 50,
                             tol: float = 1e-10):
    worst, bad = 0.0, None
    for i in range(instances):
        rng, op = _random_operator(seed + i)
        mu = float(10 ** rng.uniform(-3, 3))
        phi, inv_direct, mid = _dense_pieces(op, mu)
        m = phi.shape[1]
        via = np.eye(m) / mu - (phi.T @ mid @ phi) / mu ** 2
        err = float(np.abs(inv_direct - via).max())
        if err > worst:
            worst, bad = err, seed + i
    passed = worst <= tol
    return PropertyResult("inversion-identity", passed, worst, instances,
                          tol, None if passed else bad)


def check_diagonal_forms(seed: int, instances: int = 50,
                         tol: float = 1e-10):
    worst, bad = 0.0, None
    for i in range(instances):
        rng, op = _random_operator(seed + i)
        mu = float(10 ** rng.uniform(-3, 3))
        phi, _, mid = _dense_pieces(op, mu)
        psi = op.psi.reshape(-1)
        e1 = np.abs(mid - np.diag(mu / (mu + psi))).max()
        e2 = np.abs(mid @ (phi @ phi.T)
                    - np.diag(mu * psi / (mu + psi))).max()
        err = float(max(e1, e2))
        if err > worst:
            worst, bad = err, seed + i
    passed = worst <= tol
    return PropertyResult("diagonal-closed-forms", passed, worst, instances,
                          tol, None if passed else bad)


def check_projection_oracle(seed: int, instances: int = 100,
                            tol: float = 1e-8,
                            residual_sign: float = 1.0):
    worst, bad = 0.0, None
    for i in range(instances):
        rng, op = _random_operator(seed + i)
        y = rng.uniform(0, 1, (op.height, op.shifted_width))
        z = rng.normal(size=(op.height, op.shifted_width, op.bands))
        alpha = float(10 ** rng.uniform(-3, 3))
        fast = linear_projection(y, z, alpha, op,
                                 residual_sign=residual_sign)
        dense = closed_form_oracle(y, z, alpha, op)
        rel = float(np.abs(fast - dense).max()
                    / max(1.0, np.abs(dense).max()))
        if rel > worst:
            worst, bad = rel, seed + i
    passed = worst <= tol
    return PropertyResult("projection-vs-oracle", passed, worst, instances,
                          tol, None if passed else bad)


# ----------------------------------------------------------- attention

def _global_attention(tokens, wq, wk, wv, table, w_out, half):
    # loop-based full attention over one channel half
    n, c = tokens.shape
    lo = 0 if half == 0 else c // 2
    hi = lo + c // 2
    q = (tokens @ wq)[:, lo:hi]
    k = (tokens @ wk)[:, lo:hi]
    v = (tokens @ wv)[:, lo:hi]
    d = q.shape[1]
    out = np.zeros((n, d))
    for i in range(n):
        scores = np.array([q[i] @ k[j] / np.sqrt(d) + table[i, j]
                           for j in range(n)])
        e = np.exp(scores - scores.max())
        a = e / e.sum()
        for j in range(n):
            out[i] += a[j] * v[j]
    return out @ w_out


def _msa_weights(rng, c, m2, grid, zero_branch):
    d = c // 2
    w = {
        "wq": DiffTensor(rng.normal(size=(c, c))),
        "wk": DiffTensor(rng.normal(size=(c, c))),
        "wv": DiffTensor(rng.normal(size=(c, c))),
        "p_local": DiffTensor(rng.normal(size=(1, m2, m2))),
        "p_nonlocal": DiffTensor(rng.normal(size=(1, grid, grid))),
        "w_local": DiffTensor(rng.normal(size=(1, d, c))),
        "w_nonlocal": DiffTensor(rng.normal(size=(1, d, c))),
    }
    w[f"w_{zero_branch}"] = DiffTensor(np.zeros((1, d, c)))
    return w


def check_attention_equivalences(seed: int, instances: int = 20,
                                 tol: float = 1e-10):
    worst, bad = 0.0, None
    for i in range(instances):
        rng = np.random.default_rng(seed + i)
        h = int(rng.integers(2, 5))
        c = 2 * int(rng.integers(1, 4))
        n = h * h

        # one window covering the whole map: the local half is plain
        # global attention
        x = rng.normal(size=(h, h, c))
        w = _msa_weights(rng, c, n, 1, zero_branch="nonlocal")
        got = hs_msa(DiffTensor(x), w, window=h, heads=1)
        want = _global_attention(x.reshape(n, c), w["wq"].values,
                                 w["wk"].values, w["wv"].values,
                                 w["p_local"].values[0],
                                 w["w_local"].values[0], half=0)
        err_local = np.abs(got.values.reshape(n, c) - want).max()

        # window of one token: the shuffled axis runs over all tokens,
        # the non-local half is plain global attention
        wdt = int(rng.integers(2, 5))
        x = rng.normal(size=(h, wdt, c))
        n2 = h * wdt
        w = _msa_weights(rng, c, 1, n2, zero_branch="local")
        got = hs_msa(DiffTensor(x), w, window=1, heads=1)
        want = _global_attention(x.reshape(n2, c), w["wq"].values,
                                 w["wk"].values, w["wv"].values,
                                 w["p_nonlocal"].values[0],
                                 w["w_nonlocal"].values[0], half=1)
        err_nonlocal = np.abs(got.values.reshape(n2, c) - want).max()

        err = float(max(err_local, err_nonlocal))
        if err > worst:
            worst, bad = err, seed + i
    passed = worst <= tol
    return PropertyResult("attention-degenerate-equivalence", passed, worst,
                          instances, tol, None if passed else bad)


# ------------------------------------------------------------ gradients

def _gradient_cases(rng):
    """One weighted-scalar closure per catalog primitive.

    All weights are drawn up front: closures must be pure so repeated
    finite-difference evaluations see the same function.
    """
    w34 = rng.normal(size=(3, 4))
    w4 = rng.normal(size=4)
    w232 = rng.normal(size=(2, 3, 2))
    w453 = rng.normal(size=(4, 5, 3))
    w3 = rng.normal(size=3)
    w33 = rng.normal(size=(3, 3, 3))
    w682 = rng.normal(size=(6, 8, 2))
    w442 = rng.normal(size=(4, 4, 2))
    w26 = rng.normal(size=(2, 6))
    w345 = rng.normal(size=(3, 4, 5))
    w37 = rng.normal(size=(3, 7))
    w33b = rng.normal(size=(3, 3))

    def wsum(t, w):
        return ops.sum_all(ops.mul(t, ops.constant(w)))

    a34 = rng.normal(size=(3, 4))
    b34 = rng.normal(size=(3, 4))
    x453 = rng.normal(size=(4, 5, 3))
    return {
        "add": (lambda a, b: wsum(ops.add(a, b), w34), [a34, b34]),
        "multiply": (lambda a, b: wsum(ops.mul(a, b), w34), [a34, b34]),
        "scalar-scale": (lambda a: wsum(ops.scale(a, -1.7), w34), [a34]),
        "divide": (lambda a, b: wsum(ops.divide(a, b), w34),
                   [a34, rng.uniform(1.0, 2.0, (3, 4))]),
        "gelu": (lambda a: wsum(ops.gelu(a), w34), [a34]),
        "softplus": (lambda a: wsum(ops.softplus(a), w34), [a34]),
        "sqrt": (lambda a: wsum(ops.sqrt(a), w34),
                 [rng.uniform(0.5, 2.0, (3, 4))]),
        "softmax": (lambda a: wsum(ops.softmax(a, axis=-1), w34), [a34]),
        "matmul": (lambda a, b: wsum(ops.matmul(a, b), w232),
                   [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]),
        "fully-connected": (lambda x, w, b: wsum(ops.dense(x, w, b), w4),
                            [rng.normal(size=3),
                             rng.normal(size=(3, 4)), rng.normal(size=4)]),
        "conv2d": (lambda x, w, b: wsum(ops.conv2d(x, w, b, stride=2,
                                                   pad=1), w33),
                   [rng.normal(size=(5, 5, 2)),
                    rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)]),
        "transposed-conv2d": (
            lambda x, w, b: wsum(ops.conv2d_transpose(x, w, b, stride=2),
                                 w682),
            [rng.normal(size=(3, 4, 3)), rng.normal(size=(2, 2, 2, 3)),
             rng.normal(size=2)]),
        "layer-norm": (lambda x, g, b: wsum(ops.layer_norm(x, g, b), w453),
                       [x453, rng.normal(size=3), rng.normal(size=3)]),
        "global-average-pool": (
            lambda x: wsum(ops.global_avg_pool(x), w3), [x453]),
        "reshape": (lambda x: wsum(ops.reshape(x, (2, 6)), w26), [a34]),
        "axis-permute": (lambda x: wsum(ops.permute(x, (2, 0, 1)), w345),
                         [x453]),
        "concat": (lambda a, b: wsum(ops.concat([a, b], axis=1), w37),
                   [a34, rng.normal(size=(3, 3))]),
        "split": (lambda x: wsum(ops.split(x, (2, 3), axis=1)[1], w33b),
                  [rng.normal(size=(3, 5))]),
        "broadcast": (lambda x: wsum(ops.broadcast_to(x, (4, 4, 2)), w442),
                      [rng.normal(size=(1, 4, 2))]),
        "sum": (lambda x: ops.sum_all(ops.mul(ops.sum_axis(x, 1),
                                              ops.constant(w33b))),
                [rng.normal(size=(3, 4, 3))]),
    }


def check_gradients(seed: int, tol: float = 1e-4):
    rng = np.random.default_rng(seed)
    cases = _gradient_cases(rng)
    missing = sorted(set(primitive_kinds()) - set(cases))
    if missing:
        return PropertyResult("gradient-checks", False, float("inf"),
                              len(cases), tol,
                              note=f"no gradient case for {missing}")
    worst, bad_name = 0.0, None
    for name, (fn, inputs) in sorted(cases.items()):
        err = grad_check(fn, inputs)
        if err > worst:
            worst, bad_name = err, name

    # end to end through the denoiser at a tiny configuration
    tiny = HstConfig(channels=4, window=2, heads=(1, 1, 1))
    store = ParamStore()
    init_hst_weights(store, 2, padded_shape(8, 8, 2), tiny, rng,
                     prefix="stage0")
    store.overwrite("stage0/out_conv/w",
                    0.1 * rng.normal(size=(3, 3, 4, 2)))
    store.overwrite("stage0/out_conv/b", 0.1 * rng.normal(size=2))
    x0 = rng.normal(size=(8, 8, 2))
    wq0 = store["stage0/level0/enc/msa/wq"].values
    oc0 = store["stage0/out_conv/w"].values
    wsum = rng.normal(size=(8, 8, 2))

    def hst_fn(x, wq, oc):
        weights = {n: store[n] for n in store.names()}
        weights["stage0/level0/enc/msa/wq"] = wq
        weights["stage0/out_conv/w"] = oc
        out = hst_denoise(x, 0.7, weights, tiny, prefix="stage0")
        return ops.sum_all(ops.mul(out, ops.constant(wsum)))

    err = grad_check(hst_fn, [x0, wq0, oc0])
    if err > worst:
        worst, bad_name = err, "hst-denoise"
    passed = worst <= tol
    return PropertyResult("gradient-checks", passed, float(worst),
                          len(cases) + 1, tol,
                          note="" if passed else f"worst case {bad_name}")


# -------------------------------------------------------------- driver

def run_suite(seed: int = 0, fault_inject: bool = False,
              instances: int | None = None) -> list[PropertyResult]:
    """Run every property group; seeds are derived from ``seed``.

    ``instances`` scales the per-group instance counts down for quick
    runs (it caps each group's default).  ``fault_inject`` flips the
    projection residual sign, which must break exactly the
    projection-vs-oracle group.
    """
    def n(default):
        return default if instances is None else min(default, instances)

    sign = -1.0 if fault_inject else 1.0
    return [
        check_gram_diagonality(seed, n(100)),
        check_inversion_identity(seed + 1000, n(50)),
        check_diagonal_forms(seed + 2000, n(50)),
        check_projection_oracle(seed + 3000, n(100), residual_sign=sign),
        check_attention_equivalences(seed + 4000, n(20)),
        check_gradients(seed + 5000),
    ]


def format_report(results: list[PropertyResult], seed: int = 0) -> str:
    lines = [f"verification report (seed {seed})"]
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        line = (f"  {mark} {r.name:<33} worst {r.worst:.3e} "
                f"(tol {r.tolerance:.1e}, {r.instances} instances)")
        if r.failing_seed is not None:
            line += f" first failure at instance seed {r.failing_seed}"
        if r.note:
            line += f" [{r.note}]"
        lines.append(line)
    ok = suite_passed(results)
    lines.append(f"overall: {'PASS' if ok else 'FAIL'} "
                 f"({sum(r.passed for r in results)}/{len(results)} groups)")
    return "\n".join(lines)


def suite_passed(results: list[PropertyResult]) -> bool:
    return all(r.passed for r in results)
