"""Invariant and oracle checks; the machine-readable acceptance gate.

Each ``check_*`` function returns a :class:`CheckResult` carrying the
observed value next to its tolerance so reports are self-explanatory.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .depth import (
    SurvivalSchedule,
    ensemble_oracle,
    enumeration_weights,
    expected_depth,
    sample_gates,
    savings_estimate,
)
from .layers import BatchNorm, Conv2D, Dense, avgpool2d_bwd, avgpool2d_fwd, init_params, softmax_xent
from .resnet import (
    ConstantDepth,
    NetworkSpec,
    ResBlock,
    ResBlockSpec,
    ResNet,
    TestRescaled,
    TrainGated,
)
from .tensor import RngStream, Stream


@dataclass
class CheckResult:
    name: str
    passed: bool
    observed: float | str
    tolerance: str
    detail: str = ""
    seconds: float = 0.0
    failures: list[str] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        obs = f"{self.observed:.3g}" if isinstance(self.observed, float) else str(self.observed)
        text = f"[{status}] {self.name}: observed {obs} (tolerance {self.tolerance}) [{self.seconds:.1f}s]"
        if self.detail:
            text += f" {self.detail}"
        for f in self.failures:
            text += f"\n    - {f}"
        return text


def _timed(fn: Callable[[], CheckResult]) -> CheckResult:
    t0 = time.perf_counter()
    res = fn()
    res.seconds = time.perf_counter() - t0
    return res


# -- finite differences ---------------------------------------------------------

def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference relative to the larger of the two gradients' max magnitude."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def _layer_case(kind: str, rng: np.random.Generator, init: RngStream):
    """Random layer and input for gradient checking; returns (layer, x, fwd)."""
    if kind == "dense":
        b, i, o = rng.integers(2, 6), rng.integers(1, 6), rng.integers(1, 6)
        layer = init_params(Dense(int(i), int(o)), init)
        layer.bias[...] = rng.normal(size=layer.bias.shape)
        return layer, rng.normal(size=(b, i)), layer.forward
    if kind == "conv":
        b, c, o = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4)
        h, w = rng.integers(2, 6), rng.integers(2, 6)
        layer = init_params(Conv2D(int(c), int(o), stride=int(rng.choice([1, 2]))), init)
        layer.bias[...] = rng.normal(size=layer.bias.shape)
        return layer, rng.normal(size=(b, c, h, w)), layer.forward
    if kind == "batchnorm":
        c = int(rng.integers(1, 4))
        layer = BatchNorm(c)
        layer.gamma[...] = rng.normal(size=c)
        layer.beta[...] = rng.normal(size=c)
        if rng.random() < 0.5:
            x = rng.normal(size=(int(rng.integers(2, 6)), c))
        else:
            x = rng.normal(size=(int(rng.integers(2, 4)), c, 2, 3))
        train = bool(rng.random() < 0.75)
        if not train:
            layer.running_mean[...] = rng.normal(size=c)
            layer.running_var[...] = rng.uniform(0.5, 2.0, size=c)
        return layer, x, lambda t: layer.forward(t, train)
    raise ValueError(kind)


def gradcheck_layer(kind: str, cases: int = 20, seed: int = 0) -> tuple[float, str]:
    """Worst relative error over ``cases`` random configurations of ``kind``."""
    rng = np.random.default_rng(seed)
    init = RngStream(seed, Stream.INIT)
    worst, where = 0.0, ""
    for case in range(cases):
        layer, x, fwd = _layer_case(kind, rng, init)
        y0, _ = fwd(x)
        r = rng.normal(size=y0.shape)

        def loss():
            return float(np.sum(fwd(x)[0] * r))

        _, cache = fwd(x)
        dx, *pgrads = layer.backward(cache, r)
        targets = [("x", x, dx)] + [(n, p, g) for (n, p), g in zip(layer.params.items(), pgrads)]
        for name, arr, g in targets:
            err = rel_error(g, numerical_gradient(loss, arr))
            if err > worst:
                worst, where = err, f"case {case} d{name}"
    return worst, where


def gradcheck_pool(cases: int = 20, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        k = int(rng.choice([1, 2]))
        x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 3)), 2 * k, 2 * k))
        r = rng.normal(size=avgpool2d_fwd(x, k)[0].shape)
        num = numerical_gradient(lambda: float(np.sum(avgpool2d_fwd(x, k)[0] * r)), x)
        worst = max(worst, rel_error(avgpool2d_bwd(avgpool2d_fwd(x, k)[1], r), num))
    return worst


def gradcheck_softmax(cases: int = 20, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        b, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        z = rng.normal(size=(b, k)) * 2
        labels = rng.integers(0, k, b)
        num = numerical_gradient(lambda: softmax_xent(z, labels)[0], z)
        worst = max(worst, rel_error(softmax_xent(z, labels)[1], num))
    return worst


def gradcheck_network(cases: int = 20, seed: int = 0, flavor: str = "dense") -> tuple[float, str]:
    """Whole-network check: L=3, width 4, random gates (first case uses [1,0,1])."""
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for case in range(cases):
        if flavor == "conv":
            spec = NetworkSpec("conv", 2, ((2, 3), (1, 4)), 3)
            x = rng.normal(size=(3, 2, 4, 4))
        else:
            spec = NetworkSpec(flavor, 3, ((3, 4),), 3)
            x = rng.normal(size=(5, 3))
        net = ResNet(spec, RngStream(seed + case, Stream.INIT))
        gates = (1, 0, 1) if case == 0 else tuple(int(g) for g in rng.integers(0, 2, 3))
        mode = TrainGated(gates)
        labels = rng.integers(0, 3, len(x))

        def loss():
            return softmax_xent(net.forward(x, mode)[0], labels)[0]

        logits, rec = net.forward(x, mode)
        grads = {k: v.copy() for k, v in net.backward(rec, softmax_xent(logits, labels)[1]).items()}
        dx = rec.input_grad
        for name, g in list(grads.items()) + [("input", dx)]:
            arr = x if name == "input" else net.params[name]
            err = rel_error(g, numerical_gradient(loss, arr))
            if err > worst:
                worst, where = err, f"gates {gates} {name}"
    return worst, where


def check_gradients(cases: int = 20, tol: float = 1e-5) -> CheckResult:
    def run():
        failures = []
        observed = {}
        for kind in ("dense", "conv", "batchnorm"):
            err, where = gradcheck_layer(kind, cases)
            observed[kind] = err
            if not err < tol:
                failures.append(f"{kind} layer: rel error {err:.3g} at {where}")
        for kind, fn in (("avgpool", gradcheck_pool), ("softmax_xent", gradcheck_softmax)):
            err = fn(cases)
            observed[kind] = err
            if not err < tol:
                failures.append(f"{kind}: rel error {err:.3g}")
        err, where = gradcheck_network(cases)
        observed["network"] = err
        if not err < tol:
            failures.append(f"gated network: rel error {err:.3g} at {where}")
        worst = max(observed.values())
        detail = " ".join(f"{k}={v:.1e}" for k, v in observed.items())
        return CheckResult("gradient correctness", not failures, worst, f"< {tol:g}", detail, failures=failures)

    return _timed(run)


# -- schedule math -----------------------------------------------------------------

def check_schedule_math() -> CheckResult:
    def run():
        failures = []
        lin = SurvivalSchedule("linear_decay", 0.5, 54)
        lin2 = SurvivalSchedule("linear_decay", 0.2, 54)
        if lin.survival_prob(54) != 0.5:
            failures.append(f"p_54 = {lin.survival_prob(54)!r}, expected 0.5")
        if lin.survival_prob(27) != 0.75:
            failures.append(f"p_27 = {lin.survival_prob(27)!r}, expected 0.75")
        ed = expected_depth(lin)
        if ed != 40.25 or ed != (3 * 54 - 1) / 4:
            failures.append(f"expected depth {ed!r}, expected 40.25")
        if abs(ed - float(np.sum(lin.probs()))) > 1e-12:
            failures.append("closed-form expected depth disagrees with sum of p_l")
        s1, s2 = savings_estimate(lin), savings_estimate(lin2)
        if abs(s1 - 0.25462962962962965) > 1e-15:
            failures.append(f"savings at p_L=0.5: {s1!r}")
        if abs(s2 - 0.4074074074074074) > 1e-15:
            failures.append(f"savings at p_L=0.2: {s2!r}")
        obs = f"E[L]={ed}, savings={s1:.4f}/{s2:.4f}"
        return CheckResult("schedule math", not failures, obs, "exact", failures=failures)

    return _timed(run)


# -- identity on drop -------------------------------------------------------------

def check_identity_on_drop(trials: int = 10, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        failures = []
        n = 0
        configs = [("dense", 4, (6, 4)), ("dense", 16, (3, 16)), ("conv", 3, (2, 3, 5, 5)), ("conv", 2, (1, 2, 8, 8)), ("linear", 5, (4, 5))]
        for flavor, width, shape in configs:
            block = ResBlock(ResBlockSpec(flavor, width, width))
            for _, layer in block.layers:
                init_params(layer, RngStream(seed, Stream.INIT))
            for _ in range(trials):
                h = np.abs(rng.normal(size=shape))
                h[rng.random(shape) < 0.2] = 0.0
                for train in (True, False):
                    out, cache, flops = block.forward(h, gate=0, train=train)
                    n += 1
                    if out.tobytes() != h.tobytes() or flops != 0 or cache is not None:
                        failures.append(f"{flavor} width {width} shape {shape}: not an exact pass-through")
        return CheckResult("identity-on-drop", not failures, f"{n} cases", "bit-exact, 0 flops", failures=failures[:5])

    return _timed(run)


# -- degenerate equivalence -------------------------------------------------------

def check_degenerate_equivalence(epochs: int = 3, seed: int = 7) -> CheckResult:
    from .data import holdout_split, make_spirals, standardize
    from .training import LrSchedule, fit

    def run():
        data = make_spirals(24, 3, 0.1, RngStream(seed, Stream.DATA))
        test = make_spirals(10, 3, 0.1, RngStream(seed + 1, Stream.DATA)).retag("test")
        ds, _, _ = standardize(holdout_split(data, 0.25, RngStream(seed, Stream.SHUFFLE)).concat(test))
        spec = NetworkSpec("dense", 2, ((4, 8),), 3)
        lr = LrSchedule(0.05, (2,))

        def train(schedule):
            net = ResNet(spec, RngStream(seed, Stream.INIT))
            res = fit(net, ds, epochs=epochs, lr_schedule=lr, schedule=schedule, batch_size=16, seed=seed)
            return net, res

        ref_net, ref = train(None)
        failures = []
        for rule in ("uniform", "linear_decay"):
            net, res = train(SurvivalSchedule(rule, 1.0, spec.L))
            if net.flat_params.tobytes() != ref_net.flat_params.tobytes():
                failures.append(f"{rule}: parameters differ")
            if any(b.tobytes() != ref_net.buffers[k].tobytes() for k, b in net.buffers.items()):
                failures.append(f"{rule}: batch-norm statistics differ")
            for a, b in zip(res.history, ref.history):
                da, db = a.to_dict(), b.to_dict()
                da.pop("wall_seconds")
                db.pop("wall_seconds")
                if da != db:
                    failures.append(f"{rule}: epoch {a.epoch} metrics differ")
        return CheckResult("p_L=1 equivalence", not failures, f"{epochs} epochs", "bit-exact", failures=failures)

    return _timed(run)


# -- ensemble oracle -------------------------------------------------------------

def check_ensemble_oracle(max_L: int = 10, trials: int = 3, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = worst_w = 0.0
        failures = []
        for L in range(1, max_L + 1):
            for t in range(trials):
                width = int(rng.integers(1, 4))
                spec = NetworkSpec("linear", 2, ((L, width),), 2)
                net = ResNet(spec, RngStream(seed + 100 * L + t, Stream.INIT))
                # scale weights down so 2^L products stay well conditioned
                for k, p in net.params.items():
                    if k.startswith("blocks"):
                        p *= 0.5
                sched = SurvivalSchedule(str(rng.choice(["uniform", "linear_decay"])), float(rng.uniform(0.05, 1.0)), L)
                x = rng.normal(size=(3, 2))
                oracle = ensemble_oracle(net, x, sched)
                rescaled, _ = net.forward(x, TestRescaled.from_schedule(sched))
                err = float(np.max(np.abs(oracle - rescaled)) / max(np.max(np.abs(oracle)), 1e-300))
                _, w = enumeration_weights(sched.probs())
                werr = abs(float(w.sum()) - 1.0)
                worst, worst_w = max(worst, err), max(worst_w, werr)
                if not err <= tol:
                    failures.append(f"L={L} {sched}: rel gap {err:.3g}")
                if not werr <= 1e-12:
                    failures.append(f"L={L}: weights sum off by {werr:.3g}")
        return CheckResult(
            "ensemble oracle (linear probe)", not failures, worst, f"<= {tol:g}; weights within 1e-12",
            f"weight-sum error {worst_w:.1e}", failures=failures[:5],
        )

    return _timed(run)


# -- depth statistics ---------------------------------------------------------------

def check_depth_statistics(samples: int = 100_000, seed: int = 0) -> CheckResult:
    def run():
        sched = SurvivalSchedule("linear_decay", 0.5, 54)
        rng = RngStream(seed, Stream.GATES)
        counts = np.fromiter((sample_gates(sched, rng, i).active for i in range(samples)), dtype=np.int64, count=samples)
        p = sched.probs()
        se = math.sqrt(float(np.sum(p * (1 - p))) / samples)
        z = (counts.mean() - 40.25) / se
        return CheckResult(
            "depth statistics", abs(z) <= 3, float(counts.mean()), "within 3 SE of 40.25",
            f"SE={se:.4f} z={z:+.2f}",
        )

    return _timed(run)


# -- compute savings -----------------------------------------------------------------

def check_compute_savings(cfg=None, repeats: int = 7) -> CheckResult:
    from .experiments import run_bench
    from .presets import bench_config

    def run():
        c = bench_config() if cfg is None else cfg
        res = run_bench(c, repeats=repeats)
        failures = []
        if res.minibatches < 500:
            failures.append(f"only {res.minibatches} minibatches measured")
        if abs(res.skipped_frac - res.expected_savings) > 0.03:
            failures.append(f"skipped fraction {res.skipped_frac:.4f} vs expected {res.expected_savings:.4f}")
        if not res.ratio <= 0.85:
            failures.append(f"wall-time ratio {res.ratio:.3f} > 0.85")
        detail = (
            f"skipped={res.skipped_frac:.4f} (expected {res.expected_savings:.4f}) over {res.minibatches} minibatches; "
            f"median epoch {res.stochastic_median:.3f}s vs {res.constant_median:.3f}s"
        )
        return CheckResult("compute savings", not failures, res.ratio, "skip within 0.03, ratio <= 0.85", detail, failures=failures)

    return _timed(run)


FAST_CHECKS = {
    "gradients": check_gradients,
    "schedule": check_schedule_math,
    "identity": check_identity_on_drop,
    "equivalence": check_degenerate_equivalence,
    "oracle": check_ensemble_oracle,
    "depth": check_depth_statistics,
    "savings": check_compute_savings,
}


def run_checks(names=None, full: bool = False, out=print) -> list[CheckResult]:
    """Run the named checks (all fast ones by default; ``full`` adds the training trends)."""
    from .trends import TREND_CHECKS

    registry = dict(FAST_CHECKS)
    if full:
        registry.update(TREND_CHECKS)
    selected = list(registry) if not names else list(names)
    unknown = [n for n in selected if n not in registry]
    if unknown:
        raise ValueError(f"unknown checks {unknown}; choose from {sorted(registry)}")
    results = []
    for name in selected:
        try:
            res = registry[name]()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(name, False, "error", "-", f"{type(exc).__name__}: {exc}")
        results.append(res)
        if out is not None:
            out(res.line())
    return results
