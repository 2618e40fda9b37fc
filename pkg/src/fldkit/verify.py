"""Named verification suites over the library's numerical contracts.

Each suite returns CheckResult rows with the measured value and its
tolerance; the CLI renders them as machine-readable lines and the
acceptance tests assert them directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, finite_diff_check, matmul, softmax_rows
from .channels import (
    first_order_descriptor,
    gate,
    make_gating_params,
    recalibrate,
    second_order_descriptor,
)
from .covariance import (
    centered_covariance,
    matrix_sqrt_oracle,
    newton_schulz_sqrt,
    random_spd_suite,
)
from .errors import ContractError
from .heatmaps import (
    Heatmap,
    decode_argmax,
    distance_transform,
    encode_boundary_heatmap,
    encode_landmark_heatmap,
    fuse_boundary_adaptive,
    load_boundary_scheme,
)
from .losses import (
    LN2,
    SearchConfig,
    consistency_term,
    js_divergence,
    normalize_to_distribution,
    search_decode,
    search_optimal,
    soft_argmax,
)
from .spatial import SpatialCorrelation, multi_order_fuse, second_order_correlations

SUITES = ("gradcheck", "newton_schulz", "js", "search")


@dataclass
class CheckResult:
    suite: str
    name: str
    measured: float
    tolerance: float
    passed: bool

    @classmethod
    def below(cls, suite, name, measured, tolerance):
        return cls(suite=suite, name=name, measured=float(measured),
                   tolerance=float(tolerance), passed=bool(measured < tolerance))


def suite_newton_schulz(iterations: int = 5, count: int = 100,
                        dims=(4, 8, 16), seed: int = 2024) -> list[CheckResult]:
    """Square-root residual and oracle agreement over random SPD batches."""
    rng = np.random.default_rng(seed)
    results = []
    for d in dims:
        worst_residual, worst_oracle, worst_asym = 0.0, 0.0, 0.0
        for sigma in random_spd_suite(rng, d, count):
            root, _ = newton_schulz_sqrt(Tensor(sigma), iterations=iterations)
            value = root.data
            worst_asym = max(worst_asym, np.abs(value - value.T).max())
            worst_residual = max(
                worst_residual,
                np.linalg.norm(value @ value - sigma) / np.linalg.norm(sigma))
            oracle = matrix_sqrt_oracle(sigma)
            worst_oracle = max(
                worst_oracle,
                np.linalg.norm(value - oracle) / np.linalg.norm(oracle))
        results.append(CheckResult.below("newton_schulz", f"residual_d{d}", worst_residual, 1e-3))
        results.append(CheckResult.below("newton_schulz", f"oracle_agreement_d{d}", worst_oracle, 1e-3))
        results.append(CheckResult.below("newton_schulz", f"symmetry_d{d}", worst_asym, 1e-8))
    return results


def suite_js(pairs: int = 1000, seed: int = 2025) -> list[CheckResult]:
    """Symmetry, nonnegativity, upper bound, and zero-on-equal."""
    rng = np.random.default_rng(seed)
    worst_asym, worst_neg, worst_over, worst_equal = 0.0, 0.0, 0.0, 0.0
    for _ in range(pairs):
        a = normalize_to_distribution(Heatmap(values=Tensor(rng.uniform(0, 1, (8, 8))), kind="landmark"))
        b = normalize_to_distribution(Heatmap(values=Tensor(rng.uniform(0, 1, (8, 8))), kind="landmark"))
        fwd, rev = js_divergence(a, b).item(), js_divergence(b, a).item()
        worst_asym = max(worst_asym, abs(fwd - rev))
        worst_neg = max(worst_neg, -fwd)
        worst_over = max(worst_over, fwd - LN2)
        worst_equal = max(worst_equal, js_divergence(a, a).item())
    return [
        CheckResult.below("js", "symmetry", worst_asym, 1e-12),
        CheckResult.below("js", "nonnegativity", worst_neg, 1e-15),
        CheckResult.below("js", "upper_bound_excess", worst_over, 1e-9),
        CheckResult.below("js", "zero_on_equal", worst_equal, 1e-9),
    ]


def suite_gradcheck(seed: int = 2026) -> list[CheckResult]:
    """Finite-difference checks for every differentiable building block."""
    rng = np.random.default_rng(seed)
    results = []

    def check(name, f, x, tol=1e-5):
        results.append(CheckResult.below("gradcheck", name, finite_diff_check(f, x, 1e-4), tol))

    q = rng.normal(size=(4, 3))
    sens = Tensor(rng.normal(size=(4, 4)))
    check("spatial_correlations",
          lambda t: (second_order_correlations(t, Tensor(q)) * sens).sum(), rng.normal(size=(4, 3)))

    o_mat, q2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    sens2 = Tensor(rng.normal(size=(3, 2)))

    def fuse_loss(t):
        state = SpatialCorrelation(positions=3, channels=2)
        state.weight = t.reshape(())
        return (multi_order_fuse(Tensor(o_mat), Tensor(q2), state) * sens2).sum()

    check("correlation_gate_weight", fuse_loss, np.array([0.2]))

    check("covariance_sqrt_chain",
          lambda t: newton_schulz_sqrt(centered_covariance(t), iterations=5)[0].sum(),
          rng.normal(size=(6, 4)))

    x_map = rng.normal(size=(3, 3, 8))
    sens3 = Tensor(rng.normal(size=(3, 3, 8)))
    first = make_gating_params(8, "first", rng)
    second = make_gating_params(8, "second", rng)
    # keep the bottleneck relu active so the weight checks are not vacuous
    first.reduce = Tensor(np.abs(first.reduce.data), requires_grad=True)
    x_map[:, :, :] = np.abs(x_map)

    def channel_loss(t):
        s1 = gate(first_order_descriptor(t), first)
        sigma = centered_covariance(t.reshape(9, 8))
        root, _ = newton_schulz_sqrt(sigma, iterations=5)
        s2 = gate(second_order_descriptor(root), second)
        return ((recalibrate(t, s1) + recalibrate(t, s2)) * sens3).sum()

    check("channel_recalibration", channel_loss, x_map, tol=1e-4)

    for attr, params, label in ((0, first, "gate_reduce"), (1, first, "gate_expand")):
        base = (params.reduce if attr == 0 else params.expand).data.copy()

        def weight_loss(t, attr=attr, params=params, base=base):
            stash_r, stash_e = params.reduce, params.expand
            try:
                if attr == 0:
                    params.reduce = t.reshape(base.shape)
                else:
                    params.expand = t.reshape(base.shape)
                return (recalibrate(Tensor(x_map), gate(first_order_descriptor(Tensor(x_map)), params))
                        * sens3).sum()
            finally:
                params.reduce, params.expand = stash_r, stash_e

        check(label, weight_loss, base)

    check("encoder_sigma",
          lambda t: encode_landmark_heatmap((5, 5), t.reshape(()), (16, 16)).values.sum(),
          np.array([3.0]))

    target = normalize_to_distribution(Heatmap(values=Tensor(rng.uniform(0.1, 1, (6, 6))), kind="landmark"))
    check("js_vs_prediction",
          lambda t: js_divergence(target, normalize_to_distribution(Heatmap(values=t, kind="landmark"))),
          rng.uniform(0.1, 1, (6, 6)))

    from .heatmaps import LandmarkSet
    anchor = LandmarkSet(points=np.array([[4.0, 5.0]]), scheme="syn1")
    check("consistency_vs_heatmap",
          lambda t: consistency_term([soft_argmax(Heatmap(values=t, kind="landmark"))],
                                     anchor, SearchConfig()),
          rng.uniform(0.1, 1, (8, 8)))

    check("softmax_rows", lambda t: (softmax_rows(t) * sens).sum(), rng.normal(size=(4, 4)))
    right = Tensor(rng.normal(size=(4, 2)))
    check("matmul", lambda t: matmul(t, right).sum(), rng.normal(size=(3, 4)))
    return results


def network_probe_check(seed: int = 2027) -> CheckResult:
    """Full-depth probe: finite differences of the training objective with
    respect to the correlation gate (sits mid-network)."""
    from .network import NetworkConfig, build
    from .training import TrainSettings, make_synthetic_dataset, sample_loss, search_step

    config = NetworkConfig(input_size=32, base_channels=16, hourglass_depth=2, landmark_count=5)
    settings = TrainSettings()
    state = build(config, seed)
    dataset = make_synthetic_dataset(1, config, settings, seed=seed)
    sample = dataset.samples[0]
    searched = search_step(state, sample, dataset.scheme, settings.search)

    def f(t):
        state.params["stack0.corr.weight"] = t.reshape(())
        return sample_loss(state, sample, dataset.scheme, searched, settings.search)

    err = finite_diff_check(f, np.array([0.1]), 1e-4)
    return CheckResult.below("gradcheck", "network_probe", err, 1e-3)


def suite_search(trials: int = 500, seed: int = 2028) -> list[CheckResult]:
    """Ground-truth recovery plus the corrupted-decoding improvement."""
    rng = np.random.default_rng(seed)
    scheme = load_boundary_scheme("w68")
    config = SearchConfig()
    size = 32
    recover_fail = 0
    for _ in range(50):
        row = int(rng.integers(8, 24))
        landmark = (int(rng.integers(4, 28)), row)
        h = encode_landmark_heatmap(landmark, 3.0, (size, size))
        dense = np.array([[x, row] for x in np.arange(2.0, size - 2.0, 0.5)])
        b = encode_boundary_heatmap(distance_transform(dense, (size, size)), 3.0, 0.01)
        fused = fuse_boundary_adaptive(h, b, scheme, 0, 0)
        found = search_optimal(fused, landmark, normalize_to_distribution(h),
                               normalize_to_distribution(b), config)
        if found != landmark:
            recover_fail += 1

    argmax_errors, search_errors = [], []
    for _ in range(trials):
        row = int(rng.integers(10, 22))
        true = (int(rng.integers(10, 22)), row)
        side = 1 if rng.uniform() < 0.5 else -1
        spur = (true[0] + int(rng.integers(0, 6)), row + side * 5)
        amp = float(rng.uniform(0.53, 0.64))
        h_true = encode_landmark_heatmap(true, 3.0, (size, size)).values.data
        h_spur = encode_landmark_heatmap(spur, 3.0, (size, size)).values.data
        corrupted = Heatmap(values=Tensor(0.5 * h_true + amp * h_spur), kind="landmark")
        dense = np.array([[x, row] for x in np.arange(2.0, size - 2.0, 0.5)])
        b = encode_boundary_heatmap(distance_transform(dense, (size, size)), 3.0, 0.01)
        g_plain = decode_argmax(corrupted)
        searched = search_decode(corrupted, b, scheme, 0, 0, config)
        argmax_errors.append(np.hypot(g_plain[0] - true[0], g_plain[1] - true[1]))
        search_errors.append(np.hypot(searched[0] - true[0], searched[1] - true[1]))
    mean_plain = float(np.mean(argmax_errors))
    mean_search = float(np.mean(search_errors))
    return [
        CheckResult.below("search", "ground_truth_recovery_failures", recover_fail, 1),
        CheckResult("search", "corrupted_improvement",
                    measured=mean_search, tolerance=mean_plain,
                    passed=mean_search < mean_plain),
    ]


def _option(overrides: dict, suite: str, key: str, default):
    value = overrides.get(f"{suite}.{key}")
    if value is None:
        value = overrides.get(suite, {}).get(key) if isinstance(overrides.get(suite), dict) else None
    return default if value is None else value


def run_suites(names, overrides: dict | None = None) -> list[CheckResult]:
    overrides = overrides or {}
    results: list[CheckResult] = []
    chosen = SUITES if "all" in names else tuple(names)
    for name in chosen:
        if name == "gradcheck":
            results.extend(suite_gradcheck())
            results.append(network_probe_check())
        elif name == "newton_schulz":
            results.extend(suite_newton_schulz(
                iterations=int(_option(overrides, "newton_schulz", "iterations", 5))))
        elif name == "js":
            results.extend(suite_js(pairs=int(_option(overrides, "js", "pairs", 1000))))
        elif name == "search":
            results.extend(suite_search(trials=int(_option(overrides, "search", "trials", 500))))
        else:
            raise ContractError(f"unknown verification suite '{name}'")
    return results
