"""Central finite-difference checks of every differentiable op and of one
tiny end-to-end training frame, all in float64."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from coal import tensor as T
from coal.tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise ``||a - n|| / max(||a||, ||n||)``; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return float(np.linalg.norm(analytic - numeric))
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(loss: Callable[[], float], array: np.ndarray, coords=None, step: float = STEP) -> np.ndarray:
    """Central differences of ``loss`` w.r.t. ``array`` (modified in place, then restored)."""
    flat = array.reshape(-1)
    out = np.zeros(flat.shape)
    for i in range(flat.size) if coords is None else coords:
        keep = flat[i]
        flat[i] = keep + step
        up = loss()
        flat[i] = keep - step
        down = loss()
        flat[i] = keep
        out[i] = (up - down) / (2 * step)
    return out.reshape(array.shape)


def check_function(name: str, fn: Callable[..., Tensor], inputs: list[np.ndarray], seed: int = 0, tol: float = TOLERANCE) -> CheckResult:
    """Compare reverse-mode gradients of ``sum(fn(*inputs) * R)`` against central differences."""
    start = time.perf_counter()
    with T.precision(np.float64):
        arrays = [np.array(x, dtype=np.float64) for x in inputs]
        out = fn(*(Tensor(a) for a in arrays))
        weights = np.random.default_rng(seed).normal(size=out.shape)

        def loss() -> float:
            return float(np.sum(fn(*(Tensor(a) for a in arrays)).data * weights))

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with T.Tape():
            total = (fn(*leaves) * Tensor(weights)).sum()
            analytic = T.grad(total, leaves)
        errors = [relative_error(g, numeric_gradient(loss, a)) for g, a in zip(analytic, arrays)]
    worst = max(errors) if errors else 0.0
    return CheckResult(name, worst, worst <= tol, time.perf_counter() - start)


# --------------------------------------------------------------------------
# per-op cases; inputs stay clear of kinks (clamp bounds, sampling grid lines)


@dataclass
class OpCase:
    name: str
    op: str
    fn: Callable[..., Tensor]
    inputs: Callable[[np.random.Generator], list[np.ndarray]]
    extra_ops: tuple[str, ...] = field(default_factory=tuple)


def _normal(*shape):
    return lambda rng: [rng.normal(size=s) for s in shape]


def _away_from_grid(rng, n, height, width):
    # sample strictly inside grid cells so the bilinear map is smooth
    cx = (rng.integers(0, width - 1, n) + rng.uniform(0.2, 0.8, n)) / (width - 1)
    cy = (rng.integers(0, height - 1, n) + rng.uniform(0.2, 0.8, n)) / (height - 1)
    return np.stack([cx, cy], axis=-1)


def _mask_rows():
    mask = np.array([[True, False, True, True], [False, True, True, False], [True, True, True, True]])
    return mask


OP_CASES: list[OpCase] = [
    OpCase("add (broadcast)", "add", lambda a, b: a + b, _normal((3, 4), (4,))),
    OpCase("sub (broadcast)", "sub", lambda a, b: a - b, _normal((3, 1), (3, 4))),
    OpCase("mul (broadcast)", "mul", lambda a, b: a * b, _normal((2, 3, 4), (3, 1))),
    OpCase("div", "div", lambda a, b: a / b, lambda rng: [rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, (3, 4))]),
    OpCase("neg", "neg", lambda a: -a, _normal((5,))),
    OpCase("matmul", "matmul", lambda a, b: T.matmul(a, b), _normal((2, 3, 4), (4, 5))),
    OpCase("matmul (exact, 2-d weight)", "matmul", lambda a, b: T.matmul(a, b, exact=True), _normal((2, 3, 4), (4, 5))),
    OpCase("matmul (exact, batched)", "matmul", lambda a, b: T.matmul(a, b, exact=True), _normal((2, 3, 4), (2, 4, 5))),
    OpCase("sum (axis)", "sum", lambda a: a.sum(axis=1), _normal((3, 4, 2))),
    OpCase("sum (all)", "sum", lambda a: a.sum(), _normal((3, 4))),
    OpCase("mean (axis, keepdims)", "mean", lambda a: a.mean(axis=0, keepdims=True), _normal((3, 4))),
    OpCase("exp", "exp", T.exp, _normal((3, 4))),
    OpCase("log", "log", T.log, lambda rng: [rng.uniform(0.5, 3.0, (3, 4))]),
    OpCase("sqrt", "sqrt", T.sqrt, lambda rng: [rng.uniform(0.5, 3.0, (3, 4))]),
    OpCase(
        "clamp",
        "clamp",
        lambda a: T.clamp(a, -0.5, 0.5),
        lambda rng: [np.array([-1.3, -0.2, 0.1, 0.3, 0.9, -0.45])],
    ),
    OpCase("reshape", "reshape", lambda a: a.reshape(4, 3) * a.reshape(4, 3), _normal((3, 4)), ("mul",)),
    OpCase("transpose", "transpose", lambda a: a.transpose(2, 0, 1), _normal((2, 3, 4))),
    OpCase("getitem (slice)", "getitem", lambda a: a[1:, ::2], _normal((3, 4))),
    OpCase(
        "getitem (repeated rows)",
        "getitem",
        lambda a: a[np.array([0, 2, 2, 1, 0])],
        _normal((3, 4)),
    ),
    OpCase("concat", "concat", lambda a, b: T.concat([a, b], axis=1), _normal((2, 3), (2, 2))),
    OpCase("stack", "stack", lambda a, b: T.stack([a, b]), _normal((2, 3), (2, 3))),
    OpCase("softmax", "softmax", lambda a: T.softmax(a, axis=-1), _normal((3, 4))),
    OpCase("softmax (masked)", "softmax", lambda a: T.softmax(a, axis=-1, mask=_mask_rows()), _normal((3, 4))),
    OpCase("cosine_similarity", "cosine_similarity", lambda u, v: T.cosine_similarity(u, v), _normal((3, 5), (3, 5))),
    OpCase(
        "bilinear_sample",
        "bilinear_sample",
        lambda m, p: T.bilinear_sample(m, p),
        lambda rng: [rng.normal(size=(4, 5, 3)), _away_from_grid(rng, 6, 4, 5)],
    ),
    OpCase(
        "bilinear_sample (batched)",
        "bilinear_sample",
        lambda m, p: T.bilinear_sample(m, p, batch_index=np.array([1, 0, 1])),
        lambda rng: [rng.normal(size=(2, 4, 4, 3)), _away_from_grid(rng, 3, 4, 4)],
    ),
    OpCase("avg_pool2x2 (odd size)", "avg_pool2x2", T.avg_pool2x2, _normal((5, 3, 2))),
]


def check_ops(seed: int = 0, tol: float = TOLERANCE) -> list[CheckResult]:
    """Run every op case, plus a failing entry for any registered op without one."""
    results = []
    for k, case in enumerate(OP_CASES):
        rng = np.random.default_rng([seed, k])
        results.append(check_function(case.name, case.fn, case.inputs(rng), seed=seed + k, tol=tol))
    covered = {case.op for case in OP_CASES}
    for op in sorted(set(T.OPS) - covered):
        results.append(CheckResult(op, float("inf"), False, detail="no gradient check registered"))
    return results


# --------------------------------------------------------------------------
# end-to-end tiny frame


def tiny_problem(proposals: int = 2, tokens: int = 3, dim: int = 8, size: int = 8, seed: int = 0):
    """A small model plus one frame's inputs for the full training objective."""
    from coal.encoders import TextEmbedding
    from coal.hmsi import HMSI, HMSIConfig, ProposalInputs, QueryInputs
    from coal.losses import LabelMatrix
    from coal.matching import Box

    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        config = HMSIConfig(dim=dim, heads=2, levels=4, points=2)
        model = HMSI(config, rng, np.float64)

        def text(n):
            words = rng.normal(size=(n, dim))
            return TextEmbedding(Tensor(words), Tensor(words.mean(axis=0)), [f"w{i}" for i in range(n)])

        visual = Tensor(rng.normal(size=(size, size, dim)))
        boxes = [Box(0.3 + 0.37 * i, 0.4 + 0.13 * i, 0.23, 0.31) for i in range(proposals)]
        props = ProposalInputs.build(boxes, [text(tokens) for _ in range(proposals)], dim, np.float64)
        queries = QueryInputs.build([text(tokens), text(tokens)], dim, np.float64)
        entries = np.zeros((proposals, 2), dtype=np.int8)
        entries[0, 0] = 1
        entries[:, 1] = np.where(entries[:, 0] == 1, 0, -1)
        labels = LabelMatrix(entries, 1)
    return model, visual, props, queries, labels


def check_end_to_end(
    seed: int = 0, tol: float = TOLERANCE, coords_per_param: int | None = None, dims: dict | None = None
) -> CheckResult:
    """Full objective on a tiny frame; checks every parameter and the visual map.

    ``coords_per_param`` limits the finite differences to that many random
    coordinates per tensor (``None`` checks all of them); ``dims`` overrides
    the sizes of ``tiny_problem``.
    """
    from coal.losses import frame_loss

    start = time.perf_counter()
    model, visual, props, queries, labels = tiny_problem(seed=seed, **(dims or {}))
    with T.precision(np.float64):
        visual.requires_grad = True
        params = model.parameters()

        def loss() -> float:
            return frame_loss(model, visual, props, queries, labels).total.item()

        with T.Tape():
            total = frame_loss(model, visual, props, queries, labels).total
            analytic = T.grad(total, params + [visual])
        rng = np.random.default_rng([seed, 1])
        worst, worst_name = 0.0, ""
        for tensor, g in zip(params + [visual], analytic):
            coords = None
            if coords_per_param is not None and tensor.size > coords_per_param:
                coords = sorted(rng.choice(tensor.size, coords_per_param, replace=False))
            numeric = numeric_gradient(loss, tensor.data, coords)
            mask = np.zeros(tensor.size, dtype=bool)
            mask[coords if coords is not None else slice(None)] = True
            err = relative_error(g.reshape(-1)[mask], numeric.reshape(-1)[mask])
            if err > worst:
                worst, worst_name = err, getattr(tensor, "name", "") or "visual"
    detail = f"worst tensor: {worst_name}" if worst_name else ""
    return CheckResult("end-to-end frame", worst, worst <= tol, time.perf_counter() - start, detail)


def run_all(seed: int = 0, tol: float = TOLERANCE, coords_per_param: int | None = None) -> list[CheckResult]:
    return check_ops(seed, tol) + [check_end_to_end(seed, tol, coords_per_param)]


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        note = f"  {r.detail}" if r.detail else ""
        lines.append(f"{status}  {r.name:<{width}}  max_rel_error={r.max_rel_error:.3e}{note}")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
