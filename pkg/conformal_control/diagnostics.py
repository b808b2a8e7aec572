"""
In-process check suites behind the ``gradcheck`` and ``selftest`` commands.

The gradient suite compares reverse-mode gradients of every training loss
and network block with central differences. The property suite checks the
structural guarantees of the controllers and metrics on seeded random
inputs. Neither needs pytest at runtime.
"""

import io
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .baselines import aci_crossing_witness, aci_step, nexcp_quantile, split_cp_quantile
from .checkpoint import CheckpointCodec
from .core import AlphaLadder, QuantileLadder, StepRecord, running_error
from .metrics import calibration_score, crps, dcs, wis
from .ncc import (LossWeights, NccController, NccState, TtaConfig, coverage_loss, efficiency_loss,
                  encoder_for, loss_components, monotonicity_loss, quantile_loss,
                  soft_coverage_error, total_loss)
from .neural import QuantilePredictor, attention_fuse, dense, init_head, monotone_head

logger = logging.getLogger(__name__)

GRAD_STEP = 1e-5
GRAD_TOLERANCE = 1e-4
KINK_MARGIN = 1e-3


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ''


@dataclass
class DiagnosticReport:
    """Pass/fail tally of one suite"""

    title: str
    checks: List[Check] = field(default_factory=list)

    def add(self, name: str, passed: bool, detail: str = '') -> bool:
        self.checks.append(Check(name, bool(passed), detail))
        log = logger.debug if passed else logger.warning
        log(f"{self.title}: {name} {'passed' if passed else 'FAILED'} {detail}")
        return bool(passed)

    def run(self, name: str, fn: Callable[[], Check]):
        """Run one check function, recording an exception as a failure."""
        try:
            check = fn()
        except Exception as e:  # a crashing check is a failed check
            check = Check(name, False, f"raised {type(e).__name__}: {e}")
        self.add(name, check.passed, check.detail)

    def extend(self, other: "DiagnosticReport"):
        self.checks.extend(other.checks)

    @property
    def tests_passed(self) -> int:
        return sum(c.passed for c in self.checks)

    @property
    def tests_failed(self) -> int:
        return sum(not c.passed for c in self.checks)

    @property
    def ok(self) -> bool:
        return self.tests_failed == 0

    @property
    def issues(self) -> List[str]:
        return [f"{c.name}: {c.detail}" for c in self.checks if not c.passed]

    def format_report(self) -> str:
        out = io.StringIO()
        out.write("=" * 60 + "\n")
        out.write(self.title.upper() + "\n")
        out.write("=" * 60 + "\n\n")
        for i, c in enumerate(self.checks, start=1):
            mark = '✓' if c.passed else '✗'
            out.write(f"Test {i}: {c.name}\n  {mark} {c.detail}\n")
        out.write("\n" + "=" * 60 + "\n")
        out.write(f"RESULTS: {self.tests_passed} passed, {self.tests_failed} failed\n")
        out.write("=" * 60 + "\n")
        return out.getvalue()


# --- gradient suite ----------------------------------------------------------

def _loss_point(rng: np.random.Generator, ladder: AlphaLadder, batch: int = 2):
    """Random (s, q) away from the pinball and ReLU kinks."""
    while True:
        s = rng.uniform(0.2, 2.0, size=(batch, 1))
        q = rng.uniform(0.0, 2.5, size=(batch, ladder.n))
        if np.min(np.abs(s - q)) > KINK_MARGIN and np.min(np.abs(np.diff(q, axis=-1))) > KINK_MARGIN:
            return s, q


def _bound(prefix: str, names: Sequence[str], tensors: Sequence[Tensor]) -> ParamStore:
    store = ParamStore()
    for name, t in zip(names, tensors):
        store.bind(f'{prefix}.{name}', t)
    return store


def _grad_case(report: DiagnosticReport, name: str, f: Callable[..., Tensor],
               points: Sequence[Sequence[np.ndarray]], step: float, tol: float):
    def check() -> Check:
        worst = max(ad.grad_check(f, p, step) for p in points)
        return Check(name, worst < tol, f"max relative error {worst:.2e} over {len(points)} points")
    report.run(name, check)


def run_gradcheck(points: int = 5, seed: int = 0, step: float = GRAD_STEP,
                  tol: float = GRAD_TOLERANCE) -> DiagnosticReport:
    """Finite-difference checks of every loss and network block."""
    rng = np.random.default_rng(seed)
    report = DiagnosticReport('Gradient check')
    ladder = AlphaLadder((0.5, 0.2, 0.1))
    K = 0.3
    cov = (rng.uniform(size=(2, ladder.n)) > 0.5).astype(np.float64)
    loss_points = [_loss_point(rng, ladder) for _ in range(points)]

    _grad_case(report, 'quantile loss', lambda s, q: quantile_loss(s, q, ladder), loss_points, step, tol)
    _grad_case(report, 'coverage loss',
               lambda s, q: coverage_loss(soft_coverage_error(s, q, K), cov), loss_points, step, tol)
    _grad_case(report, 'efficiency loss',
               lambda s, q: efficiency_loss(s, q, soft_coverage_error(s, q, K), ladder),
               loss_points, step, tol)
    _grad_case(report, 'monotonicity loss', lambda s, q: monotonicity_loss(q, ladder),
               loss_points, step, tol)
    _grad_case(report, 'total loss',
               lambda s, q: total_loss(loss_components(s, q, ladder, cov, K), LossWeights()),
               loss_points, step, tol)

    B, d, H, heads = 2, 3, 4, 2
    proj = rng.standard_normal((B, H))

    def gru_block(x, w_x, w_h, b_x, b_h):
        h = ad.gru(x, Tensor(np.zeros((B, H))), w_x, w_h, b_x, b_h)
        return ad.sum_(h * proj)

    gru_points = [[rng.standard_normal((B, 4, d)), 0.5 * rng.standard_normal((d, 3 * H)),
                   0.5 * rng.standard_normal((H, 3 * H)), 0.1 * rng.standard_normal(3 * H),
                   0.1 * rng.standard_normal(3 * H)] for _ in range(points)]
    _grad_case(report, 'GRU encoder', gru_block, gru_points, step, tol)

    def dense_block(x, w, b):
        return ad.sum_(ad.tanh(dense(x, _bound('d', ('w', 'b'), (w, b)), 'd')) * proj)

    dense_points = [[rng.standard_normal((B, d)), rng.standard_normal((d, H)), rng.standard_normal(H)]
                    for _ in range(points)]
    _grad_case(report, 'dense layer', dense_block, dense_points, step, tol)

    att_names = [f'{p}.{w}' for p in 'qkvo' for w in ('w', 'b')]

    def attention_block(k1, k2, k3, *weights):
        store = _bound('att', att_names, weights)
        return ad.sum_(attention_fuse([k1, k2, k3], store, 'att', heads, query=k3) * proj)

    att_points = [[rng.standard_normal((B, H)) for _ in range(3)] +
                  [0.5 * rng.standard_normal((H, H)) if name.endswith('w') else 0.1 * rng.standard_normal(H)
                   for name in att_names] for _ in range(points)]
    _grad_case(report, 'multi-head attention', attention_block, att_points, step, tol)

    n, head_hidden = ladder.n, 5
    head_names = ('l1.w', 'l1.b', 'l2.w', 'l2.b')
    weight = rng.standard_normal((B, n))

    def head_block(z, *weights):
        out, _ = monotone_head(z, _bound('head', head_names, weights), 'head', n)
        return ad.sum_(out * weight)

    head_points = []
    while len(head_points) < points:
        scratch = ParamStore()
        init_head(scratch, 'head', H, head_hidden, n, rng)
        z = rng.standard_normal((B, H))
        values = [scratch[f'head.{k}'].values + 0.1 * rng.standard_normal(scratch[f'head.{k}'].shape)
                  for k in head_names]
        pre1 = z @ values[0] + values[1]
        pre2 = np.maximum(pre1, 0.0) @ values[2] + values[3]
        if np.min(np.abs(pre1)) > KINK_MARGIN and np.min(np.abs(pre2)) > KINK_MARGIN:
            head_points.append([z] + values)
    _grad_case(report, 'monotone quantile head', head_block, head_points, step, tol)

    def elementwise(x):
        y = ad.softmax(x, axis=-1)
        y = ad.cumsum(y, axis=-1) + ad.exp(x * 0.1) + ad.sigmoid(x) * ad.log(ad.square(x) + 1.0)
        both = ad.concat([y, ad.mean(x, axis=-1, keepdims=True)], axis=-1)
        return ad.sum_(both[:, 1:] * both[:, :-1])

    _grad_case(report, 'elementwise ops', elementwise,
               [[rng.standard_normal((B, H))] for _ in range(points)], step, tol)
    return report


# --- property suite ----------------------------------------------------------

def _telescoping(rng: np.random.Generator) -> Check:
    ladder = AlphaLadder((0.5, 0.2, 0.1))
    eta, w = 0.3, 5
    encoder = encoder_for(ladder, hidden=8, heads=2, window=4, head_hidden=8)
    state = NccState(ladder=ladder, eta=eta, w=w, stages=(0, 0, 0), retrain_interval=None,
                     tta=TtaConfig(enabled=False))
    controller = NccController(state, QuantilePredictor(encoder, seed=0))
    y = rng.standard_normal(300)
    expected = np.zeros(ladder.n)
    errs: List[np.ndarray] = []
    for t in range(len(y) - 1):
        record = controller.observe(t, y[t])
        if record is not None:
            errs.append(record.errs)
        matrix = np.array(errs, dtype=np.float64).reshape(-1, ladder.n)
        running = np.array([running_error(matrix[:, i], w=w) for i in range(ladder.n)])
        expected += eta * (running - ladder.as_array())
        controller.issue(t, 0.0)
    gap = float(np.max(np.abs(state.delta - expected)))
    return Check('telescoping conformalization', gap < 1e-9, f"max |delta - eta * sum(err - alpha)| = {gap:.1e}")


def _split_cp(rng: np.random.Generator) -> Check:
    worst = 0
    for _ in range(50):
        scores = rng.exponential(size=int(rng.integers(1, 40)))
        alphas = np.sort(rng.uniform(0.01, 0.99, size=5))
        q = [split_cp_quantile(scores, a) for a in alphas]
        worst += int(np.any(np.diff(q) > 0))
        worst += int(any(nexcp_quantile(scores, 1.0, a) != split_cp_quantile(scores, a) for a in alphas))
    return Check('split conformal monotone in alpha, NEXCP(rho=1) equals split', worst == 0,
                 f"{worst} violation(s) over 50 buffers")


def _aci_crossing(rng: np.random.Generator) -> Check:
    alpha1, alpha2, eta = 0.1, 0.2, 0.05
    a1_t, a2_t = 0.15, 0.16
    witness = aci_crossing_witness(a1_t, a2_t, eta, alpha1, alpha2)
    crossed = aci_step(a1_t, 0, eta, alpha1) > aci_step(a2_t, 1, eta, alpha2)
    return Check('ACI quantile crossing', witness == 1 and crossed,
                 f"witness={witness}, crossed after one step={crossed}")


def _monotone_head(rng: np.random.Generator, draws: int = 200) -> Check:
    ladder = AlphaLadder((0.9, 0.5, 0.2, 0.1, 0.05))
    encoder = encoder_for(ladder, hidden=8, heads=2, window=4, head_hidden=8)
    violations = 0
    for i in range(draws):
        params = QuantilePredictor(encoder, seed=i).params
        for name, p in params.items():
            p.values = p.values + rng.standard_normal(p.shape) * 2.0
        z = Tensor(rng.standard_normal((4, encoder.hidden)))
        with ad.no_grad():
            out, _ = monotone_head(z, params, 'head', ladder.n)
        q = out.values
        violations += int(np.any(q < 0) or np.any(np.diff(q, axis=-1) < 0))
    return Check('structural monotonicity', violations == 0, f"{violations} violation(s) in {draws} draws")


def _metric_oracles(rng: np.random.Generator) -> Check:
    one = AlphaLadder((0.5,))
    wis_a = wis(0.0, 0.0, [(-1.0, 1.0)], one)
    wis_b = wis(2.0, 0.0, [(-1.0, 1.0)], one)
    crps_a = crps(0.0, [0.25, 0.5, 0.75], [-1.0, 0.0, 1.0])
    ok = abs(wis_a - 1 / 3) < 1e-15 and abs(wis_b - 5 / 3) < 1e-12 and abs(crps_a - 1 / 3) < 1e-12

    L = 99
    levels = (np.arange(1, L + 1) - 0.5) / L
    worst = 0.0
    for _ in range(100):
        values = np.sort(rng.normal(rng.normal(), rng.uniform(0.5, 2.0), size=L))
        y = float(rng.normal())
        worst = max(worst, abs(crps(y, levels, values) - step_cdf_crps(y, values)) / step_cdf_crps(y, values))
    ok &= worst < 1e-3

    ladder = AlphaLadder((0.5, 0.25))
    q = QuantileLadder.fixed([1.0, 2.0])
    records = [StepRecord.score(t, s, 0.0, 1, q) for t, s in enumerate((0.5, 0.5, 1.5, 3.0))]
    cs = calibration_score(records, ladder)
    ok &= abs(cs) < 1e-12

    crossed = [StepRecord.score(t, float(rng.normal()), 0.0, 1,
                                QuantileLadder.fixed(rng.uniform(0, 2, size=ladder.n)))
               for t in range(50)]
    sorted_dcs = dcs([r.sorted(ladder) for r in crossed])
    ok &= sorted_dcs == 1.0
    return Check('metric oracles', ok, f"WIS {wis_a:.6f}/{wis_b:.6f}, CRPS {crps_a:.6f}, "
                                       f"CRPS vs step-CDF {worst:.1e}, CS {cs:.1e}, sorted DCS {sorted_dcs}")


def step_cdf_crps(y: float, values) -> float:
    """Exact integral of (F - 1{x >= y})^2 for the empirical CDF of ``values``."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    m = len(values)
    points = np.sort(np.append(values, y))
    total = 0.0
    for a, b in zip(points[:-1], points[1:]):
        mid = 0.5 * (a + b)
        F = np.searchsorted(values, mid, side='right') / m
        total += (b - a) * (F - float(mid >= y)) ** 2
    return total


def _checkpoint_round_trip(rng: np.random.Generator) -> Check:
    store = ParamStore()
    store.add('a', rng.standard_normal((3, 4)))
    store.add('b', rng.standard_normal(5) * 1e-300)
    store.slots['m']['a'] = rng.standard_normal((3, 4))
    store.step = 7
    codec = CheckpointCodec()
    back = codec.decode(codec.encode({'params': store}))['params']
    exact = all(np.array_equal(store[k].values.view(np.uint64), back[k].values.view(np.uint64)) for k in store)
    exact &= back.step == 7 and np.array_equal(back.slots['m']['a'], store.slots['m']['a'])
    return Check('checkpoint round trip', exact, 'bit-exact' if exact else 'values differ')


def _padding(rng: np.random.Generator) -> Check:
    ok = running_error([], w=3) == 1.0 and running_error([0, 0], w=4) == 0.5 and running_error([1, 0, 0], w=2) == 0.0
    return Check('running error padding', ok, 'pads missing history with err = 1')


PROPERTY_CHECKS = (_telescoping, _split_cp, _aci_crossing, _monotone_head, _metric_oracles,
                   _checkpoint_round_trip, _padding)


def run_selftest(seed: int = 0, gradients: bool = True) -> DiagnosticReport:
    """Every property check, followed by the gradient suite."""
    rng = np.random.default_rng(seed)
    report = DiagnosticReport('Self test')
    for fn in PROPERTY_CHECKS:
        report.run(fn.__name__.strip('_').replace('_', ' '), lambda fn=fn: fn(rng))
    if gradients:
        report.extend(run_gradcheck(seed=seed))
    logger.info(f"Self test: {report.tests_passed} passed, {report.tests_failed} failed")
    return report
