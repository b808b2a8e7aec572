"""
Experiment orchestration: run (dataset x method x seed) cells, write the
per-step results stream and the metrics table, build comparison reports,
and run the few-shot transfer comparison.
"""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .baselines import AciController, CpidController, NexcpController, SplitConformalController
from .config import ExperimentConfig
from .controller import ConformalController, run_online
from .core import AlphaLadder, StepRecord, coverage_errors
from .data import Dataset, RegionSeries, SyntheticRecipe, ingest, synthetic_dataset
from .errors import ConformalControlError, InsufficientDataError, InvalidInputError, SchemaError
from .forecasters import ForecastBundle, build_bundle, load_external, make_forecaster
from .metrics import cumulative_calibration, evaluate_by_horizon
from .ncc import (LossWeights, NccController, NccState, Normalization, TrainingBatch, TtaConfig,
                  encoder_for, fit_predictor)
from .neural import QuantilePredictor

logger = logging.getLogger(__name__)

KEY_COLUMNS = ['dataset', 'region', 'method', 'horizon', 'seed', 'sorted']
REPORT_METRICS = ['cs', 'wis', 'crps', 'dcs']
NCC_METHODS = ('ncc', 'ncc-t', 'ncc-m')


# --- data and forecasts ------------------------------------------------------

def load_dataset(cfg: ExperimentConfig, seed: int = 0) -> Dataset:
    """The configured dataset; synthetic recipes are re-seeded per experiment seed."""
    if cfg.dataset_path:
        return ingest(cfg.dataset_path, cfg.dataset_name)
    recipe = SyntheticRecipe.from_dict(cfg.synthetic)
    return synthetic_dataset(recipe.with_seed(recipe.seed + seed), cfg.dataset_name)


def forecast_bundle(cfg: ExperimentConfig, region: RegionSeries, seed: int) -> ForecastBundle:
    """Base forecasts for every issue time, from a forecaster fit on the fit segment."""
    if cfg.external_forecasts:
        return load_external(cfg.external_forecasts, cfg.horizons)
    y = region.series.y
    if len(y) <= cfg.fit_length:
        raise InsufficientDataError(
            f"Region {region.label} has {len(y)} points, fit segment needs more than {cfg.fit_length}"
        )
    forecaster = make_forecaster(cfg.forecaster, cfg.forecaster_params, cfg.horizons, seed)
    forecaster.fit(y[:cfg.fit_length])
    return build_bundle(forecaster, y, cfg.horizons)


def estimate_score_scale(y, bundle: ForecastBundle, tau: int, stop: int) -> float:
    """
    Median absolute residual of the forecasts whose targets fall before
    ``stop``; 1.0 when there are none or they are all exact.
    """
    y = np.asarray(y, dtype=np.float64)
    residuals = [abs(y[t + tau] - bundle.forecasts[(t, h)])
                 for (t, h) in bundle.forecasts if h == tau and t + tau < min(stop, len(y))]
    scale = float(np.median(residuals)) if residuals else 0.0
    if not scale > 0 or not math.isfinite(scale):
        logger.warning(f"Score scale for tau={tau} is degenerate ({scale}); using 1.0")
        return 1.0
    return scale


# --- controllers -------------------------------------------------------------

def ncc_state(method: str, cfg: ExperimentConfig, score_scale: float, frozen: bool = False) -> NccState:
    """NCC state for a method variant; a frozen state never trains."""
    p = cfg.method_params['ncc']
    t = p.get('tta') or {}
    lambdas = LossWeights(**p.get('lambdas', {}))
    if method == 'ncc-m':
        lambdas = LossWeights(lambdas.quantile, lambdas.coverage, lambdas.efficiency, 0.0)
    tta = TtaConfig(enabled=bool(t.get('enabled', True)) and method == 'ncc',
                    max_iters=int(t.get('max_iters', 50)), dcs_threshold=float(t.get('dcs_threshold', 1.0)),
                    mode=t.get('mode', 'mlp'))
    return NccState.scaled(
        cfg.ladder, score_scale,
        eta_scale=float(p['eta_scale']), k_scale=float(p['k_scale']),
        tta_step_scale=float(t.get('step_scale', 0.01)), tta=tta,
        w=int(p['w']), lambdas=lambdas,
        retrain_interval=None if frozen else p.get('retrain_interval'),
        stages=(0, 0, 0) if frozen else tuple(int(s) for s in p['stages']),
        retrain_stages=tuple(int(s) for s in p['retrain_stages']),
        lr=float(p['lr']), max_train_windows=int(p['max_train_windows']),
    )


def ncc_predictor(cfg: ExperimentConfig, view_names: Sequence[str], n_regions: int, seed: int) -> QuantilePredictor:
    p = cfg.method_params['ncc']
    encoder = encoder_for(cfg.ladder, view_names, n_regions, hidden=int(p['hidden']), heads=int(p['heads']),
                          window=int(p['window']), head_hidden=int(p['head_hidden']))
    return QuantilePredictor(encoder, seed=seed)


def make_controller(method: str, cfg: ExperimentConfig, tau: int, score_scale: float, seed: int = 0,
                    region: int = 0, n_regions: int = 1, view_names: Sequence[str] = (),
                    normalization: Optional[Normalization] = None) -> ConformalController:
    """Fresh controller for one (method, horizon) stream; step sizes scale with the score scale."""
    if method in NCC_METHODS:
        return NccController(ncc_state(method, cfg, score_scale), ncc_predictor(cfg, view_names, n_regions, seed),
                             tau=tau, region=region, n_regions=n_regions, normalization=normalization)
    p = cfg.method_params.get(method, {})
    if method == 'aci':
        return AciController(cfg.ladder, tau, eta=float(p['eta']))
    if method == 'cpid':
        return CpidController(cfg.ladder, tau, eta=float(p['eta_scale']) * score_scale,
                              K_I=float(p['ki_scale']) * score_scale, C=float(p.get('C', 1.0)))
    if method == 'nexcp':
        return NexcpController(cfg.ladder, tau, rho=float(p['rho']))
    if method == 'splitcp':
        return SplitConformalController(cfg.ladder, tau, n_horizons=len(cfg.horizons),
                                        bonferroni=bool(p.get('bonferroni', False)), window=p.get('window'))
    raise ConformalControlError(f"Unknown method {method!r}")


# --- cells -------------------------------------------------------------------

@dataclass
class CellInput:
    """Everything one (method, region, seed) cell needs; picklable for worker processes."""

    cfg: ExperimentConfig
    dataset: str
    region: RegionSeries
    n_regions: int
    view_names: Tuple[str, ...]
    method: str
    seed: int
    bundle: ForecastBundle
    scales: Dict[int, float]

    @property
    def key(self) -> Tuple[str, str, str, int]:
        return (self.dataset, self.region.label, self.method, self.seed)


@dataclass
class CellResult:
    dataset: str
    region: str
    method: str
    seed: int
    records: List[StepRecord] = field(default_factory=list)
    error: Optional[BaseException] = None

    @property
    def key(self) -> Tuple[str, str, str, int]:
        return (self.dataset, self.region, self.method, self.seed)


def run_cell(cell: CellInput) -> CellResult:
    """
    Run one method over every horizon of one region. Any failure is captured
    on the result together with the records produced before it.
    """
    cfg = cell.cfg
    result = CellResult(cell.dataset, cell.region.label, cell.method, cell.seed)
    series = cell.region.series
    try:
        normalization = Normalization.fit(series.truncate(cfg.fit_length))
        for tau in cfg.horizons:
            controller = make_controller(cell.method, cfg, tau, cell.scales[tau], cell.seed,
                                         cell.region.index, cell.n_regions, cell.view_names, normalization)
            run_online(controller, series, cell.bundle.get, cfg.fit_length, cfg.warmup, sink=result.records)
        logger.info(f"{cell.dataset}/{cell.region.label} {cell.method} seed={cell.seed}: "
                    f"{len(result.records)} records")
    except ConformalControlError as e:
        logger.error(f"{cell.dataset}/{cell.region.label} {cell.method} seed={cell.seed} failed: {e}")
        result.error = e
    except Exception as e:
        logger.error(f"{cell.dataset}/{cell.region.label} {cell.method} seed={cell.seed} crashed: "
                     f"{type(e).__name__}: {e}", exc_info=True)
        result.error = e
    return result


def prepare_cells(cfg: ExperimentConfig) -> Tuple[List[CellInput], List[CellResult]]:
    """
    Cells to run, plus already-failed results for regions whose forecasts
    could not be prepared (one per method, so each gets an error line).
    """
    cells, failed = [], []
    for seed in cfg.seeds:
        dataset = load_dataset(cfg, seed)
        for region in dataset.regions:
            try:
                bundle = forecast_bundle(cfg, region, seed)
                scales = {tau: estimate_score_scale(region.series.y, bundle, tau, cfg.fit_length)
                          for tau in cfg.horizons}
            except Exception as e:
                logger.error(f"{dataset.name}/{region.label} seed={seed}: forecasts failed: "
                             f"{type(e).__name__}: {e}")
                failed.extend(CellResult(dataset.name, region.label, method, seed, error=e)
                              for method in cfg.methods)
                continue
            logger.debug(f"{dataset.name}/{region.label} seed={seed}: score scales {scales}")
            for method in cfg.methods:
                cells.append(CellInput(cfg, dataset.name, region, dataset.n_regions, dataset.view_names,
                                       method, seed, bundle, scales))
    return cells, failed


def execute(cfg: ExperimentConfig) -> List[CellResult]:
    """Run every cell, in worker processes when ``cfg.workers`` > 1, sorted by cell key."""
    cells, results = prepare_cells(cfg)
    logger.info(f"Running {len(cells)} cell(s) with {cfg.workers} worker(s)")
    if cfg.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results.extend(pool.map(run_cell, cells))
    else:
        results.extend(run_cell(c) for c in cells)
    return sorted(results, key=lambda r: r.key)


# --- results stream ----------------------------------------------------------

def _number(x: float) -> Any:
    """JSON-safe float: NaN (empty interval) is null, infinities are strings."""
    x = float(x)
    if math.isnan(x):
        return None
    if math.isinf(x):
        return 'inf' if x > 0 else '-inf'
    return x


def validate_record(record: StepRecord):
    """Check the err/interval invariants of a scored step before it is written."""
    q = record.ladder.q_conf
    errs = coverage_errors(record.s, q)
    if not np.array_equal(errs, record.errs):
        raise InvalidInputError(f"t={record.t}: coverage errors {record.errs} disagree with s={record.s}")
    for i, qi in enumerate(q):
        lo, hi = record.intervals[i]
        if qi < 0:
            if not (math.isnan(lo) and math.isnan(hi)):
                raise InvalidInputError(f"t={record.t}: negative quantile {qi} must give an empty interval")
        elif not (lo <= record.y_hat <= hi):
            raise InvalidInputError(f"t={record.t}: interval ({lo}, {hi}) does not contain y_hat={record.y_hat}")
        elif math.isfinite(qi) and not math.isclose(hi - lo, 2.0 * qi, rel_tol=1e-9, abs_tol=1e-9):
            raise InvalidInputError(f"t={record.t}: interval width {hi - lo} is not 2q for q={qi}")


def record_to_json(record: StepRecord, ladder: AlphaLadder, result: CellResult) -> Dict[str, Any]:
    levels = [
        {'alpha': alpha, 'q_raw': _number(record.ladder.q_raw[i]), 'q_conf': _number(record.ladder.q_conf[i]),
         'lo': _number(record.intervals[i, 0]), 'hi': _number(record.intervals[i, 1]),
         'err': int(record.errs[i])}
        for i, alpha in enumerate(ladder)
    ]
    return {
        'dataset': result.dataset, 'region': result.region, 'method': result.method, 'seed': result.seed,
        't': record.t, 'tau': record.tau, 'y': record.y, 'y_hat': record.y_hat,
        'levels': levels, 'consistent': record.consistent,
        'tta_iters': record.tta_iters, 'tta_complete': record.tta_complete,
    }


def write_results(results: Sequence[CellResult], cfg: ExperimentConfig, path: Path) -> Path:
    """
    Header line, then every step of every cell in key order, then one error
    line per failed cell.

    A record that fails validation ends its cell's stream: the cell keeps the
    records before it and, unless it already failed, the validation error.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {'header': {'dataset': cfg.dataset_name, 'alphas': list(cfg.ladder.alphas),
                         'horizons': list(cfg.horizons), 'methods': list(cfg.methods),
                         'seeds': list(cfg.seeds), 'fit_length': cfg.fit_length, 'warmup': cfg.warmup,
                         'forecaster': cfg.forecaster}}
    with open(path, 'w') as f:
        f.write(json.dumps(header, allow_nan=False) + '\n')
        for result in results:
            for i, record in enumerate(result.records):
                try:
                    validate_record(record)
                    line = json.dumps(record_to_json(record, cfg.ladder, result), allow_nan=False)
                except ValueError as e:
                    logger.error(f"{result.dataset}/{result.region} {result.method} seed={result.seed}: "
                                 f"invalid record, stream cut at t={record.t}: {e}")
                    if result.error is None:
                        result.error = e
                    result.records = result.records[:i]
                    break
                f.write(line + '\n')
        for result in results:
            if result.error is not None:
                err = result.error
                f.write(json.dumps({'error': {
                    'dataset': result.dataset, 'region': result.region, 'method': result.method,
                    'seed': result.seed, 'type': type(err).__name__, 'message': str(err),
                    'exit_code': getattr(err, 'exit_code', 1)}}) + '\n')
    logger.info(f"Wrote results to {path}")
    return path


def read_results(path) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    """Header and step objects of a results file (error lines are skipped)."""
    header: Dict[str, Any] = {}
    steps = []
    with open(path) as f:
        for line in f:
            obj = json.loads(line)
            if 'header' in obj:
                header = obj['header']
            elif 'error' not in obj:
                steps.append(obj)
    return header, steps


# --- metrics -----------------------------------------------------------------

def metrics_frame(results: Sequence[CellResult], ladder: AlphaLadder, sort: bool = False) -> pd.DataFrame:
    """One row per (cell, horizon) plus a pooled row per cell."""
    rows = []
    for result in results:
        if not result.records:
            continue
        for tau, report in evaluate_by_horizon(result.records, ladder, sort=sort).items():
            rows.append({'dataset': result.dataset, 'region': result.region, 'method': result.method,
                         'horizon': 'pooled' if tau is None else str(tau), 'seed': result.seed,
                         'sorted': sort, **report.to_row()})
    return pd.DataFrame(rows, columns=None if rows else KEY_COLUMNS + REPORT_METRICS)


@dataclass
class RunSummary:
    results_path: Path
    metrics_path: Path
    metrics: pd.DataFrame
    cells: int


def run(cfg: ExperimentConfig, sort: bool = False) -> RunSummary:
    """
    Run the configured experiment and write the results stream and metrics table.

    With ``sort`` the metrics are computed on rearranged ladders and written
    next to the unsorted table with a ``-sorted`` suffix.
    """
    results = execute(cfg)
    results_path = write_results(results, cfg, cfg.results_path)
    frame = metrics_frame(results, cfg.ladder, sort=sort)
    metrics_path = cfg.metrics_path
    if sort:
        metrics_path = metrics_path.with_name(f"{metrics_path.stem}-sorted{metrics_path.suffix}")
    frame.to_csv(metrics_path, index=False)
    logger.info(f"Wrote {len(frame)} metric rows to {metrics_path}")

    failed = [r for r in results if r.error is not None]
    if failed:
        raise failed[0].error
    return RunSummary(results_path, metrics_path, frame, len(results))


# --- report ------------------------------------------------------------------

def report(paths: Iterable, out) -> pd.DataFrame:
    """
    Wide comparison table from one or more metrics CSVs.

    Rows are (dataset, horizon[, sorted]); columns are
    ``<method>:<metric>:mean`` and ``<method>:<metric>:std`` across seeds.
    """
    frames = []
    columns = None
    for path in paths:
        try:
            df = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise SchemaError(f"{path}: cannot read metrics: {e}") from e
        missing = [c for c in ['dataset', 'method', 'horizon', 'seed'] + REPORT_METRICS if c not in df.columns]
        if missing:
            raise SchemaError(f"{path}: not a metrics table, missing column(s) {', '.join(missing)}")
        if columns is not None and list(df.columns) != columns:
            raise SchemaError(f"{path}: columns differ from the first file")
        columns = list(df.columns)
        frames.append(df)
    if not frames:
        raise InsufficientDataError("report needs at least one metrics file")

    df = pd.concat(frames, ignore_index=True)
    df['horizon'] = df['horizon'].astype(str)
    rows = ['dataset', 'horizon'] + (['sorted'] if 'sorted' in df.columns else [])
    metrics = REPORT_METRICS + (['infinite'] if 'infinite' in df.columns else [])
    # std stays NaN (an empty cell) when a method has a single seed
    stats = df.groupby(rows + ['method'])[metrics].agg(['mean', 'std'])
    wide = stats.unstack('method')
    wide.columns = [f"{method}:{metric}:{stat}" for metric, stat, method in wide.columns]
    wide = wide[sorted(wide.columns)]
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    wide.to_csv(out)
    logger.info(f"Wrote report with {len(wide)} row(s) and {len(wide.columns)} column(s) to {out}")
    return wide


# --- few-shot transfer -------------------------------------------------------

@dataclass
class FewShotResult:
    seed: int
    target: str
    warm_cs: float
    cold_cs: float
    warm_curve: np.ndarray
    cold_curve: np.ndarray


def _frozen_ncc(cfg: ExperimentConfig, predictor: QuantilePredictor, tau: int, scale: float,
                region: RegionSeries, n_regions: int) -> NccController:
    """NCC controller that never trains; the predictor's parameters are used as given."""
    state = ncc_state('ncc', cfg, scale, frozen=True)
    return NccController(state, predictor, tau=tau, region=region.index, n_regions=n_regions,
                         normalization=Normalization.fit(region.series.truncate(cfg.fit_length)))


def pretrain(cfg: ExperimentConfig, dataset: Dataset, sources: Sequence[RegionSeries],
             seed: int) -> QuantilePredictor:
    """Collect conformal histories on every source region and fit one shared predictor."""
    tau = cfg.horizons[0]
    predictor = ncc_predictor(cfg, dataset.view_names, dataset.n_regions, seed)
    batches = []
    for region in sources:
        bundle = forecast_bundle(cfg, region, seed)
        scale = estimate_score_scale(region.series.y, bundle, tau, cfg.fit_length)
        controller = _frozen_ncc(cfg, predictor, tau, scale, region, dataset.n_regions)
        run_online(controller, region.series, bundle.get, cfg.fit_length, cfg.warmup)
        batches.append(controller.training_batch())
    p = cfg.method_params['ncc']
    state = ncc_state('ncc', cfg, 1.0)
    log = fit_predictor(predictor, TrainingBatch.concat(batches), cfg.ladder,
                        tuple(int(s) for s in p['stages']), state.lambdas, state.K, state.lr)
    logger.info(f"Pretrained on {len(sources)} source region(s); final losses "
                f"{ {k: round(log.end(k), 5) for k in log.stage_losses} }")
    return predictor


def fewshot(cfg: ExperimentConfig) -> List[FewShotResult]:
    """
    Warm start (predictor pretrained on the source regions) against cold
    start (fresh predictor) on a target region with a short burn-in.
    """
    fs = cfg.fewshot
    burnin, steps = int(fs.get('target_burnin', 10)), int(fs.get('eval_steps', 20))
    tau = cfg.horizons[0]
    results = []
    for seed in cfg.seeds:
        dataset = load_dataset(cfg, seed)
        if dataset.n_regions < 2:
            raise InsufficientDataError(f"Few-shot transfer needs >= 2 regions, {dataset.name} has {dataset.n_regions}")
        target = dataset.regions[int(fs.get('target_region', -1))]
        sources = [r for r in dataset.regions if r.index != target.index]
        warm_predictor = pretrain(cfg, dataset, sources, seed)

        start = cfg.fit_length
        length = start + burnin + steps + tau
        if len(target.series) < length:
            raise InsufficientDataError(f"Target region {target.label} needs {length} points, has {len(target.series)}")
        series = target.series.truncate(length)
        bundle = forecast_bundle(cfg, target, seed)
        scale = estimate_score_scale(target.series.y, bundle, tau, start)
        target_cut = RegionSeries(target.label, target.index, target.times[:length], series)

        curves = {}
        for arm, predictor in (('warm', warm_predictor),
                               ('cold', ncc_predictor(cfg, dataset.view_names, dataset.n_regions, seed))):
            controller = _frozen_ncc(cfg, predictor, tau, scale, target_cut, dataset.n_regions)
            records = run_online(controller, series, bundle.get, start, start + burnin)[:steps]
            curves[arm] = cumulative_calibration(records, cfg.ladder)
        result = FewShotResult(seed, target.label, float(curves['warm'][-1]), float(curves['cold'][-1]),
                               curves['warm'], curves['cold'])
        logger.info(f"Few-shot seed={seed} target={target.label}: warm CS {result.warm_cs:.4f}, "
                    f"cold CS {result.cold_cs:.4f}")
        results.append(result)

    out = cfg.output_dir / 'fewshot.csv'
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([{'seed': r.seed, 'target': r.target, 'warm_cs': r.warm_cs, 'cold_cs': r.cold_cs,
                   'steps': len(r.warm_curve)} for r in results]).to_csv(out, index=False)
    logger.info(f"Wrote few-shot comparison to {out}")
    return results
