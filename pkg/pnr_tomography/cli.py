#!/usr/bin/env python3

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import click
import numpy as np
from tabulate import tabulate

from . import artifacts
from .bench import ScalingRecord, extrapolate, fit_all, run_scaling
from .config import load_config
from .detector import (
    ClickStatistics,
    DetectorConfig,
    NoiseModel,
    sample_detector,
    simulate_probe_matrix,
)
from .exceptions import InvalidArgumentError, TomographyError
from .probes import ProbeMatrix, ProbePlan, build_probe_matrix, make_probe_plan
from .qp import SolverOptions
from .reconstruction import (
    STATES,
    EmeOptions,
    lambda_sweep,
    reconstruct_repeated,
    reference_pnd,
)
from .tomography import (
    dark_count_probability,
    gamma_sweep,
    povm_relative_error,
    solve_mdt,
    solve_mle,
    solve_sdt,
)

logger = logging.getLogger(__name__)

GB = 1e9


class NumericalFailure(click.ClickException):
    exit_code = 2


class _Group(click.Group):
    """Maps library errors onto exit codes: 1 for bad input, 2 for numerical failure."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = 1
            raise
        except InvalidArgumentError as e:
            raise click.ClickException(str(e)) from e
        except TomographyError as e:
            raise NumericalFailure(f"{type(e).__name__}: {e}") from e
        except OSError as e:
            raise click.FileError(str(e.filename or ""), hint=e.strerror or str(e)) from e
        except ValueError as e:
            # malformed config or data files
            raise click.ClickException(str(e)) from e


@dataclass
class ExperimentConfig:
    seed: int
    gamma: float
    lam: float
    pulses: int
    threads: int
    output_dir: Path
    method: str = "both"
    detector: Dict[str, Any] = field(default_factory=dict)
    probe: Dict[str, Any] = field(default_factory=dict)
    solver: SolverOptions = field(default_factory=SolverOptions)
    reconstruction: Dict[str, Any] = field(default_factory=dict)
    bench: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_mapping(
        cls, data: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None
    ) -> "ExperimentConfig":
        """Typed view of a merged config mapping; non-None ``overrides`` win."""
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        experiment = data.get("experiment", {})
        threads = int(overrides.get("threads", os.cpu_count() or 1))
        solver = SolverOptions.from_mapping({**data.get("solver", {}), "threads": threads})
        probe = dict(data.get("probe", {}))
        if "pulses" in overrides:
            probe["pulses_per_probe"] = int(overrides["pulses"])
        if "seed" not in overrides and "seed" not in experiment:
            raise InvalidArgumentError("a seed is required")
        return cls(
            seed=int(overrides.get("seed", experiment.get("seed"))),
            gamma=float(overrides.get("gamma", data["tomography"]["gamma"])),
            lam=float(overrides.get("lam", data["reconstruction"]["lambda"])),
            pulses=int(probe["pulses_per_probe"]),
            threads=threads,
            output_dir=Path(overrides.get("output", experiment.get("output", "results"))),
            method=str(data.get("tomography", {}).get("method", "both")),
            detector=dict(data.get("detector", {})),
            probe=probe,
            solver=solver,
            reconstruction=dict(data.get("reconstruction", {})),
            bench=dict(data.get("bench", {})),
        )

    def to_json_dict(self) -> Dict[str, Any]:
        """Everything that determines the outputs; thread count and paths do not."""
        solver = self.solver.to_json_dict()
        solver.pop("threads")
        return {
            "seed": self.seed,
            "gamma": self.gamma,
            "lambda": self.lam,
            "pulses": self.pulses,
            "method": self.method,
            "detector": self.detector,
            "probe": self.probe,
            "solver": solver,
            "reconstruction": self.reconstruction,
            "bench": self.bench,
        }

    def eme_options(self) -> EmeOptions:
        return EmeOptions(
            lam=self.lam,
            max_iter=int(self.reconstruction["max_iter"]),
            convergence_tol=float(self.reconstruction["convergence_tol"]),
            floor_eps=float(self.reconstruction["floor_eps"]),
        )

    def path(self, name: str) -> Path:
        return self.output_dir / name


class _Context:
    config: ExperimentConfig


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from e


def _load_probe_data(
    obj: _Context, input_dir: Optional[str]
) -> Tuple[ProbePlan, np.ndarray, np.ndarray]:
    directory = Path(input_dir) if input_dir else obj.config.output_dir
    plan = ProbePlan.from_json_dict(artifacts.read_json(directory / "probe_plan.json"))
    f = artifacts.read_matrix(directory / "probes.csv")
    p = artifacts.read_matrix(directory / "measurements.csv")
    if f.shape[0] != p.shape[0]:
        raise InvalidArgumentError(
            f"{f.shape[0]} probe rows but {p.shape[0]} measurement rows"
        )
    return plan, p, f


@click.group(
    cls=_Group,
    help="Simulate multi-pixel click detectors, run detector tomography and reconstruct photon-number distributions",
)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="TOML or JSON config file")
@click.option("--seed", type=int, help="Master seed (required unless set in --config)")
@click.option("--gamma", type=float, help="Smoothing weight (default 1e-4)")
@click.option("--lambda", "lam", type=float, help="Entropy weight for EME (default 0.02)")
@click.option("--pulses", type=int, help="Pulses per probe or input state (default 100000)")
@click.option("--threads", type=int, help="Worker threads (default: machine cores)")
@click.option("--output", type=click.Path(file_okay=False), help="Output directory")
@click.option("-v", "--verbose", is_flag=True, help="Verbosity")
@click.pass_context
def main(ctx, config_path, seed, gamma, lam, pulses, threads, output, verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO)
    ctx.obj = _Context()
    ctx.obj.config = ExperimentConfig.from_mapping(
        load_config(config_path),
        dict(seed=seed, gamma=gamma, lam=lam, pulses=pulses, threads=threads, output=output),
    )


@main.command(help="Sample a detector, design probes and simulate the measurement matrix")
@click.option("--pixels", "n_pixels", type=int, help="Number of pixels N")
@click.option("--detector", "detector_path", type=click.Path(exists=True, dir_okay=False), help="Use this detector.json instead of sampling")
@click.pass_obj
def simulate(obj: _Context, n_pixels: Optional[int], detector_path: Optional[str]):
    cfg = obj.config
    if detector_path:
        detector = DetectorConfig.from_json_dict(artifacts.read_json(detector_path))
    elif n_pixels is None:
        raise click.UsageError("pass --pixels or --detector")
    else:
        detector = sample_detector(
            n_pixels,
            cfg.seed,
            coupling_efficiency=float(cfg.detector["coupling_efficiency"]),
            splitting_sigma=float(cfg.detector["splitting_sigma"]),
            efficiency_range=(
                float(cfg.detector["efficiency_min"]),
                float(cfg.detector["efficiency_max"]),
            ),
        )
    plan = make_probe_plan(
        detector.n_pixels,
        rule=cfg.probe["rule"],
        threshold=float(cfg.probe["threshold"]),
        config=detector,
        pulses_per_probe=cfg.pulses,
        truncation_bound=float(cfg.probe["truncation_bound"]),
    )
    f = build_probe_matrix(plan)
    noise = NoiseModel(float(cfg.probe["noise_sigma_rel"]))
    p = simulate_probe_matrix(
        detector, plan.alpha_sq_values, noise, plan.pulses_per_probe, cfg.seed, cfg.threads
    )

    settings = cfg.to_json_dict()
    artifacts.write_json(cfg.path("detector.json"), detector.to_json_dict())
    artifacts.write_json(cfg.path("probe_plan.json"), plan.to_json_dict())
    artifacts.write_matrix(cfg.path("probes.csv"), f.values, "d", "k", config=settings)
    artifacts.write_matrix(cfg.path("measurements.csv"), p, "d", "n", config=settings)

    print(
        tabulate(
            [
                ("pixels N", detector.n_pixels),
                ("probes D", plan.n_probes),
                ("|alpha|^2 max", plan.alpha_sq_max),
                ("truncation M", plan.truncation),
                ("pulses per probe", plan.pulses_per_probe),
            ],
            headers=["Quantity", "Value"],
        )
    )


@main.command(help="Estimate the detector POVM from simulated probe statistics")
@click.option(
    "--method",
    type=click.Choice(["sdt", "mdt", "both", "mle"]),
    default=None,
    help="Tomography method (default from config)",
)
@click.option("--input", "input_dir", type=click.Path(exists=True, file_okay=False), help="Directory written by simulate")
@click.pass_obj
def tomo(obj: _Context, method: Optional[str], input_dir: Optional[str]):
    cfg = obj.config
    _, p, f = _load_probe_data(obj, input_dir)
    settings = cfg.to_json_dict()
    method = method or cfg.method
    methods = ["sdt", "mdt"] if method == "both" else [method]

    stats: Dict[str, Any] = {}
    stats["smallest_singular_value"] = ProbeMatrix(f).smallest_singular_value(cfg.gamma)
    logger.info(
        f"Smallest singular value of F^T F + gamma U: {stats['smallest_singular_value']:.3e}"
    )
    povms = {}
    for name in methods:
        if name == "mle":
            mle = solve_mle(p, f)
            povm, entry = mle.povm, mle.stats()
        else:
            solve = solve_sdt if name == "sdt" else solve_mdt
            solution = solve(p, f, cfg.gamma, cfg.solver)
            assert solution.povm is not None
            povm, entry = solution.povm, solution.stats()
        entry["p_dark"] = dark_count_probability(povm)
        stats[name] = entry
        povms[name] = povm
        artifacts.write_povm(
            cfg.path(f"povm_{name}"),
            povm,
            {"method": name, "gamma": cfg.gamma, "stats": entry},
            config=settings,
        )
    if "sdt" in povms and "mdt" in povms:
        stats["relative_error_mdt_sdt"] = povm_relative_error(povms["mdt"], povms["sdt"])
    artifacts.write_json(cfg.path("solver_stats.json"), stats)

    rows = [
        (
            name.upper(),
            entry["p_dark"],
            entry.get("masked_fraction", 0.0),
            entry["iterations"],
            entry["wall_time"],
            entry["converged"],
        )
        for name, entry in stats.items()
        if isinstance(entry, dict)
    ]
    print(
        tabulate(
            rows,
            headers=["Method", "p_dark", "Masked", "Iterations", "Time (s)", "Converged"],
        )
    )
    if "relative_error_mdt_sdt" in stats:
        print(f"\nRelative error MDT vs SDT: {stats['relative_error_mdt_sdt']:.4%}")


@main.command(
    name="sweep-gamma",
    help="Dark-count probability and POVM smoothness across smoothing weights",
)
@click.option("--gammas", default="1e-5,1e-4,1e-3,1e-2,1e-1", help="Comma-separated gamma values")
@click.option("--input", "input_dir", type=click.Path(exists=True, file_okay=False), help="Directory written by simulate")
@click.pass_obj
def sweep_gamma(obj: _Context, gammas: str, input_dir: Optional[str]):
    cfg = obj.config
    _, p, f = _load_probe_data(obj, input_dir)
    rows = gamma_sweep(p, f, _floats(gammas), cfg.solver)
    table = [(r.gamma, r.p_dark, r.objective, r.smoothness, int(r.converged)) for r in rows]
    header = ["gamma", "p_dark", "objective", "smoothness", "converged"]
    artifacts.write_csv(cfg.path("gamma_sweep.csv"), header, table, config=cfg.to_json_dict())
    print(tabulate(table, headers=header))


def _povm_path(cfg: ExperimentConfig, povm_path: Optional[str]) -> Path:
    if povm_path:
        return Path(povm_path)
    for name in ("povm_mdt.csv", "povm_sdt.csv", "povm_mle.csv"):
        if cfg.path(name).exists():
            return cfg.path(name)
    raise click.FileError(
        str(cfg.path("povm_mdt.csv")), hint="no POVM found, run `tomo` first"
    )


@main.command(help="Reconstruct the photon-number distribution of a simulated input state")
@click.option("--state", type=click.Choice(STATES), default="thermal")
@click.option("--mean-n", type=float, required=True, help="Mean photon number of the input")
@click.option("--povm", "povm_path", type=click.Path(dir_okay=False), help="POVM CSV or JSON (default: latest in output)")
@click.option("--detector", "detector_path", type=click.Path(dir_okay=False), help="Detector JSON (default: output/detector.json)")
@click.option("--repeat", default=1, help="Repetitions for mean and standard deviation")
@click.pass_obj
def reconstruct(
    obj: _Context,
    state: str,
    mean_n: float,
    povm_path: Optional[str],
    detector_path: Optional[str],
    repeat: int,
):
    cfg = obj.config
    povm = artifacts.read_povm(_povm_path(cfg, povm_path))
    detector = DetectorConfig.from_json_dict(
        artifacts.read_json(detector_path or cfg.path("detector.json"))
    )
    if detector.n_pixels != povm.n_pixels:
        raise InvalidArgumentError(
            f"POVM has {povm.n_pixels} pixels, detector has {detector.n_pixels}"
        )
    # input pulses draw from a seed distinct from the probe streams
    result = reconstruct_repeated(
        detector,
        povm,
        state,
        mean_n,
        cfg.pulses,
        repeat,
        cfg.seed + 1,
        cfg.eme_options(),
        cfg.threads,
    )

    header = ["k", "f", "f_true"]
    columns = [result.mean, result.reference.probs]
    if repeat > 1:
        header.append("f_std")
        columns.append(result.std)
    rows = ([k, *values] for k, values in enumerate(zip(*columns)))
    artifacts.write_csv(cfg.path("pnd.csv"), header, rows, config=cfg.to_json_dict())

    clicks = ClickStatistics(result.click_mean / result.click_mean.sum())
    click_header = clicks.csv_header()
    click_rows: List[tuple] = list(clicks.to_csv_rows())
    if repeat > 1:
        click_header.append("probability_std")
        click_rows = [(*row, std) for row, std in zip(click_rows, result.click_std)]
    artifacts.write_csv(
        cfg.path("clicks.csv"), click_header, click_rows, config=cfg.to_json_dict()
    )

    report = result.mean_report
    metrics: Dict[str, Any] = {
        "state": state,
        "mean_n": mean_n,
        "repeats": repeat,
        "lambda": cfg.lam,
        "fidelity": float(np.mean(result.fidelities)),
        "tvd": float(np.mean(result.tvds)),
    }
    if report is not None:
        metrics.update(report.to_json_dict())
    if repeat > 1:
        metrics["fidelity_std"] = float(np.std(result.fidelities))
    metrics["eme"] = result.diagnostics
    metrics["eme_converged"] = all(d["converged"] for d in result.diagnostics)
    artifacts.write_json(cfg.path("metrics.json"), metrics)

    print(tabulate(
        [(k, v) for k, v in metrics.items() if isinstance(v, float)],
        headers=["Metric", "Value"],
    ))


@main.command(
    name="sweep-lambda",
    help="Mean reconstruction fidelity on the known probe states across entropy weights",
)
@click.option("--lambdas", default="0,0.005,0.01,0.02,0.05,0.1", help="Comma-separated lambda values")
@click.option("--povm", "povm_path", type=click.Path(dir_okay=False), help="POVM CSV or JSON (default: latest in output)")
@click.option("--max-probes", default=10, help="Evenly spaced probes to reconstruct")
@click.option("--input", "input_dir", type=click.Path(exists=True, file_okay=False), help="Directory written by simulate")
@click.pass_obj
def sweep_lambda(
    obj: _Context,
    lambdas: str,
    povm_path: Optional[str],
    max_probes: int,
    input_dir: Optional[str],
):
    cfg = obj.config
    plan, p, _ = _load_probe_data(obj, input_dir)
    povm = artifacts.read_povm(_povm_path(cfg, povm_path))
    if povm.truncation != plan.truncation:
        raise InvalidArgumentError(
            f"POVM truncation {povm.truncation} does not match the probe plan's {plan.truncation}"
        )
    picks = np.unique(np.linspace(0, plan.n_probes - 1, min(max_probes, plan.n_probes)).astype(int))
    true_pnds = [
        reference_pnd("coherent", plan.alpha_sq_values[d], plan.truncation) for d in picks
    ]
    rows = lambda_sweep(
        [p[d] / p[d].sum() for d in picks], true_pnds, povm, _floats(lambdas), cfg.eme_options()
    )
    table = [(r.lam, r.mean_fidelity, r.min_fidelity) for r in rows]
    header = ["lambda", "mean_fidelity", "min_fidelity"]
    artifacts.write_csv(cfg.path("lambda_sweep.csv"), header, table, config=cfg.to_json_dict())
    print(tabulate(table, headers=header, floatfmt=".6f"))


@main.command(help="Time and memory scaling of SDT and MDT with power-law fits")
@click.option("--pixels", default="10,20,30", help="Comma-separated pixel counts")
@click.option("--repetitions", type=int, help="Solves per point, median reported")
@click.option("--budget", type=float, help="Memory budget in GB for the largest tractable N")
@click.pass_obj
def bench(obj: _Context, pixels: str, repetitions: Optional[int], budget: Optional[float]):
    cfg = obj.config
    try:
        pixel_list = [int(v) for v in pixels.split(",") if v.strip()]
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated integers, got {pixels!r}") from e
    if not pixel_list:
        raise click.BadParameter("no pixel counts given", param_hint="--pixels")
    records = run_scaling(
        pixel_list,
        repetitions=repetitions or int(cfg.bench["repetitions"]),
        solver_opts=cfg.solver,
        gamma=cfg.gamma,
        pulses_per_probe=cfg.pulses,
        seed=cfg.seed,
        probe_rule=cfg.probe["rule"],
        threads=cfg.threads,
        progress=True,
    )
    artifacts.write_csv(
        cfg.path("scaling.csv"),
        ScalingRecord.csv_header(),
        (r.to_csv_row() for r in records),
        config=cfg.to_json_dict(),
    )
    print(tabulate([r.to_csv_row() for r in records], headers=ScalingRecord.csv_header()))

    usable = {r.n_pixels for r in records if not r.out_of_memory}
    if len(usable) < 3:
        logger.warning("Fewer than 3 pixel counts measured, skipping the power-law fits")
        return
    fits = fit_all(records, cfg.bench["weight_scheme"])
    report: Dict[str, Any] = {name: fit.to_json_dict() for name, fit in fits.items()}
    if budget is not None:
        report["budget_gb"] = budget
        for method in ("mdt", "sdt"):
            try:
                report[f"max_pixels_{method}"] = extrapolate(fits[f"m_{method}"], budget * GB)
            except InvalidArgumentError as e:
                logger.warning(f"No {method.upper()} extrapolation: {e}")
                report[f"max_pixels_{method}"] = None
    artifacts.write_json(cfg.path("fits.json"), report)

    print()
    print(tabulate(
        [(name, fit.a, fit.b, fit.residual) for name, fit in fits.items()],
        headers=["Fit", "a", "b", "Residual"],
    ))
    if budget is not None:
        print(f"\nLargest N within {budget:g} GB: MDT {report['max_pixels_mdt']}, SDT {report['max_pixels_sdt']}")


if __name__ == "__main__":
    main()
