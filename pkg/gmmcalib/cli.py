import logging
import math
from pathlib import Path

import typer
from rich.console import Console
from rich.logging import RichHandler

from gmmcalib import __version__
from gmmcalib.config import (
    ALGORITHM_BY_VARIANT,
    ALGORITHMS,
    DEFAULT_PLAUSIBILITY_THRESHOLD,
    DEFAULT_PRUNING_FACTOR,
    EvaluationConfig,
    PipelineConfig,
    load_pipeline_config,
    load_run_config,
    read_json,
)
from gmmcalib.errors import CalibrationError, ConfigError, EmptyModel
from gmmcalib.experiment import calibrate_run, evaluate_run, simulate_run
from gmmcalib.gmm import GmmModel
from gmmcalib.perf import timer
from gmmcalib.pipeline import plausibility_check
from gmmcalib.pointcloud import read_cloud
from gmmcalib.report import display_summary
from gmmcalib.scene import PRESET_FRAMES, scene_from

app = typer.Typer(
    help="Multi-LiDAR extrinsic calibration by joint GMM registration, with ICP baselines",
    no_args_is_help=True,
    add_completion=False,
    name="gmm-calib",
    pretty_exceptions_show_locals=False,
)

console = Console()
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_REGISTRATION = 2
EXIT_PLAUSIBILITY = 3

ALGORITHM_CHOICES = {"gmm": ["gmm"], **{v: [a] for v, a in ALGORITHM_BY_VARIANT.items()}, "all": list(ALGORITHMS)}


def setup_logging(verbose: bool = False):
    """Set up logging with rich formatting."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(rich_tracebacks=True)],
    )


def fail(message: str, code: int = EXIT_INPUT) -> typer.Exit:
    console.print(f"[bold red]Error:[/bold red] {message}")
    return typer.Exit(code=code)


def _algorithms(choice: str) -> list[str]:
    try:
        return ALGORITHM_CHOICES[choice]
    except KeyError:
        raise fail(f"Unknown algorithm {choice!r}; choose from {', '.join(ALGORITHM_CHOICES)}") from None


def _simulate(
    scene_path: Path | None,
    preset: str,
    errors: int,
    frames: int | None,
    seed: int,
    out: Path,
    angle_bound_deg: float = 3.0,
    translation_bound: float = 0.1,
) -> None:
    scene = scene_from(scene_path, preset)
    frames = frames or PRESET_FRAMES.get(preset, PRESET_FRAMES["desk"])
    console.print(
        f"Simulating [bold cyan]{errors}[/] calibration errors, [bold cyan]{frames}[/] frames per sensor[yellow]...[/]"
    )
    simulate_run(scene, out, errors, frames, seed, math.radians(angle_bound_deg), translation_bound)
    console.print(f"Observation sets saved to [bold cyan]{out}[/]")


def _calibrate(input_dir: Path, algorithms: list[str], config: PipelineConfig, out: Path) -> int:
    console.print(f"Calibrating [bold cyan]{input_dir}[/] with {', '.join(algorithms)}[yellow]...[/]")
    with timer("Calibration"):
        outcome = calibrate_run(input_dir, out, config, algorithms)
    console.print(f"Wrote [bold cyan]{outcome.n_reports}[/] reports to [bold cyan]{out}[/]")
    for sample, reports in sorted(outcome.reports.items()):
        for algorithm, report in reports.items():
            if report.plausibility_error:
                console.print(f"[yellow]sample {sample:03d} {algorithm}:[/yellow] {report.plausibility_error}")
    for failure in outcome.failures:
        console.print(f"[red]sample {failure.sample:03d} {failure.algorithm}:[/red] {failure.error}: {failure.message}")
    if any(f.registration for f in outcome.failures):
        return EXIT_REGISTRATION
    if outcome.failures:
        return EXIT_INPUT
    return EXIT_OK


def _evaluate(reports: Path, ground_truth: Path, out: Path, config: EvaluationConfig) -> None:
    with timer("Evaluation"):
        tables = evaluate_run(reports, ground_truth, out, config)
    display_summary(tables)
    console.print(f"Metrics saved to [bold cyan]{out}[/]")


@app.command()
def simulate(
    scene: Path | None = typer.Argument(None, help="Scene JSON file (default: built-in preset)"),
    preset: str = typer.Option("desk", help="Built-in scene when no file is given: desk or full"),
    errors: int = typer.Option(25, "--errors", "-n", help="Number of calibration errors to sample"),
    frames: int | None = typer.Option(None, "--frames", "-f", help="Frames per sensor (default: preset size)"),
    seed: int = typer.Option(..., "--seed", "-s", help="Seed for error sampling and sensor noise"),
    out: Path = typer.Option(Path("simulation"), "--out", "-o", help="Output directory"),
    angle_bound: float = typer.Option(3.0, help="Bound of the roll/pitch/yaw errors in degrees"),
    translation_bound: float = typer.Option(0.1, help="Bound of the translation errors in meters"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log debug output"),
):
    """Simulate paired two-LiDAR observation sets with injected calibration errors."""
    setup_logging(verbose)
    try:
        _simulate(scene, preset, errors, frames, seed, out, angle_bound, translation_bound)
    except (CalibrationError, OSError, ValueError) as e:
        raise fail(str(e)) from e
    return EXIT_OK


@app.command()
def calibrate(
    input_dir: Path = typer.Option(..., "--input", "-i", help="Simulation run or sample directory"),
    algorithm: str = typer.Option("all", "--algorithm", "-a", help="gmm, point, plane, gicp or all"),
    config: Path | None = typer.Option(None, "--config", "-c", help="Pipeline config JSON"),
    seed: int | None = typer.Option(None, "--seed", "-s", help="Seed when the config does not set one"),
    out: Path = typer.Option(Path("calibration"), "--out", "-o", help="Output directory for reports"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log debug output"),
):
    """Calibrate every observation set with the selected algorithms."""
    setup_logging(verbose)
    algorithms = _algorithms(algorithm)
    try:
        code = _calibrate(input_dir, algorithms, load_pipeline_config(config, seed), out)
    except (CalibrationError, OSError) as e:
        raise fail(str(e)) from e
    if code != EXIT_OK:
        raise typer.Exit(code=code)
    return EXIT_OK


@app.command()
def evaluate(
    reports: Path = typer.Option(..., "--reports", "-r", help="Directory written by 'calibrate'"),
    ground_truth: Path = typer.Option(..., "--ground-truth", "-g", help="Directory written by 'simulate'"),
    out: Path = typer.Option(Path("evaluation"), "--out", "-o", help="Output directory for metrics"),
    threshold: float = typer.Option(0.1, help="Miscalibration threshold in meters"),
    bin_width: float = typer.Option(0.5, help="Range profile bin width in meters"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log debug output"),
):
    """Score calibration reports against the simulated ground truth."""
    setup_logging(verbose)
    try:
        _evaluate(reports, ground_truth, out, EvaluationConfig(threshold, bin_width))
    except (CalibrationError, OSError) as e:
        raise fail(str(e)) from e
    return EXIT_OK


def load_model(path: Path) -> GmmModel:
    """Read a mixture from a model JSON or from the reconstruction of a GMM report."""
    data = read_json(path)
    if isinstance(data, dict) and "reconstruction" in data:
        data = data["reconstruction"]
    try:
        return GmmModel.from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        msg = f"{path}: not a mixture model ({e})"
        raise ConfigError(msg) from e


@app.command()
def check(
    model: Path = typer.Option(..., "--model", "-m", help="Model JSON or GMM report JSON"),
    prior: Path = typer.Option(..., "--prior", "-p", help="Point cloud sampling the target geometry"),
    threshold: float = typer.Option(DEFAULT_PLAUSIBILITY_THRESHOLD, help="Largest acceptable score in meters"),
    pruning: float = typer.Option(DEFAULT_PRUNING_FACTOR, help="Keep components with weight >= pruning / M"),
):
    """Score a reconstructed target against its geometric prior."""
    setup_logging()
    try:
        score = plausibility_check(load_model(model), read_cloud(prior), pruning)
    except EmptyModel as e:
        raise fail(str(e), EXIT_PLAUSIBILITY) from e
    except (CalibrationError, OSError) as e:
        raise fail(str(e)) from e
    if score > threshold:
        console.print(f"Plausibility score [bold red]{score:.6f}[/] m exceeds {threshold:g} m")
        raise typer.Exit(code=EXIT_PLAUSIBILITY)
    console.print(f"Plausibility score [bold green]{score:.6f}[/] m (threshold {threshold:g} m)")
    return EXIT_OK


@app.command()
def compare(
    scene: Path | None = typer.Argument(None, help="Scene JSON file (default: built-in preset)"),
    preset: str = typer.Option("desk", help="Built-in scene when no file is given: desk or full"),
    errors: int = typer.Option(25, "--errors", "-n", help="Number of calibration errors to sample"),
    frames: int | None = typer.Option(None, "--frames", "-f", help="Frames per sensor"),
    seed: int | None = typer.Option(None, "--seed", "-s", help="Seed (required without --config)"),
    config: Path | None = typer.Option(None, "--config", "-c", help="Run config JSON"),
    out: Path = typer.Option(Path("gmmcalib-run"), "--out", "-o", help="Output directory"),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Log debug output"),
):
    """Simulate, calibrate with all algorithms and evaluate in one go."""
    setup_logging(verbose)
    try:
        if config is not None:
            run = load_run_config(config)
            scene = Path(run.scene) if run.scene else scene
            preset, errors, frames, seed = run.preset, run.errors, run.frames, run.seed
            out = Path(run.output_dir) if out == Path("gmmcalib-run") else out
            pipeline, evaluation = run.pipeline, run.evaluation
        elif seed is None:
            raise fail("--seed is required without --config")
        else:
            pipeline, evaluation = load_pipeline_config(None, seed), EvaluationConfig()
        _simulate(scene, preset, errors, frames, seed, out / "simulation")
        code = _calibrate(out / "simulation", list(pipeline.algorithms), pipeline, out / "calibration")
        _evaluate(out / "calibration", out / "simulation", out / "evaluation", evaluation)
    except (CalibrationError, OSError) as e:
        raise fail(str(e)) from e
    if code != EXIT_OK:
        raise typer.Exit(code=code)
    return EXIT_OK


@app.command()
def version():
    """Display version information."""
    console.print(f"gmm-calib version: {__version__}")
    return 0


def main():
    """Main entry point for the CLI."""
    app()


if __name__ == "__main__":
    main()
