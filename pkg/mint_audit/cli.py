"""
mint-audit command line
Subcommands for each pipeline stage (train-active, train-passive, run-mia),
report aggregation, and the end-to-end reproduce run.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import typer
import yaml
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from .artifact_manager import ArtifactManager, read_results
from .config.settings import ScalePresets, settings
from .services.evaluation_service import build_report
from .services.exceptions import ConfigError, MintAuditError
from .services.experiment_service import (
    REPRODUCE_DATASETS,
    ErrorKind,
    ExperimentRunner,
    StageResult,
    configure_torch,
    reproduce_config,
    run_reproduce_cell,
)
from .services.validation_service import ExperimentConfig, Scale, ValidationUtils

logger = logging.getLogger(__name__)
console = Console()

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

app = typer.Typer(name="mint-audit", help="Active and Passive MINT auditing pipeline", add_completion=False)


@app.callback()
def main(
    log_level: Optional[str] = typer.Option(None, "--log-level", help="DEBUG, INFO, WARNING, ERROR"),
):
    """Configure logging and torch before any command runs"""
    try:
        settings.setup_logging(log_level)
    except (AttributeError, ValueError):
        console.print(f"[red]Unknown log level: {log_level}[/red]")
        raise typer.Exit(code=EXIT_CONFIG)
    configure_torch()


def load_config(path: Path) -> ExperimentConfig:
    """Parse and validate a config file, exiting with status 2 on any problem"""
    try:
        return ExperimentConfig.from_yaml(path)
    except ValidationError as e:
        for message in ValidationUtils.format_errors(e):
            console.print(f"[red]config error[/red] {message}")
    except (OSError, yaml.YAMLError) as e:
        console.print(f"[red]config error[/red] {path}: {e}")
    raise typer.Exit(code=EXIT_CONFIG)


def exit_status(results: List[StageResult]) -> int:
    failed = next((r for r in results if not r.success), None)
    if failed is None:
        return EXIT_OK
    console.print(f"[red]stage {failed.stage} failed:[/red] {failed.error}")
    return EXIT_CONFIG if failed.error_kind == ErrorKind.CONFIG else EXIT_RUNTIME


def print_summary(runner: ExperimentRunner, results: List[StageResult]):
    table = Table(title=f"{runner.command} → {runner.artifacts.root}")
    table.add_column("stage")
    table.add_column("status")
    table.add_column("details")
    for result in results:
        status = "[green]ok[/green]" if result.success else "[red]failed[/red]"
        details = result.error or ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in result.data.items())
        table.add_row(result.stage, status, details)
    console.print(table)


def run_command(command: str, config_path: Path, out: Optional[Path], seed: Optional[int], build_stages) -> int:
    config = load_config(config_path)
    try:
        runner = ExperimentRunner(config, command, out, seed)
    except (ConfigError, ValidationError) as e:
        console.print(f"[red]config error[/red] {e}")
        return EXIT_CONFIG
    results = runner.run(build_stages(runner))
    print_summary(runner, results)
    return exit_status(results)


ConfigOption = typer.Option(..., "--config", "-c", help="Experiment YAML config")
OutOption = typer.Option(None, "--out", "-o", help="Output directory (overrides output_dir)")
SeedOption = typer.Option(None, "--seed", help="Master seed (overrides seed)")


@app.command("train-active")
def train_active_command(config: Path = ConfigOption, out: Optional[Path] = OutOption, seed: Optional[int] = SeedOption):
    """Joint training of the audited model and its MINT head"""
    code = run_command(
        "train-active", config, out, seed,
        lambda r: [("prepare_data", r.prepare_data)] + r.active_pipeline([r.config.setup]),
    )
    raise typer.Exit(code=code)


@app.command("train-passive")
def train_passive_command(config: Path = ConfigOption, out: Optional[Path] = OutOption, seed: Optional[int] = SeedOption):
    """Audited-only training (or checkpoint load) followed by Passive MINT"""
    code = run_command(
        "train-passive", config, out, seed,
        lambda r: [("prepare_data", r.prepare_data), ("train_audited_only", r.audited), ("train_passive", r.passive)],
    )
    raise typer.Exit(code=code)


@app.command("run-mia")
def run_mia_command(config: Path = ConfigOption, out: Optional[Path] = OutOption, seed: Optional[int] = SeedOption):
    """Threshold membership-inference attacks against the audited-only model"""
    code = run_command(
        "run-mia", config, out, seed,
        lambda r: [
            ("prepare_data", r.prepare_data),
            ("train_audited_only", r.audited),
            ("run_mia", lambda: r.attacks(r.attack_methods())),
        ],
    )
    raise typer.Exit(code=code)


def write_report(results_dir: Path, out: Path):
    records = read_results(results_dir)
    report = build_report(records)
    text_path, csv_path = ArtifactManager(out).write_report(report)
    console.print(report.text, markup=False, highlight=False)
    console.print(f"Report written to {text_path} and {csv_path}")


@app.command("report")
def report_command(
    results_dir: Path = typer.Argument(..., help="Directory searched recursively for results*.csv"),
    out: Optional[Path] = OutOption,
):
    """Aggregate results files into the comparison tables"""
    try:
        write_report(results_dir, out or results_dir)
    except MintAuditError as e:
        console.print(f"[red]report failed:[/red] {e}")
        raise typer.Exit(code=EXIT_RUNTIME)
    raise typer.Exit(code=EXIT_OK)


@app.command("reproduce")
def reproduce_command(
    scale: Scale = typer.Option(Scale.SMOKE, "--scale", help="smoke or desk"),
    out: Path = typer.Option(Path("runs/reproduce"), "--out", "-o"),
    seed: int = typer.Option(0, "--seed", help="Master seed; cell seeds are derived from it"),
    jobs: int = typer.Option(1, "--jobs", min=1, help="Worker processes for independent seeds"),
    regime: str = typer.Option("e1", "--regime", help="MINT head / loss regime (e1 or e2)"),
    download: bool = typer.Option(False, "--download", help="Fetch missing datasets"),
):
    """Active (three setups), Passive and MIA baselines over MNIST and CIFAR-10, three seeds each"""
    try:
        configs = {name: reproduce_config(name, scale.value, regime, download=download) for name in REPRODUCE_DATASETS}
    except (ValidationError, ValueError) as e:
        console.print(f"[red]config error[/red] {e}")
        raise typer.Exit(code=EXIT_CONFIG)

    cell_seeds = [seed + k for k in range(ScalePresets.SEEDS_PER_CELL)]
    cells = [
        (configs[name].model_dump(mode="json"), str(out / name / f"seed_{cell_seed}"), cell_seed)
        for name in REPRODUCE_DATASETS
        for cell_seed in cell_seeds
    ]
    logger.info(f"Reproduce at {scale.value} scale: {len(cells)} cells, seeds {cell_seeds}, jobs={jobs}")

    if jobs > 1:
        log_level = logging.getLevelName(logging.getLogger().level)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_reproduce_cell, cfg, cell_out, cell_seed, log_level) for cfg, cell_out, cell_seed in cells]
            outcomes = [future.result() for future in futures]
    else:
        outcomes = [run_reproduce_cell(cfg, cell_out, cell_seed) for cfg, cell_out, cell_seed in cells]

    for (_, cell_out, _), results in zip(cells, outcomes):
        code = exit_status(results)
        if code != EXIT_OK:
            console.print(f"[red]reproduce halted in {cell_out}[/red]")
            raise typer.Exit(code=code)

    try:
        write_report(out, out)
    except MintAuditError as e:
        console.print(f"[red]report failed:[/red] {e}")
        raise typer.Exit(code=EXIT_RUNTIME)
    raise typer.Exit(code=EXIT_OK)


if __name__ == "__main__":
    app()
