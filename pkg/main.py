"""
KripkeGuard Command-Line Interface
Run diagnostic episodes on simulated accelerator scenarios, validate axiom
files and belief-model dumps, and export scenario definitions.

Exit codes: 0 success, 1 configuration error, 2 no committed diagnosis
(or axiom violations for check-model).
"""

import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import click
from dotenv import load_dotenv

from accel_sim import (
    BUILTIN_SCENARIOS, ScenarioSpec, SimulationError, builtin_scenario, dump_scenario, load_scenario, with_seed,
    write_timeseries_csv,
)
from diagnostic_agents import AcceleratorSectorDiagnostics, DiagnosticsError, SystemConfig, load_topology
from formula_lang import AxiomFileError, load_axioms, read_axiom_file, render
from hypo_gen import HypothesisError, build_generators
from modal_kernel import KripkeError, KripkeModel, check_axioms, model_from_dict, model_to_dict
from settings import Settings, get_settings

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_UNRESOLVED = 2

FORMATS = ("csv", "trace-json", "model-json", "dot")
DEFAULT_FORMATS = ("csv", "trace-json", "model-json")

CONFIG_ERRORS = (SimulationError, DiagnosticsError, HypothesisError, KripkeError, AxiomFileError, OSError, ValueError)


def _fail(error: Exception) -> int:
    message = " ".join(str(error).split())
    click.echo(f"error: {type(error).__name__}: {message}", err=True)
    logger.error(f"{type(error).__name__}: {message}")
    return EXIT_CONFIG


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def model_to_dot(model: KripkeModel) -> str:
    """Graphviz view of a belief model; the current world is double-circled"""
    lines = ["digraph kripke {"]
    for world in model.worlds:
        shape = "doublecircle" if world.id == model.current else "circle"
        label = f"{world.id}\\n{{{', '.join(sorted(world.valuation))}}}"
        lines.append(f'  "{world.id}" [shape={shape}, label="{label}"];')
    for a, b in sorted(model.accessibility):
        lines.append(f'  "{a}" -> "{b}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def resolve_scenario(value: str) -> ScenarioSpec:
    if value in BUILTIN_SCENARIOS:
        return builtin_scenario(value)
    if value.endswith(".json") or Path(value).is_file():
        return load_scenario(value)
    return builtin_scenario(value)


@click.group()
@click.pass_context
def cli(ctx: click.Context):
    """KripkeGuard: modal-logic guarded fault diagnosis for an accelerator sector."""
    ctx.obj = get_settings()


@cli.command("run")
@click.option("--scenario", "scenario", required=True, help="Built-in scenario id or path to a scenario JSON file.")
@click.option("--seed", type=int, default=None, help="Override the scenario's noise seed.")
@click.option("--generator", type=click.Choice(["rule", "remote"]), default="rule", show_default=True)
@click.option("--axioms", "axioms_path", type=click.Path(dir_okay=False), default=None)
@click.option("--topology", "topology_path", type=click.Path(dir_okay=False), default=None)
@click.option("--output-dir", type=click.Path(file_okay=False), default="output", show_default=True)
@click.option("--format", "formats", type=click.Choice(FORMATS), multiple=True,
              help="Output files to write (repeatable). Defaults to csv, trace-json and model-json.")
@click.pass_obj
def cmd_run(settings: Settings, scenario: str, seed: Optional[int], generator: str, axioms_path: Optional[str],
            topology_path: Optional[str], output_dir: str, formats: Sequence[str]) -> int:
    """Run one diagnostic episode and write its artifacts."""
    formats = set(formats or DEFAULT_FORMATS)
    try:
        spec = resolve_scenario(scenario)
        if seed is not None:
            spec = with_seed(spec, seed)
        axioms = load_axioms(axioms_path or settings.axioms_path)
        topology = load_topology(topology_path or settings.topology_path)
        classifier, theorizer = build_generators(generator, settings)
        system = AcceleratorSectorDiagnostics(SystemConfig(axioms, topology, classifier, theorizer))
        system.check_scenario(spec)
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
    except CONFIG_ERRORS as e:
        return _fail(e)

    try:
        diagnosis = system.run_episode(spec)
    except DiagnosticsError as e:
        return _fail(e)

    try:
        if "csv" in formats:
            write_timeseries_csv(list(diagnosis.records), out / "timeseries.csv")
        if "trace-json" in formats:
            (out / "diagnosis.json").write_text(diagnosis.to_json(), encoding="utf-8")
        if "model-json" in formats:
            _write_json(out / "final_model.json", model_to_dict(diagnosis.final_model))
        if "dot" in formats:
            (out / "model.dot").write_text(model_to_dot(diagnosis.final_model), encoding="utf-8")
    except OSError as e:
        return _fail(e)

    if not diagnosis.committed:
        click.echo("ROOT CAUSE: none")
        return EXIT_UNRESOLVED
    click.echo(f"ROOT CAUSE: {diagnosis.root_cause}")
    return EXIT_OK


@cli.command("check-axioms")
@click.argument("path", type=click.Path(dir_okay=False))
def cmd_check_axioms(path: str) -> int:
    """Parse an axiom file and print each label with its canonical form."""
    try:
        axiom_file = read_axiom_file(path)
    except (AxiomFileError, OSError) as e:
        return _fail(e)
    for entry in axiom_file.entries:
        click.echo(f"{entry.label}: {render(entry.parsed)}")
    return EXIT_OK


@cli.command("check-model")
@click.argument("model_path", type=click.Path(dir_okay=False))
@click.option("--axioms", "axioms_path", type=click.Path(dir_okay=False), default=None)
@click.pass_obj
def cmd_check_model(settings: Settings, model_path: str, axioms_path: Optional[str]) -> int:
    """Validate a dumped belief model against an axiom file."""
    try:
        model = model_from_dict(json.loads(Path(model_path).read_text(encoding="utf-8")))
        axioms = load_axioms(axioms_path or settings.axioms_path)
        result = check_axioms(model, axioms)
    except CONFIG_ERRORS as e:
        return _fail(e)
    if result.ok:
        click.echo(f"OK: {len(axioms)} axiom(s) hold at {len(model.worlds)} world(s)")
        return EXIT_OK
    for label, world in result.violations:
        click.echo(f"VIOLATION: {label} at {world}")
    return EXIT_UNRESOLVED


@cli.command("export-scenario")
@click.argument("scenario_id")
@click.option("--output", type=click.Path(dir_okay=False), default=None, help="File to write instead of stdout.")
def cmd_export_scenario(scenario_id: str, output: Optional[str]) -> int:
    """Write a built-in scenario as JSON."""
    try:
        text = dump_scenario(builtin_scenario(scenario_id))
        if output:
            Path(output).write_text(text, encoding="utf-8")
        else:
            click.echo(text, nl=False)
    except (SimulationError, OSError) as e:
        return _fail(e)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(
        level=settings.log_level.upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
    )
    try:
        code = cli.main(args=argv, prog_name="kripkeguard", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("error: Abort: interrupted", err=True)
        return EXIT_CONFIG
    except click.ClickException as e:
        click.echo(f"error: {type(e).__name__}: {' '.join(e.format_message().split())}", err=True)
        return EXIT_CONFIG
    return EXIT_OK if code is None else int(code)


if __name__ == "__main__":
    sys.exit(main())
