"""
Command-line interface for the ehvm toolchain.

Every command that executes code runs parse -> validate -> pass first.
Exit codes: 0 no fault, 1 fault found, 2 exploration bound hit, 3 usage,
parse or validation error. Traces, dumps and printed modules go to standard
output through click.echo; everything meant for a human goes through rich.
"""

import logging
import os
import sys
from typing import List, Optional

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from .config import Config, load_config
from .corpus import check_corpus
from .ehpass import run_pass
from .errors import EhvmError, FileAccessError
from .explorer import ChoiceTrace, explore, replay, run_once
from .ir import ModuleIR, print_module
from .lsda import decode, dump
from .machine import ChoiceSource
from .parser import parse_file
from .validator import validate

console = Console()
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAULT = 1
EXIT_BOUND = 2
EXIT_USAGE = 3


class InvalidModule(EhvmError):
    """The module parsed but failed validation."""

    def __init__(self, path: str, diagnostics: List):
        self.diagnostics = diagnostics
        super().__init__(f"{path}: {len(diagnostics)} validation problem(s)")


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def load_module(path: str) -> ModuleIR:
    module = parse_file(path)
    diagnostics = validate(module)
    if diagnostics:
        for diagnostic in diagnostics:
            console.print(f"[red]✗[/red] {diagnostic}")
        raise InvalidModule(path, diagnostics)
    return module


def _read_text(path: str) -> str:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return f.read()
    except (OSError, UnicodeDecodeError) as e:
        raise FileAccessError(f"cannot read {path}: {e}")


def _write_text(path: str, text: str) -> None:
    try:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
    except OSError as e:
        raise FileAccessError(f"cannot write {path}: {e.strerror or e}")


def _fail(ctx: click.Context, error: Exception) -> None:
    console.print(f"[red]✗[/red] {error}")
    if ctx.obj and ctx.obj.get('verbose'):
        console.print_exception()
    ctx.exit(EXIT_USAGE)


@click.group()
@click.option('--config', '-c', 'config_path', default='ehvm.yaml', help='Configuration file path')
@click.option('--verbose', '-v', is_flag=True, help='Enable debug logging')
@click.pass_context
def cli(ctx, config_path, verbose):
    """ehvm: a small VM and toolchain for C++-style exception handling."""
    setup_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj['verbose'] = verbose
    try:
        ctx.obj['config'] = load_config(config_path)
    except EhvmError as e:
        _fail(ctx, e)


def _config(ctx: click.Context) -> Config:
    return ctx.obj['config']


def _machine_options(cfg: Config, max_steps: Optional[int], check_leaks: bool, fault_injection: bool) -> dict:
    """Machine settings from the configuration, with command-line flags on top."""
    options = cfg.machine_options()
    if max_steps is not None:
        options['max_steps'] = max_steps
    options['check_leaks'] = check_leaks or options['check_leaks']
    options['fault_injection'] = fault_injection or options['fault_injection']
    return options


@cli.command()
@click.argument('module_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--trace', '-t', is_flag=True, help='Print the event log')
@click.option('--fault-injection', is_flag=True, help='Let allocations fail')
@click.option('--check-leaks', is_flag=True, help='Fault on live objects at exit')
@click.option('--max-steps', type=click.IntRange(min=1), default=None, help='Step limit')
@click.pass_context
def run(ctx, module_path, trace, fault_injection, check_leaks, max_steps):
    """Run a module once, taking the first branch of every choice."""
    cfg = _config(ctx)
    trace = trace or bool(cfg.trace)
    try:
        module = load_module(module_path)
        options = _machine_options(cfg, max_steps, check_leaks, fault_injection)
        machine = run_once(module, ChoiceSource(), trace_sink=click.echo if trace else None, **options)
    except EhvmError as e:
        _fail(ctx, e)
    outcome = machine.outcome
    if not trace:
        for event in machine.events:
            if event.startswith('OUT '):
                click.echo(event)
    if outcome.kind == 'fault':
        console.print(f"[red]✗[/red] {outcome.fault}")
        ctx.exit(EXIT_FAULT)
    console.print(f"[green]✓[/green] {outcome.label}")
    ctx.exit(EXIT_OK)


@cli.command(name='explore')
@click.argument('module_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--fault-injection', is_flag=True, help='Let allocations fail')
@click.option('--max-exec', type=click.IntRange(min=1), default=None, help='Maximum number of executions')
@click.option('--trace-out', type=click.Path(dir_okay=False), default=None,
              help='Write the counterexample choice trace to this file')
@click.option('--reverse', is_flag=True, help='Try the last branch of each choice first')
@click.option('--check-leaks', is_flag=True, help='Fault on live objects at exit')
@click.pass_context
def explore_command(ctx, module_path, fault_injection, max_exec, trace_out, reverse, check_leaks):
    """Explore every execution of a module."""
    cfg = _config(ctx)
    try:
        module = load_module(module_path)
        with console.status("Exploring..."):
            report = explore(
                module,
                max_executions=cfg.max_executions if max_exec is None else max_exec,
                reverse=reverse or cfg.reverse,
                **_machine_options(cfg, None, check_leaks, fault_injection),
            )
    except EhvmError as e:
        _fail(ctx, e)

    table = Table(title=f"Outcomes of {os.path.basename(module_path)}")
    table.add_column("Outcome", style="cyan")
    table.add_column("Executions", justify="right")
    for label, count in sorted(report.outcomes.items()):
        style = "red" if label.startswith('fault') else "green"
        table.add_row(f"[{style}]{label}[/{style}]", str(count))
    console.print(table)
    console.print(f"{report.executions} execution(s)")

    if report.bound_exhausted:
        console.print("[yellow]![/yellow] exploration bound reached; the result is incomplete")
    if report.counterexample is not None:
        example = report.counterexample
        console.print(Panel(str(example.fault), title="Counterexample", border_style="red"))
        if trace_out:
            try:
                _write_text(trace_out, example.trace.to_text())
            except EhvmError as e:
                _fail(ctx, e)
            console.print(f"[green]✓[/green] choice trace written to {trace_out}")
    ctx.exit(report.exit_code)


@cli.command(name='pass')
@click.argument('module_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--output', '-o', type=click.Path(dir_okay=False), default=None, help='Output file')
@click.pass_context
def pass_command(ctx, module_path, output):
    """Run the exception-handling pass and print the lowered module."""
    try:
        text = print_module(run_pass(load_module(module_path)))
    except EhvmError as e:
        _fail(ctx, e)
    if output:
        try:
            _write_text(output, text)
        except EhvmError as e:
            _fail(ctx, e)
        console.print(f"[green]✓[/green] lowered module written to {output}")
    else:
        click.echo(text, nl=False)
    ctx.exit(EXIT_OK)


@cli.command(name='lsda-dump')
@click.argument('module_path', type=click.Path(exists=True, dir_okay=False))
@click.argument('function')
@click.pass_context
def lsda_dump(ctx, module_path, function):
    """Decode and print the LSDA of one function."""
    try:
        module = run_pass(load_module(module_path))
        target = module.function(function.lstrip('@'))
        if target is None:
            raise EhvmError(f"no function @{function.lstrip('@')}")
        if target.lsda_ref is None:
            raise EhvmError(f"@{target.name} has no landing pads and therefore no LSDA")
        table = decode(bytes(module.global_value(target.lsda_ref)))
    except EhvmError as e:
        _fail(ctx, e)
    click.echo(dump(table, target.name, module.typeinfos), nl=False)
    ctx.exit(EXIT_OK)


@cli.command(name='validate')
@click.argument('module_path', type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def validate_command(ctx, module_path):
    """Check a module's structural invariants."""
    try:
        load_module(module_path)
    except EhvmError as e:
        _fail(ctx, e)
    console.print(f"[green]✓[/green] {module_path} is valid")
    ctx.exit(EXIT_OK)


@cli.command(name='replay')
@click.argument('module_path', type=click.Path(exists=True, dir_okay=False))
@click.argument('trace_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--fault-injection', is_flag=True, help='Let allocations fail')
@click.pass_context
def replay_command(ctx, module_path, trace_path, fault_injection):
    """Re-run the execution described by a choice trace and print its events."""
    cfg = _config(ctx)
    try:
        module = load_module(module_path)
        trace = ChoiceTrace.from_text(_read_text(trace_path))
        events = replay(module, trace, **_machine_options(cfg, None, False, fault_injection))
    except EhvmError as e:
        _fail(ctx, e)
    for event in events:
        click.echo(event)
    ctx.exit(EXIT_FAULT if any(event.startswith('FAULT ') for event in events) else EXIT_OK)


@cli.command(name='print')
@click.argument('module_path', type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def print_command(ctx, module_path):
    """Re-print a module in canonical form."""
    try:
        module = parse_file(module_path)
    except EhvmError as e:
        _fail(ctx, e)
    click.echo(print_module(module), nl=False)
    ctx.exit(EXIT_OK)


@cli.command(name='corpus')
@click.argument('directory', type=click.Path(exists=True, file_okay=False), default='corpus')
@click.pass_context
def corpus_command(ctx, directory):
    """Check every corpus program against its expectations and the reference interpreter."""
    cfg = _config(ctx)
    try:
        with console.status("Checking corpus..."):
            results = check_corpus(directory, max_executions=cfg.max_executions)
    except EhvmError as e:
        _fail(ctx, e)

    table = Table(title=f"Corpus {directory}")
    table.add_column("Program", style="cyan")
    table.add_column("Executions", justify="right")
    table.add_column("Outcomes")
    table.add_column("Status")
    for result in results:
        outcomes = ', '.join(f"{label} x{count}" for label, count in sorted(result.outcomes.items()))
        status = "[green]ok[/green]" if result.ok else "[red]" + '; '.join(result.problems) + "[/red]"
        table.add_row(result.name, str(result.executions), outcomes, status)
    console.print(table)
    failed = [result for result in results if not result.ok]
    if failed:
        console.print(f"[red]✗[/red] {len(failed)} of {len(results)} program(s) disagree")
        ctx.exit(EXIT_FAULT)
    console.print(f"[green]✓[/green] all {len(results)} program(s) agree")
    ctx.exit(EXIT_OK)


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; maps click usage errors to exit code 3."""
    try:
        code = cli.main(args=argv, prog_name='ehvm', standalone_mode=False)
    except click.exceptions.Abort:
        console.print("[red]✗[/red] aborted")
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    return code if isinstance(code, int) else EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
