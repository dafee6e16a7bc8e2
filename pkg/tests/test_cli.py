import pytest
from click.testing import CliRunner

from src.cli import EXIT_BOUND, EXIT_FAULT, EXIT_OK, EXIT_USAGE, cli, main
from src.ir import print_module
from src.parser import parse_module

from .conftest import CORPUS_DIR, corpus_path, load_corpus, read_golden


@pytest.fixture
def runner():
    return CliRunner()


def test_run_prints_outputs(runner):
    result = runner.invoke(cli, ['run', corpus_path('cleanup_chain.ehir')])
    assert result.exit_code == EXIT_OK
    assert 'OUT 1\nOUT 2\nOUT 3\n' in result.output
    assert 'halted(0)' in result.output


def test_run_with_trace(runner):
    result = runner.invoke(cli, ['run', '--trace', corpus_path('catch_plain.ehir')])
    assert result.exit_code == EXIT_OK
    assert 'STEP main 0 invoke' in result.output
    assert 'PERSONALITY main CLEANUP+HANDLER' in result.output
    assert 'HALT 0' in result.output


def test_run_reports_faults(runner):
    result = runner.invoke(cli, ['run', corpus_path('uncaught_plain.ehir')])
    assert result.exit_code == EXIT_FAULT
    assert 'terminate' in result.output


def test_run_leak_check(runner, tmp_path):
    program = tmp_path / 'leak.ehir'
    program.write_text("fn @main() {\nentry:\n  %p = call @malloc(1)\n  ret 0\n}\n")
    assert runner.invoke(cli, ['run', str(program)]).exit_code == EXIT_OK
    assert runner.invoke(cli, ['run', '--check-leaks', str(program)]).exit_code == EXIT_FAULT


def test_explore_writes_counterexample(runner, tmp_path):
    trace = tmp_path / 'ce.trace'
    result = runner.invoke(cli, ['explore', corpus_path('choose_throw.ehir'), '--trace-out', str(trace)])
    assert result.exit_code == EXIT_FAULT
    assert '4 execution(s)' in result.output
    assert trace.read_text() == "CHOICE 0 3 2\nCHOICE 1 2 0\n"

    replayed = runner.invoke(cli, ['replay', corpus_path('choose_throw.ehir'), str(trace)])
    assert replayed.exit_code == EXIT_FAULT
    assert 'FAULT terminate' in replayed.output


def test_explore_bound(runner):
    result = runner.invoke(cli, ['explore', corpus_path('choose_throw.ehir'), '--max-exec', '2'])
    assert result.exit_code == EXIT_BOUND


def test_explore_with_fault_injection(runner):
    result = runner.invoke(cli, ['explore', '--fault-injection', corpus_path('fault_injection_three.ehir')])
    assert result.exit_code == EXIT_OK
    assert '8 execution(s)' in result.output


def test_replay_clean_execution(runner, tmp_path):
    trace = tmp_path / 'ok.trace'
    trace.write_text("CHOICE 0 3 1\n")
    result = runner.invoke(cli, ['replay', corpus_path('choose_throw.ehir'), str(trace)])
    assert result.exit_code == EXIT_OK
    assert 'OUT 1' in result.output


def test_replay_mismatch_is_a_usage_error(runner, tmp_path):
    trace = tmp_path / 'bad.trace'
    trace.write_text("CHOICE 0 2 1\n")
    result = runner.invoke(cli, ['replay', corpus_path('choose_throw.ehir'), str(trace)])
    assert result.exit_code == EXIT_USAGE


def test_lsda_dump_matches_golden(runner):
    result = runner.invoke(cli, ['lsda-dump', corpus_path('lsda_mixed.ehir'), '@main'])
    assert result.exit_code == EXIT_OK
    assert result.output == read_golden('lsda_mixed_main.txt')


def test_lsda_dump_without_landing_pads(runner):
    result = runner.invoke(cli, ['lsda-dump', corpus_path('lsda_mixed.ehir'), 'throw_b'])
    assert result.exit_code == EXIT_USAGE


def test_pass_prints_lowered_module(runner):
    result = runner.invoke(cli, ['pass', corpus_path('uncaught_dtor.ehir')])
    assert result.exit_code == EXIT_OK
    assert 'lsda @__lsda.main' in result.output
    assert 'call @_Unwind_Resume(%resume.0.exc)' in result.output
    lowered = parse_module(result.output)
    assert lowered.function('main').lsda_ref == '__lsda.main'


def test_pass_to_file(runner, tmp_path):
    out = tmp_path / 'lowered.ehir'
    result = runner.invoke(cli, ['pass', corpus_path('catch_plain.ehir'), '-o', str(out)])
    assert result.exit_code == EXIT_OK
    assert parse_module(out.read_text()).function('main').lsda_ref == '__lsda.main'


def test_print_is_canonical(runner):
    result = runner.invoke(cli, ['print', corpus_path('lsda_mixed.ehir')])
    assert result.exit_code == EXIT_OK
    assert result.output == print_module(load_corpus('lsda_mixed.ehir'))


def test_validate(runner, tmp_path):
    assert runner.invoke(cli, ['validate', corpus_path('rethrow.ehir')]).exit_code == EXIT_OK
    broken = tmp_path / 'broken.ehir'
    broken.write_text("fn @main() {\nentry:\n  %x = add 1, 2\n}\n")
    result = runner.invoke(cli, ['validate', str(broken)])
    assert result.exit_code == EXIT_USAGE
    assert 'terminator' in result.output


def test_parse_error_is_a_usage_error(runner, tmp_path):
    bad = tmp_path / 'bad.ehir'
    bad.write_text("fn @main( {\n")
    assert runner.invoke(cli, ['run', str(bad)]).exit_code == EXIT_USAGE


def test_corpus_command(runner):
    result = runner.invoke(cli, ['corpus', CORPUS_DIR])
    assert result.exit_code == EXIT_OK
    assert 'agree' in result.output


def test_bad_config_file(runner, tmp_path):
    config = tmp_path / 'ehvm.yaml'
    config.write_text("machine: [1, 2\n")
    result = runner.invoke(cli, ['--config', str(config), 'run', corpus_path('catch_plain.ehir')])
    assert result.exit_code == EXIT_USAGE


def test_config_file_limits_steps(runner, tmp_path):
    config = tmp_path / 'ehvm.yaml'
    config.write_text("machine:\n  max_steps: 3\n")
    result = runner.invoke(cli, ['--config', str(config), 'run', corpus_path('catch_loop.ehir')])
    assert result.exit_code == EXIT_FAULT
    assert 'step limit' in result.output


def test_main_maps_click_errors_to_usage():
    assert main(['run', '/nonexistent/program.ehir']) == EXIT_USAGE
    assert main(['no-such-command']) == EXIT_USAGE
    assert main(['validate', corpus_path('catch_plain.ehir')]) == EXIT_OK


def test_non_utf8_module_is_a_usage_error(runner, tmp_path):
    program = tmp_path / 'binary.ehir'
    program.write_bytes(b'\xff\xfe fn @main')
    for command in ('run', 'print', 'validate'):
        result = runner.invoke(cli, [command, str(program)])
        assert result.exit_code == EXIT_USAGE
        assert 'UTF-8' in result.output
    assert main(['run', str(program)]) == EXIT_USAGE


def test_unwritable_outputs_are_usage_errors(runner, tmp_path):
    missing = tmp_path / 'missing' / 'out'
    explored = runner.invoke(cli, ['explore', corpus_path('choose_throw.ehir'), '--trace-out', str(missing)])
    assert explored.exit_code == EXIT_USAGE
    assert 'cannot' in explored.output
    lowered = runner.invoke(cli, ['pass', corpus_path('catch_plain.ehir'), '-o', str(missing)])
    assert lowered.exit_code == EXIT_USAGE


def test_unreadable_trace_is_a_usage_error(runner, tmp_path):
    trace = tmp_path / 'bad.trace'
    trace.write_bytes(b'\xff\xff\xff')
    result = runner.invoke(cli, ['replay', corpus_path('choose_throw.ehir'), str(trace)])
    assert result.exit_code == EXIT_USAGE


@pytest.mark.parametrize('option, value', [('--max-exec', '0'), ('--max-exec', '-1')])
def test_explore_rejects_non_positive_bounds(option, value):
    assert main(['explore', corpus_path('choose_throw.ehir'), option, value]) == EXIT_USAGE


def test_run_rejects_a_zero_step_limit():
    assert main(['run', '--max-steps', '0', corpus_path('catch_plain.ehir')]) == EXIT_USAGE


def test_config_file_enables_leak_check(runner, tmp_path):
    program = tmp_path / 'leak.ehir'
    program.write_text("fn @main() {\nentry:\n  %p = call @malloc(1)\n  ret 0\n}\n")
    config = tmp_path / 'ehvm.yaml'
    config.write_text("machine:\n  check_leaks: true\n")
    result = runner.invoke(cli, ['--config', str(config), 'run', str(program)])
    assert result.exit_code == EXIT_FAULT
    assert 'leak' in result.output
