"""``python -m branching <command> [flags]``.

Subcommands map onto the app's management commands. Exit status is 0 on
success, 1 for usage errors and 2 for runtime errors.
"""
import os
import sys

COMMANDS = {
    'gen-data': 'gen_data',
    'train-wide': 'train_wide',
    'somp-init': 'somp_init',
    'train-adaptive': 'train_adaptive',
    'evaluate': 'evaluate',
    'inspect': 'inspect',
    'export-dot': 'export_dot',
    'compare-init': 'compare_init',
}

USAGE = 'usage: python -m branching {' + ','.join(COMMANDS) + '} [flags]\n'


def run(argv=None):
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'branchnet.settings')
    import django
    from django.core.management import call_command
    from django.core.management.base import CommandError

    django.setup()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        sys.stderr.write(USAGE)
        return 1
    if argv[0] in ('-h', '--help'):
        sys.stdout.write(USAGE)
        return 0
    if argv[0] not in COMMANDS:
        sys.stderr.write(f'unknown command {argv[0]!r}\n{USAGE}')
        return 1

    try:
        call_command(COMMANDS[argv[0]], *argv[1:])
    except CommandError as exc:
        sys.stderr.write(f'{argv[0]}: {exc}\n')
        return exc.returncode
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    return 0
