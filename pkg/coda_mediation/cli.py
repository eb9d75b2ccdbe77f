"""Command-line entry point behind ``python manage.py <command> ...``."""
import json
import os
import sys


def run_cli(argv=None, prog="coda-mediation"):
    """
    Run one management command and return its exit code.

    0 on success, 1 for analysis errors, 2 for unusable arguments or an
    unknown command. Errors raised by the analysis commands, and unknown
    command names, leave a single JSON object on stderr.
    """
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'coda_mediation.settings')
    try:
        import django
        from django.core.management import ManagementUtility, get_commands
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc

    argv = list(sys.argv[1:] if argv is None else argv)
    django.setup()
    if argv and not argv[0].startswith("-") and argv[0] != "help" and argv[0] not in get_commands():
        error = {"error": "UnknownCommand", "rule": None, "column": None, "message": f"unknown command {argv[0]!r}"}
        sys.stderr.write(json.dumps(error) + "\n")
        return 2

    try:
        ManagementUtility([prog, *argv]).execute()
    except SystemExit as e:
        if e.code is None:
            return 0
        return e.code if isinstance(e.code, int) else 1
    return 0
