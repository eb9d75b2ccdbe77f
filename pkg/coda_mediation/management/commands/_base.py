import json
import math
import sys

from django.core.management.base import BaseCommand, CommandError


def error_payload(error):
    return {
        "error": type(error).__name__,
        "rule": getattr(error, "rule", None),
        "column": getattr(error, "column", None),
        "message": str(error),
    }


def json_ready(value):
    """Replace non-finite floats, which JSON cannot hold, by strings."""
    if isinstance(value, dict):
        return {str(k): json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_ready(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def comma_list(value):
    return [v.strip() for v in value.split(",") if v.strip()]


class AnalysisCommand(BaseCommand):
    """
    Runs ``run()`` and reports analysis errors as one JSON object on stderr
    before failing with exit code 1. Data goes to stdout or --out only.

    From the command line the JSON object is the whole of stderr; through
    ``call_command`` the failure surfaces as ``CommandError``.
    """

    def run(self, *args, **options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            return self.run(*args, **options)
        except (ValueError, OSError) as e:
            self.stderr.write(json.dumps(error_payload(e)))
            if self._called_from_command_line:
                sys.exit(1)
            raise CommandError(str(e), returncode=1)

    def emit(self, text, out=None):
        """Write ``text`` to the file ``out``, or to stdout."""
        if out:
            with open(out, "w", encoding="utf-8", newline="") as f:
                f.write(text)
        else:
            self.stdout.write(text, ending="" if text.endswith("\n") else "\n")
