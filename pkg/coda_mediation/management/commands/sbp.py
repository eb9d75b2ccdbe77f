from coda_mediation.coda import pivotal_sbp
from coda_mediation.services import read_sbp_csv, sbp_frame

from ._base import AnalysisCommand, comma_list


class Command(AnalysisCommand):
    help = "Validate an SBP matrix file, or write a pivotal SBP"

    def add_arguments(self, parser):
        actions = parser.add_subparsers(dest="action", required=True)

        validate = actions.add_parser("validate", help="Check an SBP matrix CSV")
        validate.add_argument("matrix", help="CSV: header = balance names, first column = part labels")

        pivotal = actions.add_parser("pivotal", help="Write the pivotal SBP of the given parts")
        pivotal.add_argument("--parts", required=True, help="Comma-separated part labels, pivot order")
        pivotal.add_argument("--out", default=None, help="Output CSV (default stdout)")

    def run(self, *args, **options):
        if options["action"] == "validate":
            sbp = read_sbp_csv(options["matrix"])
            self.stdout.write(self.style.SUCCESS(f"valid: {sbp.num_parts} parts, {sbp.num_balances} balances"))
            return

        parts = comma_list(options["parts"])
        sbp = pivotal_sbp(len(parts), labels=parts)
        self.emit(sbp_frame(sbp).to_csv(), options["out"])
