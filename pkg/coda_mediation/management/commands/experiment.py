from django.conf import settings

from coda_mediation.experiment import StudyPlan, run_study
from coda_mediation.services import write_study_outputs

from ._base import AnalysisCommand


class Command(AnalysisCommand):
    help = "Run a replication study and write its tables"

    def add_arguments(self, parser):
        parser.add_argument("--plan", required=True, help="Study plan JSON")
        parser.add_argument("--out", required=True, help="Output directory")
        parser.add_argument("--replicates", type=int, default=None, help="Overrides the plan's replicates")
        parser.add_argument("--seed", type=int, default=None, help="Overrides the plan's master seed")
        parser.add_argument("--mc-reps", type=int, default=None, help="Overrides the plan's calibration draws")
        parser.add_argument(
            "--threads", type=int, default=settings.CODA_MEDIATION['THREADS'],
            help="Parallel workers for the replicates (env CODA_MEDIATION_THREADS)",
        )
        parser.add_argument("--raw", action="store_true", help="Also write every replicate estimate")

    def run(self, *args, **options):
        plan = StudyPlan.from_json(options["plan"])
        for key in ("replicates", "seed", "mc_reps"):
            if options[key] is not None:
                setattr(plan, key, options[key])
        plan.validate()

        summaries = run_study(plan, threads=options["threads"])
        written = write_study_outputs(summaries, options["out"], raw=options["raw"])

        failures = sum(s.failures for s in summaries)
        self.stdout.write(self.style.SUCCESS(
            f"{len(summaries)} cell(s), {plan.replicates} replicates each, {failures} failed"
        ))
        for path in written:
            self.stdout.write(path)
