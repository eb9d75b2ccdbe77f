import json

from coda_mediation.analytics import effects_frame, stratum_frame
from coda_mediation.mediation import MediationOptions, mediate
from coda_mediation.services import (
    FLOAT_FORMAT,
    align_counts,
    apply_prevalence_filter,
    build_cohort,
    read_counts_csv,
    read_metadata_csv,
    read_sbp_csv,
)

from ._base import AnalysisCommand, comma_list, json_ready


class Command(AnalysisCommand):
    help = "Estimate TE, NDE, OIE and coordinate-wise indirect effects"

    def add_arguments(self, parser):
        parser.add_argument("--counts", required=True, help="Counts CSV, one row per sample")
        parser.add_argument("--meta", required=True, help="Metadata CSV: sample id, exposure, confounders, response")
        parser.add_argument("--sbp", required=True, help="SBP matrix CSV")
        parser.add_argument("--exposure", default="exposure", help="Exposure column (0/1)")
        parser.add_argument("--response", default="response", help="Response column")
        parser.add_argument(
            "--confounders", default=None,
            help="Comma-separated categorical confounder columns (default: all other metadata columns)",
        )
        parser.add_argument("--ci", type=float, default=None, help="Confidence level (default from settings)")
        parser.add_argument(
            "--shared-gamma", action="store_true", default=None,
            help="Pool response coefficients before forming products",
        )
        parser.add_argument("--zero-replacement", type=float, default=None)
        parser.add_argument(
            "--min-prevalence", type=float, default=0.0,
            help="Drop parts present in fewer than this fraction of samples (the SBP must match the kept parts)",
        )
        parser.add_argument("--format", choices=["csv", "json"], default="csv")
        parser.add_argument("--strata", action="store_true", help="Report stratum-specific effects instead")
        parser.add_argument("--out", default=None, help="Output file (default stdout)")

    def run(self, *args, **options):
        mediation_options = MediationOptions.from_settings(
            zero_replacement=options["zero_replacement"],
            ci_level=options["ci"],
            shared_gamma=options["shared_gamma"],
        )
        if not 0 < mediation_options.ci_level < 1:
            raise ValueError(f"--ci must lie in (0, 1), got {mediation_options.ci_level}")
        sbp = read_sbp_csv(options["sbp"])
        counts = apply_prevalence_filter(read_counts_csv(options["counts"]), options["min_prevalence"])
        counts = align_counts(counts, sbp.part_labels)
        confounders = comma_list(options["confounders"]) if options["confounders"] is not None else None
        cohort = build_cohort(
            counts, read_metadata_csv(options["meta"]),
            exposure=options["exposure"], response=options["response"], confounders=confounders,
        )

        estimate = mediate(cohort, sbp, mediation_options)

        table = stratum_frame(estimate) if options["strata"] else effects_frame(estimate)
        if options["format"] == "json":
            text = json.dumps(json_ready(table.to_dict(orient="records")), indent=2)
        else:
            text = table.to_csv(index=False, float_format=FLOAT_FORMAT)
        self.emit(text, options["out"])
