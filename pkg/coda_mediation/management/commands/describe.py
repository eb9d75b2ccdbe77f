import json

from coda_mediation.analytics import exposure_group_summary
from coda_mediation.services import (
    FLOAT_FORMAT,
    apply_prevalence_filter,
    build_cohort,
    read_counts_csv,
    read_metadata_csv,
)
from coda_mediation.simgen import estimate_count_dispersion

from ._base import AnalysisCommand, json_ready


class Command(AnalysisCommand):
    help = "Estimate count dispersion and sparsity; summarise parts by exposure group"

    def add_arguments(self, parser):
        parser.add_argument("--counts", required=True, help="Counts CSV, one row per sample")
        parser.add_argument("--meta", default=None, help="Metadata CSV; enables the exposure group summary")
        parser.add_argument("--exposure", default="exposure")
        parser.add_argument("--response", default="response")
        parser.add_argument("--min-prevalence", type=float, default=0.0)
        parser.add_argument("--out", default=None, help="Write the exposure group summary CSV here")

    def run(self, *args, **options):
        counts = apply_prevalence_filter(read_counts_csv(options["counts"]), options["min_prevalence"])
        dispersion = estimate_count_dispersion(counts.to_numpy(), part_labels=list(counts.columns))

        report = {
            "n_samples": dispersion.n_samples,
            "parts": list(counts.columns),
            "mu": dispersion.mu,
            "theta": dispersion.theta,
            "alpha_s_median": dispersion.alpha_s_median,
            "alpha_s_by_part": dispersion.alpha_s_by_part,
        }

        if options["meta"]:
            cohort = build_cohort(
                counts, read_metadata_csv(options["meta"]),
                exposure=options["exposure"], response=options["response"],
            )
            groups = exposure_group_summary(cohort)
            report["exposed"] = int(cohort.exposure.sum())
            if options["out"]:
                groups.to_csv(options["out"], float_format=FLOAT_FORMAT)
            else:
                report["exposure_groups"] = groups.reset_index().to_dict(orient="records")

        self.stdout.write(json.dumps(json_ready(report), indent=2))
