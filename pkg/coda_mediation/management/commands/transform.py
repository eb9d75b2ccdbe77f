import pandas as pd
from django.conf import settings

from coda_mediation.coda import basis_from_sbp, close_counts, ilr_forward
from coda_mediation.services import FLOAT_FORMAT, align_counts, read_counts_csv, read_sbp_csv

from ._base import AnalysisCommand


class Command(AnalysisCommand):
    help = "Close a counts table and write its ilr coordinates"

    def add_arguments(self, parser):
        parser.add_argument("--counts", required=True, help="Counts CSV, one row per sample")
        parser.add_argument("--sbp", required=True, help="SBP matrix CSV")
        parser.add_argument(
            "--zero-replacement", type=float, default=settings.CODA_MEDIATION['ZERO_REPLACEMENT'],
            help="Value substituted for zero counts before closure",
        )
        parser.add_argument("--out", default=None, help="Output CSV (default stdout)")

    def run(self, *args, **options):
        sbp = read_sbp_csv(options["sbp"])
        counts = align_counts(read_counts_csv(options["counts"]), sbp.part_labels)

        composition = close_counts(counts.to_numpy(), options["zero_replacement"])
        coords = ilr_forward(composition, basis_from_sbp(sbp)).coords

        df = pd.DataFrame(coords, index=counts.index, columns=list(sbp.balance_labels))
        df.index.name = counts.index.name or "sample_id"
        self.emit(df.to_csv(float_format=FLOAT_FORMAT), options["out"])
