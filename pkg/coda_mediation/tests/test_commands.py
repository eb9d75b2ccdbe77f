import contextlib
import json
import os
import tempfile
from io import StringIO

import numpy as np
import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from coda_mediation.cli import run_cli


class CommandTestCase(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp, name)

    def write(self, name, text):
        with open(self.path(name), "w") as f:
            f.write(text)
        return self.path(name)

    def call(self, *args, **kwargs):
        out, err = StringIO(), StringIO()
        call_command(*args, stdout=out, stderr=err, **kwargs)
        return out.getvalue(), err.getvalue()

    def call_failing(self, *args, **kwargs):
        err = StringIO()
        with self.assertRaises(CommandError) as ctx:
            call_command(*args, stdout=StringIO(), stderr=err, **kwargs)
        self.assertEqual(ctx.exception.returncode, 1)
        return json.loads(err.getvalue())

    def simulate(self, n=200):
        out, _ = self.call("simulate", config="scenario1", out=self.path("sim.csv"), n=n, mc_reps=2000, seed=5)
        return json.loads(out)


class SbpCommandTests(CommandTestCase):

    def test_validate(self):
        path = self.write(
            "sbp.csv",
            "part,M1,M2,M3,M4\nA,1,0,0,0\nB,-1,1,1,0\nC,-1,1,-1,0\nD,-1,-1,0,1\nE,-1,-1,0,-1\n",
        )
        out, _ = self.call("sbp", "validate", path)
        self.assertIn("valid: 5 parts, 4 balances", out)

    def test_invalid_matrix_reports_rule(self):
        path = self.write("sbp.csv", "part,M1,M2\na,1,1\nb,-1,1\nc,0,-1\n")
        error = self.call_failing("sbp", "validate", path)
        self.assertEqual(error["error"], "SbpValidationError")
        self.assertEqual(error["rule"], "NotATree")
        self.assertEqual(error["column"], 0)

    def test_pivotal(self):
        out, _ = self.call("sbp", "pivotal", parts="x,y,z")
        df = pd.read_csv(StringIO(out), index_col=0)
        self.assertEqual(list(df.index), ["x", "y", "z"])
        np.testing.assert_array_equal(df.to_numpy(), [[1, 0], [-1, 1], [-1, -1]])


class TransformCommandTests(CommandTestCase):

    def test_uniform_counts_map_to_origin(self):
        counts = self.write("counts.csv", "sample_id,c,a,b\ns1,3,3,3\ns2,7,7,7\ns3,0,0,0\n")
        sbp = self.write("sbp.csv", "part,M1,M2\na,1,0\nb,-1,1\nc,-1,-1\n")
        error = self.call_failing("transform", counts=counts, sbp=sbp)
        self.assertIn("AllZero", error["message"])

        counts = self.write("counts.csv", "sample_id,c,a,b\ns1,3,3,3\ns2,7,7,7\n")
        out, _ = self.call("transform", counts=counts, sbp=sbp)
        df = pd.read_csv(StringIO(out), index_col=0)
        self.assertEqual(list(df.columns), ["M1", "M2"])
        np.testing.assert_allclose(df.to_numpy(), 0, atol=1e-12)

    def test_writes_file(self):
        counts = self.write("counts.csv", "sample_id,a,b,c\ns1,8,2,1\n")
        sbp = self.write("sbp.csv", "part,M1,M2\na,1,0\nb,-1,1\nc,-1,-1\n")
        out, _ = self.call("transform", counts=counts, sbp=sbp, out=self.path("ilr.csv"))
        self.assertEqual(out, "")
        df = pd.read_csv(self.path("ilr.csv"), index_col=0)
        self.assertAlmostEqual(df.loc["s1", "M2"], np.sqrt(0.5) * np.log(2.0), places=9)


class SimulateMediateTests(CommandTestCase):

    def test_simulate_writes_cohort(self):
        report = self.simulate()
        self.assertEqual(report["n"], 200)
        self.assertAlmostEqual(report["oie"], 0.10)
        self.assertEqual(len(report["gamma"]), 4)
        for key in ("counts", "meta", "sbp"):
            self.assertTrue(os.path.exists(report[key]))
        meta = pd.read_csv(report["meta"], index_col=0)
        self.assertEqual(list(meta.columns), ["exposure", "C1", "C2", "response"])

    def test_simulate_is_seeded(self):
        self.simulate()
        with open(self.path("sim.csv")) as f:
            first = f.read()
        self.simulate()
        with open(self.path("sim.csv")) as f:
            self.assertEqual(f.read(), first)

    def test_mediate_simulated_cohort(self):
        report = self.simulate()
        out, _ = self.call("mediate", counts=report["counts"], meta=report["meta"], sbp=report["sbp"])
        df = pd.read_csv(StringIO(out))
        self.assertEqual(list(df["effect"]), ["TE", "NDE", "OIE", "CIE1", "CIE2", "CIE3", "CIE4"])
        points = df.set_index("effect")["point"]
        self.assertAlmostEqual(points["OIE"], points[["CIE1", "CIE2", "CIE3", "CIE4"]].sum(), places=8)

    def test_mediate_json_strata(self):
        report = self.simulate()
        out, _ = self.call(
            "mediate", counts=report["counts"], meta=report["meta"], sbp=report["sbp"],
            format="json", strata=True, confounders="C1,C2",
        )
        rows = json.loads(out)
        self.assertEqual([r["stratum"] for r in rows], ["C1=0|C2=0", "C1=0|C2=1", "C1=1|C2=0", "C1=1|C2=1"])
        self.assertAlmostEqual(sum(r["weight"] for r in rows), 1.0)

    def test_mediate_rejects_bad_level(self):
        report = self.simulate()
        error = self.call_failing("mediate", counts=report["counts"], meta=report["meta"], sbp=report["sbp"], ci=1.5)
        self.assertEqual(error["error"], "ValueError")

    def test_mediate_missing_file(self):
        error = self.call_failing(
            "mediate", counts=self.path("none.csv"), meta=self.path("none.csv"), sbp=self.path("none.csv"),
        )
        self.assertEqual(error["error"], "InputFileError")

    def test_describe(self):
        report = self.simulate()
        out, _ = self.call("describe", counts=report["counts"], meta=report["meta"])
        summary = json.loads(out)
        self.assertEqual(summary["n_samples"], 200)
        self.assertEqual(summary["parts"], ["A", "B", "C", "D", "E"])
        self.assertEqual(len(summary["exposure_groups"]), 5)
        self.assertAlmostEqual(summary["mu"] / 10000, 1.0, delta=0.01)


class ExperimentCommandTests(CommandTestCase):

    def test_writes_tables(self):
        plan = self.write("plan.json", json.dumps({
            "scenarios": ["scenario1"], "alpha_s": [50], "replicates": 2, "n": 200, "mc_reps": 1000,
        }))
        out, _ = self.call("experiment", plan=plan, out=self.path("study"), raw=True, threads=1)
        self.assertIn("1 cell(s), 2 replicates each, 0 failed", out)
        for name in ("summary.csv", "truth.csv", "estimates.csv", "ratios.csv", "replicates.csv"):
            self.assertTrue(os.path.exists(os.path.join(self.tmp, "study", name)), name)
        summary = pd.read_csv(os.path.join(self.tmp, "study", "summary.csv"))
        for column in ("Eff", "True", "Est", "Bias", "SE-hat", "SE-est", "Power", "Coverage"):
            self.assertIn(column, summary.columns)

    def test_bad_plan(self):
        plan = self.write("plan.json", json.dumps({"scenarios": ["scenario1"], "replicates": 0}))
        error = self.call_failing("experiment", plan=plan, out=self.path("study"))
        self.assertEqual(error["error"], "StudyPlanError")

    def test_output_is_reproducible_across_workers(self):
        plan = self.write("plan.json", json.dumps({
            "scenarios": ["scenario1"], "alpha_s": [50], "replicates": 4, "n": 200, "mc_reps": 1000, "seed": 3,
        }))
        for run, threads in (("one", 1), ("again", 1), ("two", 2)):
            self.call("experiment", plan=plan, out=self.path(run), raw=True, threads=threads)

        names = sorted(os.listdir(self.path("one")))
        self.assertIn("replicates.csv", names)
        for run in ("again", "two"):
            self.assertEqual(sorted(os.listdir(self.path(run))), names)
            for name in names:
                with open(os.path.join(self.path("one"), name), "rb") as f:
                    expected = f.read()
                with open(os.path.join(self.path(run), name), "rb") as f:
                    self.assertEqual(f.read(), expected, f"{run}/{name}")


class RunCliTests(CommandTestCase):

    def run_quietly(self, argv):
        with contextlib.redirect_stdout(StringIO()) as out, contextlib.redirect_stderr(StringIO()) as err:
            code = run_cli(argv)
        return code, out.getvalue(), err.getvalue()

    def test_exit_codes(self):
        good = self.write("sbp.csv", "part,M1\na,1\nb,-1\n")
        bad = self.write("bad.csv", "part,M1\na,1\nb,1\n")

        code, out, _ = self.run_quietly(["sbp", "validate", good])
        self.assertEqual(code, 0)
        self.assertIn("valid: 2 parts, 1 balances", out)

        code, _, err = self.run_quietly(["sbp", "validate", bad])
        self.assertEqual(code, 1)
        self.assertEqual(json.loads(err)["rule"], "EmptySide")

        code, _, _ = self.run_quietly(["transform", "--counts", good])
        self.assertEqual(code, 2)

    def test_unknown_command(self):
        code, out, err = self.run_quietly(["frobnicate"])
        self.assertEqual(code, 2)
        self.assertEqual(out, "")
        error = json.loads(err)
        self.assertEqual(error["error"], "UnknownCommand")
        self.assertIn("frobnicate", error["message"])
