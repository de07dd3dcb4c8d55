"""End-to-end checks of the revpf command line: exit codes, determinism and
JSON schema conformance of every emitted document.

Usage: cli_test.py <revpf binary> <repo root>
"""

import csv
import json
import os
import subprocess
import sys
import tempfile
import unittest
from pathlib import Path

import jsonschema
from referencing import Registry, Resource

BIN = None
ROOT = None


def run(*args, check_rc=None):
    env = dict(os.environ, REVPF_THREADS="1")
    proc = subprocess.run([BIN, *map(str, args)], capture_output=True, text=True, env=env)
    if check_rc is not None and proc.returncode != check_rc:
        raise AssertionError(f"{args}: rc {proc.returncode} != {check_rc}\n{proc.stdout}\n{proc.stderr}")
    return proc


def schema_validator(name):
    registry = Registry()
    for path in (ROOT / "schemas").glob("*.schema.json"):
        registry = registry.with_resource(path.name, Resource.from_contents(json.loads(path.read_text())))
    schema = json.loads((ROOT / "schemas" / name).read_text())
    return jsonschema.Draft202012Validator(schema, registry=registry)


class Cli(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.cd_cfg = ROOT / "configs" / "default_cd.ini"
        cls.ces_cfg = ROOT / "configs" / "default_ces.ini"
        cls.cd = cls.dir / "cd.csv"
        cls.ces = cls.dir / "ces.csv"
        run("simulate", "--config", cls.cd_cfg, "--out", cls.cd, check_rc=0)
        run("simulate", "--config", cls.ces_cfg, "--out", cls.ces, check_rc=0)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_simulate_is_byte_identical(self):
        again = self.dir / "ces_again.csv"
        run("simulate", "--config", self.ces_cfg, "--out", again, check_rc=0)
        self.assertEqual(self.ces.read_bytes(), again.read_bytes())
        prov_a = Path(str(self.ces) + ".provenance.json").read_bytes()
        prov_b = Path(str(again) + ".provenance.json").read_bytes()
        self.assertEqual(prov_a, prov_b)

    def test_seed_flag_changes_panel(self):
        other = self.dir / "ces_seed.csv"
        run("simulate", "--config", self.ces_cfg, "--seed", 43, "--out", other, check_rc=0)
        self.assertNotEqual(self.ces.read_bytes(), other.read_bytes())
        prov = json.loads(Path(str(other) + ".provenance.json").read_text())
        self.assertEqual(prov["seed"], "43")

    def test_provenance_sidecar_schema(self):
        doc = json.loads(Path(str(self.ces) + ".provenance.json").read_text())
        schema_validator("provenance.schema.json").validate(doc)
        self.assertNotIn("time", " ".join(doc.keys()))

    def test_panel_header_and_rows(self):
        with open(self.cd, newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["firm_id", "t", "K", "L", "M", "pL", "pM", "pK", "omega", "eps", "Q", "P", "R",
                                   "sL_star", "sM_star"])
        self.assertEqual(len(rows), 1 + 500 * 10)

    def test_empty_panel(self):
        cfg = self.dir / "n0.ini"
        cfg.write_text("[simulate]\nseed = 1\nN = 0\n")
        out = self.dir / "n0.csv"
        run("simulate", "--config", cfg, "--out", out, check_rc=0)
        self.assertEqual(out.read_text().count("\n"), 1)
        run("verify", out, "--out", self.dir / "n0_verify.json", check_rc=0)

    def test_simulate_requires_seed(self):
        cfg = self.dir / "noseed.ini"
        cfg.write_text("[simulate]\nN = 5\n")
        proc = run("simulate", "--config", cfg, "--out", self.dir / "x.csv", check_rc=2)
        self.assertIn("seed", proc.stderr)

    def test_unknown_config_key(self):
        cfg = self.dir / "typo.ini"
        cfg.write_text("[simulate]\nseed = 1\nsigma_kk = 3\n")
        proc = run("simulate", "--config", cfg, check_rc=2)
        self.assertIn("sigma_kk", proc.stderr)

    def test_verify_self_generated(self):
        out = self.dir / "verify.json"
        run("verify", self.ces, "--config", self.ces_cfg, "--out", out, check_rc=0)
        doc = json.loads(out.read_text())
        schema_validator("verify_report.schema.json").validate(doc)
        self.assertTrue(doc["passed"])
        self.assertEqual(doc["violations"], 0)

    def test_verify_corrupted_revenue(self):
        lines = self.ces.read_text().splitlines()
        fields = lines[7].split(",")
        fields[12] = repr(float(fields[12]) * 1.5)
        lines[7] = ",".join(fields)
        bad = self.dir / "corrupt.csv"
        bad.write_text("\n".join(lines) + "\n")
        out = self.dir / "verify_bad.json"
        proc = run("verify", bad, "--config", self.ces_cfg, "--out", out, check_rc=2)
        self.assertIn("FAIL", proc.stdout)
        doc = json.loads(out.read_text())
        schema_validator("verify_report.schema.json").validate(doc)
        self.assertEqual(doc["flagged_rows"], [6])

    def test_malformed_row_names_line(self):
        lines = self.cd.read_text().splitlines()
        lines[4] = lines[4].replace(",", ",x", 1)
        bad = self.dir / "malformed.csv"
        bad.write_text("\n".join(lines) + "\n")
        proc = run("verify", bad, check_rc=2)
        self.assertIn(":5:", proc.stderr)

    def test_missing_file_is_io_error(self):
        run("verify", self.dir / "does_not_exist.csv", check_rc=4)

    def test_quantity_mode_needs_quantities(self):
        with open(self.cd, newline="") as f:
            rows = list(csv.reader(f))
        keep = [i for i, c in enumerate(rows[0]) if c not in ("omega", "eps", "Q", "P")]
        rev = self.dir / "revenue_only.csv"
        with open(rev, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows([[r[i] for i in keep] for r in rows])
        proc = run("estimate", rev, "--config", self.cd_cfg, "--mode", "quantity", "--out", self.dir / "q.json",
                   check_rc=2)
        self.assertIn("quantities unobserved", proc.stderr)

    def test_estimate_quantity_cd(self):
        out = self.dir / "est_q.json"
        run("estimate", self.cd, "--config", self.cd_cfg, "--mode", "quantity", "--out", out, check_rc=0)
        doc = json.loads(out.read_text())
        schema_validator("estimate_result.schema.json").validate(doc)
        for got, truth in zip(doc["estimate"], [0.25, 0.3, 0.4]):
            self.assertAlmostEqual(got, truth, delta=0.05)
        self.assertEqual(doc["non_identified_axes"], [])

    def test_estimate_revenue_lists_non_identified_axes(self):
        out = self.dir / "est_r.json"
        run("estimate", self.cd, "--config", self.cd_cfg, "--mode", "revenue", "--out", out, check_rc=0)
        doc = json.loads(out.read_text())
        schema_validator("estimate_result.schema.json").validate(doc)
        self.assertIn("beta_K", doc["non_identified_axes"])

    def test_diagnose_ces_scan(self):
        out = self.dir / "report.json"
        run("diagnose", self.ces, "--config", self.ces_cfg, "--scan", "v", "--grid", "0.7:1.3:25", "--out", out,
            check_rc=0)
        doc = json.loads(out.read_text())
        schema_validator("identification_report.schema.json").validate(doc)
        v = doc["verdicts"]
        self.assertEqual(v["sigma"], "identified")
        self.assertEqual(v["beta_L/beta_M"], "identified-ratio-only")
        self.assertEqual(v["v"], "not identified")
        self.assertEqual(v["omega"], "not identified")
        with open(self.dir / "report_profile_v.csv", newline="") as f:
            rows = list(csv.reader(f))
        self.assertEqual(rows[0], ["param", "grid", "objective"])
        self.assertEqual(len(rows) - 1, 25)

        again = self.dir / "report_again.json"
        run("diagnose", self.ces, "--config", self.ces_cfg, "--scan", "v", "--grid", "0.7:1.3:25", "--out", again,
            check_rc=0)
        self.assertEqual(out.read_bytes(), again.read_bytes())

    def test_diagnose_cd(self):
        out = self.dir / "report_cd.json"
        run("diagnose", self.cd, "--config", self.cd_cfg, "--out", out, check_rc=0)
        doc = json.loads(out.read_text())
        schema_validator("identification_report.schema.json").validate(doc)
        self.assertEqual(doc["verdicts"]["beta_K"], "not identified")
        self.assertEqual(doc["verdicts"]["beta_L/(beta_L+beta_M)"], "identified-ratio-only")

    def test_bad_flags(self):
        run("estimate", self.cd, "--mode", "prices", check_rc=2)
        run("diagnose", self.ces, "--config", self.ces_cfg, "--grid", "1:0:5", check_rc=2)
        run("diagnose", self.ces, "--config", self.ces_cfg, "--scan", "beta_K", check_rc=2)
        run(check_rc=2)


if __name__ == "__main__":
    BIN = sys.argv[1]
    ROOT = Path(sys.argv[2])
    unittest.main(argv=[sys.argv[0], "-v"])
