"""
Command-line walkthrough
========================

The same pipeline through the ``plforge`` command, in a scratch directory:
generate data, train the source model, adapt, select and summarise.
"""

import tempfile
from pathlib import Path

from plforge.cli import main

work = Path(tempfile.mkdtemp(prefix="plforge-demo-"))
print("working in", work)


def run(*argv):
    print("\n$ plforge", " ".join(str(a) for a in argv))
    code = main([str(a) for a in argv])
    assert code == 0, code


run("synth", "--out-dir", work)
run("source-train", work / "source.fbun", "--out", work / "source.adpt")

for seed in (7, 8):
    out = work / f"seed{seed}"
    out.mkdir()
    run("adapt", work / "target.fbun", work / "source.adpt", "--out-dir", out, "--seed", seed)

run("select", work / "target.fbun", work / "seed7" / "adapted.adpt", "--out", work / "selected.csv")
print("\n".join((work / "selected.csv").read_text().splitlines()[:5]))

run("report", work / "seed7" / "epochs.csv", work / "seed8" / "epochs.csv",
    "--out", work / "summary.csv", "--curve", work / "curve.csv")
print((work / "summary.csv").read_text())
